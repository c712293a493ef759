"""Three-entity protocol engine: clients, learning server, parameter server.

Every value that crosses an entity boundary goes through :meth:`Engine.send`,
which appends it to the message log before delivery.  That log is what the
privacy audit inspects.
"""

from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import messages as msg
from .embedding import (
    TransformParam,
    gen_orthonormal,
    gen_regular,
    identity_transform,
    inverse_project,
    project,
)
from .losses import (
    CosineMarginParams,
    PositiveLossParams,
    SpreadoutParams,
    cosine_margin_batch,
    spreadout_loss,
    spreadout_step,
)
from .model import FeatureExtractor, ModelParams, average_params, positive_batch, sgd_step


class ProtocolKind(enum.Enum):
    FEDFACE = "fedface"
    IPFED = "ipfed"
    FCE = "fce"
    FINETUNE = "finetune"


class ProtocolError(RuntimeError):
    """A round could not complete because an entity broke the protocol."""


@dataclass
class ClientState:
    client_id: int
    X: np.ndarray
    class_embedding: np.ndarray = None
    current_params: ModelParams = None
    transform: TransformParam = None

    @property
    def n(self) -> int:
        return len(self.X)


def init_class_embedding(client: ClientState, fx: FeatureExtractor) -> np.ndarray:
    """Mean embedding of the client's samples (not renormalized)."""
    if client.n == 0:
        raise ValueError(f"client {client.client_id} has an empty dataset")
    return fx.forward_batch(client.X).mean(axis=0)


def client_local_update(
    client: ClientState,
    theta: ModelParams,
    p: PositiveLossParams,
    eta: float,
    local_steps: int = 1,
    update_embedding: bool = True,
):
    """Full-batch gradient steps on the mean positive loss.

    Returns ``(theta_i, w_tilde, first_loss)``; the client state is untouched.
    """
    if client.n == 0:
        raise ValueError(f"client {client.client_id} has an empty dataset")
    w = client.class_embedding.copy()
    first_loss = None
    for _ in range(local_steps):
        loss, g_theta, g_w = positive_batch(FeatureExtractor(theta), client.X, w, p)
        if first_loss is None:
            first_loss = loss
        theta = sgd_step(theta, g_theta, eta)
        if update_embedding:
            w = w - eta * g_w
    return theta, w, first_loss


class ParameterServer:
    """Issues one fresh transform per round; sees nothing else."""

    def __init__(self, master_seed: int, d: int, mode: str = "orthonormal"):
        self.master_seed = master_seed
        self.d = d
        self.mode = mode
        self.current_round = 0

    def next_transform(self, t: int) -> TransformParam:
        if t <= self.current_round:
            raise ProtocolError(f"round {t} already issued a transform")
        self.current_round = t
        if self.mode == "identity":
            return identity_transform(self.d, round_index=t)
        if self.mode == "regular":
            return gen_regular(self.master_seed, t, self.d)
        return gen_orthonormal(self.master_seed, t, self.d)


@dataclass
class LearningServerState:
    global_params: ModelParams
    round: int = 0
    received_updates: list = field(default_factory=list)
    received_embeddings: dict = field(default_factory=dict)


@dataclass
class RoundReport:
    round: int
    mean_positive_loss: float
    spreadout_loss: float | None
    degenerate_pairs: int
    participants: list
    messages: list = field(repr=False, default_factory=list)
    # client-private ground truth, kept only so the audit can be run
    true_embeddings: dict = field(repr=False, default_factory=dict)
    wall_clock_ms: float | None = None


class Engine:
    """Runs federated rounds for FedFace, IPFed or FCE."""

    def __init__(
        self,
        protocol,
        params: ModelParams,
        client_data,
        client_ids=None,
        positive: PositiveLossParams = PositiveLossParams(),
        spreadout: SpreadoutParams = SpreadoutParams(),
        eta: float = 0.1,
        local_steps: int = 1,
        seed: int = 0,
        transform_mode: str = "orthonormal",
        client_fraction: float = 1.0,
        record_timing: bool = False,
    ):
        self.protocol = ProtocolKind(protocol)
        if self.protocol is ProtocolKind.FINETUNE:
            raise ValueError("centralized fine-tuning bypasses the message layer; use central_finetune")
        if client_ids is None:
            client_ids = list(range(len(client_data)))
        self.clients = [ClientState(int(i), np.asarray(X, dtype=np.float64)) for i, X in zip(client_ids, client_data)]
        if not self.clients:
            raise ValueError("engine needs at least one client")
        self.server = LearningServerState(global_params=params)
        self.param_server = ParameterServer(seed, params.output_dim, transform_mode)
        self.positive = positive
        self.spreadout = spreadout
        self.eta = eta
        self.local_steps = local_steps
        self.client_fraction = client_fraction
        self._sampler = np.random.default_rng([seed, 99])
        self.record_timing = record_timing
        self.log = msg.MessageLog()
        # optional predicate: return False to drop a message after it is logged
        self.transport_filter = None
        self.round = 0

        # step (i): embeddings from the pre-trained extractor, once
        fx = FeatureExtractor(params)
        for c in self.clients:
            c.class_embedding = init_class_embedding(c, fx)
        self.initial_embeddings = self.embeddings()

    def embeddings(self) -> np.ndarray:
        return np.stack([c.class_embedding for c in self.clients])

    @property
    def global_params(self) -> ModelParams:
        return self.server.global_params

    def state_bytes(self) -> bytes:
        """Exact serialized state: global parameters then every class embedding."""
        return self.global_params.values.tobytes() + self.embeddings().tobytes()

    def send(self, sender, recipient, kind, payload):
        """Log a message and deliver it; returns ``None`` if the transport dropped it."""
        m = self.log.append(msg.Message(self.round, sender, recipient, kind, payload))
        if self.transport_filter is not None and not self.transport_filter(m):
            return None
        return m

    def _participants(self):
        if self.client_fraction >= 1.0:
            return list(self.clients)
        k = max(1, math.ceil(self.client_fraction * len(self.clients)))
        idx = np.sort(self._sampler.choice(len(self.clients), size=k, replace=False))
        return [self.clients[i] for i in idx]

    def run_round(self) -> RoundReport:
        start = time.perf_counter()
        self.round += 1
        t = self.round
        first_msg = len(self.log)
        ls = msg.LEARNING_SERVER
        ipfed = self.protocol is ProtocolKind.IPFED
        share = self.protocol is not ProtocolKind.FCE
        participants = self._participants()

        # (ii) broadcast global parameters
        theta_t = self.server.global_params
        for c in participants:
            m = self.send(ls, msg.client_name(c.client_id), msg.GLOBAL_PARAMS, {"theta": theta_t.values})
            if m is None:
                raise ProtocolError(f"round {t}: client {c.client_id} never received the global parameters")
            c.current_params = theta_t.with_values(m.payload["theta"])

        # (iii) fresh secret transform, before local training
        if ipfed:
            r_t = self.param_server.next_transform(t)
            for c in participants:
                m = self.send(msg.PARAMETER_SERVER, msg.client_name(c.client_id), msg.TRANSFORM, {"matrix": r_t.matrix})
                if m is None:
                    raise ProtocolError(f"round {t}: client {c.client_id} never received r_t")
                c.transform = r_t

        # (iv)-(vi) local update, optional projection, upload
        losses, true_w = [], {}
        self.server.received_updates = []
        self.server.received_embeddings = {}
        for c in participants:
            theta_i, w_tilde, loss = client_local_update(
                c, c.current_params, self.positive, self.eta, self.local_steps, update_embedding=share
            )
            losses.append(loss)
            true_w[c.client_id] = w_tilde
            payload = {"theta": theta_i.values, "n": np.int64(c.n)}
            if share:
                payload["embedding"] = project(w_tilde, c.transform) if ipfed else w_tilde
            else:
                c.class_embedding = w_tilde
            m = self.send(msg.client_name(c.client_id), ls, msg.CLIENT_UPDATE, payload)
            if m is None:
                continue
            self.server.received_updates.append((c.client_id, theta_t.with_values(m.payload["theta"]), int(m.payload["n"])))
            if share:
                self.server.received_embeddings[c.client_id] = m.payload["embedding"]

        received = [cid for cid, _, _ in self.server.received_updates]
        if received != [c.client_id for c in participants]:
            raise ProtocolError(f"round {t}: expected updates from {[c.client_id for c in participants]}, got {received}")

        # (vii) sample-weighted aggregation
        new_params = average_params([(p, n) for _, p, n in self.server.received_updates])
        self.server.global_params = ModelParams(new_params.shapes, new_params.values, version=t)

        # (viii)-(x) spreadout on whatever the server received, then decode
        spread_value, degenerate = None, 0
        if share:
            ids = list(self.server.received_embeddings)
            W = np.stack([self.server.received_embeddings[i] for i in ids])
            if len(ids) >= 2:
                spread_value = spreadout_loss(W, self.spreadout)
                W_hat, degenerate = spreadout_step(W, self.spreadout)
            else:
                W_hat = W
            for c, row in zip(participants, W_hat):
                m = self.send(ls, msg.client_name(c.client_id), msg.SPREADOUT_RESULT, {"embedding": row})
                if m is None:
                    raise ProtocolError(f"round {t}: client {c.client_id} never received its spreadout result")
                w_hat = m.payload["embedding"]
                c.class_embedding = inverse_project(w_hat, c.transform) if ipfed else w_hat

        for c in participants:
            c.transform = None
        self.server.round = t
        elapsed = (time.perf_counter() - start) * 1000.0
        return RoundReport(
            round=t,
            mean_positive_loss=float(np.mean(losses)),
            spreadout_loss=spread_value,
            degenerate_pairs=degenerate,
            participants=[c.client_id for c in participants],
            messages=self.log.messages[first_msg:],
            true_embeddings=true_w,
            wall_clock_ms=elapsed if self.record_timing else None,
        )


def central_finetune(
    params: ModelParams,
    X,
    labels,
    rows,
    epochs: int,
    lr: float,
    p: CosineMarginParams = CosineMarginParams(),
    callback=None,
):
    """Full-batch cosine-margin training of the extractor and classifier rows.

    ``labels`` index into ``rows``.  ``callback(epoch, params, rows, loss)`` is
    invoked after each epoch.  Returns ``(params, rows)``.
    """
    rows = np.array(rows, dtype=np.float64)
    for epoch in range(1, epochs + 1):
        fx = FeatureExtractor(params)
        F, cache = fx.forward_batch(X, return_cache=True)
        loss, grad_F, grad_rows = cosine_margin_batch(F, rows, labels, p)
        params = sgd_step(params, fx.backward_batch(cache, grad_F), lr)
        rows = rows - lr * grad_rows
        if callback is not None:
            callback(epoch, params, rows, loss)
    return params, rows


@dataclass
class AuditReport:
    protocol: str
    rounds_checked: int
    violations: list
    flagged_rounds: list
    discipline_errors: list

    @property
    def ok(self) -> bool:
        return not self.violations and not self.discipline_errors


def privacy_audit(messages, true_embeddings, protocol=None, cos_tol: float = 1e-6) -> AuditReport:
    """Check learning-server traffic for exposed class embeddings.

    ``true_embeddings`` maps round -> {client_id: w_tilde}.  A learning-server
    bound vector whose cosine similarity with any true embedding of that round
    is at least ``1 - cos_tol`` is a violation.  Parameter-server traffic must
    consist solely of outbound transform matrices.
    """
    violations, discipline = [], []
    flagged = set()
    for m in messages:
        if m.recipient == msg.PARAMETER_SERVER:
            discipline.append((m.round, m.sender, "message sent to the parameter server"))
        if m.sender == msg.PARAMETER_SERVER and (m.kind != msg.TRANSFORM or set(m.payload) != {"matrix"}):
            discipline.append((m.round, m.recipient, f"parameter server sent {m.kind} with fields {sorted(m.payload)}"))
        if m.recipient != msg.LEARNING_SERVER:
            continue
        if m.kind != msg.CLIENT_UPDATE or not set(m.payload) <= {"theta", "n", "embedding"}:
            discipline.append((m.round, m.sender, f"unexpected {m.kind} with fields {sorted(m.payload)}"))
        vec = m.payload.get("embedding")
        if vec is None:
            continue
        vnorm = np.linalg.norm(vec)
        for cid, w in true_embeddings.get(m.round, {}).items():
            wnorm = np.linalg.norm(w)
            if vnorm == 0.0 or wnorm == 0.0 or len(w) != len(vec):
                continue
            cos = float(vec @ w) / (vnorm * wnorm)
            if cos >= 1.0 - cos_tol:
                violations.append((m.round, m.sender, cid, cos))
                flagged.add(m.round)
    rounds = {m.round for m in messages}
    return AuditReport(
        protocol=None if protocol is None else ProtocolKind(protocol).value,
        rounds_checked=len(rounds),
        violations=violations,
        flagged_rounds=sorted(flagged),
        discipline_errors=discipline,
    )


def check_log_discipline(records, protocol) -> list:
    """Kind/route checks on a JSON-lines message log (digests only)."""
    protocol = ProtocolKind(protocol)
    allowed = {
        (msg.GLOBAL_PARAMS, msg.LEARNING_SERVER, "client"),
        (msg.CLIENT_UPDATE, "client", msg.LEARNING_SERVER),
        (msg.SPREADOUT_RESULT, msg.LEARNING_SERVER, "client"),
    }
    if protocol is ProtocolKind.IPFED:
        allowed.add((msg.TRANSFORM, msg.PARAMETER_SERVER, "client"))
    if protocol is ProtocolKind.FCE:
        allowed.discard((msg.SPREADOUT_RESULT, msg.LEARNING_SERVER, "client"))

    def role(name):
        return "client" if name.startswith("client:") else name

    errors = []
    for rec in records:
        key = (rec["kind"], role(rec["from"]), role(rec["to"]))
        if key not in allowed:
            errors.append(f"round {rec['round']}: {rec['kind']} {rec['from']} -> {rec['to']} not allowed under {protocol.value}")
    return errors
