"""Synthetic identity data and verification metrics.

Each identity is a Gaussian cluster in input space.  Pre-training, federated
and evaluation identities come from independent seeded streams, so growing the
number of federated clients never changes the other two splits.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_SPLIT_CODES = {"pretrain": 1, "federated": 2, "eval": 3, "pairs": 4}


class FARUnreachableWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class SyntheticIdentitySpec:
    num_pretrain_ids: int = 90
    num_federated_ids: int = 10
    num_eval_ids: int = 50
    samples_per_id: int = 20
    eval_samples_per_id: int = 10
    input_dim: int = 32
    cluster_center_scale: float = 1.0
    within_class_noise_sigma: float = 0.1
    impostor_ratio: int = 20

    def __post_init__(self):
        counts = (
            self.num_pretrain_ids,
            self.num_federated_ids,
            self.num_eval_ids,
            self.samples_per_id,
            self.eval_samples_per_id,
            self.input_dim,
            self.impostor_ratio,
        )
        if min(counts) < 1:
            raise ValueError("all counts in SyntheticIdentitySpec must be >= 1")
        if self.within_class_noise_sigma < 0 or self.cluster_center_scale <= 0:
            raise ValueError("noise sigma must be >= 0 and center scale > 0")


@dataclass
class LabeledSet:
    X: np.ndarray
    labels: np.ndarray

    def by_identity(self):
        """Yield ``(identity, samples)`` in ascending identity order."""
        for ident in np.unique(self.labels):
            yield int(ident), self.X[self.labels == ident]


@dataclass
class Dataset:
    pretrain: LabeledSet
    clients: list
    client_ids: list
    eval: LabeledSet


def split_rng(seed: int, split: str) -> np.random.Generator:
    return np.random.default_rng([seed, _SPLIT_CODES[split]])


def _clusters(rng, n_ids, n_samples, spec, first_label):
    centers = rng.standard_normal((n_ids, spec.input_dim))
    centers *= spec.cluster_center_scale / np.linalg.norm(centers, axis=1, keepdims=True)
    noise = rng.standard_normal((n_ids, n_samples, spec.input_dim)) * spec.within_class_noise_sigma
    X = (centers[:, None, :] + noise).reshape(n_ids * n_samples, spec.input_dim)
    labels = np.repeat(np.arange(first_label, first_label + n_ids), n_samples)
    return LabeledSet(X=X, labels=labels)


def generate_dataset(spec: SyntheticIdentitySpec, seed: int) -> Dataset:
    """Build the pre-training, per-client and evaluation splits.

    Identity labels are disjoint across splits: pre-training identities come
    first, then one identity per federated client, then the evaluation set.
    """
    P, C = spec.num_pretrain_ids, spec.num_federated_ids
    pretrain = _clusters(split_rng(seed, "pretrain"), P, spec.samples_per_id, spec, 0)
    fed = _clusters(split_rng(seed, "federated"), C, spec.samples_per_id, spec, P)
    ev = _clusters(split_rng(seed, "eval"), spec.num_eval_ids, spec.eval_samples_per_id, spec, P + C)
    client_ids, clients = zip(*fed.by_identity())
    return Dataset(pretrain=pretrain, clients=list(clients), client_ids=list(client_ids), eval=ev)


@dataclass
class VerificationPairSet:
    genuine: np.ndarray  # (n_gen, 2) sample indices into the eval split
    impostor: np.ndarray  # (n_imp, 2)

    @property
    def counts(self):
        return len(self.genuine), len(self.impostor)


def make_pairs(labels, impostor_ratio: int = 20, seed: int = 0) -> VerificationPairSet:
    """All within-identity pairs plus ``impostor_ratio`` times as many random cross-identity pairs."""
    labels = np.asarray(labels)
    i, j = np.triu_indices(len(labels), k=1)
    same = labels[i] == labels[j]
    genuine = np.stack([i[same], j[same]], axis=1)
    cross = np.flatnonzero(~same)
    n_imp = min(len(cross), impostor_ratio * len(genuine))
    rng = split_rng(seed, "pairs")
    pick = np.sort(rng.choice(cross, size=n_imp, replace=False))
    impostor = np.stack([i[pick], j[pick]], axis=1)
    return VerificationPairSet(genuine=genuine, impostor=impostor)


def score_pairs(fx, X, pairs: VerificationPairSet):
    """Cosine similarity of embedded pairs; returns ``(genuine, impostor)`` scores."""
    if len(pairs.genuine) == 0 or len(pairs.impostor) == 0:
        raise ValueError("score_pairs needs non-empty genuine and impostor lists")
    F = fx.forward_batch(X)

    def cos(idx):
        s = np.einsum("ij,ij->i", F[idx[:, 0]], F[idx[:, 1]])
        return np.clip(s, -1.0, 1.0)

    return cos(pairs.genuine), cos(pairs.impostor)


@dataclass(frozen=True)
class TarResult:
    tar: float
    threshold: float
    achieved_far: float


def tar_at_far(genuine, impostor, far_target: float) -> TarResult:
    """True-accept rate at the lowest impostor-score threshold whose FAR <= target.

    A score is accepted when ``score >= threshold``.  When even the highest
    impostor score gives FAR above the target, the threshold moves just past
    it (FAR 0) and a :class:`FARUnreachableWarning` is issued.
    """
    genuine = np.asarray(genuine, dtype=np.float64)
    impostor = np.asarray(impostor, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("tar_at_far needs non-empty score lists")
    if not 0.0 < far_target < 1.0:
        raise ValueError("far_target must lie in (0, 1)")
    imp = np.sort(impostor)
    n = imp.size
    cand = np.unique(imp)
    # FAR(t) = #{imp >= t} / n
    far = (n - np.searchsorted(imp, cand, side="left")) / n
    ok = np.flatnonzero(far <= far_target)
    if ok.size:
        threshold = float(cand[ok[0]])
        achieved = float(far[ok[0]])
    else:
        threshold = float(np.nextafter(imp[-1], np.inf))
        achieved = 0.0
        warnings.warn(
            f"FAR {far_target:g} not resolvable with {n} impostor scores; achieved FAR {achieved:g}",
            FARUnreachableWarning,
            stacklevel=2,
        )
    tar = float(np.mean(genuine >= threshold))
    return TarResult(tar=tar, threshold=threshold, achieved_far=achieved)


def verification_accuracy(genuine, impostor) -> float:
    """Best balanced-count accuracy over every observed threshold (plus reject-all)."""
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    if genuine.size == 0 or impostor.size == 0:
        raise ValueError("verification_accuracy needs non-empty score lists")
    thresholds = np.concatenate([np.unique(np.concatenate([genuine, impostor])), [np.inf]])
    accepted_gen = genuine.size - np.searchsorted(genuine, thresholds, side="left")
    rejected_imp = np.searchsorted(impostor, thresholds, side="left")
    return float(np.max(accepted_gen + rejected_imp) / (genuine.size + impostor.size))


def roc_points(genuine, impostor):
    """``(far, tar, thresholds)`` over every distinct observed score."""
    genuine = np.sort(np.asarray(genuine, dtype=np.float64))
    impostor = np.sort(np.asarray(impostor, dtype=np.float64))
    thresholds = np.unique(np.concatenate([genuine, impostor]))[::-1]
    far = (impostor.size - np.searchsorted(impostor, thresholds, side="left")) / impostor.size
    tar = (genuine.size - np.searchsorted(genuine, thresholds, side="left")) / genuine.size
    return far, tar, thresholds


def export_dataset_csv(ds: Dataset, path) -> None:
    """Columns: split, identity, sample_index, x_0 .. x_{D-1}."""
    dim = ds.pretrain.X.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["split", "identity", "sample_index", *(f"x_{k}" for k in range(dim))])
        for split, sets in (
            ("pretrain", [ds.pretrain]),
            ("federated", [LabeledSet(X, np.full(len(X), i)) for i, X in zip(ds.client_ids, ds.clients)]),
            ("eval", [ds.eval]),
        ):
            for s in sets:
                counter = {}
                for x, ident in zip(s.X, s.labels):
                    k = counter.get(int(ident), 0)
                    counter[int(ident)] = k + 1
                    writer.writerow([split, int(ident), k, *(repr(float(v)) for v in x)])


def import_dataset_csv(path) -> Dataset:
    rows = {"pretrain": ([], []), "federated": ([], []), "eval": ([], [])}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:3] != ["split", "identity", "sample_index"]:
            raise ValueError(f"{path}: unexpected header {header[:3]}")
        for rec in reader:
            if rec[0] not in rows:
                raise ValueError(f"{path}: unknown split {rec[0]!r}")
            rows[rec[0]][0].append([float(v) for v in rec[3:]])
            rows[rec[0]][1].append(int(rec[1]))

    def labeled(split):
        X, y = rows[split]
        return LabeledSet(np.array(X, dtype=np.float64), np.array(y, dtype=np.int64))

    fed = labeled("federated")
    client_ids, clients = zip(*fed.by_identity()) if len(fed.labels) else ((), ())
    return Dataset(pretrain=labeled("pretrain"), clients=list(clients), client_ids=list(client_ids), eval=labeled("eval"))


def export_scores_csv(genuine, impostor, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_kind", "score"])
        writer.writerows(("genuine", repr(float(s))) for s in genuine)
        writer.writerows(("impostor", repr(float(s))) for s in impostor)


def read_scores_csv(path):
    gen, imp = [], []
    with open(Path(path), newline="") as fh:
        for rec in csv.DictReader(fh):
            (gen if rec["pair_kind"] == "genuine" else imp).append(float(rec["score"]))
    return np.array(gen), np.array(imp)
