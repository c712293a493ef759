"""Small tanh MLP feature extractor with unit-norm output.

Parameters live in one flat float64 vector so federated averaging and SGD are
plain vector arithmetic.  Layer ``k`` occupies ``in_k * out_k`` weights
(row-major, ``x @ W``) followed by ``out_k`` biases.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .embedding import DimensionError
from .losses import PositiveLossParams

NORM_EPS = 1e-12

CHECKPOINT_MAGIC = b"IPFDCKPT"
CHECKPOINT_VERSION = 1


class DegenerateNormWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class ModelParams:
    shapes: tuple
    values: np.ndarray
    version: int = 0

    def __post_init__(self):
        shapes = tuple((int(i), int(o)) for i, o in self.shapes)
        if not shapes:
            raise DimensionError("model needs at least one layer")
        for (_, o), (i, _) in zip(shapes[:-1], shapes[1:]):
            if o != i:
                raise DimensionError(f"layer shapes do not chain: {shapes}")
        values = np.array(self.values, dtype=np.float64).ravel()
        if values.size != flat_size(shapes):
            raise DimensionError(f"expected {flat_size(shapes)} parameters, got {values.size}")
        if not np.all(np.isfinite(values)):
            raise ValueError("model parameters contain NaN or Inf")
        values.setflags(write=False)
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "values", values)

    @property
    def input_dim(self) -> int:
        return self.shapes[0][0]

    @property
    def output_dim(self) -> int:
        return self.shapes[-1][1]

    def layers(self):
        """Yield ``(W, b)`` views for every layer."""
        offset = 0
        for i, o in self.shapes:
            W = self.values[offset : offset + i * o].reshape(i, o)
            offset += i * o
            b = self.values[offset : offset + o]
            offset += o
            yield W, b

    def with_values(self, values) -> "ModelParams":
        return replace(self, values=values)


def flat_size(shapes) -> int:
    return sum(i * o + o for i, o in shapes)


def layer_shapes(input_dim: int, widths=(32, 32), output_dim: int = 16):
    dims = [input_dim, *widths, output_dim]
    return tuple(zip(dims[:-1], dims[1:]))


def init_params(shapes, rng: np.random.Generator) -> ModelParams:
    """Uniform init in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` for weights and biases."""
    chunks = []
    for i, o in shapes:
        bound = 1.0 / math.sqrt(i)
        chunks.append(rng.uniform(-bound, bound, size=i * o))
        chunks.append(rng.uniform(-bound, bound, size=o))
    return ModelParams(shapes=shapes, values=np.concatenate(chunks))


class FeatureExtractor:
    """``f_theta``: tanh hidden layers, linear output, then L2 normalization."""

    def __init__(self, params: ModelParams):
        self.params = params

    @property
    def output_dim(self) -> int:
        return self.params.output_dim

    def _check_input(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.params.input_dim:
            raise DimensionError(f"input of shape {X.shape} does not match input_dim {self.params.input_dim}")
        return X

    def forward_batch(self, X, return_cache: bool = False):
        """Embed every row of ``X``; returns ``(n, d)`` unit vectors."""
        X = self._check_input(X)
        layers = list(self.params.layers())
        acts = [X]
        h = X
        for k, (W, b) in enumerate(layers):
            z = h @ W + b
            h = np.tanh(z) if k < len(layers) - 1 else z
            acts.append(h)
        z = acts[-1]
        norms = np.linalg.norm(z, axis=1)
        degenerate = norms < NORM_EPS
        safe = np.where(degenerate, 1.0, norms)
        F = z / safe[:, None]
        if np.any(degenerate):
            warnings.warn(f"{int(degenerate.sum())} embedding(s) with near-zero norm", DegenerateNormWarning, stacklevel=2)
            F[degenerate] = 0.0
            F[degenerate, 0] = 1.0
        if return_cache:
            return F, (acts, norms, degenerate)
        return F

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise DimensionError(f"expected a 1-D input, got shape {x.shape}")
        return self.forward_batch(x[None, :])[0]

    def backward_batch(self, cache, grad_F) -> np.ndarray:
        """Backpropagate ``dL/dF`` (shape ``(n, d)``) to a flat parameter gradient."""
        acts, norms, degenerate = cache
        F = acts[-1] / np.where(degenerate, 1.0, norms)[:, None]
        radial = np.sum(grad_F * F, axis=1, keepdims=True)
        g = (grad_F - radial * F) / np.where(degenerate, 1.0, norms)[:, None]
        g[degenerate] = 0.0

        layers = list(self.params.layers())
        grads = [None] * len(layers)
        for k in range(len(layers) - 1, -1, -1):
            W, _ = layers[k]
            if k < len(layers) - 1:
                g = g * (1.0 - acts[k + 1] ** 2)
            grads[k] = (acts[k].T @ g, g.sum(axis=0))
            g = g @ W.T
        return np.concatenate([part for gW, gb in grads for part in (gW.ravel(), gb)])


def positive_batch(fx: FeatureExtractor, X, w, p: PositiveLossParams = PositiveLossParams()):
    """Mean positive loss over ``X`` against class embedding ``w``.

    Returns ``(loss, grad_theta, grad_w)``.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (fx.output_dim,):
        raise DimensionError(f"class embedding shape {w.shape} does not match output dim {fx.output_dim}")
    F, cache = fx.forward_batch(X, return_cache=True)
    n = F.shape[0]
    gap = np.maximum(0.0, p.margin_m - F @ w)
    loss = float(np.mean(gap**2))
    coef = -2.0 * gap / n
    grad_F = coef[:, None] * w[None, :]
    grad_w = coef @ F
    return loss, fx.backward_batch(cache, grad_F), grad_w


def backward_positive(fx: FeatureExtractor, x, w, p: PositiveLossParams = PositiveLossParams()):
    """Gradient of the single-sample positive loss w.r.t. parameters and ``w``.

    Returns ``(grad_theta, grad_w, loss)``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise DimensionError(f"expected a 1-D input, got shape {x.shape}")
    loss, grad_theta, grad_w = positive_batch(fx, x[None, :], w, p)
    return grad_theta, grad_w, loss


def sgd_step(params: ModelParams, grads, eta: float) -> ModelParams:
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.values.shape:
        raise DimensionError(f"gradient shape {grads.shape} != parameter shape {params.values.shape}")
    return params.with_values(params.values - eta * grads)


def average_params(updates) -> ModelParams:
    """Sample-weighted mean of ``[(ModelParams, n_i), ...]`` in list order."""
    updates = list(updates)
    if not updates:
        raise ValueError("cannot average an empty list of parameters")
    total = float(sum(n for _, n in updates))
    if total <= 0:
        raise ValueError("total aggregation weight must be positive")
    first = updates[0][0]
    stacked = []
    for params, _ in updates:
        if params.shapes != first.shapes:
            raise DimensionError("cannot average parameters of different shapes")
        stacked.append(params.values)
    weights = np.array([n for _, n in updates], dtype=np.float64) / total
    stacked = np.stack(stacked)
    # math.fsum keeps the result independent of client order
    values = np.array([math.fsum(col) for col in (weights[:, None] * stacked).T])
    return first.with_values(values)


def save_checkpoint(params: ModelParams, path) -> None:
    """Write the little-endian checkpoint described in the README."""
    header = struct.pack("<8sIIq", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(params.shapes), params.version)
    dims = struct.pack(f"<{2 * len(params.shapes)}I", *(v for s in params.shapes for v in s))
    body = params.values.astype("<f8").tobytes()
    Path(path).write_bytes(header + dims + struct.pack("<Q", params.values.size) + body)


def load_checkpoint(path) -> ModelParams:
    raw = Path(path).read_bytes()
    head = struct.calcsize("<8sIIq")
    if len(raw) < head:
        raise ValueError(f"{path}: truncated checkpoint")
    magic, version, n_layers, round_index = struct.unpack_from("<8sIIq", raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an ipfed checkpoint")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    dims = struct.unpack_from(f"<{2 * n_layers}I", raw, head)
    offset = head + 8 * n_layers
    (count,) = struct.unpack_from("<Q", raw, offset)
    offset += 8
    if len(raw) != offset + 8 * count:
        raise ValueError(f"{path}: payload length mismatch")
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
    shapes = tuple(zip(dims[0::2], dims[1::2]))
    return ModelParams(shapes=shapes, values=values, version=round_index)
