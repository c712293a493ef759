"""Vector arithmetic for class embeddings and the per-round secret transform.

Embeddings are plain 1-D ``float64`` numpy arrays; a class-embedding matrix is
a 2-D ``(C, d)`` array with one row per client.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DimensionError",
    "TransformParam",
    "as_embedding",
    "gen_orthonormal",
    "gen_regular",
    "identity_transform",
    "project",
    "inverse_project",
    "project_rows",
    "inverse_project_rows",
    "pairwise_distance",
    "transform_stream",
]

ORTHONORMAL_TOL = 1e-10
_SEED_MASK = (1 << 64) - 1


class DimensionError(ValueError):
    """Raised when vector/matrix shapes do not line up."""


def as_embedding(values, normalized: bool = False) -> np.ndarray:
    """Validate and convert ``values`` to a finite float64 vector."""
    w = np.asarray(values, dtype=np.float64)
    if w.ndim != 1 or w.size < 1:
        raise DimensionError(f"embedding must be a non-empty 1-D vector, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("embedding contains NaN or Inf")
    if normalized and abs(np.linalg.norm(w) - 1.0) > 1e-9:
        raise ValueError("embedding flagged normalized but its L2 norm is not 1")
    return w


@dataclass(frozen=True)
class TransformParam:
    """A d x d projection matrix plus its inverse.

    For orthonormal transforms the inverse is the transpose.  Regular-only
    transforms exist to show the equivalence breaking without orthonormality.
    """

    matrix: np.ndarray
    inverse: np.ndarray = field(repr=False)
    round_index: int = 0
    seed: int = 0
    orthonormal: bool = True

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        inv = np.array(self.inverse, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 1:
            raise DimensionError(f"transform must be square, got shape {m.shape}")
        if inv.shape != m.shape:
            raise DimensionError("inverse shape does not match matrix")
        m.setflags(write=False)
        inv.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "inverse", inv)
        if self.orthonormal:
            err = np.max(np.abs(m.T @ m - np.eye(m.shape[0])))
            if err > ORTHONORMAL_TOL:
                raise ValueError(f"matrix is not orthonormal (max |R^T R - I| = {err:.3e})")

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def transform_stream(seed: int, round_index: int) -> np.random.Generator:
    """Counter-based Philox stream keyed by (seed, round)."""
    ss = np.random.SeedSequence([seed & _SEED_MASK, round_index & _SEED_MASK])
    return np.random.Generator(np.random.Philox(ss))


def _check_dim(d: int) -> None:
    if not isinstance(d, (int, np.integer)) or d < 1:
        raise DimensionError(f"invalid dimension d={d!r}; need d >= 1")


def gen_orthonormal(seed: int, round_index: int, d: int) -> TransformParam:
    """Haar-random orthonormal matrix, reproducible from ``(seed, round_index, d)``.

    The orthonormal factor of the QR decomposition of a standard normal matrix
    is made unique by forcing the triangular factor's diagonal positive.
    """
    _check_dim(d)
    g = transform_stream(seed, round_index).standard_normal((d, d))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    q = q * signs
    return TransformParam(matrix=q, inverse=q.T.copy(), round_index=round_index, seed=seed)


def gen_regular(seed: int, round_index: int, d: int, max_cond: float = 1e8) -> TransformParam:
    """Invertible but (almost surely) non-orthonormal Gaussian matrix."""
    _check_dim(d)
    rng = transform_stream(seed, round_index)
    for _ in range(100):
        g = rng.standard_normal((d, d))
        if np.linalg.cond(g) < max_cond:
            return TransformParam(
                matrix=g,
                inverse=np.linalg.inv(g),
                round_index=round_index,
                seed=seed,
                orthonormal=False,
            )
    raise RuntimeError("could not draw a well-conditioned regular matrix")


def identity_transform(d: int, round_index: int = 0) -> TransformParam:
    _check_dim(d)
    eye = np.eye(d)
    return TransformParam(matrix=eye, inverse=eye.copy(), round_index=round_index)


def _match(w: np.ndarray, r: TransformParam) -> np.ndarray:
    w = as_embedding(w)
    if w.shape[0] != r.dim:
        raise DimensionError(f"embedding dim {w.shape[0]} != transform dim {r.dim}")
    return w


def project(w, r: TransformParam) -> np.ndarray:
    """Client-side protection: ``r.matrix @ w``."""
    return r.matrix @ _match(w, r)


def inverse_project(w, r: TransformParam) -> np.ndarray:
    """Decode a projected embedding back into the client's feature space."""
    return r.inverse @ _match(w, r)


def _match_rows(W, r: TransformParam) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.shape[1] != r.dim:
        raise DimensionError(f"rows of shape {W.shape} do not match transform dim {r.dim}")
    return W


def project_rows(W, r: TransformParam) -> np.ndarray:
    """Project every row of a ``(C, d)`` matrix."""
    return _match_rows(W, r) @ r.matrix.T


def inverse_project_rows(W, r: TransformParam) -> np.ndarray:
    return _match_rows(W, r) @ r.inverse.T


def pairwise_distance(a, b) -> float:
    """Euclidean distance between two embeddings."""
    a = as_embedding(a)
    b = as_embedding(b)
    if a.shape != b.shape:
        raise DimensionError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    return float(np.linalg.norm(a - b))
