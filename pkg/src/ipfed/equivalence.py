"""Numerical check that projected spreadout commutes with orthonormal transforms.

For a class-embedding matrix ``W`` and transform ``R`` the protected route is
``decode(spreadout(project(W, R)), R)``; the unprotected route is
``spreadout(W)``.  With orthonormal ``R`` the two agree to rounding error.
With a merely invertible ``R`` pairwise distances change, the hinge terms
change with them, and the routes drift apart.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .embedding import TransformParam, gen_orthonormal, gen_regular, inverse_project_rows, project_rows
from .losses import SpreadoutParams, spreadout_update

FALSIFY_MIN_DEVIATION = 1e-3


def commutation_gap(W, r: TransformParam, p: SpreadoutParams = SpreadoutParams()) -> float:
    """Max componentwise gap between the protected and unprotected spreadout steps."""
    protected = inverse_project_rows(spreadout_update(project_rows(W, r), p), r)
    direct = spreadout_update(W, p)
    return float(np.max(np.abs(protected - direct)))


def hinge_active_matrix(rng: np.random.Generator, C: int, d: int, margin_v: float) -> np.ndarray:
    """Random ``(C, d)`` rows whose typical pairwise distance is about ``margin_v / 2``."""
    scale = margin_v / (2.0 * np.sqrt(2.0 * d))
    return rng.standard_normal((C, d)) * scale


def scaled_identity(d: int, factor: float = 2.0) -> TransformParam:
    return TransformParam(matrix=factor * np.eye(d), inverse=np.eye(d) / factor, orthonormal=False)


@dataclass
class EquivalenceReport:
    tolerance: float
    trials: int
    max_orthonormal_gap: float = 0.0
    min_regular_gap: float = np.inf
    min_scaled_gap: float = np.inf
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}: {self.trials} cases, max orthonormal gap {self.max_orthonormal_gap:.3e} "
            f"(tol {self.tolerance:g}), min regular gap {self.min_regular_gap:.3e}, "
            f"min 2I gap {self.min_scaled_gap:.3e} (need > {FALSIFY_MIN_DEVIATION:g}), "
            f"{len(self.failures)} failure(s), {self.seconds:.2f}s"
        )


def check_equivalence(
    trials: int = 100,
    d_list=(4, 16, 64),
    c_list=(3, 10, 50),
    tolerance: float = 1e-9,
    seed: int = 0,
    p: SpreadoutParams = SpreadoutParams(),
) -> EquivalenceReport:
    """Run the orthonormal commutation and the non-orthonormal falsification."""
    start = time.perf_counter()
    report = EquivalenceReport(tolerance=tolerance, trials=0)
    for trial in range(trials):
        for d in d_list:
            for C in c_list:
                rng = np.random.default_rng([seed, trial, d, C])
                W = hinge_active_matrix(rng, C, d, p.margin_v)
                key = (trial, d, C)
                round_index = trial * 1_000_003 + d * 1_009 + C

                gap = commutation_gap(W, gen_orthonormal(seed, round_index, d), p)
                report.max_orthonormal_gap = max(report.max_orthonormal_gap, gap)
                if not gap <= tolerance:
                    report.failures.append((key, "orthonormal", gap))

                gap = commutation_gap(W, gen_regular(seed, round_index, d), p)
                report.min_regular_gap = min(report.min_regular_gap, gap)
                if not gap > FALSIFY_MIN_DEVIATION:
                    report.failures.append((key, "regular", gap))

                gap = commutation_gap(W, scaled_identity(d), p)
                report.min_scaled_gap = min(report.min_scaled_gap, gap)
                if not gap > FALSIFY_MIN_DEVIATION:
                    report.failures.append((key, "scaled_identity", gap))
                report.trials += 1
    report.seconds = time.perf_counter() - start
    return report
