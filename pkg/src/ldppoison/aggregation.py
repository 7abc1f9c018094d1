"""Server-side aggregation rules and the Weiszfeld geometric median."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .params import ParamVector, mean, stack

RULES = ("fedavg", "multikrum", "trimmedmean")


class AggregationConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AggregationConfig:
    rule: str = "fedavg"
    f: Optional[int] = None
    k: Optional[int] = None
    beta: Optional[int] = None

    def __post_init__(self):
        if self.rule not in RULES:
            raise AggregationConfigError(f"unknown aggregation rule {self.rule!r}")
        if self.rule == "multikrum" and (self.f is None or self.k is None):
            raise AggregationConfigError("multikrum needs both f and k")
        if self.rule == "trimmedmean" and self.beta is None:
            raise AggregationConfigError("trimmedmean needs beta")

    def validate(self, n: int) -> None:
        """Check the rule's parameters against ``n`` updates."""
        if self.rule == "multikrum":
            if n - self.f - 2 < 1:
                raise AggregationConfigError(f"multikrum needs N - f - 2 >= 1 (N={n}, f={self.f})")
            if not 1 <= self.k <= n:
                raise AggregationConfigError(f"multikrum needs 1 <= k <= N (N={n}, k={self.k})")
        elif self.rule == "trimmedmean":
            if self.beta < 0 or 2 * self.beta >= n:
                raise AggregationConfigError(f"trimmedmean needs 0 <= 2*beta < N (N={n}, beta={self.beta})")


def fedavg(updates: Sequence[ParamVector]) -> ParamVector:
    return mean(updates)


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    """Exact squared distances (no Gram-matrix shortcut), symmetric by construction."""
    n = x.shape[0]
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            diff = x[i] - x[j]
            out[i, j] = out[j, i] = float(diff @ diff)
    return out


def multikrum_scores(updates: Sequence[ParamVector], f: int) -> np.ndarray:
    """Sum of squared distances from each update to its N - f - 2 nearest others."""
    n = len(updates)
    m = n - f - 2
    if m < 1:
        raise AggregationConfigError(f"multikrum needs N - f - 2 >= 1 (N={n}, f={f})")
    d2 = pairwise_sq_dists(stack(updates))
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(d2[i], i))
        scores[i] = others[:m].sum()
    return scores


def multikrum(updates: Sequence[ParamVector], f: int, k: int) -> tuple[ParamVector, tuple[int, ...]]:
    """Average the ``k`` lowest-scoring updates; ties go to the lower index."""
    n = len(updates)
    if not 1 <= k <= n:
        raise AggregationConfigError(f"multikrum needs 1 <= k <= N (N={n}, k={k})")
    scores = multikrum_scores(updates, f)
    selected = tuple(sorted(int(i) for i in np.argsort(scores, kind="stable")[:k]))
    return mean([updates[i] for i in selected]), selected


def trimmed_mean(updates: Sequence[ParamVector], beta: int) -> ParamVector:
    """Per coordinate: drop the beta smallest and beta largest values, average the rest."""
    n = len(updates)
    if beta < 0 or 2 * beta >= n:
        raise AggregationConfigError(f"trimmedmean needs 0 <= 2*beta < N (N={n}, beta={beta})")
    x = np.sort(stack(updates), axis=0, kind="stable")
    kept = x[beta:n - beta]
    return updates[0].with_values(kept.sum(axis=0) / kept.shape[0])


def survivor_range(values: np.ndarray, beta: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-coordinate bounds of what trimmed mean keeps among ``values`` (rows = clients).

    These are the (beta+1)-th smallest and the (M-beta)-th smallest values,
    1-based, for M rows.
    """
    m = values.shape[0]
    if beta < 0 or 2 * beta >= m:
        raise AggregationConfigError(f"cannot trim {beta} from each end of {m} values")
    s = np.sort(values, axis=0)
    return s[beta], s[m - beta - 1]


def _objective(z: np.ndarray, x: np.ndarray) -> float:
    return float(np.linalg.norm(x - z, axis=1).sum())


def geometric_median(points: Sequence[ParamVector], tol: float = 1e-7, max_iter: int = 100,
                     eps: float = 1e-12) -> ParamVector:
    """Weiszfeld iteration started from the mean.

    Distances below ``eps`` are floored at ``eps``. If some input point has a
    lower summed distance than the final iterate (possible when the median sits
    on a data point and convergence is slow) that point is returned instead.
    """
    x = stack(points)
    z = x.mean(axis=0)
    for _ in range(max_iter):
        dist = np.maximum(np.linalg.norm(x - z, axis=1), eps)
        w = 1.0 / dist
        z_new = (w[:, None] * x).sum(axis=0) / w.sum()
        moved = np.linalg.norm(z_new - z)
        z = z_new
        if moved < tol:
            break
    best = _objective(z, x)
    for p in x:
        obj = _objective(p, x)
        if obj < best:
            best, z = obj, p.copy()
    return points[0].with_values(z)


def aggregate(updates: Sequence[ParamVector], cfg: AggregationConfig) -> tuple[ParamVector, Optional[tuple[int, ...]]]:
    """Apply the configured rule; returns the aggregate and the Multi-Krum selection (or None)."""
    cfg.validate(len(updates))
    if cfg.rule == "fedavg":
        return fedavg(updates), None
    if cfg.rule == "multikrum":
        return multikrum(updates, cfg.f, cfg.k)
    return trimmed_mean(updates, cfg.beta), None
