"""Fairness regularizers comparing each group's score distribution with the marginal.

Six penalties are available: a distance (Gaussian-kernel MMD or squared mean
difference) applied within the strata of one criterion (demographic parity:
all records; equal opportunity: y=1; equalized odds: y=1 and y=0). Inputs
are log-probabilities, and every penalty returns its exact gradient with
respect to those inputs so the model can backpropagate through it.

Each one-vs-marginal comparison inside a stratum S is written as a quadratic
form. With d_i = 1[a_i = k] / n_k - 1 / n_S over the records of S, the
V-statistic MMD is d^T K d and the mean difference is d^T u.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

CRITERIA = ("demographic_parity", "equal_opportunity", "equalized_odds")
DISTANCES = ("mmd", "mean")
MIN_CELL_SIZE = 2
BANDWIDTH_FLOOR = 1e-3
_MEDIAN_MAX_POINTS = 2048
_BLOCK = 2048


@dataclass(frozen=True)
class PenaltyConfig:
    """One regularization strategy and its weight.

    ``bandwidth`` is either a positive float (fixed kernel width) or the string
    ``"median"`` for the per-batch median heuristic. ``both_components`` feeds
    the pair (log f, log(1 - f)) to the distance instead of log f alone.
    """

    criterion: str = "demographic_parity"
    distance: str = "mmd"
    lam: float = 0.0
    bandwidth: float | str = "median"
    both_components: bool = False

    def __post_init__(self):
        if self.criterion not in CRITERIA:
            raise ValueError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be a nonnegative finite number")
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ValueError("bandwidth must be a positive number or 'median'")
        elif not self.bandwidth > 0:
            raise ValueError("fixed bandwidth must be positive")

    def with_lambda(self, lam: float) -> "PenaltyConfig":
        return PenaltyConfig(self.criterion, self.distance, lam, self.bandwidth,
                             self.both_components)

    def to_dict(self) -> dict:
        return {"criterion": self.criterion, "distance": self.distance,
                "lambda": float(self.lam), "bandwidth": self.bandwidth,
                "both_components": self.both_components}

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        bw = d.get("bandwidth", "median")
        return cls(d.get("criterion", "demographic_parity"), d.get("distance", "mmd"),
                   float(d.get("lambda", 0.0)), bw if bw == "median" else float(bw),
                   bool(d.get("both_components", False)))


def strata_for(criterion: str) -> tuple[int | None, ...]:
    """Outcome strata compared by ``criterion``; None means all records."""
    return {"demographic_parity": (None,),
            "equal_opportunity": (1,),
            "equalized_odds": (1, 0)}[criterion]


def _as_2d(u) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return u[:, None] if u.ndim == 1 else u


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[1] == 1:
        return (a[:, 0, None] - b[None, :, 0]) ** 2
    return ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)


def gaussian_kernel(a, b, bandwidth: float) -> np.ndarray:
    a, b = _as_2d(a), _as_2d(b)
    return np.exp(-_sqdist(a, b) / (2.0 * bandwidth**2))


def mmd_sq(sample_a, sample_b, bandwidth: float) -> float:
    """Biased (V-statistic) squared MMD with k(u, v) = exp(-|u - v|^2 / (2 bandwidth^2))."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    a, b = _as_2d(sample_a), _as_2d(sample_b)
    if len(a) < 1 or len(b) < 1:
        raise ValueError("both samples must be nonempty")
    val = (gaussian_kernel(a, a, bandwidth).mean() + gaussian_kernel(b, b, bandwidth).mean()
           - 2.0 * gaussian_kernel(a, b, bandwidth).mean())
    return max(float(val), 0.0)


def _count_pair_diffs_le(u_sorted: np.ndarray, t: float) -> int:
    above = np.searchsorted(u_sorted, u_sorted + t, side="right")
    return int((above - np.arange(1, len(u_sorted) + 1)).sum())


def _kth_pair_diff(u_sorted: np.ndarray, k: int) -> float:
    """k-th smallest (0-based) of u[j] - u[i], i < j, for sorted 1-d ``u``.

    Bisects over the ordering of nonnegative float64 bit patterns for the
    smallest t with at least k + 1 differences <= t, so the cost is
    O(n log n) per probe and 64 probes at most.
    """
    lo = 0
    hi = int(np.float64(u_sorted[-1] - u_sorted[0]).view(np.int64))
    while lo < hi:
        mid = (lo + hi) // 2
        if _count_pair_diffs_le(u_sorted, float(np.int64(mid).view(np.float64))) >= k + 1:
            hi = mid
        else:
            lo = mid + 1
    return float(np.int64(lo).view(np.float64))


def median_bandwidth(values) -> float:
    """Median pairwise distance among ``values`` (floored at 1e-3).

    Scalar values use an exact selection over pairwise differences. For
    vector values above 2048 points the median is taken over an evenly spaced
    subsample in lexicographic order, keeping the cost bounded and the result
    deterministic.
    """
    u = _as_2d(values)
    n = len(u)
    if n < 2:
        return 1.0
    if u.shape[1] == 1:
        us = np.sort(u[:, 0])
        m = n * (n - 1) // 2
        med = _kth_pair_diff(us, m // 2)
        if m % 2 == 0:
            med = 0.5 * (med + _kth_pair_diff(us, m // 2 - 1))
        return max(med, BANDWIDTH_FLOOR)
    if n > _MEDIAN_MAX_POINTS:
        order = np.lexsort(u.T[::-1])
        u = u[order[np.linspace(0, n - 1, _MEDIAN_MAX_POINTS).round().astype(int)]]
        n = len(u)
    iu = np.triu_indices(n, k=1)
    dist = np.sqrt(_sqdist(u, u)[iu])
    return max(float(np.median(dist)), BANDWIDTH_FLOOR)


def resolve_bandwidth(config: PenaltyConfig, values) -> float:
    if config.bandwidth == "median":
        return median_bandwidth(values)
    return float(config.bandwidth)


def mean_diff_penalty(group_values: Sequence, marginal) -> float:
    """Sum over groups of the squared gap between group mean and marginal mean.

    Empty groups are dropped from the sum.
    """
    mu = np.mean(_as_2d(marginal), axis=0)
    total = 0.0
    for v in group_values:
        v = _as_2d(v)
        if len(v) == 0:
            continue
        total += float(((v.mean(axis=0) - mu) ** 2).sum())
    return total


def _contrast_matrix(groups_s: np.ndarray, n_groups: int) -> np.ndarray:
    """Columns d_k for every group with enough records in the stratum."""
    n_s = len(groups_s)
    D = np.zeros((n_s, n_groups))
    for k in range(n_groups):
        mask = groups_s == k
        n_k = int(mask.sum())
        if n_k < MIN_CELL_SIZE:
            if n_k:
                log.debug("group %d has %d record(s) in stratum; contributes 0", k, n_k)
            continue
        D[:, k] = -1.0 / n_s
        D[mask, k] += 1.0 / n_k
    return D


def _mmd_quadratic(U: np.ndarray, D: np.ndarray, bandwidth: float, want_grad: bool):
    """Return d_k^T K d_k per column of D, and optionally d/dU of their sum."""
    n, p = U.shape
    n_k = D.shape[1]
    # right-hand side: D and, for the gradient, D[:, k] * U[:, j]
    if want_grad:
        DU = (D[:, :, None] * U[:, None, :]).reshape(n, n_k * p)
        W = np.hstack([D, DU])
    else:
        W = D
    KW = np.empty_like(W)
    for start in range(0, n, _BLOCK):
        stop = min(start + _BLOCK, n)
        KW[start:stop] = gaussian_kernel(U[start:stop], U, bandwidth) @ W
    KD = KW[:, :n_k]
    values = np.maximum((D * KD).sum(axis=0), 0.0)
    if not want_grad:
        return values, None
    KDU = KW[:, n_k:].reshape(n, n_k, p)
    # d/du_i of d^T K d = -(2 / s^2) d_i sum_l d_l K_il (u_i - u_l)
    inner = U[:, None, :] * KD[:, :, None] - KDU
    grad = -(2.0 / bandwidth**2) * (D[:, :, None] * inner).sum(axis=1)
    return values, grad


def regularizer(log_probs, y, a, config: PenaltyConfig, n_groups: int | None = None,
                bandwidth: float | None = None, return_grad: bool = False):
    """Fairness penalty R for one batch.

    Args:
        log_probs: per-record log f, shape (n,), or (n, p) when several
            log-probability components are compared jointly.
        y: binary outcomes, shape (n,).
        a: group indices, shape (n,).
        config: criterion and distance; ``config.lam`` is not applied here.
        n_groups: number of groups (defaults to ``max(a) + 1``).
        bandwidth: kernel width override. When omitted it is resolved from
            ``config``; the median heuristic uses every value in the batch.
        return_grad: also return dR/dlog_probs, with the bandwidth held fixed.

    Returns:
        R, or (R, grad) with grad shaped like ``log_probs``.
    """
    raw = np.asarray(log_probs, dtype=np.float64)
    U = _as_2d(raw)
    y = np.asarray(y)
    a = np.asarray(a, dtype=np.int64)
    if not (len(U) == len(y) == len(a)):
        raise ValueError("log_probs, y and a must align")
    if n_groups is None:
        n_groups = int(a.max()) + 1 if len(a) else 0
    if config.distance == "mmd" and bandwidth is None:
        bandwidth = resolve_bandwidth(config, U)
    total = 0.0
    grad = np.zeros_like(U) if return_grad else None
    for stratum in strata_for(config.criterion):
        idx = np.arange(len(U)) if stratum is None else np.flatnonzero(y == stratum)
        if len(idx) < MIN_CELL_SIZE:
            log.debug("stratum y=%s has %d record(s); contributes 0", stratum, len(idx))
            continue
        D = _contrast_matrix(a[idx], n_groups)
        Us = U[idx]
        if config.distance == "mmd":
            vals, g = _mmd_quadratic(Us, D, bandwidth, return_grad)
            total += float(vals.sum())
            if return_grad:
                grad[idx] += g
        else:
            M = D.T @ Us  # (K, p) mean gaps
            total += float((M**2).sum())
            if return_grad:
                grad[idx] += 2.0 * D @ M
    if not return_grad:
        return total
    return total, grad.reshape(raw.shape)
