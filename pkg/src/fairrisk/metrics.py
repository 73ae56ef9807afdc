"""Performance and group-fairness metrics for binary risk scores.

Undefined values (a metric whose comparison set is empty, a group missing a
class, ...) are represented by ``UNDEFINED`` (a float NaN) and are never
replaced by 0. Use :func:`is_undefined` to test for them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit
from scipy.stats import rankdata

UNDEFINED = float("nan")
CLAMP_EPS = 1e-15
CALIBRATOR_GTOL = 1e-8
CALIBRATOR_MAX_ITER = 500


def is_undefined(x) -> bool:
    return x is None or (isinstance(x, float) and math.isnan(x))


def _arrays(scores, y):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(y)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and outcomes must be aligned 1-d arrays")
    return s, y.astype(np.int64)


def rank_probability(pos_scores, neg_scores) -> float:
    """P(pos > neg) + 0.5 P(pos == neg) over all pairs, via the rank-sum identity."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    n_p, n_n = len(pos), len(neg)
    if n_p == 0 or n_n == 0:
        return UNDEFINED
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0
    return float(u / (n_p * n_n))


def auroc(scores, y) -> float:
    s, y = _arrays(scores, y)
    return rank_probability(s[y == 1], s[y == 0])


def average_precision(scores, y) -> float:
    """Mean over positives of the precision at each positive's rank.

    Records are ranked by decreasing score; tied scores keep their input
    order (stable sort), so no interpolation across ties takes place.
    """
    s, y = _arrays(scores, y)
    n_pos = int(y.sum())
    if n_pos == 0:
        return UNDEFINED
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision[hits == 1].sum() / n_pos)


def cross_entropy(f, y) -> float:
    f, y = _arrays(f, y)
    if len(f) == 0:
        return UNDEFINED
    f = np.clip(f, CLAMP_EPS, 1 - CLAMP_EPS)
    return float(-np.mean(y * np.log(f) + (1 - y) * np.log1p(-f)))


def emd_1d(sample_a, sample_b) -> float:
    """1-Wasserstein distance between two empirical distributions on the line."""
    a = np.sort(np.asarray(sample_a, dtype=np.float64))
    b = np.sort(np.asarray(sample_b, dtype=np.float64))
    if len(a) == 0 or len(b) == 0:
        raise ValueError("emd_1d needs two nonempty samples")
    pts = np.sort(np.concatenate([a, b]))
    widths = np.diff(pts)
    cdf_a = np.searchsorted(a, pts[:-1], side="right") / len(a)
    cdf_b = np.searchsorted(b, pts[:-1], side="right") / len(b)
    return float(np.sum(np.abs(cdf_a - cdf_b) * widths))


# ---------------------------------------------------------------------------
# Conditional prediction parity
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParityResult:
    components: np.ndarray  # one entry per group, UNDEFINED where the cell is empty
    aggregate: float


def parity_decomposition(f, y, a, stratum: int | None = None, form: str = "emd",
                         n_groups: int | None = None) -> ParityResult:
    """Group-vs-marginal comparison of predictions within an outcome stratum.

    ``stratum`` is None (all records), 1 or 0. For ``form="emd"`` each
    component is the EMD between the group's predictions and all predictions
    in the stratum and the aggregate is their sum. For ``form="mean"`` each
    component is the signed gap between the group mean and the stratum mean
    and the aggregate is the sum of squared gaps.
    """
    if form not in ("emd", "mean"):
        raise ValueError("form must be 'emd' or 'mean'")
    f, y = _arrays(f, y)
    a = np.asarray(a, dtype=np.int64)
    if n_groups is None:
        n_groups = int(a.max()) + 1
    mask = np.ones(len(f), bool) if stratum is None else (y == stratum)
    fs, as_ = f[mask], a[mask]
    comps = np.full(n_groups, UNDEFINED)
    if len(fs) == 0:
        return ParityResult(comps, UNDEFINED)
    marginal_mean = fs.mean()
    for k in range(n_groups):
        fk = fs[as_ == k]
        if len(fk) == 0:
            continue
        comps[k] = emd_1d(fk, fs) if form == "emd" else fk.mean() - marginal_mean
    defined = comps[~np.isnan(comps)]
    agg = defined.sum() if form == "emd" else (defined**2).sum()
    return ParityResult(comps, float(agg))


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Calibrator:
    """g(f) = sigmoid(slope * log f + intercept)."""

    slope: float
    intercept: float
    n_iter: int = 0
    grad_norm: float = 0.0
    converged: bool = True
    degenerate: bool = False

    def predict(self, f) -> np.ndarray:
        x = np.log(np.clip(np.asarray(f, dtype=np.float64), CLAMP_EPS, 1 - CLAMP_EPS))
        return expit(self.slope * x + self.intercept)


def _calibration_nll(theta, x, y):
    z = theta[0] * x + theta[1]
    nll = -np.mean(y * log_expit(z) + (1 - y) * log_expit(-z))
    r = expit(z) - y
    return nll, np.array([np.mean(r * x), np.mean(r)])


def calibration_log_likelihood(f, y, slope: float, intercept: float) -> float:
    """Mean Bernoulli log-likelihood of y under g(f) with the given parameters."""
    f, y = _arrays(f, y)
    x = np.log(np.clip(f, CLAMP_EPS, 1 - CLAMP_EPS))
    return -_calibration_nll(np.array([slope, intercept]), x, y)[0]


def fit_calibrator(f, y) -> Calibrator:
    """Maximum-likelihood logistic recalibration of predictions on log f.

    L-BFGS runs first; if its gradient norm is still above 1e-8, Newton steps
    on the exact 2x2 Hessian finish the job. A calibrator that fails to reach
    that tolerance within 500 iterations comes back with ``converged=False``.

    When every prediction is identical the slope cannot be identified; the
    calibrator is then slope 0 and intercept logit(mean y).
    """
    f, y = _arrays(f, y)
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == len(y):
        raise ValueError("calibration needs both outcome classes")
    x = np.log(np.clip(f, CLAMP_EPS, 1 - CLAMP_EPS))
    if np.ptp(x) == 0:
        p = n_pos / len(y)
        return Calibrator(0.0, float(np.log(p) - np.log1p(-p)), degenerate=True)
    p = n_pos / len(y)
    theta0 = np.array([0.0, np.log(p) - np.log1p(-p)])
    res = minimize(_calibration_nll, theta0, args=(x, y), jac=True, method="L-BFGS-B",
                   options={"maxiter": CALIBRATOR_MAX_ITER, "gtol": 1e-12, "ftol": 0.0})
    theta, n_iter = res.x, int(res.nit)
    nll, g = _calibration_nll(theta, x, y)
    while np.linalg.norm(g) >= CALIBRATOR_GTOL and n_iter < CALIBRATOR_MAX_ITER:
        n_iter += 1
        q = expit(theta[0] * x + theta[1])
        w = q * (1 - q)
        H = np.array([[np.mean(w * x * x), np.mean(w * x)],
                      [np.mean(w * x), np.mean(w)]])
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-10:
            cand = theta - t * step
            nll_c, g_c = _calibration_nll(cand, x, y)
            if nll_c <= nll:
                break
            t *= 0.5
        else:
            break
        theta, nll, g = cand, nll_c, g_c
    gnorm = float(np.linalg.norm(g))
    return Calibrator(float(theta[0]), float(theta[1]), n_iter, gnorm,
                      converged=gnorm < CALIBRATOR_GTOL)


def _ace_from(g: np.ndarray, f: np.ndarray, signed: bool) -> float:
    d = g - f
    return float(d.mean() if signed else (d**2).mean())


def ace(f, y, signed: bool = False, calibrator: Calibrator | None = None) -> float:
    """Absolute calibration error of f against a logistic recalibration curve.

    Unsigned: mean (g(f) - f)^2. Signed: mean (g(f) - f); positive values
    mean risk is under-predicted.
    """
    f, y = _arrays(f, y)
    g = (calibrator or fit_calibrator(f, y)).predict(f)
    return _ace_from(g, f, signed)


def _has_both_classes(y) -> bool:
    return 0 < int(np.sum(y)) < len(y)


def rce(f, y, a, k: int, signed: bool = False,
        marginal: Calibrator | None = None) -> float:
    """Relative calibration error of group k: group curve vs marginal curve over group k."""
    f, y = _arrays(f, y)
    a = np.asarray(a, dtype=np.int64)
    mask = a == k
    if not _has_both_classes(y[mask]) or not _has_both_classes(y):
        return UNDEFINED
    g_k = fit_calibrator(f[mask], y[mask])
    g_all = marginal or fit_calibrator(f, y)
    d = g_k.predict(f[mask]) - g_all.predict(f[mask])
    return float(d.mean() if signed else (d**2).mean())


# ---------------------------------------------------------------------------
# Cross-group ranking
# ---------------------------------------------------------------------------

def xauc(f, y, a, k: int, direction: str = "positive") -> float:
    """Cross-group AUROC for group k.

    ``direction="positive"``: P(positive of group k outranks a negative from
    another group). ``direction="negative"``: P(a positive from another group
    outranks a negative of group k). Ties count one half.
    """
    f, y = _arrays(f, y)
    a = np.asarray(a, dtype=np.int64)
    in_k = a == k
    if direction == "positive":
        return rank_probability(f[in_k & (y == 1)], f[~in_k & (y == 0)])
    if direction == "negative":
        return rank_probability(f[~in_k & (y == 1)], f[in_k & (y == 0)])
    raise ValueError("direction must be 'positive' or 'negative'")


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

GROUP_METRICS = (
    "count", "auroc", "average_precision", "cross_entropy", "ace", "ace_signed",
    "rce", "rce_signed", "xauc_1", "xauc_0",
    "emd", "emd_y1", "emd_y0", "mean_diff", "mean_diff_y1", "mean_diff_y0",
)
OVERALL_METRICS = (
    "count", "auroc", "average_precision", "cross_entropy", "ace", "ace_signed",
    "m_dp_emd", "m_eqopp_emd", "m_eqodds_emd", "m_dp_mean", "m_eqopp_mean",
    "m_eqodds_mean",
)
METRIC_COLUMNS = tuple(dict.fromkeys(GROUP_METRICS + OVERALL_METRICS))
OVERALL_ROW = "__overall__"


@dataclass
class FairnessReport:
    group_names: list[str]
    groups: dict[str, dict[str, float]]
    overall: dict[str, float]
    metadata: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        """One flat dict per group plus one for the overall row."""
        out = []
        for name in self.group_names:
            out.append({"group": name, **{m: self.groups[name].get(m, UNDEFINED)
                                          for m in METRIC_COLUMNS}})
        out.append({"group": OVERALL_ROW, **{m: self.overall.get(m, UNDEFINED)
                                             for m in METRIC_COLUMNS}})
        return out

    def to_dict(self) -> dict:
        return {"metadata": self.metadata, "group_names": list(self.group_names),
                "groups": self.groups, "overall": self.overall}

    @classmethod
    def from_dict(cls, d: dict) -> "FairnessReport":
        return cls(list(d["group_names"]), d["groups"], d["overall"], d.get("metadata", {}))

    def check_invariants(self, tol: float = 1e-12) -> list[str]:
        """Names of violated report invariants (empty list when consistent)."""
        problems = []
        comp = {key: np.array([self.groups[g][key] for g in self.group_names])
                for key in ("emd", "emd_y1", "emd_y0", "mean_diff", "mean_diff_y1",
                            "mean_diff_y0")}

        def nansum(v, sq=False):
            v = v[~np.isnan(v)]
            return float((v**2).sum() if sq else v.sum())

        def close(x, y):
            if is_undefined(x) or is_undefined(y):
                return is_undefined(x) == is_undefined(y)
            return abs(x - y) <= tol

        o = self.overall
        for agg, key, sq in (("m_dp_emd", "emd", False), ("m_eqopp_emd", "emd_y1", False),
                             ("m_dp_mean", "mean_diff", True),
                             ("m_eqopp_mean", "mean_diff_y1", True)):
            if not is_undefined(o[agg]) and not close(o[agg], nansum(comp[key], sq)):
                problems.append(f"{agg} != sum of {key}")
        for form, key, sq in (("emd", "emd_y0", False), ("mean", "mean_diff_y0", True)):
            eqodds, eqopp = o[f"m_eqodds_{form}"], o[f"m_eqopp_{form}"]
            if is_undefined(eqodds):
                continue
            rhs = (0.0 if is_undefined(eqopp) else eqopp) + nansum(comp[key], sq)
            if not close(eqodds, rhs):
                problems.append(f"m_eqodds_{form} != m_eqopp_{form} + y=0 sum")
        bounded = ("auroc", "average_precision", "xauc_1", "xauc_0")
        for name in self.group_names:
            for m in bounded:
                v = self.groups[name][m]
                if not is_undefined(v) and not 0 <= v <= 1:
                    problems.append(f"{name}.{m} outside [0, 1]")
        for m in ("auroc", "average_precision"):
            v = o[m]
            if not is_undefined(v) and not 0 <= v <= 1:
                problems.append(f"overall.{m} outside [0, 1]")
        return problems


def _safe_calibration(f, y):
    if not _has_both_classes(y):
        return None, UNDEFINED, UNDEFINED
    cal = fit_calibrator(f, y)
    g = cal.predict(f)
    return cal, _ace_from(g, f, False), _ace_from(g, f, True)


def evaluate_arrays(f, y, a, group_names: Sequence[str], metadata: dict | None = None
                    ) -> FairnessReport:
    """Compute every per-group and aggregate metric for one set of predictions."""
    f, y = _arrays(f, y)
    a = np.asarray(a, dtype=np.int64)
    if a.shape != f.shape:
        raise ValueError("group indices must align with predictions")
    K = len(group_names)
    if len(a) and (a.min() < 0 or a.max() >= K):
        raise ValueError("group index outside group_names")

    parity = {(form, s): parity_decomposition(f, y, a, s, form, K)
              for form in ("emd", "mean") for s in (None, 1, 0)}
    marginal, ace_all, ace_all_s = _safe_calibration(f, y)

    groups = {}
    for k, name in enumerate(group_names):
        m = a == k
        fk, yk = f[m], y[m]
        cal_k, ace_k, ace_k_s = _safe_calibration(fk, yk)
        if cal_k is not None and marginal is not None:
            d = cal_k.predict(fk) - marginal.predict(fk)
            rce_k, rce_k_s = float((d**2).mean()), float(d.mean())
        else:
            rce_k = rce_k_s = UNDEFINED
        groups[name] = {
            "count": int(m.sum()),
            "auroc": auroc(fk, yk) if len(fk) else UNDEFINED,
            "average_precision": average_precision(fk, yk) if len(fk) else UNDEFINED,
            "cross_entropy": cross_entropy(fk, yk),
            "ace": ace_k, "ace_signed": ace_k_s,
            "rce": rce_k, "rce_signed": rce_k_s,
            "xauc_1": xauc(f, y, a, k, "positive"),
            "xauc_0": xauc(f, y, a, k, "negative"),
            "emd": float(parity["emd", None].components[k]),
            "emd_y1": float(parity["emd", 1].components[k]),
            "emd_y0": float(parity["emd", 0].components[k]),
            "mean_diff": float(parity["mean", None].components[k]),
            "mean_diff_y1": float(parity["mean", 1].components[k]),
            "mean_diff_y0": float(parity["mean", 0].components[k]),
        }

    def eqodds(form):
        pos, neg = parity[form, 1].aggregate, parity[form, 0].aggregate
        if is_undefined(pos) and is_undefined(neg):
            return UNDEFINED
        return (0.0 if is_undefined(pos) else pos) + (0.0 if is_undefined(neg) else neg)

    overall = {
        "count": int(len(f)),
        "auroc": auroc(f, y) if len(f) else UNDEFINED,
        "average_precision": average_precision(f, y) if len(f) else UNDEFINED,
        "cross_entropy": cross_entropy(f, y),
        "ace": ace_all, "ace_signed": ace_all_s,
        "m_dp_emd": parity["emd", None].aggregate,
        "m_eqopp_emd": parity["emd", 1].aggregate,
        "m_eqodds_emd": eqodds("emd"),
        "m_dp_mean": parity["mean", None].aggregate,
        "m_eqopp_mean": parity["mean", 1].aggregate,
        "m_eqodds_mean": eqodds("mean"),
    }
    return FairnessReport(list(group_names), groups, overall, dict(metadata or {}))


def evaluate(cohort, predictions, attribute=None, metadata: dict | None = None
             ) -> FairnessReport:
    """Evaluate predictions aligned with ``cohort`` records."""
    predictions = np.asarray(predictions, dtype=np.float64)
    if predictions.shape != (len(cohort),):
        raise ValueError(f"{predictions.shape[0] if predictions.ndim else 0} predictions "
                         f"for {len(cohort)} records")
    attribute = attribute or cohort.attribute
    return evaluate_arrays(predictions, cohort.outcomes, cohort.groups,
                           attribute.group_names, metadata)
