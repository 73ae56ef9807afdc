import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from fairrisk.cohort import Cohort, GroupAttribute, SyntheticSpec, generate_synthetic, make_split
from fairrisk.metrics import (OVERALL_ROW, UNDEFINED, Calibrator, ace, auroc,
                              average_precision, calibration_log_likelihood, cross_entropy,
                              emd_1d, evaluate, evaluate_arrays, fit_calibrator, is_undefined,
                              parity_decomposition, rce, xauc)
from fairrisk.model import PRESETS, predict_proba, design_matrix, train
from fairrisk.penalty import PenaltyConfig

from oracles import (brute_auroc, brute_average_precision, brute_xauc, cdf_grid_emd,
                     grid_max_loglik, uniform_grid_emd)


def fuzz(seed, n=None, k=None, ties=True):
    rng = np.random.default_rng(seed)
    n = n or int(rng.integers(2, 301))
    k = k or int(rng.integers(1, 6))
    s = rng.random(n)
    if ties:
        s = np.round(s, int(rng.integers(1, 4)))
    return s, rng.integers(0, 2, n), rng.integers(0, k, n), k


# -- ranking --------------------------------------------------------------------------

def test_auroc_examples():
    assert auroc([0.9, 0.8, 0.1, 0.2], [1, 1, 0, 0]) == 1.0
    assert auroc([0.3] * 5, [1, 0, 1, 0, 0]) == 0.5
    assert is_undefined(auroc([0.1, 0.2], [1, 1]))


def test_auroc_random_matches_pairwise():
    s, y, _, _ = fuzz(0, n=200)
    assert abs(auroc(s, y) - brute_auroc(s, y)) < 1e-12


def test_average_precision_examples():
    assert average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx(5 / 6, abs=1e-15)
    assert average_precision([0.9, 0.8, 0.1], [1, 1, 0]) == 1.0
    assert is_undefined(average_precision([0.4, 0.2], [0, 0]))
    # ties keep input order
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_average_precision_random_matches_literal():
    s, y, _, _ = fuzz(1, n=100)
    assert abs(average_precision(s, y) - brute_average_precision(list(s), list(y))) < 1e-12


def test_xauc_examples():
    f = [0.9, 0.8, 0.2, 0.1]
    y = [1, 1, 0, 0]
    assert xauc(f, y, [0, 1, 1, 0], 0, "positive") == 1.0
    assert is_undefined(xauc(f, y, [0, 0, 0, 0], 0, "positive"))
    assert is_undefined(xauc(f, y, [0, 0, 0, 0], 0, "negative"))
    with pytest.raises(ValueError):
        xauc(f, y, [0, 0, 1, 1], 0, "sideways")


def test_xauc_random_matches_pairwise():
    s, y, a, _ = fuzz(2, n=300, k=3)
    for k in range(3):
        for d in ("positive", "negative"):
            assert abs(xauc(s, y, a, k, d) - brute_xauc(s, y, a, k, d)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_ranking_invariant_under_increasing_transform(seed):
    s, y, a, k = fuzz(seed)
    t = np.exp(3 * s) - 7.0
    if not is_undefined(auroc(s, y)):
        assert auroc(t, y) == auroc(s, y)
    for d in ("positive", "negative"):
        v = xauc(s, y, a, 0, d)
        assert (is_undefined(v) and is_undefined(xauc(t, y, a, 0, d))) or xauc(t, y, a, 0, d) == v


# -- EMD ----------------------------------------------------------------------------------

def test_emd_examples():
    assert emd_1d([0.3, 0.1, 0.2], [0.2, 0.3, 0.1]) == 0.0
    assert emd_1d([0.25], [0.75]) == 0.5
    assert emd_1d([-2.0], [5.0]) == 7.0
    with pytest.raises(ValueError):
        emd_1d([], [1.0])


@pytest.mark.parametrize("seed", range(5))
def test_emd_matches_cdf_grid(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=rng.integers(1, 60)), rng.normal(0.5, 2, size=rng.integers(1, 60))
    assert abs(emd_1d(a, b) - cdf_grid_emd(a, b)) < 1e-9
    assert abs(emd_1d(a, b) - uniform_grid_emd(a, b)) < 1e-3


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_emd_symmetry_and_triangle(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (rng.normal(size=rng.integers(1, 30)) for _ in range(3))
    assert abs(emd_1d(a, b) - emd_1d(b, a)) < 1e-12
    assert emd_1d(a, c) <= emd_1d(a, b) + emd_1d(b, c) + 1e-9


# -- parity ---------------------------------------------------------------------------------

def test_parity_single_group_is_zero():
    r = parity_decomposition([0.1, 0.5, 0.9], [0, 1, 1], [0, 0, 0])
    assert r.components[0] == 0.0 and r.aggregate == 0.0


def test_parity_mean_form_hand_value():
    f = [0.1, 0.3, 0.3, 0.5]
    r = parity_decomposition(f, [0, 0, 0, 0], [0, 0, 1, 1], form="mean")
    assert r.components == pytest.approx([-0.1, 0.1], abs=1e-15)
    assert r.aggregate == pytest.approx(0.02, abs=1e-15)


def test_parity_empty_cells_undefined():
    r = parity_decomposition([0.1, 0.2, 0.3], [1, 1, 0], [0, 0, 1], stratum=1, n_groups=3)
    assert r.components[0] == 0.0 and is_undefined(float(r.components[1]))
    empty = parity_decomposition([0.1, 0.2], [1, 1], [0, 1], stratum=0)
    assert is_undefined(empty.aggregate)


def test_highest_base_rate_group_has_largest_mean_gap():
    # three groups, one with a much higher base rate, unpenalized model
    spec = SyntheticSpec(6000, (0.4, 0.4, 0.2), np.tile(np.linspace(-1, 1, 12), (3, 1)),
                         (-2.2, -2.2, -0.4), density=0.3, seed=1)
    c = generate_synthetic(spec)
    plan = make_split(c, 0.2, 2, seed=0)
    params, _ = train(c, plan, 0, PRESETS["synthetic_small"], PenaltyConfig(), seed=0)
    test = c.index_of(plan.test_ids)
    f = predict_proba(params, design_matrix(c.features)[test])
    r = parity_decomposition(f, c.outcomes[test], c.groups[test], form="mean")
    assert int(np.argmax(r.components)) == 2 and r.components[2] > 0.1


# -- calibration ------------------------------------------------------------------------------

def test_calibrator_recovers_generating_curve():
    rng = np.random.default_rng(0)
    f = rng.uniform(0.02, 0.98, 100_000)
    y = (rng.random(f.size) < expit(2 * np.log(f) + 0.5)).astype(int)
    cal = fit_calibrator(f, y)
    assert cal.converged and cal.grad_norm < 1e-8
    assert abs(cal.slope - 2) < 0.05 and abs(cal.intercept - 0.5) < 0.05


def test_constant_predictions_degenerate_rule():
    cal = fit_calibrator(np.full(10, 0.3), [1, 0, 0, 0, 1, 0, 0, 0, 0, 0])
    assert cal.slope == 0.0 and cal.intercept == pytest.approx(math.log(0.2 / 0.8), abs=1e-15)
    assert cal.degenerate


def test_single_class_rejected():
    with pytest.raises(ValueError):
        fit_calibrator([0.1, 0.2], [1, 1])


def test_calibrator_matches_grid_search():
    rng = np.random.default_rng(3)
    f = rng.uniform(0.05, 0.95, 40)
    y = (rng.random(40) < f).astype(int)
    cal = fit_calibrator(f, y)
    ours = calibration_log_likelihood(f, y, cal.slope, cal.intercept)
    assert abs(ours - grid_max_loglik(f, y)) < 1e-6


def test_ace_zero_when_curve_is_identity():
    # two prediction levels whose empirical rates equal the predictions
    f = np.array([0.25] * 4 + [0.5] * 4)
    y = np.array([1, 0, 0, 0, 1, 1, 0, 0])
    assert ace(f, y) < 1e-16
    assert abs(ace(f, y, signed=True)) < 1e-9


def test_shifted_predictor_signed_ace():
    rng = np.random.default_rng(1)
    p = rng.uniform(0.15, 0.85, 50_000)
    y = (rng.random(p.size) < p).astype(int)
    v = ace(p + 0.1, y, signed=True)
    assert abs(v + 0.1) < 0.02


def test_rce_single_process_null():
    rng = np.random.default_rng(2)
    n = 50_000
    f = rng.uniform(0.05, 0.95, n)
    y = (rng.random(n) < expit(1.3 * np.log(f) + 0.2)).astype(int)
    a = rng.integers(0, 3, n)
    marginal = fit_calibrator(f, y)
    for k in range(3):
        assert rce(f, y, a, k, marginal=marginal) < 1e-3


def test_rce_whole_population_is_zero():
    rng = np.random.default_rng(4)
    f = rng.uniform(0.1, 0.9, 200)
    y = (rng.random(200) < f).astype(int)
    assert rce(f, y, np.zeros(200, int), 0) == 0.0
    assert rce(f, y, np.zeros(200, int), 0, signed=True) == 0.0


def test_rce_undefined_without_both_classes():
    assert is_undefined(rce([0.2, 0.4, 0.6], [1, 1, 0], [0, 0, 1], 0))


# -- reports ------------------------------------------------------------------------------------

GOLDEN_F = [0.2, 0.2, 0.2, 0.6, 0.6, 0.6]
GOLDEN_Y = [1, 0, 0, 1, 1, 0]
GOLDEN_A = [0, 0, 0, 1, 1, 1]

# Worked by hand. Each group has a single prediction level, so its calibrator
# is the constant mean outcome; the pooled data has two levels, so the pooled
# logistic curve passes through both empirical rates (1/3 and 2/3).
GOLDEN = {
    "g0": {"count": 3, "auroc": 0.5, "average_precision": 1.0,
           "cross_entropy": -(math.log(0.2) + 2 * math.log(0.8)) / 3,
           "ace": (1 / 3 - 0.2) ** 2, "ace_signed": 1 / 3 - 0.2, "rce": 0.0, "rce_signed": 0.0,
           "xauc_1": 0.0, "xauc_0": 1.0,
           "emd": 0.2, "emd_y1": 4 / 15, "emd_y0": 2 / 15,
           "mean_diff": -0.2, "mean_diff_y1": -4 / 15, "mean_diff_y0": -2 / 15},
    "g1": {"count": 3, "auroc": 0.5, "average_precision": 1.0,
           "cross_entropy": -(2 * math.log(0.6) + math.log(0.4)) / 3,
           "ace": (2 / 3 - 0.6) ** 2, "ace_signed": 2 / 3 - 0.6, "rce": 0.0, "rce_signed": 0.0,
           "xauc_1": 1.0, "xauc_0": 0.0,
           "emd": 0.2, "emd_y1": 2 / 15, "emd_y0": 4 / 15,
           "mean_diff": 0.2, "mean_diff_y1": 2 / 15, "mean_diff_y0": 4 / 15},
}
GOLDEN_OVERALL = {
    "count": 6, "auroc": 2 / 3, "average_precision": 11 / 12,
    "cross_entropy": -(math.log(0.2) + 2 * math.log(0.8) + 2 * math.log(0.6)
                       + math.log(0.4)) / 6,
    "ace": 1 / 90, "ace_signed": 0.1,
    "m_dp_emd": 0.4, "m_eqopp_emd": 0.4, "m_eqodds_emd": 0.8,
    "m_dp_mean": 0.08, "m_eqopp_mean": 4 / 45, "m_eqodds_mean": 8 / 45,
}
CALIBRATION_FIELDS = {"ace", "ace_signed", "rce", "rce_signed"}


def _check(got, want, field):
    tol = 1e-9 if field in CALIBRATION_FIELDS else 1e-12
    assert got == pytest.approx(want, abs=tol), field


def test_golden_six_record_report():
    attr = GroupAttribute("g", ("g0", "g1"))
    c = Cohort(attr, [f"r{i}" for i in range(6)], GOLDEN_A, GOLDEN_Y, np.zeros((6, 1)))
    rep = evaluate(c, GOLDEN_F, metadata={"lambda": 0.0})
    for g, fields in GOLDEN.items():
        for k, v in fields.items():
            _check(rep.groups[g][k], v, k)
    for k, v in GOLDEN_OVERALL.items():
        _check(rep.overall[k], v, k)
    assert rep.check_invariants() == []
    assert rep.rows()[-1]["group"] == OVERALL_ROW


def test_uniform_half_predictions():
    rng = np.random.default_rng(0)
    y, a = rng.integers(0, 2, 50), rng.integers(0, 3, 50)
    rep = evaluate_arrays(np.full(50, 0.5), y, a, ["a", "b", "c"])
    for g in rep.groups.values():
        for m in ("auroc", "xauc_1", "xauc_0"):
            assert is_undefined(g[m]) or g[m] == 0.5
        for m in ("emd", "emd_y1", "emd_y0", "mean_diff", "mean_diff_y1", "mean_diff_y0"):
            assert g[m] == 0.0
    assert rep.overall["auroc"] == 0.5 and rep.overall["m_eqodds_emd"] == 0.0


def test_evaluate_deterministic_and_validates_alignment():
    s, y, a, _ = fuzz(5, n=80, k=3)
    r1 = evaluate_arrays(s, y, a, ["x", "y", "z"])
    r2 = evaluate_arrays(s, y, a, ["x", "y", "z"])
    assert repr(r1.to_dict()) == repr(r2.to_dict())
    attr = GroupAttribute("g", ("x", "y", "z"))
    c = Cohort(attr, [str(i) for i in range(80)], a, y, np.zeros((80, 1)))
    with pytest.raises(ValueError):
        evaluate(c, s[:-1])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_report_invariants_on_fuzzed_inputs(seed):
    s, y, a, k = fuzz(seed, ties=False)
    s = np.clip(s, 0.01, 0.99)
    rep = evaluate_arrays(s, y, a, [f"g{i}" for i in range(k)])
    assert rep.check_invariants(1e-12) == []
    o = rep.overall
    for form, key in (("emd", "emd_y0"), ("mean", "mean_diff_y0")):
        vals = np.array([rep.groups[g][key] for g in rep.group_names])
        vals = vals[~np.isnan(vals)]
        neg = vals.sum() if form == "emd" else (vals**2).sum()
        eqopp = 0.0 if is_undefined(o[f"m_eqopp_{form}"]) else o[f"m_eqopp_{form}"]
        if not is_undefined(o[f"m_eqodds_{form}"]):
            assert abs(o[f"m_eqodds_{form}"] - (eqopp + neg)) < 1e-12


def test_cross_entropy_clamps():
    assert np.isfinite(cross_entropy([0.0, 1.0], [1, 0]))
    assert is_undefined(UNDEFINED) and not is_undefined(0.0)
    assert Calibrator(0.0, 0.0).predict([0.3])[0] == 0.5
