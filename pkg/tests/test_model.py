import itertools
import math

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import expit

import fairrisk.model as model_mod
from fairrisk.cohort import Cohort, GroupAttribute, make_split
from fairrisk.metrics import auroc
from fairrisk.model import (PRESETS, Adam, EarlyStopping, Hyperparameters, ModelParameters,
                            cross_entropy_from_logp, evaluate_objective, forward,
                            init_parameters, load_checkpoint, penalized_loss_and_grad,
                            predict_proba, sample_hyperparameters, save_checkpoint, train,
                            train_validation_indices)
from fairrisk.penalty import CRITERIA, DISTANCES, PenaltyConfig, median_bandwidth

from oracles import central_differences, forward_reference, max_relative_error

CONFIGS = list(itertools.product(CRITERIA, DISTANCES))


def small_batch(n=10, d=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    y = np.array([0, 1] * (n // 2))
    a = np.array([0, 0, 1, 1, 2] * (n // 5))
    return X, y, a


def random_params(d, hidden, layers, seed, scale=1.0):
    rng = np.random.default_rng(seed)
    p = init_parameters(d, hidden, layers, rng)
    return ModelParameters([W * scale for W in p.weights], [b * scale for b in p.biases])


# -- forward pass ---------------------------------------------------------------------

def test_zero_network_predicts_half():
    p = ModelParameters([np.zeros((4, 3)), np.zeros((3, 2))], [np.zeros(3), np.zeros(2)])
    X = np.random.default_rng(0).normal(size=(7, 4))
    np.testing.assert_array_equal(predict_proba(p, X), np.full(7, 0.5))


def test_eval_mode_deterministic():
    p = random_params(5, 8, 2, 1)
    X = np.random.default_rng(2).normal(size=(6, 5))
    np.testing.assert_array_equal(forward(p, X, 0.5, train=False), forward(p, X, 0.5))


def test_forward_matches_reference():
    rng = np.random.default_rng(3)
    p = random_params(5, 2, 1, 4, scale=3.0)
    X = rng.normal(size=(8, 5))
    out = forward(p, X)
    for i in range(8):
        ref = forward_reference(p.weights, p.biases, X[i])
        np.testing.assert_allclose(out[i], ref, atol=1e-12, rtol=0)


def test_sparse_and_dense_inputs_agree():
    p = random_params(6, 4, 2, 5)
    X = (np.random.default_rng(6).random((9, 6)) < 0.4).astype(float)
    np.testing.assert_allclose(forward(p, sp.csr_matrix(X)), forward(p, X), atol=1e-14)


# -- objective and gradient -------------------------------------------------------------------

def test_half_predictor_cross_entropy_is_ln2():
    logp = np.log(np.full((6, 2), 0.5))
    assert cross_entropy_from_logp(logp, np.array([0, 1, 1, 0, 1, 0])) == pytest.approx(
        math.log(2), abs=1e-15)


def test_lambda_zero_objective_is_cross_entropy():
    X, y, a = small_batch()
    p = random_params(5, 4, 1, 0)
    obj, _, parts = penalized_loss_and_grad(p, X, y, a, PenaltyConfig(lam=0.0))
    assert obj == parts["cross_entropy"]
    assert obj == cross_entropy_from_logp(forward(p, X), y)


@pytest.mark.parametrize("criterion,distance", CONFIGS)
def test_doubling_lambda_doubles_penalty_term(criterion, distance):
    X, y, a = small_batch()
    p = random_params(5, 4, 1, 0)
    o1, _, parts = penalized_loss_and_grad(p, X, y, a, PenaltyConfig(criterion, distance, 0.7))
    o2, _, _ = penalized_loss_and_grad(p, X, y, a, PenaltyConfig(criterion, distance, 1.4))
    ce = parts["cross_entropy"]
    assert o2 - ce == pytest.approx(2 * (o1 - ce), rel=1e-12)


@pytest.mark.parametrize("criterion,distance", CONFIGS)
@pytest.mark.parametrize("layers", [1, 2, 3])
def test_gradient_matches_finite_differences(criterion, distance, layers):
    X, y, a = small_batch(seed=layers)
    p = random_params(5, 2, layers, 10 + layers, scale=2.0)
    cfg = PenaltyConfig(criterion, distance, 1.5)
    logp = forward(p, X)
    bw = median_bandwidth(logp[:, 1])  # bandwidth is a constant of the objective
    _, grads, _ = penalized_loss_and_grad(p, X, y, a, cfg, n_groups=3, bandwidth=bw)

    def f():
        return penalized_loss_and_grad(p, X, y, a, cfg, n_groups=3, bandwidth=bw)[0]

    num = central_differences(f, p.arrays(), h=1e-5)
    assert max_relative_error(grads, num) < 1e-5


def test_gradient_with_dropout_fixed_mask():
    X, y, a = small_batch()
    p = random_params(5, 6, 2, 3)
    cfg = PenaltyConfig("equalized_odds", "mmd", 1.0, 0.7)

    def f(seed=5):
        return penalized_loss_and_grad(p, X, y, a, cfg, 3, 0.5, np.random.default_rng(seed))

    _, grads, _ = f()
    num = central_differences(lambda: f()[0], p.arrays(), h=1e-5)
    assert max_relative_error(grads, num) < 1e-5


def test_degenerate_stratum_gradient_finite():
    X, _, _ = small_batch()
    y = np.zeros(10, dtype=int)
    a = np.zeros(10, dtype=int)
    p = random_params(5, 3, 1, 0)
    obj, grads, parts = penalized_loss_and_grad(p, X, y, a, PenaltyConfig(
        "equal_opportunity", "mmd", 2.0), n_groups=2)
    assert parts["penalty"] == 0.0 and all(np.isfinite(g).all() for g in grads)


def test_loss_decreases_over_first_adam_steps():
    X, y, a = small_batch(n=40, d=8, seed=1)
    failures = 0
    for seed in range(20):
        p = init_parameters(8, 16, 1, np.random.default_rng(seed))
        opt = Adam(p, 1e-3)
        losses = []
        for _ in range(6):
            obj, grads, _ = penalized_loss_and_grad(p, X, y, a, PenaltyConfig())
            losses.append(obj)
            opt.step(p, grads)
        failures += not all(b < a_ for a_, b in zip(losses, losses[1:]))
    assert failures <= 1


# -- early stopping ----------------------------------------------------------------------

def test_early_stopping_rule():
    es = EarlyStopping(patience=2)
    assert not es.update(1, 1.0)
    assert not es.update(2, 0.5)
    assert not es.update(3, 0.5)  # equal is not an improvement
    assert es.update(4, 0.7)
    assert es.best_iteration == 2 and es.best == 0.5


def tiny_cohort(n=300, seed=0):
    rng = np.random.default_rng(seed)
    X = (rng.random((n, 2)) < 0.5).astype(float)
    y = (X[:, 0] * X[:, 1]).astype(int)  # separable by x1 + x2 > 1.5
    g = rng.integers(0, 2, n)
    return Cohort(GroupAttribute("g", ("a", "b")), [f"r{i}" for i in range(n)], g, y,
                  sp.csr_matrix(X))


FAST = Hyperparameters(batch_size=32, hidden_dim=8, learning_rate=1e-2, num_hidden_layers=1,
                       max_iterations=40, batches_per_iteration=5, patience=5)


def test_forced_plateau_stops_at_iteration_two(monkeypatch):
    c = tiny_cohort()
    plan = make_split(c, 0.1, 3, seed=0)
    hp = FAST.replace(patience=1, max_iterations=10)
    pen = PenaltyConfig(lam=0.0)
    after_one, _ = train(c, plan, 0, hp.replace(max_iterations=1), pen, seed=3)

    real = evaluate_objective
    calls = []

    def plateau(*args, **kw):
        out = dict(real(*args, **kw))
        calls.append(1)
        if len(calls) > 1:  # every later check is worse than the first
            out["cross_entropy"] = out["objective"] = 1e9
        return out

    monkeypatch.setattr(model_mod, "evaluate_objective", plateau)
    params, log = train(c, plan, 0, hp, pen, seed=3)
    assert len(log.iterations) == 2 and log.stopped_early
    assert log.best_iteration == 1
    for A, B in zip(params.arrays(), after_one.arrays()):
        np.testing.assert_array_equal(A, B)


def test_zero_learning_rate_plateau_without_patching():
    c = tiny_cohort()
    plan = make_split(c, 0.1, 3, seed=0)
    _, log = train(c, plan, 0, FAST.replace(learning_rate=0.0, patience=1),
                   PenaltyConfig(), seed=0)
    assert len(log.iterations) == 2 and log.best_iteration == 1


def test_penalized_runs_track_objective():
    c = tiny_cohort()
    plan = make_split(c, 0.1, 3, seed=0)
    _, log0 = train(c, plan, 0, FAST.replace(max_iterations=2), PenaltyConfig(), 0)
    _, log1 = train(c, plan, 0, FAST.replace(max_iterations=2),
                    PenaltyConfig(lam=0.5), 0)
    assert log0.early_stopping_metric == "cross_entropy"
    assert log1.early_stopping_metric == "objective"


def _logistic_oracle_auroc(X, y, Xv, yv):
    Xb = np.hstack([X, np.ones((len(X), 1))])

    def nll(w):
        z = Xb @ w
        return np.sum(np.logaddexp(0, z) - y * z) + 1e-3 * w @ w

    w = minimize(nll, np.zeros(Xb.shape[1]), method="BFGS").x
    return auroc(expit(np.hstack([Xv, np.ones((len(Xv), 1))]) @ w), yv)


def test_separable_data_reaches_high_auroc():
    c = tiny_cohort(n=600, seed=1)
    plan = make_split(c, 0.1, 3, seed=1)
    tr, va = train_validation_indices(c, plan, 0)
    X = c.features.toarray()
    assert _logistic_oracle_auroc(X[tr], c.outcomes[tr], X[va], c.outcomes[va]) > 0.95
    params, _ = train(c, plan, 0, FAST, PenaltyConfig(), seed=2)
    assert auroc(predict_proba(params, X[va]), c.outcomes[va]) > 0.95


def test_same_seed_bitwise_identical():
    c = tiny_cohort()
    plan = make_split(c, 0.1, 3, seed=0)
    hp = FAST.replace(max_iterations=3, dropout_prob=0.25)
    pen = PenaltyConfig(lam=0.3)
    p1, l1 = train(c, plan, 1, hp, pen, seed=9)
    p2, l2 = train(c, plan, 1, hp, pen, seed=9)
    for A, B in zip(p1.arrays(), p2.arrays()):
        assert A.tobytes() == B.tobytes()
    assert l1.iterations == l2.iterations


def test_single_fold_uses_ninety_ten_split():
    c = tiny_cohort(n=111)
    plan = make_split(c, 0.1, 1, seed=0)
    tr, va = train_validation_indices(c, plan, 0, seed=4)
    assert len(tr) + len(va) == 100 and len(va) == 10
    assert not set(tr) & set(va)
    with pytest.raises(IndexError):
        train_validation_indices(c, plan, 1)


def test_checkpoint_roundtrip(tmp_path):
    c = tiny_cohort()
    plan = make_split(c, 0.1, 3, seed=0)
    params, log = train(c, plan, 0, FAST.replace(max_iterations=2), PenaltyConfig(), 0)
    save_checkpoint(tmp_path / "m.npz", params, FAST, log)
    back, hp, log2 = load_checkpoint(tmp_path / "m.npz")
    assert hp == FAST and log2 == log
    for A, B in zip(back.arrays(), params.arrays()):
        np.testing.assert_array_equal(A, B)


def test_hyperparameter_grid_and_presets():
    assert PRESETS["starr_readmission_30"].on_grid()
    draws = sample_hyperparameters(50, seed=0)
    assert len(draws) == 50 and all(h.on_grid() for h in draws)
    assert len({tuple(vars(h).values()) for h in draws}) == 50
    with pytest.raises(ValueError):
        Hyperparameters(patience=0)
    with pytest.raises(ValueError):
        Hyperparameters.from_dict({"bogus": 1})
