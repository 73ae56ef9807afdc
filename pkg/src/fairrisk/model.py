"""Feedforward binary risk model trained with Adam under a fairness penalty.

The network maps features through ``num_hidden_layers`` ReLU layers (with
inverted dropout on hidden activations during training) to two logits and a
log-softmax. Column 1 of the output is log f (positive class), column 0 is
log(1 - f). Gradients are derived by hand for the composite objective
mean cross-entropy + lambda * R.
"""
from __future__ import annotations

import copy
import io
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import log_softmax, softmax

from . import __version__
from .cohort import Cohort, SplitPlan
from .penalty import PenaltyConfig, regularizer, resolve_bandwidth

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "fairrisk-checkpoint/1"

HYPERPARAMETER_GRID = {
    "batch_size": (128, 256, 512),
    "dropout_prob": (0.0, 0.25, 0.5, 0.75),
    "hidden_dim": (128, 256),
    "learning_rate": (1e-3, 1e-4, 1e-5),
    "num_hidden_layers": (1, 2, 3),
}

ADAM_DEFAULTS = {"beta1": 0.9, "beta2": 0.999, "eps": 1e-8}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class Hyperparameters:
    batch_size: int = 512
    dropout_prob: float = 0.0
    hidden_dim: int = 128
    learning_rate: float = 1e-4
    num_hidden_layers: int = 1
    max_iterations: int = 150
    batches_per_iteration: int = 100
    patience: int = 10

    def __post_init__(self):
        if self.batch_size < 1 or self.hidden_dim < 1 or self.num_hidden_layers < 0:
            raise ValueError("batch_size and hidden_dim must be positive")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError("dropout_prob must lie in [0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.max_iterations < 1 or self.batches_per_iteration < 1:
            raise ValueError("iteration counts must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")

    def on_grid(self) -> bool:
        return all(getattr(self, k) in v for k, v in HYPERPARAMETER_GRID.items())

    def replace(self, **changes) -> "Hyperparameters":
        return Hyperparameters(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparameters":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)


def _preset(bs, drop, hd, lr, layers):
    return Hyperparameters(batch_size=bs, dropout_prob=drop, hidden_dim=hd,
                           learning_rate=lr, num_hidden_layers=layers)


# Selected configurations per database and outcome.
PRESETS: dict[str, Hyperparameters] = {
    "starr_hospital_mortality": _preset(512, 0.75, 256, 1e-4, 3),
    "starr_los_7": _preset(256, 0.75, 128, 1e-4, 1),
    "starr_readmission_30": _preset(512, 0.75, 128, 1e-5, 3),
    "optum_readmission_30": _preset(512, 0.25, 128, 1e-5, 3),
    "optum_los_7": _preset(512, 0.25, 128, 1e-5, 3),
    "mimic_los_3": _preset(128, 0.75, 256, 1e-5, 1),
    "mimic_los_7": _preset(512, 0.75, 128, 1e-5, 3),
    "mimic_hospital_mortality": _preset(128, 0.75, 256, 1e-5, 1),
    "mimic_icu_mortality": _preset(128, 0.75, 256, 1e-5, 1),
    # small and fast, for synthetic cohorts with a few dozen features
    "synthetic_small": Hyperparameters(batch_size=512, dropout_prob=0.0, hidden_dim=32,
                                       learning_rate=1e-3, num_hidden_layers=1,
                                       max_iterations=30, batches_per_iteration=20,
                                       patience=5),
}


def sample_hyperparameters(n_configs: int = 50, seed: int = 0, **overrides
                           ) -> list[Hyperparameters]:
    """Random search: draw distinct configurations from the Cartesian grid."""
    keys = list(HYPERPARAMETER_GRID)
    sizes = [len(HYPERPARAMETER_GRID[k]) for k in keys]
    total = int(np.prod(sizes))
    picks = np.random.default_rng(seed).choice(total, size=min(n_configs, total),
                                               replace=False)
    out = []
    for flat in picks:
        idx = np.unravel_index(flat, sizes)
        values = {k: HYPERPARAMETER_GRID[k][i] for k, i in zip(keys, idx)}
        out.append(Hyperparameters(**values, **overrides))
    return out


@dataclass
class ModelParameters:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[1],):
                raise ValueError(f"layer {i}: bias shape {b.shape} != ({W.shape[1]},)")
            if i and self.weights[i - 1].shape[1] != W.shape[0]:
                raise ValueError(f"layer {i}: input width does not chain")
        if self.weights[-1].shape[1] != 2:
            raise ValueError("output layer must have width 2")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    def arrays(self) -> list[np.ndarray]:
        return [x for pair in zip(self.weights, self.biases) for x in pair]

    def copy(self) -> "ModelParameters":
        return ModelParameters([W.copy() for W in self.weights],
                               [b.copy() for b in self.biases])

    @classmethod
    def from_arrays(cls, arrays) -> "ModelParameters":
        arrays = list(arrays)
        return cls(arrays[0::2], arrays[1::2])


def init_parameters(input_dim: int, hidden_dim: int, num_hidden_layers: int,
                    rng: np.random.Generator) -> ModelParameters:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    dims = [input_dim] + [hidden_dim] * num_hidden_layers + [2]
    Ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        Ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(rng.uniform(-bound, bound, size=fan_out))
    return ModelParameters(Ws, bs)


def _forward(params, X, dropout_prob, train, rng):
    if X.shape[1] != params.input_dim:
        raise ValueError(f"feature dimension {X.shape[1]} does not match model input "
                         f"{params.input_dim}")
    acts, pres, masks = [X], [], []
    h = X
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        pre = np.asarray(h @ W) + b
        h = np.maximum(pre, 0.0)
        if train and dropout_prob > 0:
            mask = (rng.random(h.shape) >= dropout_prob) / (1.0 - dropout_prob)
            h = h * mask
        else:
            mask = None
        pres.append(pre)
        masks.append(mask)
        acts.append(h)
    logits = np.asarray(h @ params.weights[-1]) + params.biases[-1]
    return logits, (acts, pres, masks)


def forward(params: ModelParameters, X, dropout_prob: float = 0.0, train: bool = False,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-record log-softmax outputs, shape (n, 2): [log(1 - f), log f]."""
    if train and dropout_prob > 0 and rng is None:
        raise ValueError("training-mode dropout needs an rng")
    logits, _ = _forward(params, X, dropout_prob, train, rng)
    return log_softmax(logits, axis=1)


def predict_proba(params: ModelParameters, X) -> np.ndarray:
    return np.exp(forward(params, X)[:, 1])


def cross_entropy_from_logp(logp: np.ndarray, y: np.ndarray) -> float:
    return float(-logp[np.arange(len(y)), y].mean())


def penalty_inputs(logp: np.ndarray, penalty: PenaltyConfig) -> np.ndarray:
    """Values compared by the penalty: log f, or (log f, log(1 - f))."""
    return logp[:, [1, 0]] if penalty.both_components else logp[:, 1]


def penalized_loss_and_grad(params: ModelParameters, X, y, a, penalty: PenaltyConfig,
                            n_groups: int | None = None, dropout_prob: float = 0.0,
                            rng: np.random.Generator | None = None,
                            bandwidth: float | None = None):
    """Mean cross-entropy + lambda * R on one batch, with its exact gradient.

    Returns:
        (objective, grads, parts) where ``grads`` lists arrays aligned with
        ``params.arrays()`` and ``parts`` holds the cross-entropy, R and the
        bandwidth used. With ``dropout_prob > 0`` a training-mode mask is drawn
        from ``rng``.
    """
    y = np.asarray(y, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValueError("empty batch")
    train = dropout_prob > 0
    logits, (acts, pres, masks) = _forward(params, X, dropout_prob, train, rng)
    logp = log_softmax(logits, axis=1)
    ce = cross_entropy_from_logp(logp, y)

    G = np.zeros_like(logp)  # dObjective / dlogp
    G[np.arange(n), y] = -1.0 / n
    R = 0.0
    if penalty.lam > 0:
        s = penalty_inputs(logp, penalty)
        if penalty.distance == "mmd" and bandwidth is None:
            bandwidth = resolve_bandwidth(penalty, s)
        R, dR = regularizer(s, y, a, penalty, n_groups=n_groups, bandwidth=bandwidth,
                            return_grad=True)
        if penalty.both_components:
            G[:, 1] += penalty.lam * dR[:, 0]
            G[:, 0] += penalty.lam * dR[:, 1]
        else:
            G[:, 1] += penalty.lam * dR
    objective = ce + penalty.lam * R

    delta = G - softmax(logits, axis=1) * G.sum(axis=1, keepdims=True)
    n_layers = len(params.weights)
    gW = [None] * n_layers
    gb = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        h_in = acts[layer]
        gW[layer] = np.asarray(h_in.T @ delta)
        gb[layer] = delta.sum(axis=0)
        if layer == 0:
            break
        dh = delta @ params.weights[layer].T
        if masks[layer - 1] is not None:
            dh = dh * masks[layer - 1]
        delta = dh * (pres[layer - 1] > 0)
    grads = [g for pair in zip(gW, gb) for g in pair]
    return objective, grads, {"cross_entropy": ce, "penalty": R, "bandwidth": bandwidth}


def evaluate_objective(params: ModelParameters, X, y, a, penalty: PenaltyConfig,
                       n_groups: int | None = None) -> dict:
    """Eval-mode cross-entropy, penalty and penalized objective on a full split."""
    y = np.asarray(y, dtype=np.int64)
    logp = forward(params, X)
    ce = cross_entropy_from_logp(logp, y)
    R = 0.0
    if penalty.lam > 0:
        R = regularizer(penalty_inputs(logp, penalty), y, a, penalty, n_groups=n_groups)
    return {"cross_entropy": ce, "penalty": R, "objective": ce + penalty.lam * R}


class Adam:
    def __init__(self, params: ModelParameters, learning_rate: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = learning_rate, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params.arrays()]
        self.v = [np.zeros_like(p) for p in params.arrays()]
        self.step_count = 0

    def step(self, params: ModelParameters, grads: list[np.ndarray]) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1 - self.beta1**t
        c2 = 1 - self.beta2**t
        for p, g, m, v in zip(params.arrays(), grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class EarlyStopping:
    """Track the best validation objective; stop after ``patience`` stale checks."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_iteration = 0
        self.stale = 0

    def update(self, iteration: int, value: float) -> bool:
        """Record one validation value. Returns True when training should stop."""
        if value < self.best:
            self.best, self.best_iteration, self.stale = value, iteration, 0
            return False
        self.stale += 1
        return self.stale >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.stale == 0


@dataclass
class TrainingLog:
    hyperparameters: dict
    penalty: dict
    seed: int
    fold_index: int
    adam: dict = field(default_factory=lambda: dict(ADAM_DEFAULTS))
    early_stopping_metric: str = "cross_entropy"
    iterations: list[dict] = field(default_factory=list)
    best_iteration: int = 0
    stopped_early: bool = False
    n_train: int = 0
    n_validation: int = 0

    @property
    def best(self) -> dict:
        return self.iterations[self.best_iteration - 1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingLog":
        return cls(**d)


def design_matrix(features, dense_max_columns: int = 2048):
    """Dense float64 array for narrow inputs, CSR otherwise."""
    if sp.issparse(features):
        if features.shape[1] <= dense_max_columns:
            return features.toarray()
        return sp.csr_matrix(features, dtype=np.float64)
    return np.asarray(features, dtype=np.float64)


def train_validation_indices(cohort: Cohort, split: SplitPlan, fold_index: int,
                             seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Training rows (every other fold) and validation rows (fold ``fold_index``).

    A plan with a single fold has no other folds to train on; its fold is then
    divided 90/10 into training and validation with a permutation seeded by
    ``seed``.
    """
    if not 0 <= fold_index < split.n_folds:
        raise IndexError(f"fold_index {fold_index} outside 0..{split.n_folds - 1}")
    if split.n_folds == 1:
        idx = cohort.index_of(split.folds[0])
        perm = np.random.default_rng([seed, 0xF01D]).permutation(len(idx))
        n_val = max(1, int(np.floor(0.1 * len(idx) + 0.5))) if len(idx) > 1 else 0
        return idx[np.sort(perm[n_val:])], idx[np.sort(perm[:n_val])]
    train_ids = [rid for f, ids in enumerate(split.folds) if f != fold_index for rid in ids]
    return cohort.index_of(train_ids), cohort.index_of(split.folds[fold_index])


def train(cohort: Cohort, split: SplitPlan, fold_index: int, hp: Hyperparameters,
          penalty: PenaltyConfig, seed: int = 0) -> tuple[ModelParameters, TrainingLog]:
    """Train one model and return the parameters of its best validation iteration.

    Each iteration takes ``hp.batches_per_iteration`` Adam steps on batches
    drawn from reshuffled passes over the training rows, then scores the
    validation fold in eval mode. The tracked quantity is the validation
    cross-entropy when lambda is 0 and the penalized objective otherwise.
    """
    train_idx, val_idx = train_validation_indices(cohort, split, fold_index, seed)
    if len(train_idx) == 0:
        raise TrainingError("empty training partition")
    if len(val_idx) == 0:
        raise TrainingError("empty validation partition")
    X = design_matrix(cohort.features)
    y, a, K = cohort.outcomes, cohort.groups, cohort.n_groups
    X_val, y_val, a_val = X[val_idx], y[val_idx], a[val_idx]

    init_ss, batch_ss, drop_ss = np.random.SeedSequence(seed).spawn(3)
    params = init_parameters(X.shape[1], hp.hidden_dim, hp.num_hidden_layers,
                             np.random.default_rng(init_ss))
    batch_rng = np.random.default_rng(batch_ss)
    drop_rng = np.random.default_rng(drop_ss)
    opt = Adam(params, hp.learning_rate, **ADAM_DEFAULTS)
    stopper = EarlyStopping(hp.patience)
    metric = "cross_entropy" if penalty.lam == 0 else "objective"
    tlog = TrainingLog(asdict(hp), penalty.to_dict(), seed, fold_index,
                       early_stopping_metric=metric, n_train=len(train_idx),
                       n_validation=len(val_idx))

    order = batch_rng.permutation(train_idx)
    cursor = 0
    best = params.copy()
    for iteration in range(1, hp.max_iterations + 1):
        batch_obj = []
        for _ in range(hp.batches_per_iteration):
            if cursor >= len(order):
                order = batch_rng.permutation(train_idx)
                cursor = 0
            rows = order[cursor:cursor + hp.batch_size]
            cursor += hp.batch_size
            obj, grads, _ = penalized_loss_and_grad(
                params, X[rows], y[rows], a[rows], penalty, n_groups=K,
                dropout_prob=hp.dropout_prob, rng=drop_rng)
            if not np.isfinite(obj):
                raise TrainingError(f"non-finite training objective at iteration {iteration}")
            opt.step(params, grads)
            batch_obj.append(obj)
        val = evaluate_objective(params, X_val, y_val, a_val, penalty, n_groups=K)
        tlog.iterations.append({"iteration": iteration,
                                "train_objective": float(np.mean(batch_obj)),
                                "val_cross_entropy": val["cross_entropy"],
                                "val_penalty": val["penalty"],
                                "val_objective": val["objective"]})
        stop = stopper.update(iteration, val[metric])
        if stopper.improved_last:
            best = params.copy()
        log.debug("iter %d val %s=%.6f", iteration, metric, val[metric])
        if stop:
            tlog.stopped_early = True
            break
    tlog.best_iteration = stopper.best_iteration
    return best, tlog


# ---------------------------------------------------------------------------
# Checkpoints: a numpy .npz archive. ``meta`` holds a JSON document with the
# format tag, library version, hyperparameters and the training log; arrays
# W0, b0, W1, b1, ... hold the layers in order.
# ---------------------------------------------------------------------------

def save_checkpoint(path: str | Path, params: ModelParameters, hp: Hyperparameters,
                    training_log: TrainingLog | None = None) -> None:
    meta = {"format": CHECKPOINT_FORMAT, "library_version": __version__,
            "hyperparameters": asdict(hp),
            "training_log": training_log.to_dict() if training_log else None,
            "n_layers": len(params.weights)}
    arrays = {}
    for i, (W, b) in enumerate(zip(params.weights, params.biases)):
        arrays[f"W{i}"] = W
        arrays[f"b{i}"] = b
    buf = io.BytesIO()
    np.savez(buf, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path
                    ) -> tuple[ModelParameters, Hyperparameters, TrainingLog | None]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
        n = meta["n_layers"]
        params = ModelParameters([z[f"W{i}"] for i in range(n)],
                                 [z[f"b{i}"] for i in range(n)])
    tl = meta.get("training_log")
    return (params, Hyperparameters.from_dict(meta["hyperparameters"]),
            TrainingLog.from_dict(copy.deepcopy(tl)) if tl else None)
