"""Lambda sweeps: train a baseline and penalized models per fold, evaluate, aggregate.

A sweep directory looks like::

    <output_dir>/
      manifest.json          config, config hash, seeds, library versions
      split.json             the test/fold partition
      cells/<cell>/report.json       one FairnessReport per (lambda, fold)
      cells/<cell>/checkpoint.npz
      cells/<cell>/failed.json       written instead when a cell raised
      reports.csv            one row per (fold, lambda, group) incl. overall rows
      summary.csv            mean/SD per (lambda, group, metric), long format
      result.json

Completed cells are skipped when a sweep is rerun, so deleting a cell
directory recomputes exactly that cell.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from .cohort import (Cohort, GroupAttribute, SchemaError, SplitPlan, SyntheticSpec,
                     canonical_spec, generate_synthetic, load_cohort, make_split,
                     read_cohort_header)
from .metrics import METRIC_COLUMNS, OVERALL_ROW, FairnessReport, evaluate, is_undefined
from .model import (PRESETS, Hyperparameters, design_matrix, predict_proba,
                    save_checkpoint, train)
from .penalty import PenaltyConfig

log = logging.getLogger(__name__)

NA = "NA"
METADATA_COLUMNS = ("criterion", "distance", "lambda", "bandwidth", "both_components",
                    "fold", "seed", "best_iteration", "val_cross_entropy", "val_penalty",
                    "val_objective", "group")
REPORT_COLUMNS = METADATA_COLUMNS + METRIC_COLUMNS
SUMMARY_COLUMNS = ("criterion", "distance", "lambda", "group", "metric", "mean", "sd", "n")


class ConfigError(ValueError):
    pass


def lambda_grid(count: int, lam_min: float, lam_max: float) -> list[float]:
    """Log-uniform grid with both endpoints: min * (max / min) ** (j / (count - 1)).

    A single-value grid is just ``[max]``.
    """
    if count < 1:
        raise ConfigError("lambda grid needs at least one value")
    if not 0 < lam_min <= lam_max:
        raise ConfigError("lambda grid bounds must satisfy 0 < min <= max")
    if count == 1:
        return [float(lam_max)]
    if lam_min == lam_max:
        raise ConfigError("a grid of several values needs min < max")
    ratio = lam_max / lam_min
    grid = [lam_min * ratio ** (j / (count - 1)) for j in range(count)]
    grid[0], grid[-1] = float(lam_min), float(lam_max)
    return grid


@dataclass
class ExperimentConfig:
    cohort: dict
    attribute: dict = field(default_factory=dict)
    hyperparameters: dict = field(default_factory=lambda: {"preset": "synthetic_small"})
    penalty: dict = field(default_factory=lambda: {"criterion": "demographic_parity",
                                                   "distance": "mmd"})
    lambda_grid: dict = field(default_factory=lambda: {"count": 10, "min": 1e-3, "max": 10.0})
    split: dict = field(default_factory=lambda: {"test_fraction": 0.1, "folds": 10, "seed": 0})
    training_seed: int = 0
    output_dir: str = "runs/sweep"
    parallelism: int = 1
    include_baseline: bool = True

    def __post_init__(self):
        try:
            self.validate()
        except ConfigError:
            raise
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def validate(self) -> None:
        if not isinstance(self.cohort, dict) or not ({"path", "synthetic"} & set(self.cohort)):
            raise ConfigError("cohort needs either 'path' or 'synthetic'")
        if "lambdas" in self.lambda_grid:
            if any(float(v) <= 0 for v in self.lambda_grid["lambdas"]):
                raise ConfigError("explicit lambdas must be positive")
            if not self.lambda_grid["lambdas"]:
                raise ConfigError("explicit lambda list is empty")
        else:
            lambda_grid(int(self.lambda_grid["count"]), float(self.lambda_grid["min"]),
                        float(self.lambda_grid["max"]))
        self.hp()
        self.penalty_config()
        folds = int(self.split.get("folds", 10))
        frac = float(self.split.get("test_fraction", 0.1))
        if folds < 1 or not 0 < frac < 1:
            raise ConfigError("split needs folds >= 1 and 0 < test_fraction < 1")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")

    def hp(self) -> Hyperparameters:
        d = dict(self.hyperparameters)
        preset = d.pop("preset", None)
        overrides = d.pop("overrides", {}) or {}
        if preset is not None:
            if preset not in PRESETS:
                raise ConfigError(f"unknown hyperparameter preset {preset!r}")
            return PRESETS[preset].replace(**d, **overrides)
        return Hyperparameters.from_dict({**d, **overrides})

    def penalty_config(self, lam: float = 0.0) -> PenaltyConfig:
        return PenaltyConfig.from_dict({**self.penalty, "lambda": lam})

    def lambdas(self) -> list[float]:
        g = self.lambda_grid
        if "lambdas" in g:
            return [float(v) for v in g["lambdas"]]
        return lambda_grid(int(g["count"]), float(g["min"]), float(g["max"]))

    def all_lambdas(self) -> list[float]:
        return ([0.0] if self.include_baseline else []) + self.lambdas()

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        d = self.to_dict()
        d.pop("output_dir")
        d.pop("parallelism")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "cohort" not in d:
            raise ConfigError("config needs a 'cohort' section")
        return cls(**d)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    cfg = ExperimentConfig.from_dict(data)
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        cfg.output_dir = str(Path(path).parent / out)
    src = cfg.cohort.get("path")
    if src and not Path(src).is_absolute():
        cfg.cohort = {**cfg.cohort, "path": str(Path(path).parent / src)}
    return cfg


def synthetic_spec_from_config(d: dict) -> SyntheticSpec:
    kind = d["synthetic"]
    if kind == "canonical":
        kw = {k: d[k] for k in ("seed", "n", "base_rates", "group_weights", "n_features",
                                "density") if k in d}
        return canonical_spec(**kw)
    if isinstance(kind, dict):
        return SyntheticSpec(**kind)
    raise ConfigError("cohort.synthetic must be 'canonical' or a generator mapping")


def infer_attribute(path: str | Path, name: str | None = None) -> GroupAttribute:
    """Attribute whose groups are the file's distinct labels in sorted order."""
    file_name, _ = read_cohort_header(path)
    labels = set()
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            if line.strip():
                labels.add(line.split("\t")[1])
    if len(labels) < 2:
        raise SchemaError(f"{path}: found {len(labels)} group label(s), need at least 2")
    return GroupAttribute(name or file_name, tuple(sorted(labels)))


def load_experiment_cohort(cfg: ExperimentConfig) -> Cohort:
    if "synthetic" in cfg.cohort:
        return generate_synthetic(synthetic_spec_from_config(cfg.cohort))
    path = cfg.cohort["path"]
    groups = cfg.attribute.get("groups")
    if groups:
        attr = GroupAttribute(cfg.attribute.get("name") or read_cohort_header(path)[0],
                              tuple(groups))
    else:
        attr = infer_attribute(path, cfg.attribute.get("name"))
    return load_cohort(path, attr)


def cell_seed(training_seed: int, fold: int) -> int:
    """Per-fold training seed shared by every lambda in that fold."""
    return int(np.random.SeedSequence([training_seed, fold]).generate_state(1)[0])


def cell_name(lam_index: int, fold: int) -> str:
    return f"lam{lam_index:02d}_fold{fold:02d}"


def _write_atomic(path: Path, text: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dumps_json(obj) -> str:
    return json.dumps(_jsonable(obj), indent=1, sort_keys=True)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return NA if math.isnan(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        return {k: _unjson(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_unjson(v) for v in obj]
    return float("nan") if obj == NA else obj


def report_from_json(text: str) -> FairnessReport:
    return FairnessReport.from_dict(_unjson(json.loads(text)))


# ---------------------------------------------------------------------------
# Running cells
# ---------------------------------------------------------------------------

_WORKER: dict[str, Any] = {}


def _init_worker(cohort, split, X):
    _WORKER.update(cohort=cohort, split=split, X=X)


def run_cell(cohort: Cohort, split: SplitPlan, fold: int, hp: Hyperparameters,
             penalty: PenaltyConfig, seed: int, X=None,
             checkpoint_path: Path | None = None) -> FairnessReport:
    """Train one (lambda, fold) model and evaluate it on the held-out test set."""
    params, tlog = train(cohort, split, fold, hp, penalty, seed)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, hp, tlog)
    X = design_matrix(cohort.features) if X is None else X
    test_idx = cohort.index_of(split.test_ids)
    f = predict_proba(params, X[test_idx])
    best = tlog.best
    meta = {**penalty.to_dict(), "fold": fold, "seed": seed,
            "best_iteration": tlog.best_iteration,
            "val_cross_entropy": best["val_cross_entropy"],
            "val_penalty": best["val_penalty"], "val_objective": best["val_objective"]}
    return evaluate(cohort.subset(test_idx), f, metadata=meta)


def _cell_job(args):
    lam_index, fold, hp, penalty, seed, cell_dir = args
    cell_dir = Path(cell_dir)
    cell_dir.mkdir(parents=True, exist_ok=True)
    try:
        report = run_cell(_WORKER["cohort"], _WORKER["split"], fold, hp, penalty, seed,
                          X=_WORKER["X"], checkpoint_path=cell_dir / "checkpoint.npz")
    except Exception as e:  # recorded per cell; the sweep continues
        log.exception("cell %s failed", cell_dir.name)
        fail = {"lambda": penalty.lam, "fold": fold, "error": repr(e),
                "traceback": traceback.format_exc()}
        _write_atomic(cell_dir / "failed.json", dumps_json(fail))
        return lam_index, fold, None, fail
    _write_atomic(cell_dir / "report.json", dumps_json(report.to_dict()))
    failed = cell_dir / "failed.json"
    if failed.exists():
        failed.unlink()
    return lam_index, fold, report, None


@dataclass
class SweepResult:
    config: dict
    lambdas: list[float]
    reports: dict[tuple[int, int], FairnessReport] = field(default_factory=dict)
    failures: dict[tuple[int, int], dict] = field(default_factory=dict)
    trained_cells: list[tuple[int, int]] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.failures

    def sorted_reports(self) -> list[FairnessReport]:
        return [self.reports[k] for k in sorted(self.reports)]

    def summary(self) -> list[dict]:
        return aggregate_rows(report_rows(self.sorted_reports()))

    def metric(self, lam_index: int, metric: str, group: str = OVERALL_ROW) -> list[float]:
        """Values of one metric across folds for the lambda at ``lam_index``."""
        out = []
        for (j, _), rep in sorted(self.reports.items()):
            if j == lam_index:
                src = rep.overall if group == OVERALL_ROW else rep.groups[group]
                out.append(src[metric])
        return out


def run_sweep(config: ExperimentConfig, resume: bool = True,
              cohort: Cohort | None = None) -> SweepResult:
    """Train baseline and every grid lambda on every fold; evaluate on the test set."""
    out = Path(config.output_dir)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    cohort = cohort if cohort is not None else load_experiment_cohort(config)
    split = make_split(cohort, float(config.split.get("test_fraction", 0.1)),
                       int(config.split.get("folds", 10)), int(config.split.get("seed", 0)))
    _write_atomic(out / "split.json", json.dumps(split.to_dict()))
    hp = config.hp()
    lambdas = config.all_lambdas()
    manifest = {"config": config.to_dict(), "config_hash": config.hash(),
                "library_version": __version__, "numpy_version": np.__version__,
                "seeds": {"training_seed": config.training_seed,
                          "split_seed": int(config.split.get("seed", 0)),
                          "cohort_seed": config.cohort.get("seed"),
                          "fold_seeds": [cell_seed(config.training_seed, f)
                                         for f in range(split.n_folds)]},
                "lambdas": lambdas}
    _write_atomic(out / "manifest.json", dumps_json(manifest))

    result = SweepResult(config.to_dict(), lambdas)
    jobs = []
    for j, lam in enumerate(lambdas):
        for fold in range(split.n_folds):
            cdir = out / "cells" / cell_name(j, fold)
            rep_path = cdir / "report.json"
            if resume and rep_path.exists():
                result.reports[j, fold] = report_from_json(rep_path.read_text(encoding="utf-8"))
                continue
            jobs.append((j, fold, hp, config.penalty_config(lam),
                         cell_seed(config.training_seed, fold), str(cdir)))

    X = design_matrix(cohort.features)
    if config.parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(config.parallelism, initializer=_init_worker,
                                 initargs=(cohort, split, X)) as pool:
            outcomes = list(pool.map(_cell_job, jobs))
    else:
        _init_worker(cohort, split, X)
        outcomes = [_cell_job(job) for job in jobs]
    for j, fold, report, fail in outcomes:
        result.trained_cells.append((j, fold))
        if report is None:
            result.failures[j, fold] = fail
        else:
            result.reports[j, fold] = report

    emit_report(result, "csv", out / "reports.csv")
    emit_summary(result, out / "summary.csv")
    emit_report(result, "json", out / "result.json")
    return result


def load_sweep(output_dir: str | Path) -> SweepResult:
    """Rebuild a SweepResult from the cell files of a sweep directory."""
    out = Path(output_dir)
    manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
    result = SweepResult(_unjson(manifest["config"]), manifest["lambdas"])
    for cdir in sorted((out / "cells").iterdir()):
        j, fold = int(cdir.name[3:5]), int(cdir.name[-2:])
        if (cdir / "report.json").exists():
            result.reports[j, fold] = report_from_json(
                (cdir / "report.json").read_text(encoding="utf-8"))
        elif (cdir / "failed.json").exists():
            result.failures[j, fold] = json.loads((cdir / "failed.json").read_text())
    return result


# ---------------------------------------------------------------------------
# Aggregation and output
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return NA
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return NA if math.isnan(v) else repr(float(v))
    return str(v)


def _parse(v: str):
    if v == NA:
        return float("nan")
    if v in ("true", "false"):
        return v == "true"
    try:
        return int(v)
    except ValueError:
        pass
    try:
        return float(v)
    except ValueError:
        return v


def report_rows(reports: Sequence[FairnessReport]) -> list[dict]:
    rows = []
    for rep in reports:
        meta = {c: rep.metadata.get(c) for c in METADATA_COLUMNS if c != "group"}
        meta["lambda"] = rep.metadata.get("lambda")
        for r in rep.rows():
            rows.append({**meta, **r})
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def read_csv_rows(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{k: _parse(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def aggregate_rows(rows: Sequence[dict]) -> list[dict]:
    """Mean and population SD (ddof=0) per (lambda, group, metric) over folds.

    Undefined values are left out; ``n`` counts the values that contributed.
    """
    buckets: dict[tuple, list[float]] = {}
    keys: dict[tuple, dict] = {}
    for r in rows:
        head = (r["criterion"], r["distance"], float(r["lambda"]), r["group"])
        for m in METRIC_COLUMNS:
            v = r.get(m)
            k = head + (m,)
            keys.setdefault(k, {"criterion": head[0], "distance": head[1],
                                "lambda": head[2], "group": head[3], "metric": m})
            lst = buckets.setdefault(k, [])
            if v is not None and not is_undefined(float(v)):
                lst.append(float(v))
    group_order: dict[str, int] = {}
    for r in rows:
        group_order.setdefault(r["group"], len(group_order))
    metric_order = {m: i for i, m in enumerate(METRIC_COLUMNS)}
    out = []
    for k in sorted(keys, key=lambda k: (k[0], k[1], k[2], group_order[k[3]],
                                         metric_order[k[4]])):
        vals = np.array(buckets[k])
        out.append({**keys[k],
                    "mean": float(vals.mean()) if len(vals) else float("nan"),
                    "sd": float(vals.std()) if len(vals) else float("nan"),
                    "n": len(vals)})
    return out


def emit_report(result: SweepResult, format: str, path: str | Path) -> Path:
    """Write per-cell reports as CSV (one row per fold, lambda, group) or JSON."""
    path = Path(path)
    if format == "csv":
        text = rows_to_csv(report_rows(result.sorted_reports()), REPORT_COLUMNS)
    elif format == "json":
        doc = {"config": result.config, "lambdas": result.lambdas,
               "cells": [{"lambda_index": j, "fold": f, "report": result.reports[j, f].to_dict()}
                         for j, f in sorted(result.reports)],
               "failures": [{"lambda_index": j, "fold": f, **result.failures[j, f]}
                            for j, f in sorted(result.failures)],
               "summary": result.summary()}
        text = dumps_json(doc) + "\n"
    else:
        raise ValueError("format must be 'csv' or 'json'")
    path.write_text(text, encoding="utf-8", newline="")
    return path


def emit_summary(result: SweepResult, path: str | Path) -> Path:
    """Long-format mean/SD table, one row per (lambda, group, metric)."""
    path = Path(path)
    path.write_text(rows_to_csv(result.summary(), SUMMARY_COLUMNS), encoding="utf-8",
                    newline="")
    return path
