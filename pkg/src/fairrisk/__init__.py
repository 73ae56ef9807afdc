"""Fairness-penalized training and group-fairness evaluation of binary risk models."""

__version__ = "0.1.0"

from .cohort import (Cohort, CohortRecord, GroupAttribute, SplitPlan, SyntheticSpec,
                     canonical_spec, generate_synthetic, incidence_table, load_cohort,
                     make_split, write_cohort)
from .metrics import (UNDEFINED, FairnessReport, auroc, average_precision, emd_1d,
                      evaluate, fit_calibrator, is_undefined, parity_decomposition, xauc)
from .model import Hyperparameters, ModelParameters, PRESETS, forward, train
from .penalty import PenaltyConfig, mean_diff_penalty, mmd_sq, regularizer

__all__ = [
    "Cohort", "CohortRecord", "GroupAttribute", "SplitPlan", "SyntheticSpec",
    "canonical_spec", "generate_synthetic", "incidence_table", "load_cohort", "make_split",
    "write_cohort", "UNDEFINED", "FairnessReport", "auroc", "average_precision", "emd_1d",
    "evaluate", "fit_calibrator", "is_undefined", "parity_decomposition", "xauc",
    "Hyperparameters", "ModelParameters", "PRESETS", "forward", "train", "PenaltyConfig",
    "mean_diff_penalty", "mmd_sq", "regularizer",
]
