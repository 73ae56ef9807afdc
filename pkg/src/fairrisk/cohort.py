"""Labeled, group-annotated cohorts: file I/O, synthetic generation, splits."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

COHORT_MAGIC = "#fairrisk-cohort"
COHORT_VERSION = "v1"


class CohortFormatError(ValueError):
    """A cohort file line could not be parsed or violates a record invariant."""


class SchemaError(ValueError):
    """A record references a group label the attribute does not declare."""


class InsufficientDataError(ValueError):
    pass


@dataclass(frozen=True)
class GroupAttribute:
    name: str
    group_names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "group_names", tuple(self.group_names))
        if len(self.group_names) < 2:
            raise ValueError("a group attribute needs at least two groups")
        if len(set(self.group_names)) != len(self.group_names):
            raise ValueError(f"duplicate group labels in {self.group_names}")

    @property
    def n_groups(self) -> int:
        return len(self.group_names)

    def index(self, label: str) -> int:
        try:
            return self.group_names.index(label)
        except ValueError:
            raise SchemaError(
                f"unknown group label {label!r} for attribute {self.name!r}"
            ) from None


@dataclass(frozen=True)
class CohortRecord:
    record_id: str
    features: tuple[int, ...]  # sorted indices whose value is 1
    outcome: int
    group: int


@dataclass
class Cohort:
    """Column-oriented cohort.

    ``features`` is a CSR matrix of 0/1 values with one row per record.
    ``true_prob`` is only set by the synthetic generator and holds the
    generating P(y=1 | x, a) of each record.
    """

    attribute: GroupAttribute
    record_ids: list[str]
    groups: np.ndarray
    outcomes: np.ndarray
    features: sp.csr_matrix
    true_prob: np.ndarray | None = None

    def __post_init__(self):
        self.groups = np.asarray(self.groups, dtype=np.int64)
        self.outcomes = np.asarray(self.outcomes, dtype=np.int64)
        self.features = sp.csr_matrix(self.features, dtype=np.float64)
        n = len(self.record_ids)
        if self.groups.shape != (n,) or self.outcomes.shape != (n,):
            raise ValueError("groups and outcomes must align with record_ids")
        if self.features.shape[0] != n:
            raise ValueError("feature matrix row count must equal record count")
        if len(set(self.record_ids)) != n:
            raise ValueError("record ids must be unique")
        if n and not np.isin(self.outcomes, (0, 1)).all():
            raise ValueError("outcomes must be 0 or 1")
        if n and (self.groups.min() < 0 or self.groups.max() >= self.n_groups):
            raise ValueError("group index out of range")

    def __len__(self) -> int:
        return len(self.record_ids)

    @property
    def n_groups(self) -> int:
        return self.attribute.n_groups

    @property
    def vocab_size(self) -> int:
        return self.features.shape[1]

    @property
    def records(self) -> list[CohortRecord]:
        X = self.features
        out = []
        for i, rid in enumerate(self.record_ids):
            cols = X.indices[X.indptr[i]:X.indptr[i + 1]]
            out.append(CohortRecord(rid, tuple(sorted(int(c) for c in cols)),
                                    int(self.outcomes[i]), int(self.groups[i])))
        return out

    def index_of(self, record_ids: Iterable[str]) -> np.ndarray:
        lookup = {rid: i for i, rid in enumerate(self.record_ids)}
        return np.array([lookup[r] for r in record_ids], dtype=np.int64)

    def subset(self, idx: Sequence[int] | np.ndarray) -> "Cohort":
        idx = np.asarray(idx, dtype=np.int64)
        return Cohort(
            attribute=self.attribute,
            record_ids=[self.record_ids[i] for i in idx],
            groups=self.groups[idx],
            outcomes=self.outcomes[idx],
            features=self.features[idx],
            true_prob=None if self.true_prob is None else self.true_prob[idx],
        )

    @classmethod
    def from_records(cls, records: Sequence[CohortRecord], attribute: GroupAttribute,
                     vocab_size: int) -> "Cohort":
        rows, cols = [], []
        for i, rec in enumerate(records):
            for j in rec.features:
                if not 0 <= j < vocab_size:
                    raise ValueError(
                        f"record {rec.record_id!r}: feature index {j} outside vocabulary"
                    )
                rows.append(i)
                cols.append(j)
        X = sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                          shape=(len(records), vocab_size))
        return cls(attribute, [r.record_id for r in records],
                   [r.group for r in records], [r.outcome for r in records], X)


# ---------------------------------------------------------------------------
# File format
#
#   line 1:  #fairrisk-cohort <TAB> v1 <TAB> <attribute name> <TAB> <vocab size>
#   others:  record_id <TAB> group label <TAB> outcome <TAB> sparse features
#
# The sparse feature field is a space-separated list of ``index:1`` pairs in
# increasing index order and may be empty. Blank lines are ignored.
# ---------------------------------------------------------------------------

def write_cohort(cohort: Cohort, path: str | Path) -> None:
    names = cohort.attribute.group_names
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{COHORT_MAGIC}\t{COHORT_VERSION}\t{cohort.attribute.name}"
                 f"\t{cohort.vocab_size}\n")
        for rec in cohort.records:
            feats = " ".join(f"{j}:1" for j in rec.features)
            fh.write(f"{rec.record_id}\t{names[rec.group]}\t{rec.outcome}\t{feats}\n")


def read_cohort_header(path: str | Path) -> tuple[str, int]:
    with open(path, encoding="utf-8") as fh:
        return _parse_header(fh.readline())


def _parse_header(line: str) -> tuple[str, int]:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4 or parts[0] != COHORT_MAGIC:
        raise CohortFormatError(f"line 1: expected '{COHORT_MAGIC}' header")
    if parts[1] != COHORT_VERSION:
        raise CohortFormatError(f"line 1: unsupported cohort version {parts[1]!r}")
    try:
        vocab_size = int(parts[3])
    except ValueError:
        raise CohortFormatError("line 1: vocabulary size is not an integer") from None
    if vocab_size < 0:
        raise CohortFormatError("line 1: negative vocabulary size")
    return parts[2], vocab_size


def load_cohort(path: str | Path, attribute: GroupAttribute) -> Cohort:
    """Read a cohort file, mapping group labels to indices in ``attribute`` order.

    Raises:
        CohortFormatError: malformed line (message carries the line number) or a
            record violating an invariant (message names the record).
        SchemaError: a group label missing from ``attribute``.
    """
    records = []
    with open(path, encoding="utf-8") as fh:
        name, vocab_size = _parse_header(fh.readline())
        if name != attribute.name:
            raise SchemaError(
                f"file declares attribute {name!r}, expected {attribute.name!r}"
            )
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            records.append(_parse_record(line, lineno, attribute, vocab_size))
    return Cohort.from_records(records, attribute, vocab_size)


def _parse_record(line, lineno, attribute, vocab_size) -> CohortRecord:
    parts = line.split("\t")
    if len(parts) == 3:
        parts.append("")
    if len(parts) != 4:
        raise CohortFormatError(f"line {lineno}: expected 4 tab-separated fields, "
                                f"got {len(parts)}")
    rid, label, outcome_s, feats_s = parts
    if not rid:
        raise CohortFormatError(f"line {lineno}: empty record id")
    try:
        outcome = int(outcome_s)
    except ValueError:
        raise CohortFormatError(
            f"line {lineno}: record {rid!r} has non-integer outcome {outcome_s!r}"
        ) from None
    if outcome not in (0, 1):
        raise CohortFormatError(
            f"line {lineno}: record {rid!r} has outcome {outcome}, must be 0 or 1"
        )
    group = attribute.index(label)
    feats = []
    for tok in feats_s.split():
        idx_s, _, val_s = tok.partition(":")
        try:
            idx, val = int(idx_s), int(val_s)
        except ValueError:
            raise CohortFormatError(
                f"line {lineno}: record {rid!r} has malformed feature {tok!r}"
            ) from None
        if val != 1:
            raise CohortFormatError(
                f"line {lineno}: record {rid!r} feature {idx} has value {val}, must be 1"
            )
        if not 0 <= idx < vocab_size:
            raise CohortFormatError(
                f"line {lineno}: record {rid!r} feature {idx} outside vocabulary "
                f"of size {vocab_size}"
            )
        feats.append(idx)
    return CohortRecord(rid, tuple(sorted(set(feats))), outcome, group)


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    test_ids: tuple[str, ...]
    folds: tuple[tuple[str, ...], ...]
    seed: int | None = None

    @property
    def n_folds(self) -> int:
        return len(self.folds)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "test_ids": list(self.test_ids),
                "folds": [list(f) for f in self.folds]}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        return cls(tuple(d["test_ids"]), tuple(tuple(f) for f in d["folds"]),
                   d.get("seed"))


def test_size(n: int, test_fraction: float) -> int:
    """round(n * fraction) with halves rounded up."""
    return int(np.floor(n * test_fraction + 0.5))


def make_split(cohort: Cohort, test_fraction: float = 0.1, folds: int = 10,
               seed: int = 0) -> SplitPlan:
    """Hold out a random test set and partition the rest into near-equal folds.

    Records are permuted with numpy's PCG64 generator seeded by ``seed``. The
    first ``round(n * test_fraction)`` permuted records form the test set; the
    remainder is dealt into ``folds`` contiguous chunks, with the earliest folds
    taking one extra record when the count does not divide evenly.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    if folds < 1:
        raise ValueError("folds must be at least 1")
    n = len(cohort)
    if n < folds + 1:
        raise InsufficientDataError(f"{n} records cannot fill a test set and {folds} folds")
    n_test = test_size(n, test_fraction)
    if n - n_test < folds:
        raise InsufficientDataError(
            f"only {n - n_test} records remain after holding out {n_test} for testing"
        )
    perm = np.random.default_rng(seed).permutation(n)
    ids = [cohort.record_ids[i] for i in perm]
    rest = ids[n_test:]
    base, extra = divmod(len(rest), folds)
    out, start = [], 0
    for f in range(folds):
        size = base + (1 if f < extra else 0)
        out.append(tuple(rest[start:start + size]))
        start += size
    return SplitPlan(tuple(ids[:n_test]), tuple(out), seed)


# ---------------------------------------------------------------------------
# Synthetic cohorts
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    """Parameters of a group-wise logistic generating process.

    Features are independent Bernoulli(``density``) flags. Outcomes are drawn
    as Bernoulli(sigmoid(coefficients[a] . x + intercepts[a])). With
    ``include_group_features`` the one-hot group indicator is appended to the
    feature vector, after the generated columns.
    """

    n: int
    group_weights: Sequence[float]
    coefficients: Sequence[Sequence[float]]
    intercepts: Sequence[float]
    density: float = 0.1
    seed: int = 0
    group_names: Sequence[str] | None = None
    attribute_name: str = "group"
    include_group_features: bool = True

    def __post_init__(self):
        self.group_weights = np.asarray(self.group_weights, dtype=np.float64)
        self.coefficients = np.atleast_2d(np.asarray(self.coefficients, dtype=np.float64))
        self.intercepts = np.asarray(self.intercepts, dtype=np.float64)
        k = self.group_weights.size
        if self.n <= 0:
            raise ValueError("n must be positive")
        if k < 2:
            raise ValueError("at least two groups are required")
        if (self.group_weights < 0).any() or abs(self.group_weights.sum() - 1) > 1e-12:
            raise ValueError("group_weights must be a probability vector")
        if self.coefficients.shape[0] != k or self.intercepts.shape != (k,):
            raise ValueError("need one coefficient row and one intercept per group")
        if self.coefficients.shape[1] < 1:
            raise ValueError("feature dimensionality must be positive")
        if not 0 <= self.density <= 1:
            raise ValueError("density must lie in [0, 1]")
        if self.group_names is None:
            self.group_names = tuple(f"g{i}" for i in range(k))
        if len(self.group_names) != k:
            raise ValueError("group_names length must equal group count")

    @property
    def n_groups(self) -> int:
        return self.group_weights.size

    @property
    def n_features(self) -> int:
        return self.coefficients.shape[1]


def generate_synthetic(spec: SyntheticSpec) -> Cohort:
    rng = np.random.default_rng(spec.seed)
    k, m, n = spec.n_groups, spec.n_features, spec.n
    groups = rng.choice(k, size=n, p=spec.group_weights)
    X = (rng.random((n, m)) < spec.density).astype(np.float64)
    logits = np.einsum("ij,ij->i", X, spec.coefficients[groups]) + spec.intercepts[groups]
    prob = expit(logits)
    y = (rng.random(n) < prob).astype(np.int64)
    if spec.include_group_features:
        X = np.hstack([X, np.eye(k)[groups]])
    width = len(str(n - 1))
    ids = [f"s{i:0{width}d}" for i in range(n)]
    attr = GroupAttribute(spec.attribute_name, tuple(spec.group_names))
    return Cohort(attr, ids, groups, y, sp.csr_matrix(X), true_prob=prob)


def _intercept_for_rate(coef: np.ndarray, density: float, rate: float,
                        n_ref: int = 200_000, seed: int = 12345) -> float:
    from scipy.optimize import brentq

    X = np.random.default_rng(seed).random((n_ref, coef.size)) < density
    z = X @ coef
    return brentq(lambda b: expit(z + b).mean() - rate, -30, 30, xtol=1e-12)


def canonical_spec(seed: int = 0, n: int = 20_000,
                   base_rates: Sequence[float] = (0.10, 0.30),
                   group_weights: Sequence[float] = (0.7, 0.3),
                   n_features: int = 30, density: float = 0.2) -> SyntheticSpec:
    """Two-group cohort with a base-rate gap and informative sparse features.

    Both groups share one coefficient draw plus a group-specific perturbation;
    intercepts are solved so that each group's expected outcome rate matches
    ``base_rates``. The coefficients depend only on the shape arguments, so
    ``seed`` changes the sampled cohort but not the generating process.
    """
    crng = np.random.default_rng(2024)
    shared = crng.normal(0.0, 0.9, size=n_features)
    coefs = np.stack([shared + crng.normal(0.0, 0.3, size=n_features)
                      for _ in base_rates])
    intercepts = [_intercept_for_rate(c, density, r) for c, r in zip(coefs, base_rates)]
    return SyntheticSpec(n=n, group_weights=group_weights, coefficients=coefs,
                         intercepts=intercepts, density=density, seed=seed,
                         group_names=tuple(f"group_{i}" for i in range(len(base_rates))),
                         attribute_name="group")


# ---------------------------------------------------------------------------
# Summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GroupIncidence:
    group: str
    count: int
    incidence: float  # nan when the group is empty


def incidence_table(cohort: Cohort, attribute: GroupAttribute | None = None
                    ) -> list[GroupIncidence]:
    attribute = attribute or cohort.attribute
    if len(cohort) == 0:
        raise ValueError("incidence table of an empty cohort")
    counts = np.bincount(cohort.groups, minlength=attribute.n_groups)
    positives = np.bincount(cohort.groups, weights=cohort.outcomes,
                            minlength=attribute.n_groups)
    rows = []
    for k, name in enumerate(attribute.group_names):
        c = int(counts[k])
        rows.append(GroupIncidence(name, c, positives[k] / c if c else float("nan")))
    return rows


def merge_rare_groups(labels: Sequence[str], outcomes: Sequence[int], min_outcomes: int,
                      other_label: str = "Other", keep: Iterable[str] = ()
                      ) -> list[str]:
    """Relabel groups with fewer than ``min_outcomes`` positive outcomes as ``other_label``."""
    keep = set(keep)
    pos: dict[str, int] = {}
    for lab, y in zip(labels, outcomes):
        pos[lab] = pos.get(lab, 0) + int(y)
    rare = {lab for lab, c in pos.items() if c < min_outcomes and lab not in keep}
    return [other_label if lab in rare else lab for lab in labels]
