"""Binary features from longitudinal event timelines.

For every time window relative to the index time, each concept observed in
the window becomes an occurrence flag. Numeric results add flags for values
above or below their reference range and for the quintile bin of the value,
with bin edges learned from the training records only. Demographic concepts
are time-agnostic flags.

Timestamps are hour offsets from the index time (negative = before index);
a window (lower, upper] contains t when lower < t <= upper.
"""
from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp

from .cohort import Cohort, GroupAttribute

OCCURRENCE = "occurrence"
ABOVE_RANGE = "above_range"
BELOW_RANGE = "below_range"
QUINTILE = "quintile"
DEMOGRAPHIC = "demographic"
_KIND_ORDER = {DEMOGRAPHIC: 0, OCCURRENCE: 1, ABOVE_RANGE: 2, BELOW_RANGE: 3, QUINTILE: 4}
DEMOGRAPHICS_WINDOW = "demographics"
QUINTILE_PERCENTILES = (20, 40, 60, 80)
MIN_QUINTILE_OBSERVATIONS = 5


class TimelineFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Event:
    concept_id: int
    timestamp: float
    numeric_value: float | None = None
    reference_low: float | None = None
    reference_high: float | None = None

    def __post_init__(self):
        if (self.reference_low is not None and self.reference_high is not None
                and self.reference_low > self.reference_high):
            raise ValueError(f"concept {self.concept_id}: reference_low > reference_high")


@dataclass
class Timeline:
    record_id: str
    events: list[Event] = field(default_factory=list)
    demographics: tuple[int, ...] = ()

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: e.timestamp)
        self.demographics = tuple(self.demographics)


@dataclass(frozen=True)
class Interval:
    name: str
    lower: float  # exclusive; -inf allowed
    upper: float  # inclusive

    def __post_init__(self):
        if not self.lower < self.upper:
            raise ValueError(f"interval {self.name!r} is empty")

    def contains(self, t: float) -> bool:
        return self.lower < t <= self.upper


def days_prior(name: str, from_day: int, to_day: int) -> Interval:
    """Window covering whole days ``from_day`` back to ``to_day`` before the index."""
    return Interval(name, -24.0 * (from_day + 1), -24.0 * to_day)


def default_day_intervals() -> list[Interval]:
    return [days_prior("d29_1", 29, 1), days_prior("d89_30", 89, 30),
            days_prior("d179_90", 179, 90), days_prior("d364_180", 364, 180),
            Interval("any_prior", -math.inf, 0.0)]


def default_hour_intervals() -> list[Interval]:
    return [Interval("h4_0", -4, 0), Interval("h12_4", -12, -4), Interval("h24_12", -24, -12),
            Interval("h72_24", -72, -24), Interval("h168_72", -168, -72)]


def intervals_from_config(items: Sequence[Mapping]) -> list[Interval]:
    """Parse ``[{name, lower, upper}, ...]``; a null lower bound means -inf."""
    out = []
    for it in items:
        lo = it.get("lower")
        out.append(Interval(str(it["name"]), -math.inf if lo is None else float(lo),
                            float(it["upper"])))
    if len({iv.name for iv in out}) != len(out):
        raise ValueError("interval names must be unique")
    return out


FeatureKey = tuple  # (window name, concept_id, kind, bin)


@dataclass
class FeatureVocabulary:
    keys: list[FeatureKey]
    quintile_cuts: dict[tuple[str, int], tuple[float, ...]]
    intervals: list[Interval]

    def __post_init__(self):
        self.keys = [tuple(k) for k in self.keys]
        self.index = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ValueError("duplicate feature keys")
        for key, cuts in self.quintile_cuts.items():
            if len(cuts) != len(QUINTILE_PERCENTILES) or np.any(np.diff(cuts) < 0):
                raise ValueError(f"quintile cuts for {key} must be 4 nondecreasing values")

    def __len__(self) -> int:
        return len(self.keys)

    def to_dict(self) -> dict:
        return {
            "keys": [list(k) for k in self.keys],
            "quintile_cuts": [[w, c, list(cuts)] for (w, c), cuts in
                              sorted(self.quintile_cuts.items())],
            "intervals": [{"name": iv.name,
                           "lower": None if math.isinf(iv.lower) else iv.lower,
                           "upper": iv.upper} for iv in self.intervals],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureVocabulary":
        return cls([tuple(k) for k in d["keys"]],
                   {(w, int(c)): tuple(cuts) for w, c, cuts in d["quintile_cuts"]},
                   intervals_from_config(d["intervals"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "FeatureVocabulary":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def quintile_cuts(values) -> tuple[float, ...]:
    """20/40/60/80th percentiles with linear interpolation between order statistics."""
    return tuple(float(c) for c in np.percentile(np.asarray(values, dtype=np.float64),
                                                 QUINTILE_PERCENTILES, method="linear"))


def quintile_bin(cuts: Sequence[float], value: float) -> int:
    """Bin 0..4; a value equal to a cut lands in the higher bin."""
    return int(np.searchsorted(np.asarray(cuts), value, side="right"))


def build_vocabulary(timelines: Iterable[Timeline], intervals: Sequence[Interval],
                     min_quintile_observations: int = MIN_QUINTILE_OBSERVATIONS
                     ) -> FeatureVocabulary:
    """Assign feature indices from training timelines.

    Every (window, concept) seen in training gets an occurrence feature; range
    flags exist where training events carried the matching reference bound;
    quintile bins exist where the window held at least
    ``min_quintile_observations`` numeric values of the concept.
    """
    timelines = list(timelines)
    if not timelines:
        raise ValueError("cannot build a vocabulary from zero timelines")
    intervals = list(intervals)
    keys: set[FeatureKey] = set()
    numeric: dict[tuple[str, int], list[float]] = defaultdict(list)
    for tl in timelines:
        for c in tl.demographics:
            keys.add((DEMOGRAPHICS_WINDOW, int(c), DEMOGRAPHIC, 0))
        for ev in tl.events:
            for iv in intervals:
                if not iv.contains(ev.timestamp):
                    continue
                keys.add((iv.name, ev.concept_id, OCCURRENCE, 0))
                if ev.numeric_value is None:
                    continue
                numeric[iv.name, ev.concept_id].append(ev.numeric_value)
                if ev.reference_high is not None:
                    keys.add((iv.name, ev.concept_id, ABOVE_RANGE, 0))
                if ev.reference_low is not None:
                    keys.add((iv.name, ev.concept_id, BELOW_RANGE, 0))
    cuts = {}
    for wc, vals in numeric.items():
        if len(vals) >= min_quintile_observations:
            cuts[wc] = quintile_cuts(vals)
            keys.update((wc[0], wc[1], QUINTILE, b) for b in range(len(QUINTILE_PERCENTILES) + 1))
    window_pos = {DEMOGRAPHICS_WINDOW: -1, **{iv.name: i for i, iv in enumerate(intervals)}}
    ordered = sorted(keys, key=lambda k: (window_pos[k[0]], k[1], _KIND_ORDER[k[2]], k[3]))
    return FeatureVocabulary(ordered, cuts, intervals)


def extract(timeline: Timeline, vocab: FeatureVocabulary) -> tuple[int, ...]:
    """Sorted indices of the features set for ``timeline``; unseen keys are skipped."""
    hits = set()
    idx = vocab.index

    def add(key):
        j = idx.get(key)
        if j is not None:
            hits.add(j)

    for c in timeline.demographics:
        add((DEMOGRAPHICS_WINDOW, int(c), DEMOGRAPHIC, 0))
    for ev in timeline.events:
        for iv in vocab.intervals:
            if not iv.contains(ev.timestamp):
                continue
            add((iv.name, ev.concept_id, OCCURRENCE, 0))
            v = ev.numeric_value
            if v is None:
                continue
            if ev.reference_high is not None and v > ev.reference_high:
                add((iv.name, ev.concept_id, ABOVE_RANGE, 0))
            if ev.reference_low is not None and v < ev.reference_low:
                add((iv.name, ev.concept_id, BELOW_RANGE, 0))
            cuts = vocab.quintile_cuts.get((iv.name, ev.concept_id))
            if cuts is not None:
                add((iv.name, ev.concept_id, QUINTILE, quintile_bin(cuts, v)))
    return tuple(sorted(hits))


def extract_matrix(timelines: Sequence[Timeline], vocab: FeatureVocabulary) -> sp.csr_matrix:
    rows, cols = [], []
    for i, tl in enumerate(timelines):
        feats = extract(tl, vocab)
        rows.extend([i] * len(feats))
        cols.extend(feats)
    return sp.csr_matrix((np.ones(len(rows)), (rows, cols)),
                         shape=(len(timelines), len(vocab)))


def extract_cohort(timelines: Sequence[Timeline], labels: Mapping[str, tuple[str, int]],
                   attribute: GroupAttribute, vocab: FeatureVocabulary) -> Cohort:
    """Cohort of the timelines that have a (group label, outcome) entry in ``labels``."""
    kept = [tl for tl in timelines if tl.record_id in labels]
    groups = [attribute.index(labels[tl.record_id][0]) for tl in kept]
    outcomes = [int(labels[tl.record_id][1]) for tl in kept]
    return Cohort(attribute, [tl.record_id for tl in kept], groups, outcomes,
                  extract_matrix(kept, vocab))


# ---------------------------------------------------------------------------
# Timeline file (UTF-8, tab-separated, one item per line, any order):
#
#   D <TAB> record_id <TAB> comma-separated demographic concept ids
#   E <TAB> record_id <TAB> concept_id <TAB> hours <TAB> value <TAB> low <TAB> high
#
# value, low and high may be empty. Lines starting with '#' are comments.
# Labels file: header ``record_id<TAB>group<TAB>outcome`` then one row per record.
# ---------------------------------------------------------------------------

def _opt_float(s: str) -> float | None:
    return float(s) if s.strip() else None


def read_timelines(path: str | Path) -> list[Timeline]:
    events: dict[str, list[Event]] = defaultdict(list)
    demo: dict[str, tuple[int, ...]] = {}
    order: dict[str, None] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if parts[0] == "D" and len(parts) == 3:
                    rid = parts[1]
                    demo[rid] = tuple(int(c) for c in parts[2].split(",") if c.strip())
                elif parts[0] == "E" and len(parts) == 7:
                    rid = parts[1]
                    events[rid].append(Event(int(parts[2]), float(parts[3]),
                                             _opt_float(parts[4]), _opt_float(parts[5]),
                                             _opt_float(parts[6])))
                else:
                    raise ValueError("unrecognized line layout")
            except ValueError as e:
                raise TimelineFormatError(f"line {lineno}: {e}") from None
            order.setdefault(rid, None)
    return [Timeline(rid, events.get(rid, []), demo.get(rid, ())) for rid in order]


def write_timelines(timelines: Iterable[Timeline], path: str | Path) -> None:
    def fmt(x):
        return "" if x is None else repr(float(x))

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tl in timelines:
            fh.write(f"D\t{tl.record_id}\t{','.join(str(c) for c in tl.demographics)}\n")
            for ev in tl.events:
                fh.write(f"E\t{tl.record_id}\t{ev.concept_id}\t{fmt(ev.timestamp)}\t"
                         f"{fmt(ev.numeric_value)}\t{fmt(ev.reference_low)}\t"
                         f"{fmt(ev.reference_high)}\n")


def read_labels(path: str | Path) -> dict[str, tuple[str, int]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["record_id", "group", "outcome"]:
            raise TimelineFormatError("labels header must be record_id, group, outcome")
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise TimelineFormatError(f"line {lineno}: malformed label row")
            out[parts[0]] = (parts[1], int(parts[2]))
    return out
