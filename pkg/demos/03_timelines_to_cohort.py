"""From raw event timelines to a sparse cohort, with cuts learned on train only.

Run: python demos/03_timelines_to_cohort.py
"""
import numpy as np

from fairrisk.cohort import GroupAttribute
from fairrisk.features import (Event, Timeline, build_vocabulary, default_day_intervals,
                               extract, extract_cohort)

rng = np.random.default_rng(0)
timelines, labels = [], {}
for i in range(40):
    events = [Event(101, -24.0 * float(rng.integers(1, 700)), float(rng.normal(7, 2)), 4.0, 10.0),
              Event(202, -24.0 * float(rng.integers(1, 30)))]
    sex = "F" if i % 2 else "M"
    timelines.append(Timeline(f"p{i}", events, demographics=(900 + i % 2,)))
    labels[f"p{i}"] = (sex, int(rng.random() < 0.2))

train = timelines[:30]
vocab = build_vocabulary(train, default_day_intervals())
print(f"vocabulary: {len(vocab.keys)} features learned from {len(train)} training timelines")
print("first timeline sets features", extract(timelines[0], vocab))

cohort = extract_cohort(timelines, labels, GroupAttribute("sex", ("F", "M")), vocab)
print(f"cohort: {len(cohort.record_ids)} records x {cohort.features.shape[1]} features, "
      f"{cohort.features.nnz} nonzeros")
