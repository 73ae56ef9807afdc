"""Six predictions, two groups: every fairness number you can check by hand.

Run: python demos/01_metrics_by_hand.py
"""
from fairrisk.metrics import evaluate_arrays, parity_decomposition

# group "a" gets a flat 0.2, group "b" a flat 0.6
f = [0.2, 0.2, 0.2, 0.6, 0.6, 0.6]
y = [1, 0, 0, 1, 1, 0]
a = [0, 0, 0, 1, 1, 1]

print("Per-group comparison against everyone (EMD form)")
for label, stratum in (("all records", None), ("outcome = 1", 1), ("outcome = 0", 0)):
    res = parity_decomposition(f, y, a, stratum=stratum, form="emd")
    comps = ", ".join(f"{c:.4f}" for c in res.components)
    print(f"  {label:12s} components [{comps}]  sum {res.aggregate:.4f}")

# the two conditional strata add up to the equalized-odds gap
rep = evaluate_arrays(f, y, a, ["a", "b"])
o = rep.overall
print(f"\nEqOpp + (outcome=0 sum) = {o['m_eqopp_emd']:.4f} + "
      f"{parity_decomposition(f, y, a, 0).aggregate:.4f} = {o['m_eqodds_emd']:.4f}")

print("\nMetric       overall      a        b")
for m in ("auroc", "average_precision", "ace", "ace_signed", "rce", "xauc_1", "xauc_0"):
    row = [o.get(m, float("nan"))] + [rep.groups[g].get(m, float("nan")) for g in "ab"]
    print(f"{m:18s}" + "".join(f"{v:9.4f}" for v in row))

problems = rep.check_invariants(1e-12)
print("\ninvariants hold" if not problems else f"\ninvariant violations: {problems}")
