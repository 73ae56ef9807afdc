"""How strong a fairness penalty has to be before the parity gap closes.

Trains one model per lambda on a small synthetic cohort where one group has
three times the base rate of the other, then prints the parity gap next to
the per-group AUROC. Takes under a minute.

Run: python demos/02_penalty_tradeoff.py [--criterion equalized_odds] [--distance mean]
"""
import argparse
import tempfile

from fairrisk.experiment import ExperimentConfig, run_sweep

parser = argparse.ArgumentParser()
parser.add_argument("--criterion", default="demographic_parity")
parser.add_argument("--distance", default="mmd")
parser.add_argument("--n", type=int, default=8000)
args = parser.parse_args()

with tempfile.TemporaryDirectory() as tmp:
    cfg = ExperimentConfig.from_dict({
        "cohort": {"synthetic": "canonical", "n": args.n, "seed": 0},
        "hyperparameters": {"preset": "synthetic_small"},
        "penalty": {"criterion": args.criterion, "distance": args.distance},
        "lambda_grid": {"count": 5, "min": 1e-2, "max": 10.0},
        "split": {"test_fraction": 0.2, "folds": 1, "seed": 0},
        "output_dir": tmp})
    res = run_sweep(cfg)

names = res.reports[0, 0].group_names
print(f"{args.criterion} / {args.distance}")
print(f"{'lambda':>8} {'M_DP':>8} {'M_EqOdds':>9} " + " ".join(f"AUROC[{g}]" for g in names))
for j, lam in enumerate(res.lambdas):
    rep = res.reports[j, 0]
    aucs = " ".join(f"{rep.groups[g]['auroc']:>8.3f}" for g in names)
    print(f"{lam:8.3g} {rep.overall['m_dp_emd']:8.4f} {rep.overall['m_eqodds_emd']:9.4f} {aucs}")
