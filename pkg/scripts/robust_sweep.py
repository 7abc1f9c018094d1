"""Compromised-fraction sweep against a robust aggregation rule.

    python scripts/robust_sweep.py --rule multikrum --fractions 0,0.1,0.2,0.3 --out results/mk

Compares RPA, LLRA-I and AdaPA; writes curves.csv with one row per
(attack, fraction) holding the seed-averaged final error.
"""

import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from ldppoison.aggregation import AggregationConfig
from ldppoison.cli import apply_axis, execute
from ldppoison.config import AttackSpec, load

ROOT = Path(__file__).resolve().parents[1]

ATTACKS = {
    "RPA": AttackSpec("rpa", ate=5),
    "LLRA-I": AttackSpec("llra", mode="input", ate=5),
    "AdaPA": AttackSpec("adapa", knowledge="global", ate=5, scal=1.0),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "mnist_ldpsgd.yaml"))
    ap.add_argument("--rule", choices=["multikrum", "trimmedmean"], default="multikrum")
    ap.add_argument("--fractions", default="0,0.1,0.2,0.3")
    ap.add_argument("--alpha", type=float, default=None, help="override the Dirichlet concentration")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--out", default="results/robust_sweep")
    args = ap.parse_args()

    base = load(args.config)
    n = base.num_clients
    agg = AggregationConfig("multikrum", f=max(0, min(n // 2 - 1, n - 3)), k=n // 2) if args.rule == "multikrum" \
        else AggregationConfig("trimmedmean", beta=max(1, n // 5))
    base = dataclasses.replace(base, aggregation=agg)
    if args.alpha is not None:
        base = apply_axis(base, "alpha", args.alpha)
    out = Path(args.out)
    rows = []
    for label, attack in ATTACKS.items():
        for frac in (float(v) for v in args.fractions.split(",")):
            errs = []
            for seed in range(args.seeds):
                cfg = apply_axis(dataclasses.replace(base, attack=attack, global_seed=seed), "fraction_malicious", frac)
                _, row = execute(cfg, out / f"{label}-f{frac:g}-seed{seed}")
                errs.append(row["final_error_rate"])
            rows.append({"attack": label, "fraction": frac, "mean_final_error_rate": float(np.mean(errs))})
            print(f"{label:7s} fraction {frac:.2f}: {np.mean(errs):.3f}")
    with (out / "curves.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
