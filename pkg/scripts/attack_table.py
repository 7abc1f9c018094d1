"""Error-rate table: every attack against FedAvg on the desk MNIST setup.

    python scripts/attack_table.py --out results/attack_table [--seeds 3]

Writes one run directory per (attack, seed) and a table.csv with the mean
final error per attack.
"""

import argparse
import csv
import dataclasses
from pathlib import Path

import numpy as np

from ldppoison.cli import execute
from ldppoison.config import AttackSpec, load

ROOT = Path(__file__).resolve().parents[1]

ATTACKS = {
    "none": None,
    "RPA": AttackSpec("rpa", ate=5),
    "LLRA-I": AttackSpec("llra", mode="input", ate=5),
    "LLRA-O": AttackSpec("llra", mode="output", ate=5),
    "TMMA-I": AttackSpec("tmma", mode="input", knowledge="partial", ate=5),
    "TMMA-O": AttackSpec("tmma", mode="output", knowledge="partial", ate=5),
}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(ROOT / "configs" / "mnist_ldpsgd.yaml"))
    ap.add_argument("--out", default="results/attack_table")
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--malicious", type=int, default=1, help="number of compromised clients")
    args = ap.parse_args()

    base = load(args.config)
    out = Path(args.out)
    rows = []
    for label, attack in ATTACKS.items():
        ids = () if attack is None else tuple(range(args.malicious))
        errs = []
        for seed in range(args.seeds):
            cfg = dataclasses.replace(base, attack=attack, malicious_ids=ids, global_seed=seed,
                                      name=f"{base.name}-{label}")
            _, row = execute(cfg, out / f"{label}-seed{seed}")
            errs.append(row["final_error_rate"])
        rows.append({"attack": label, "protocol": base.protocol.protocol, "n_malicious": len(ids),
                     "mean_final_error_rate": float(np.mean(errs)), "std": float(np.std(errs))})
        print(f"{label:8s} {np.mean(errs):.3f} +- {np.std(errs):.3f}")
    with (out / "table.csv").open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


if __name__ == "__main__":
    main()
