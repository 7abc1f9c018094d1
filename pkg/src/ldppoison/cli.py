"""Command-line front end.

    ldppoison run --config exp.yaml --out results/exp [--seed 7]
    ldppoison sweep --config exp.yaml --axis alpha --values 1,500 --out results/alpha
    ldppoison partition-report --config exp.yaml [--out hist.csv]

Set ``LDPPOISON_LOG`` (DEBUG, INFO, WARNING, ...) for log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, config_hash, load, to_dict
from .data import PartitionConfig, dirichlet_partition, tv_distance
from .simulator import RoundRecord, Simulation, derive_seed, load_data

log = logging.getLogger("ldppoison")

# Frozen: plotting scripts read these by name.
SUMMARY_COLUMNS = (
    "name", "protocol", "dataset", "model", "aggregation", "attack", "num_clients", "n_malicious",
    "alpha", "sigma", "epsilon", "rounds", "seed", "final_error_rate", "mean_last5", "config_hash",
)
SWEEP_COLUMNS = ("value", "final_error_rate", "mean_last5")
AXES = ("fraction_malicious", "alpha", "sigma", "epsilon")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    config_hash: str
    artifact_version: str
    started: str
    finished: str
    outputs: dict

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _attack_label(cfg: ExperimentConfig) -> str:
    if cfg.attack is None or cfg.n_malicious == 0:
        return "none"
    a = cfg.attack
    if a.kind in ("llra", "tmma"):
        return f"{a.kind.upper()}-{'I' if a.mode == 'input' else 'O'}"
    return {"rpa": "RPA", "adapa": "AdaPA"}[a.kind]


def summary_row(cfg: ExperimentConfig, records: Sequence[RoundRecord]) -> dict:
    errs = [r.error_rate for r in records]
    p = cfg.protocol
    return {
        "name": cfg.name,
        "protocol": p.protocol,
        "dataset": cfg.dataset.kind,
        "model": cfg.model.kind,
        "aggregation": cfg.aggregation.rule,
        "attack": _attack_label(cfg),
        "num_clients": cfg.num_clients,
        "n_malicious": cfg.n_malicious,
        "alpha": cfg.partition.alpha,
        "sigma": p.sigma if p.protocol != "ldpfl" else "",
        "epsilon": p.epsilon if p.protocol == "ldpfl" else "",
        "rounds": cfg.rounds,
        "seed": cfg.global_seed,
        "final_error_rate": errs[-1],
        "mean_last5": float(np.mean(errs[-5:])),
        "config_hash": config_hash(cfg),
    }


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def execute(cfg: ExperimentConfig, out_dir: Path) -> tuple[list[RoundRecord], dict]:
    """Run one experiment and write manifest, records and summary into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    sim = Simulation(cfg)
    records_path = out_dir / "records.jsonl"
    records = []
    with records_path.open("w", encoding="utf-8", newline="\n") as fh:
        for _ in range(cfg.rounds):
            rec = sim.run_round()
            records.append(rec)
            fh.write(rec.to_json() + "\n")
            log.info("%s round %d error %.4f", cfg.name, rec.round, rec.error_rate)
    row = summary_row(cfg, records)
    _write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, [row])
    (out_dir / "config.json").write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    RunManifest(
        config_hash=config_hash(cfg),
        artifact_version=__version__,
        started=started,
        finished=_now(),
        outputs={"records": "records.jsonl", "summary": "summary.csv", "config": "config.json"},
    ).write(out_dir / "manifest.json")
    return records, row


def apply_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    """Return ``cfg`` with one sweep axis set to ``value``."""
    proto = cfg.protocol.protocol
    if axis == "alpha":
        return dataclasses.replace(cfg, partition=dataclasses.replace(cfg.partition, alpha=float(value)))
    if axis == "sigma":
        if proto == "ldpfl":
            raise UsageError("sigma sweeps apply to ldpsgd and privatefl; ldpfl is driven by epsilon")
        return dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, sigma=float(value)))
    if axis == "epsilon":
        if proto != "ldpfl":
            raise UsageError(f"epsilon sweeps apply to ldpfl only; {proto} is driven by sigma")
        return dataclasses.replace(cfg, protocol=dataclasses.replace(cfg.protocol, epsilon=float(value)))
    if axis == "fraction_malicious":
        if not 0 <= value <= 1:
            raise UsageError(f"fraction_malicious must lie in [0, 1], got {value}")
        n = int(round(value * cfg.num_clients))
        if n > 0 and cfg.attack is None:
            raise UsageError("fraction_malicious sweeps need an attack section in the config")
        return dataclasses.replace(cfg, malicious_ids=tuple(range(n)))
    raise UsageError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")


def _fmt(value: float) -> str:
    return f"{value:g}"


def cmd_run(args) -> int:
    cfg = load(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, global_seed=args.seed)
    _, row = execute(cfg, Path(args.out))
    print(f"{row['name']}: final error {row['final_error_rate']:.4f} -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    cfg = load(args.config)
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    if not values:
        raise UsageError("--values is empty")
    # validate every point before running any
    points = [(v, apply_axis(cfg, args.axis, v)) for v in values]
    out = Path(args.out)
    rows = []
    for v, point in points:
        _, row = execute(point, out / f"{args.axis}={_fmt(v)}")
        rows.append({"value": v, "final_error_rate": row["final_error_rate"], "mean_last5": row["mean_last5"]})
    _write_csv(out / "sweep.csv", SWEEP_COLUMNS, rows)
    print(f"{len(rows)} runs -> {out / 'sweep.csv'}")
    return 0


def partition_report(cfg: ExperimentConfig) -> list[dict]:
    """Per-client label histograms as CSV-ready rows (plus TV distance to the pooled histogram)."""
    train, _ = load_data(cfg)
    seed = cfg.partition.seed if cfg.partition.seed is not None else derive_seed(cfg.global_seed, "partition")
    parts = dirichlet_partition(train, PartitionConfig(cfg.num_clients, cfg.partition.alpha, seed))
    glob = train.histogram()
    rows = []
    for cid, part in enumerate(parts):
        h = part.histogram()
        row = {"client": cid, "n": len(part)}
        row.update({f"class_{c}": int(v) for c, v in enumerate(h)})
        row["tv_to_global"] = tv_distance(h, glob) if len(part) else ""
        rows.append(row)
    return rows


def cmd_partition_report(args) -> int:
    rows = partition_report(load(args.config))
    columns = list(rows[0])
    if args.out:
        _write_csv(Path(args.out), columns, rows)
    else:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        sys.stdout.write(buf.getvalue())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ldppoison", description="Poisoning experiments on LDP federated learning.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None, help="override global_seed")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run one experiment per value of an axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sweep)

    pr = sub.add_parser("partition-report", help="per-client label histograms as CSV")
    pr.add_argument("--config", required=True)
    pr.add_argument("--out", default=None, help="write to a file instead of stdout")
    pr.set_defaults(func=cmd_partition_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("LDPPOISON_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
