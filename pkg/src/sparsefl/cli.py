"""Command-line front end: ``sparsefl run | partition | report``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import FULL_ROUNDS, PRESETS, load_config_file, load_datasets, resolve, run_config
from .errors import ConfigError, FormatError
from .federation import Federation, RoundRecord, client_partition
from .ledger import compare, cost_report, format_report, format_table

log = logging.getLogger("sparsefl")

CSV_COLUMNS = ["round", "accuracy", "loss", "upload_bits", "download_bits", "exposures"]
MANIFEST_VERSION = 1


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve_args(args) -> dict:
    file_doc = load_config_file(args.config) if args.config else None
    overrides = _parse_set(getattr(args, "set", None) or [])
    if getattr(args, "full", False):
        overrides.setdefault("rounds", FULL_ROUNDS)
    for key in ("seed", "rounds", "pipeline", "data_dir"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if overrides.get("data_dir") is not None:
        overrides.setdefault("dataset", "mnist")
    return resolve(args.preset, file_doc, overrides)


def write_rounds_csv(path: Path, records: list[RoundRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([
                r.round,
                repr(r.accuracy),
                repr(r.loss),
                repr(float(sum(r.upload_bits))),
                r.download_bits * len(r.clients),
                "" if r.exposures is None else r.exposures,
            ])


def read_rounds_csv(path: Path, clients_per_round: int) -> list[RoundRecord]:
    """Rebuild round records from ``rounds.csv``; per-client bits become the round mean."""
    records = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_COLUMNS:
            raise FormatError(f"{path}: unexpected columns {reader.fieldnames}")
        for row in reader:
            up = float(row["upload_bits"]) / clients_per_round
            records.append(RoundRecord(
                round=int(row["round"]),
                accuracy=float(row["accuracy"]),
                loss=float(row["loss"]),
                clients=[],
                upload_bits=[up] * clients_per_round,
                framing_bits=[0] * clients_per_round,
                download_bits=int(row["download_bits"]) // clients_per_round,
                exposures=int(row["exposures"]) if row["exposures"] else None,
            ))
    return records


def cmd_run(args) -> int:
    doc = _resolve_args(args)
    cfg = run_config(doc)
    train, test = load_datasets(doc)
    out = Path(args.out)
    fed = Federation(cfg, train, test)

    def progress(rec: RoundRecord) -> None:
        log.info("round %4d  acc %.4f  loss %.4f", rec.round, rec.accuracy, rec.loss)

    records = fed.run(callback=progress)
    out.mkdir(parents=True, exist_ok=True)
    write_rounds_csv(out / "rounds.csv", records)
    report = cost_report(records, float(doc["target_fraction"]))
    (out / "report.txt").write_text(
        f"pipeline {cfg.pipeline}\n" + format_report(report, fed.m) + "\n"
    )
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "version": __version__,
        "seed": cfg.seed,
        "m": fed.m,
        "layer_shapes": [list(s) for s in fed.model.shapes],
        "train_size": len(train),
        "test_size": len(test),
        "config": doc,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    print(f"{cfg.pipeline}: final accuracy {records[-1].accuracy:.4f} -> {out}")
    return 0


def cmd_partition(args) -> int:
    doc = _resolve_args(args)
    cfg = run_config(doc)
    train, _ = load_datasets(doc)
    parts = client_partition(train, cfg)
    print(f"{'client':>6} {'samples':>8} {'labels':>6}")
    for k, idx in enumerate(parts.assignment):
        print(f"{k:>6} {len(idx):>8} {len(np.unique(train.labels[idx])):>6}")
    print(f"total {sum(parts.sizes())} of {len(train)} samples over {parts.num_clients} clients")
    return 0


def load_run(run_dir: Path):
    manifest_path = run_dir / "manifest.json"
    csv_path = run_dir / "rounds.csv"
    if not manifest_path.exists() or not csv_path.exists():
        raise ConfigError(f"{run_dir}: incomplete run directory (need manifest.json and rounds.csv)")
    manifest = json.loads(manifest_path.read_text())
    cpr = int(manifest["config"]["clients_per_round"])
    return manifest, read_rounds_csv(csv_path, cpr)


def cmd_report(args) -> int:
    runs = [Path(d) for d in args.runs]
    loaded = [load_run(d) for d in runs]
    target = args.target
    base_manifest, base_records = loaded[0]
    if target is None:
        target = float(base_manifest["config"].get("target_fraction", 0.95))
    base_report = cost_report(base_records, target)
    rows = []
    for d, (_, records) in zip(runs, loaded):
        rep = cost_report(records, target)
        rows.append(compare(d.name, rep, records, base_report, base_records))
    print(f"target: {target:.0%} of converged accuracy; ratios relative to {runs[0].name}")
    print(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsefl", description="Sparse federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file (or a run manifest)")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--pipeline")
        p.add_argument("--data-dir", dest="data_dir", help="directory with MNIST IDX files")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.add_argument("--out", required=True, help="output directory")
    p_run.add_argument("--full", action="store_true", help=f"run {FULL_ROUNDS} rounds")
    p_run.set_defaults(func=cmd_run)

    p_part = sub.add_parser("partition", help="summarize a client partition")
    common(p_part)
    p_part.set_defaults(func=cmd_partition)

    p_rep = sub.add_parser("report", help="compare completed runs against the first")
    p_rep.add_argument("runs", nargs="+")
    p_rep.add_argument("--target", type=float, help="target accuracy fraction")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
