"""``canids`` command line: gen, train, detect, evaluate, simulate, incorporate.

Exit codes: 0 clean, 1 detections found with ``--alert-exit``, 2 usage error,
3 runtime error. The default seed comes from ``CANIDS_SEED`` when set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, traffic
from .codec import BASE_LABELS, FrameTable, read_frames
from .detector import STAGE1_TRAIN, Verdict, detect_batch, incorporate_new_attack, load_bundle, save_bundle
from .errors import CanIdsError, IoFailure, VersionMismatch
from .hfl import RoundConfig, init_topology, simulate, synthetic_federation
from .metrics import ConfusionMatrix, macro_report
from .nn import EarlyStopping
from .pipeline import PipelineConfig, evaluate, fit_detector, split_table
from .sampling import SamplingConfig

SCHEMA_VERSION = 1
SEED_ENV = "CANIDS_SEED"
EXIT_OK, EXIT_ALERT, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("canids")


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def _write_json(path: str | os.PathLike, doc: dict) -> None:
    try:
        Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def _read_json(path: str | os.PathLike) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    version = doc.get("schema_version", SCHEMA_VERSION) if isinstance(doc, dict) else SCHEMA_VERSION
    if version > SCHEMA_VERSION:
        raise VersionMismatch(f"{path} has schema version {version}; this build reads up to {SCHEMA_VERSION}")
    return doc


def _load_tables(paths: Sequence[str], fmt: str) -> FrameTable:
    tables = [read_frames(p, format=fmt) for p in paths]
    return FrameTable.concat(tables)


def _envelope(command: str, config: dict, **body) -> dict:
    return {"schema_version": SCHEMA_VERSION, "tool_version": __version__, "command": command, "config": config, **body}


# -- gen ---------------------------------------------------------------------

def cmd_gen(args: argparse.Namespace) -> int:
    profile = traffic.VehicleProfile.load(args.profile) if args.profile else traffic.default_profile()
    files = traffic.generate_corpus(args.out, args.frames, args.mix, args.seed, profile)
    config = {"out": str(args.out), "frames": args.frames, "mix": args.mix, "seed": args.seed, "profile": args.profile}
    manifest = _envelope(
        "gen", config, files={k: p.name for k, p in files.items()}, profile=profile.to_json()
    )
    _write_json(Path(args.out) / "manifest.json", manifest)
    for p in files.values():
        print(p)
    return EXIT_OK


# -- train / evaluate --------------------------------------------------------

def _pipeline_config(args: argparse.Namespace) -> PipelineConfig:
    base = PipelineConfig()
    stage1 = replace(base.stage1, max_epochs=args.stage1_epochs, early_stopping=EarlyStopping(patience=args.patience))
    stage2 = replace(base.stage2, max_epochs=args.stage2_epochs, early_stopping=EarlyStopping(patience=args.patience))
    sampling = SamplingConfig(k=args.clusters, fraction=args.sample_fraction)
    return PipelineConfig(
        seed=args.seed,
        train_fraction=args.train_fraction,
        holdout=tuple(args.holdout_attack or ()),
        stage1=stage1,
        stage2=stage2,
        sampling=sampling,
        stage2_activation=args.activation,
    )


def cmd_train(args: argparse.Namespace) -> int:
    config = _pipeline_config(args)
    table = _load_tables(args.inputs, args.format)
    if not table.labelled:
        raise UsageError("training input must carry flags")
    unknown = set(config.holdout) - set(table.labels.tolist())
    if unknown:
        raise UsageError(f"--holdout-attack names classes absent from the data: {sorted(unknown)}")
    train_part, test_part = split_table(table, config.train_fraction, config.seed)
    ids, fit = fit_detector(train_part, config)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "inputs": [str(p) for p in args.inputs],
        "format": args.format,
        "pipeline": config.to_dict(),
    }
    size = save_bundle(ids, args.out, meta)
    report = _envelope(
        "train",
        {"inputs": meta["inputs"], "format": args.format, "out": str(args.out), "pipeline": config.to_dict()},
        frames={"total": len(table), "train": len(train_part), "test": len(test_part), "dropped": table.dropped},
        parameters={"stage1": fit.stage1_params, "stage2": fit.stage2_params, "total": fit.stage1_params + fit.stage2_params},
        bundle_bytes=size,
        fit=fit.to_json(),
        test=evaluate(ids, test_part),
    )
    _write_json(args.report or f"{args.out}.report.json", report)
    print(json.dumps({"bundle": str(args.out), "stage1_macro_f1": report["test"]["stage1"]["macro"]["f1"]}))
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ids, meta = load_bundle(args.bundle)
    pipeline = meta.get("pipeline", {})
    inputs = args.inputs or meta.get("inputs")
    if not inputs:
        raise UsageError("no input files given and the bundle records none")
    fmt = args.format or meta.get("format", "csv")
    seed = args.seed if args.seed is not None else pipeline.get("seed", default_seed())
    fraction = args.train_fraction if args.train_fraction is not None else pipeline.get("train_fraction", 0.7)
    table = _load_tables(inputs, fmt)
    if not table.labelled:
        raise UsageError("evaluation input must carry flags")
    if args.split == "test":
        table = split_table(table, fraction, seed)[1]
    config = {"bundle": str(args.bundle), "inputs": list(inputs), "format": fmt, "split": args.split, "seed": seed, "train_fraction": fraction}
    report = _envelope("evaluate", config, result=evaluate(ids, table))
    if args.report:
        _write_json(args.report, report)
    else:
        print(json.dumps(report, sort_keys=True))
    return EXIT_OK


# -- detect ------------------------------------------------------------------

def cmd_detect(args: argparse.Namespace) -> int:
    ids, _ = load_bundle(args.bundle)
    table = read_frames(args.input, format=args.format, labels=tuple(dict.fromkeys(BASE_LABELS + ids.labels.names)))
    result = detect_batch(ids, table.features)
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        for i in range(len(result)):
            rec = {"index": i, "timestamp": float(table.timestamps[i]) if table.timestamps is not None else None}
            rec.update(result.outcome(i).to_json())
            out.write(json.dumps(rec, sort_keys=True) + "\n")
    except BrokenPipeError:
        # reader such as `head` went away; silence the flush at interpreter exit
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except OSError as exc:
        raise IoFailure(f"cannot write verdicts: {exc}") from exc
    finally:
        if out is not sys.stdout:
            out.close()
    alerts = int((result.verdicts != Verdict.NORMAL.value).sum())
    if table.labelled and args.report:
        names = list(ids.labels.names) + ["Anomaly"]
        names += sorted(set(table.labels.tolist()) - set(names))
        cm = ConfusionMatrix.from_labels(names, table.labels, result.predicted)
        config = {"bundle": str(args.bundle), "input": str(args.input), "format": args.format}
        _write_json(args.report, _envelope("detect", config, frames=len(table), alerts=alerts, report=macro_report(cm)))
    elif args.report:
        log.info("input carries no flags; no metrics report written")
    return EXIT_ALERT if args.alert_exit and alerts else EXIT_OK


# -- incorporate -------------------------------------------------------------

def cmd_incorporate(args: argparse.Namespace) -> int:
    ids, meta = load_bundle(args.bundle)
    # flags in the confirmed capture may be T, R or the new label itself; only the features are used
    labels = tuple(ids.labels.names) + (args.label,)
    confirmed = read_frames(args.confirmed, attack_class=args.label, format=args.format, labels=labels)
    prior = _load_tables(args.prior, args.format)
    if not prior.labelled:
        raise UsageError("prior training data must carry flags")
    prior = prior.where_label(*ids.labels.names)
    config = replace(STAGE1_TRAIN, max_epochs=args.epochs, batch_size=args.batch_size)
    updated = incorporate_new_attack(ids, confirmed.features, args.label, prior.features, prior.labels, config, seed=args.seed)
    meta = dict(meta, incorporated=list(meta.get("incorporated", [])) + [args.label])
    save_bundle(updated, args.out, meta)
    codes = detect_batch(updated, confirmed.features).predicted
    print(json.dumps({"bundle": str(args.out), "labels": list(updated.labels.names), "confirmed_recall": float(np.mean(codes == args.label))}))
    return EXIT_OK


# -- simulate ----------------------------------------------------------------

def _sim_inputs(doc: dict, seed: int):
    clients = doc.get("clients")
    if not clients:
        syn = doc.get("synthetic", {})
        profiles, tables, holdout = synthetic_federation(
            num_clients=syn.get("clients", 4),
            frames_per_client=syn.get("frames_per_client", 6000),
            seed=seed,
            holdout_frames=syn.get("holdout_frames", 4000),
        )
        return [f"v{i}" for i in range(len(tables))], profiles, tables, holdout
    fmt = doc.get("format", "csv")
    ids, profiles, tables = [], [], []
    for i, c in enumerate(clients):
        ids.append(c.get("id", f"v{i}"))
        prof = c.get("profile", "default")
        profiles.append(traffic.VehicleProfile.load(prof) if str(prof).endswith(".json") else str(prof))
        data = c["data"] if isinstance(c["data"], list) else [c["data"]]
        tables.append(_load_tables(data, fmt))
    holdout = _load_tables(doc["holdout"], fmt) if doc.get("holdout") else None
    return ids, profiles, tables, holdout


def cmd_simulate(args: argparse.Namespace) -> int:
    doc = _read_json(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else doc.get("seed", default_seed())
    rc = dict(doc.get("round", {}))
    for key in ("clients_per_aggregator", "local_epochs", "stage2_epochs", "rounds"):
        value = getattr(args, key)
        if value is not None:
            rc[key] = value
    rc["seed"] = seed
    round_config = RoundConfig.from_dict(rc)
    client_ids, profiles, tables, holdout = _sim_inputs(doc, seed)
    aggregators = args.aggregators or doc.get("aggregators", 2)
    capacity = doc.get("capacity") or -(-len(tables) // aggregators)
    topo = init_topology(aggregators, capacity, profiles, tables, seed=seed, client_ids=client_ids)
    try:
        out = open(args.log, "w", encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot write {args.log}: {exc}") from exc
    with out:
        for rec in simulate(topo, round_config, holdout):
            rec = {"schema_version": SCHEMA_VERSION, **rec}
            if rec["type"] == "topology":
                rec["config"] = {"round": round_config.to_dict(), "aggregators": aggregators, "capacity": capacity, "source": doc}
            out.write(json.dumps(rec, sort_keys=True) + "\n")
            out.flush()
            if rec["type"] == "round":
                log.info("round %d done", rec["round"])
    return EXIT_OK


# -- parser ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="canids", description="Two-stage CAN bus intrusion detection toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic four-file capture corpus")
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--frames", type=int, default=50_000, help="frames per file")
    g.add_argument("--mix", type=float, default=traffic.DEFAULT_MIX, help="attack fraction per file")
    g.add_argument("--seed", type=int)
    g.add_argument("--profile", help="vehicle profile JSON")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="fit both detector stages and write a bundle")
    t.add_argument("inputs", nargs="+")
    t.add_argument("--out", required=True, type=Path)
    t.add_argument("--report", type=Path)
    t.add_argument("--format", choices=("csv", "candump"), default="csv")
    t.add_argument("--seed", type=int)
    t.add_argument("--holdout-attack", action="append", metavar="CLASS")
    t.add_argument("--train-fraction", type=float, default=0.7)
    t.add_argument("--stage1-epochs", type=int, default=10)
    t.add_argument("--stage2-epochs", type=int, default=100)
    t.add_argument("--patience", type=int, default=3)
    t.add_argument("--clusters", type=int, default=50)
    t.add_argument("--sample-fraction", type=float, default=0.3)
    t.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="classify every frame of a capture")
    d.add_argument("input")
    d.add_argument("--bundle", required=True, type=Path)
    d.add_argument("--out", type=Path, help="JSON-lines verdicts (default stdout)")
    d.add_argument("--report", type=Path)
    d.add_argument("--format", choices=("csv", "candump"), default="csv")
    d.add_argument("--alert-exit", action="store_true", help="exit 1 when any frame is not normal")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="score a bundle on labelled captures")
    e.add_argument("inputs", nargs="*")
    e.add_argument("--bundle", required=True, type=Path)
    e.add_argument("--split", choices=("test", "all"), default="all")
    e.add_argument("--seed", type=int)
    e.add_argument("--train-fraction", type=float)
    e.add_argument("--format", choices=("csv", "candump"))
    e.add_argument("--report", type=Path)
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="run hierarchical federated rounds")
    s.add_argument("--config", type=Path)
    s.add_argument("--log", required=True, type=Path)
    s.add_argument("--rounds", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--aggregators", type=int)
    s.add_argument("--clients-per-aggregator", dest="clients_per_aggregator", type=int, help="clients selected per aggregator each round")
    s.add_argument("--local-epochs", dest="local_epochs", type=int)
    s.add_argument("--stage2-epochs", dest="stage2_epochs", type=int)
    s.set_defaults(func=cmd_simulate)

    n = sub.add_parser("incorporate", help="add a confirmed new attack class to a bundle")
    n.add_argument("--bundle", required=True, type=Path)
    n.add_argument("--confirmed", required=True, help="capture holding only the confirmed attack frames")
    n.add_argument("--label", required=True)
    n.add_argument("--prior", required=True, nargs="+", help="labelled captures the bundle was trained on")
    n.add_argument("--out", required=True, type=Path)
    n.add_argument("--format", choices=("csv", "candump"), default="csv")
    n.add_argument("--seed", type=int)
    n.add_argument("--epochs", type=int, default=STAGE1_TRAIN.max_epochs)
    n.add_argument("--batch-size", dest="batch_size", type=int, default=STAGE1_TRAIN.batch_size)
    n.set_defaults(func=cmd_incorporate)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if hasattr(args, "seed") and args.seed is None and args.command not in ("evaluate", "simulate"):
            args.seed = default_seed()
    except UsageError as exc:
        print(f"canids: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"canids: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CanIdsError, OSError, ValueError, KeyError) as exc:
        print(f"canids: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
