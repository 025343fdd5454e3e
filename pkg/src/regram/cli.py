"""Command-line entry point: ``regram <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields
from datetime import date
from pathlib import Path
from typing import Sequence

from .encoding import encode_all, fit_normalizer
from .errors import RegramError, UnknownTargetError
from .evaluation import evaluate, fit_baseline, knn_predictor, model_predictor
from .geo import distance_m
from .graph import GraphBundle, build_bundle, neighbor_context
from .model import forward
from .persist import load_model, save_model
from .records import TransactionRecord, read_transactions, write_transactions
from .synth import SynthConfig, generate
from .training import (
    PHASES, CityDataset, TrainConfig, chronological_split, phase_bundles, prepare_city, split_boundaries, train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
GRAPH_FILE_VERSION = 1
NEARBY_M = 800.0
MODEL_SUFFIX = ".rgrm"

# flag -> TrainConfig field
_TRAIN_FLAGS = {"dm": "d_m", "kernels": "n_kernels", "heads": "n_heads", "tau": "tau", "epochs": "epochs",
                "batch": "batch_size", "lr": "lr"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="regram", description="Graph-based real-estate appraisal.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name: str, help: str, *flags: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", help="JSON file with 'train' and 'synth' sections; flags win")
        sp.add_argument("--seed", type=int, help="seed for all randomness")
        for f in flags:
            if f == "data":
                sp.add_argument("--data", required=True, help="transactions CSV")
            elif f == "graph":
                sp.add_argument("--graph", help="graph JSON from build-graph")
            elif f == "model":
                sp.add_argument("--model", required=True, help="model directory (one file per city) or model file")
            elif f == "out":
                sp.add_argument("--out", required=True, help="output path")
            elif f == "city":
                sp.add_argument("--city", action="append", help="restrict to this city (repeatable)")
            elif f == "target":
                sp.add_argument("--target", required=True, help="transaction id to appraise")
            elif f == "train":
                sp.add_argument("--dm", type=int, help="embedding width")
                sp.add_argument("--kernels", type=int, help="number of regression kernels")
                sp.add_argument("--heads", type=int, help="neighbor attention heads")
                sp.add_argument("--tau", type=float, help="softmax temperature")
                sp.add_argument("--epochs", type=int)
                sp.add_argument("--batch", type=int, help="mini-batch size")
                sp.add_argument("--lr", type=float, help="Adam learning rate")
                sp.add_argument("--no-neighbors", action="store_true", help="drop the neighbor aggregator")
                sp.add_argument("--no-community", action="store_true", help="drop the community aggregator")
        return sp

    add("gen-data", "Generate a synthetic transactions CSV plus a latent-truth JSON sidecar.", "out")
    add("build-graph", "Split chronologically and build per-phase graphs for every city.", "data", "out", "city")
    add("train", "Train one model per city and write <out>/<city>.rgrm.", "data", "graph", "out", "city", "train")
    add("eval", "Score the trained models and baselines on the test split; write a CSV report.",
        "data", "graph", "model", "out", "city")
    add("appraise", "Appraise one transaction and explain the estimate.", "data", "model", "target")
    add("export-geojson", "Write a target, its attended neighbors and nearby transactions as GeoJSON.",
        "data", "model", "target", "out")
    return p


# --- config resolution -----------------------------------------------------

def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict) or set(cfg) - {"train", "synth", "seed"}:
        raise UsageError(f"config {path}: expected an object with keys among 'train', 'synth', 'seed'")
    return cfg


def _train_config(args, file_cfg: dict) -> TrainConfig:
    d = dict(file_cfg.get("train", {}))
    if file_cfg.get("seed") is not None:
        d["seed"] = file_cfg["seed"]
    for flag, name in _TRAIN_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            d[name] = v
    if getattr(args, "no_neighbors", False):
        d["use_price"] = d["use_relation"] = False
    if getattr(args, "no_community", False):
        d["use_community"] = False
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return TrainConfig.from_dict(d)
    except TypeError as exc:
        raise UsageError(f"bad train config: {exc}") from None


def _synth_config(args, file_cfg: dict) -> SynthConfig:
    d = dict(file_cfg.get("synth", {}))
    if file_cfg.get("seed") is not None:
        d["seed"] = file_cfg["seed"]
    if args.seed is not None:
        d["seed"] = args.seed
    known = {f.name for f in fields(SynthConfig)}
    if set(d) - known:
        raise UsageError(f"unknown synth config keys: {sorted(set(d) - known)}")
    try:
        return SynthConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad synth config: {exc}") from None


def _echo(command: str, resolved: dict) -> None:
    print(json.dumps({"command": command, **resolved}, sort_keys=True, default=str), file=sys.stderr)


# --- shared helpers --------------------------------------------------------

def _cities(records: Sequence[TransactionRecord], wanted: list[str] | None) -> list[str]:
    have = sorted({r.city for r in records})
    if not wanted:
        return have
    missing = sorted(set(wanted) - set(have))
    if missing:
        raise RegramError(f"no records for city {missing[0]!r}")
    return sorted(set(wanted))


def _read_graph(path: str) -> tuple[tuple[date, date], dict[str, dict[str, GraphBundle]]]:
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("version") != GRAPH_FILE_VERSION:
        raise RegramError(f"{path}: unsupported graph file version {d.get('version')!r}")
    bounds = (date.fromisoformat(d["val_start"]), date.fromisoformat(d["test_start"]))
    cities = {c: {p: GraphBundle.from_dict(b) for p, b in phases.items()} for c, phases in d["cities"].items()}
    return bounds, cities


def _datasets(args, records, config: TrainConfig) -> list[CityDataset]:
    if getattr(args, "graph", None):
        bounds, graphs = _read_graph(args.graph)
    else:
        bounds, graphs = split_boundaries(records, config.val_months, config.test_months), {}
    out = []
    for city in _cities(records, getattr(args, "city", None)):
        out.append(prepare_city(records, city, config, boundaries=bounds, bundles=graphs.get(city)))
    return out


def _model_path(model: str, city: str) -> Path:
    p = Path(model)
    if p.is_dir():
        p = p / f"{city}{MODEL_SUFFIX}"
    if not p.is_file():
        raise RegramError(f"no model file for city {city!r} at {p}")
    return p


def _write_text(path: str, text: str) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# --- subcommands -----------------------------------------------------------

def cmd_gen_data(args, file_cfg) -> int:
    cfg = _synth_config(args, file_cfg)
    _echo("gen-data", {"synth": asdict(cfg), "out": args.out})
    records, latent = generate(cfg)
    parent = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(parent, exist_ok=True)
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        write_transactions(records, fh)
    _write_text(str(Path(args.out).with_suffix(".latent.json")), latent.to_json() + "\n")
    print(f"wrote {len(records)} transactions in {len(latent.cities)} cities to {args.out}")
    return EXIT_OK


def cmd_build_graph(args, file_cfg) -> int:
    config = _train_config(args, file_cfg)
    _echo("build-graph", {"data": args.data, "out": args.out, "city": args.city,
                          "val_months": config.val_months, "test_months": config.test_months})
    records = read_transactions(args.data)
    bounds = split_boundaries(records, config.val_months, config.test_months)
    doc = {"version": GRAPH_FILE_VERSION, "val_start": bounds[0].isoformat(), "test_start": bounds[1].isoformat(),
           "cities": {}}
    for city in _cities(records, args.city):
        city_recs = [r for r in records if r.city == city]
        train_r, val_r, test_r = chronological_split(city_recs, boundaries=bounds)
        norm = fit_normalizer(train_r, city)
        bundles = phase_bundles(train_r, val_r, test_r, encode_all(city_recs, norm), norm)
        doc["cities"][city] = {p: bundles[p].to_dict() for p in PHASES}
        b = bundles["test"]
        print(f"{city}: {len(train_r)}/{len(val_r)}/{len(test_r)} train/val/test, "
              f"{sum(map(len, b.txn_adjacency.values())) // 2} transaction edges, "
              f"{len(b.community_members)} communities")
    _write_text(args.out, json.dumps(doc, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_train(args, file_cfg) -> int:
    config = _train_config(args, file_cfg)
    _echo("train", {"train": config.to_dict(), "data": args.data, "graph": args.graph, "out": args.out,
                    "city": args.city})
    records = read_transactions(args.data)
    os.makedirs(args.out, exist_ok=True)
    for ds in _datasets(args, records, config):
        params, report = train(config, ds)
        path = Path(args.out) / f"{ds.city}{MODEL_SUFFIX}"
        save_model(params, ds.normalizer, config, path)
        best = report.val_mape[report.best_epoch] if report.val_mape else float("nan")
        print(f"{ds.city}: best epoch {report.best_epoch + 1}/{config.epochs}, val MAPE {best:.3f} -> {path}")
    return EXIT_OK


def cmd_eval(args, file_cfg) -> int:
    records = read_transactions(args.data)
    cities = _cities(records, args.city)
    loaded = {c: load_model(_model_path(args.model, c)) for c in cities}
    config = next(iter(loaded.values()))[2] or TrainConfig()
    if args.seed is not None:
        config = TrainConfig.from_dict({**config.to_dict(), "seed": args.seed})
    _echo("eval", {"train": config.to_dict(), "data": args.data, "graph": args.graph, "model": args.model,
                   "out": args.out, "city": args.city})
    datasets = _datasets(args, records, config)
    models = {
        "ReGram": {ds.city: model_predictor(loaded[ds.city][0]) for ds in datasets},
        "DNN": {ds.city: fit_baseline("DNN", ds, config) for ds in datasets},
        "LR": {ds.city: fit_baseline("LR", ds) for ds in datasets},
        "KNN": knn_predictor(),
    }
    report = evaluate(models, datasets)
    _write_text(args.out, report.to_csv())
    print(report.to_table())
    return EXIT_OK


def _appraisal(args):
    """Model, normalizer, target record, context and prediction for ``--target``."""
    records = read_transactions(args.data)
    by_id = {r.id: r for r in records}
    if args.target not in by_id:
        raise UnknownTargetError(f"transaction {args.target!r} not found in {args.data}")
    target = by_id[args.target]
    params, norm, tcfg = load_model(_model_path(args.model, target.city))
    tcfg = tcfg or TrainConfig()
    city_recs = [r for r in records if r.city == target.city and r.trade_date <= target.trade_date]
    feats = encode_all(city_recs, norm)
    bundle = build_bundle(city_recs, {i: f.s_env[norm.poi_slice] for i, f in feats.items()})
    ctx = neighbor_context(target, bundle, by_id, cap=tcfg.neighbor_cap, window_months=tcfg.window_months)
    pred = forward(feats[target.id], ctx, feats, params, "eval")
    return records, by_id, target, norm, ctx, pred


def cmd_appraise(args, file_cfg) -> int:
    _echo("appraise", {"data": args.data, "model": args.model, "target": args.target})
    _, by_id, target, norm, ctx, pred = _appraisal(args)
    p_hat = float(norm.decode_price(pred.p_hat))
    print(f"target       {target.id} ({target.city}, traded {target.trade_date.isoformat()})")
    print(f"estimate     {p_hat:.2f} per m2")
    if target.unit_price > 0:
        print(f"recorded     {target.unit_price:.2f} per m2 ({100 * abs(p_hat - target.unit_price) / target.unit_price:.2f}% off)")
    if not ctx.txn_neighbors:
        print("neighbors    none: no earlier comparable transaction nearby; the estimate uses the "
              "target's own features and community context only")
    else:
        print(f"preliminary  {float(norm.decode_price(pred.p_tilde)):.2f} per m2 from {len(ctx.txn_neighbors)} neighbor(s)")
        here = (target.latitude, target.longitude)
        ranked = sorted(pred.neighbor_attention.items(), key=lambda kv: (-kv[1], kv[0]))
        print("top neighbors (attention, distance, unit price):")
        for nid, w in ranked[:5]:
            n = by_id[nid]
            print(f"  {nid:<14} {w:.3f}  {distance_m(here, (n.latitude, n.longitude)):7.1f} m  {n.unit_price:.2f}")
        print(f"attention sum {sum(pred.neighbor_attention.values()):.3f} over all {len(ranked)} neighbor(s)")
    if pred.community_attention:
        comms = ", ".join(f"{c}:{w:.3f}" for c, w in sorted(pred.community_attention.items()))
        print(f"communities  {comms}")
    print("kernel attention " + " ".join(f"{w:.4f}" for w in pred.kernel_attention))
    return EXIT_OK


def geojson_collection(target: TransactionRecord, ctx, pred, records: Sequence[TransactionRecord],
                       radius_m: float = NEARBY_M) -> dict:
    """Target, attended neighbors and other earlier transactions within ``radius_m``."""

    def feature(r: TransactionRecord, role: str, **extra) -> dict:
        props = {"id": r.id, "role": role, "unit_price": r.unit_price, "trade_date": r.trade_date.isoformat(),
                 "building_type": r.building_type, **extra}
        return {"type": "Feature", "geometry": {"type": "Point", "coordinates": [r.longitude, r.latitude]},
                "properties": props}

    by_id = {r.id: r for r in records}
    feats = [feature(target, "target")]
    for nid in ctx.txn_neighbors:
        feats.append(feature(by_id[nid], "neighbor", attention=pred.neighbor_attention.get(nid, 0.0)))
    here = (target.latitude, target.longitude)
    skip = set(ctx.txn_neighbors) | {target.id}
    for r in sorted(records, key=lambda r: r.id):
        if (r.city == target.city and r.id not in skip and r.trade_date < target.trade_date
                and distance_m(here, (r.latitude, r.longitude)) < radius_m):
            feats.append(feature(r, "non-neighbor"))
    return {"type": "FeatureCollection", "features": feats}


def cmd_export_geojson(args, file_cfg) -> int:
    _echo("export-geojson", {"data": args.data, "model": args.model, "target": args.target, "out": args.out})
    records, _, target, _, ctx, pred = _appraisal(args)
    doc = geojson_collection(target, ctx, pred, records)
    _write_text(args.out, json.dumps(doc, indent=1) + "\n")
    print(f"wrote {len(doc['features'])} features ({len(ctx.txn_neighbors)} neighbor(s)) to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-graph": cmd_build_graph,
    "train": cmd_train,
    "eval": cmd_eval,
    "appraise": cmd_appraise,
    "export-geojson": cmd_export_geojson,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
        file_cfg = _load_config(args.config)
        return COMMANDS[args.command](args, file_cfg)
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return EXIT_USAGE
    except (RegramError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"regram: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
