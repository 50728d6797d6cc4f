"""``edgecast`` command line.

All subcommands take ``--config`` (YAML, optional) and ``--out`` (output
directory; default ``output_dir`` from the config or ``$EDGECAST_OUTPUT_DIR``).
Text outputs start with a ``#`` line naming the package version, config hash
and seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .allocator import AllocationProblem, double_bisection, identical_bandwidth
from .channel import LinkProfile, QuadratureError, dbm_to_watt
from .config import ConfigError, ExperimentConfig, parse_config
from .dataset import (
    DatasetIntegrityError,
    DatasetParseError,
    SplitSpec,
    build_personas,
    label_interactions,
    load_dataset,
    save_canonical,
    split,
)
from .delay import DelayConstraint, InfeasibleConstraint
from .experiment import (
    caching_trial,
    prepare,
    rate_table,
    run_experiment,
    write_csv,
    write_report,
)
from .group_cache import (
    HistoryIndex,
    baseline_popularity,
    baseline_topk,
    decide_cache,
    group_interest,
    group_similarities,
    similarity_weights,
)
from .interest import EPOCH_COLUMNS, TrainingDiverged, save_weights
from .queue_sim import SWEEP_COLUMNS, dvp_sweep

log = logging.getLogger("edgecast")

# failures reported as "error: ..." with exit status 1
HANDLED = (
    ConfigError, DatasetParseError, DatasetIntegrityError, InfeasibleConstraint, QuadratureError,
    TrainingDiverged, FileNotFoundError, ValueError, KeyError, ArithmeticError,
)


def header(config: ExperimentConfig, seed) -> str:
    if isinstance(seed, (list, tuple)):
        seed = ",".join(str(s) for s in seed)
    return f"edgecast {__version__} config={config.hash} seed={seed}"


def _out_dir(args, config: ExperimentConfig) -> Path:
    out = Path(args.out) if args.out else config.resolved_output_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_dataset(config: ExperimentConfig):
    path = config.dataset.path
    if not path:
        raise ConfigError("dataset.path is required for this command")
    if not Path(path).is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")


def _write_json(path: Path, doc: dict, config: ExperimentConfig, seed) -> None:
    doc = {"provenance": header(config, seed), **doc}
    path.write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def cmd_ingest(args, config):
    _require_dataset(config)
    ds = load_dataset(config.dataset.path, config.dataset.format)
    out = _out_dir(args, config)
    save_canonical(ds, out / "dataset.json")
    personas = build_personas(ds).reset_index()
    write_csv(personas, out / "personas.csv", header(config, "-"))
    labels = label_interactions(ds, config.dataset.like_threshold)
    print(f"{ds.n_users} users, {ds.n_items} items, {len(ds.ratings)} ratings, "
          f"{int(labels.label.sum())} positive labels -> {out}")
    return 0


def cmd_train(args, config):
    _require_dataset(config)
    out = _out_dir(args, config)
    bench = prepare(config.model_copy(update={"model": config.model.model_copy(update={"weights": None})}))
    seed = config.model.seed
    hist = pd.DataFrame([[getattr(r, c) for c in EPOCH_COLUMNS] for r in bench.history], columns=list(EPOCH_COLUMNS))
    write_csv(hist, out / "train_epochs.csv", header(config, seed))
    save_weights(bench.weights, out / "weights.npz", schema_hash=bench.schema.hash)
    bench.schema.save(out / "schema.json")
    _write_json(out / "train_summary.json", {
        "epochs": len(bench.history),
        "best_epoch": int(np.argmin([r.val_loss for r in bench.history]) + 1) if bench.history else 0,
        "test_auc": bench.test_auc,
        "test_acc": bench.test_acc,
        "schema_hash": bench.schema.hash,
    }, config, seed)
    print(f"test AUC {bench.test_auc:.4f}  ACC {bench.test_acc:.4f} -> {out}")
    return 0


def _bench_with_weights(args, config):
    """Workbench built from the config's split with stored weights; the
    schema hash recorded at training time must match."""
    path = args.weights or config.model.weights
    if not path:
        raise ConfigError("this command needs --weights or model.weights")
    _require_dataset(config)
    return prepare(config.model_copy(update={"model": config.model.model_copy(update={"weights": str(path)})}))


def cmd_predict(args, config):
    bench = _bench_with_weights(args, config)
    if args.pairs:
        pairs = pd.read_csv(args.pairs, comment="#")
        missing = {"user_id", "item_id"} - set(pairs.columns)
        if missing:
            raise ValueError(f"{args.pairs}: missing columns {sorted(missing)}")
    else:
        pairs = bench.test[["user_id", "item_id"]]
    scores = bench.score(pairs[["user_id", "item_id"]])
    frame = pd.DataFrame({"user_id": pairs.user_id.to_numpy(), "item_id": pairs.item_id.to_numpy(), "score": scores})
    out = _out_dir(args, config)
    write_csv(frame, out / "predictions.csv", header(config, config.model.seed))
    print(f"{len(frame)} predictions -> {out / 'predictions.csv'}")
    return 0


def cmd_cache(args, config):
    _require_dataset(config)
    ds = load_dataset(config.dataset.path, config.dataset.format)
    delta = config.caching.delta
    E = args.capacity or config.experiment.uhr_capacity
    out = _out_dir(args, config)
    if args.predictions:
        preds = pd.read_csv(args.predictions, comment="#")
        missing = {"user_id", "item_id", "score"} - set(preds.columns)
        if missing:
            raise ValueError(f"{args.predictions}: missing columns {sorted(missing)}")
        train_set, _, _ = split(ds, label_interactions(ds, config.dataset.like_threshold),
                                SplitSpec(config.dataset.train_fraction, config.dataset.split_seed))
        group = np.unique(preds.user_id.to_numpy())
        catalog = np.unique(preds.item_id.to_numpy())
        P = np.zeros((group.size, catalog.size))
        P[np.searchsorted(group, preds.user_id.to_numpy()), np.searchsorted(catalog, preds.item_id.to_numpy())] = preds.score
        index = HistoryIndex(train_set[train_set.user_id.isin(group)], users=group,
                             items=np.sort(ds.items.item_id.to_numpy()))
        a_si = similarity_weights(group_similarities(index)) if group.size > 1 else np.ones(1)
        score = group_interest(P, a_si, delta, items=catalog)
        plans = {
            "proposed": decide_cache(score, E),
            "popularity": baseline_popularity(index, E, catalog=index.items),
            "topk": baseline_topk(P, E, items=catalog),
        }
        seed = "-"
    else:
        bench = _bench_with_weights(args, config)
        seed = config.experiment.seeds[0]
        order = np.random.default_rng(np.random.SeedSequence([seed, 1])).permutation(
            np.sort(bench.dataset.users.user_id.to_numpy()))
        group = order[: args.users or config.experiment.chr_users]
        plans = caching_trial(bench, group, E, seed, config).plans
    for name, plan in plans.items():
        frame = pd.DataFrame({"video_id": plan.items, "score": plan.scores, "cached": plan.cached.astype(int)})
        write_csv(frame, out / f"cache_{name}.csv", header(config, seed))
    print(f"cache plans for E={E} -> {out}")
    return 0


def _problem_from_file(path, config: ExperimentConfig):
    doc = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    allowed = {"bandwidth_hz", "phi_v", "phi_b", "users", "scheme"}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{path}: unknown keys {sorted(unknown)}")
    ch, d = config.channel, config.delay
    user_keys = {"distance_m", "power_dbm", "cached", "target_s", "violation", "cloud_delay_s"}
    users = []
    for i, u in enumerate(doc.get("users") or []):
        bad = set(u) - user_keys
        if bad:
            raise ConfigError(f"{path}: users[{i}]: unknown keys {sorted(bad)}")
        if "distance_m" not in u:
            raise ConfigError(f"{path}: users[{i}].distance_m is required")
        link = LinkProfile(1.0, dbm_to_watt(u.get("power_dbm", ch.power_dbm)), float(u["distance_m"]),
                           dbm_to_watt(ch.noise_dbm_per_hz), ch.block_s, ch.ref_loss_db, ch.path_loss_exponent)
        c = DelayConstraint(u.get("target_s", d.target_s), u.get("violation", d.violation),
                            u.get("cloud_delay_s", d.cloud_delay_s), bool(u.get("cached", True)))
        users.append((link, c))
    if not users:
        raise ConfigError(f"{path}: at least one user is required")
    problem = AllocationProblem(users, float(doc.get("bandwidth_hz", ch.bandwidth_hz)),
                                float(doc.get("phi_v", config.allocator.phi_v)),
                                float(doc.get("phi_b", config.allocator.phi_b)))
    scheme = doc.get("scheme", "double-bisection")
    if scheme not in ("double-bisection", "identical"):
        raise ConfigError(f"{path}: scheme must be 'double-bisection' or 'identical'")
    return problem, scheme


def cmd_allocate(args, config):
    problem, scheme = _problem_from_file(args.problem, config)
    res = double_bisection(problem) if scheme == "double-bisection" else identical_bandwidth(problem)
    out = _out_dir(args, config)
    frame = pd.DataFrame({
        "user": np.arange(problem.n_users),
        "distance_m": [link.distance for link, _ in problem.users],
        "cached": [int(c.cached) for _, c in problem.users],
        "bandwidth_hz": res.bandwidths,
        "coding_rate_bps": res.coding_rates,
        "sustainable_bps": res.sustainable,
    })
    write_csv(frame, out / "allocation.csv", header(config, "-"))
    _write_json(out / "allocation.json", {
        "scheme": scheme,
        "v_star": res.v_star,
        "min_rate": res.min_rate,
        "throughput": res.throughput,
        "feasible": res.feasible,
        "outer_iterations": res.outer_iterations,
        "inner_iterations": res.inner_iterations,
        "bandwidth_used_hz": float(res.bandwidths.sum()),
    }, config, "-")
    print(f"V* = {res.v_star:.6g} bit/s, throughput {res.throughput:.6g} bit/s -> {out}")
    return 0


def cmd_simulate(args, config):
    sim, ch = config.simulate, config.channel
    power = dbm_to_watt(ch.power_dbm if sim.power_dbm is None else sim.power_dbm)
    grid = [(d, e) for d in sim.delays_s for e in sim.violations]
    frames = []
    for j, bw in enumerate(sim.bandwidths_hz):
        link = LinkProfile(bw, power, sim.distance_m, dbm_to_watt(ch.noise_dbm_per_hz), ch.block_s,
                           ch.ref_loss_db, ch.path_loss_exponent)
        rows = dvp_sweep(link, grid, blocks=sim.blocks, seed=[sim.seed, j], warmup=sim.warmup,
                         cloud_delay=config.delay.cloud_delay_s)
        frames.append(pd.DataFrame([list(vars(r).values()) for r in rows], columns=list(SWEEP_COLUMNS)))
    table = pd.concat(frames, ignore_index=True)
    table.insert(3, "within_bound", (table.empirical <= table.bound + 3 * table.stderr).astype(int))
    out = _out_dir(args, config)
    write_csv(table, out / "dvp_sweep.csv", header(config, sim.seed))
    print(f"{len(table)} grid points -> {out / 'dvp_sweep.csv'}")
    return 0


def cmd_experiment(args, config):
    if args.rates_only:
        out = _out_dir(args, config)
        write_csv(rate_table(config), out / "fig7_rate.csv", header(config, "-"))
        print(f"rate table -> {out / 'fig7_rate.csv'}")
        return 0
    _require_dataset(config)
    bench = _bench_with_weights(args, config) if args.weights else None
    report = run_experiment(config, bench)
    out = _out_dir(args, config)
    written = write_report(report, config, out, header(config, list(config.experiment.seeds)))
    print(f"test AUC {report.test_auc:.4f}; wrote {len(written)} files -> {out}")
    return 0


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "predict": cmd_predict,
    "cache": cmd_cache,
    "allocate": cmd_allocate,
    "simulate": cmd_simulate,
    "experiment": cmd_experiment,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgecast", description="Edge video caching and delivery workbench")
    parser.add_argument("--version", action="version", version=f"edgecast {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="YAML configuration file")
    common.add_argument("-o", "--out", help="output directory")
    common.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("ingest", parents=[common], help="parse the dataset, write canonical JSON and personas")
    sub.add_parser("train", parents=[common], help="train the interest model")
    p = sub.add_parser("predict", parents=[common], help="score (user, item) pairs")
    p.add_argument("--weights", help="weights file from `train`")
    p.add_argument("--pairs", help="CSV with user_id,item_id columns (default: test split)")
    p = sub.add_parser("cache", parents=[common], help="build cache plans")
    p.add_argument("--predictions", help="CSV with user_id,item_id,score")
    p.add_argument("--weights", help="weights file (used when --predictions is absent)")
    p.add_argument("--capacity", type=int, help="cache capacity E")
    p.add_argument("--users", type=int, help="group size when sampling from the dataset")
    p = sub.add_parser("allocate", parents=[common], help="bandwidth allocation for a problem file")
    p.add_argument("problem", help="YAML problem description")
    sub.add_parser("simulate", parents=[common], help="queue simulation vs delay bound sweep")
    p = sub.add_parser("experiment", parents=[common], help="full caching + delivery experiment")
    p.add_argument("--rates-only", action="store_true", help="only the rate-vs-constraint table")
    p.add_argument("--weights", help="reuse trained weights instead of training")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_config(args.config)
        return COMMANDS[args.command](args, config)
    except HANDLED as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
