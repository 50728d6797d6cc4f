"""End-to-end runs over the rating data.

The interest model is trained once. Every seed then draws its own user
group, unwatched candidate sets, requests and user placement, builds the
three cache plans, and allocates bandwidth for each delivery scheme.

Random streams are keyed by ``(seed, purpose[, capacity])`` so that groups,
requests and positions are nested across group sizes: the first ``N`` users
of a seed are the same whatever other sizes are run.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .allocator import AllocationProblem, double_bisection, identical_bandwidth
from .channel import LinkProfile, dbm_to_watt, mean_capacity, place_users
from .config import ExperimentConfig
from .dataset import RawDataset, SplitSpec, label_interactions, load_dataset, sample_unwatched, split
from .delay import DelayConstraint, sustainable_rate
from .features import AttributeTables, EncodingSchema, build_attributes, encode_frame, schema_for
from .group_cache import (
    CachePlan,
    HistoryIndex,
    baseline_popularity,
    baseline_topk,
    decide_cache,
    group_interest,
    group_similarities,
    similarity_weights,
)
from .interest import ModelWeights, TrainConfig, evaluate, load_weights, predict, train

log = logging.getLogger(__name__)

CACHE_SCHEMES = ("proposed", "popularity", "topk")
DELIVERY_SCHEMES = (
    "proposed", "proposed-identical", "popularity", "popularity-identical",
    "topk", "topk-identical", "ideal", "no-cache",
)

# stream tags
_USERS, _NEW, _REQUESTS, _PLACEMENT = 1, 2, 3, 4

FIGURE_FILES = (
    "fig4_uhr.csv", "fig5_uhr.csv", "fig6_chr.csv", "fig7_rate.csv", "fig8_minrate.csv", "fig9_throughput.csv",
)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


@dataclass
class Workbench:
    """Data, encoders and trained weights shared by all trials."""

    dataset: RawDataset
    train: pd.DataFrame
    test: pd.DataFrame
    tables: AttributeTables
    schema: EncodingSchema
    weights: ModelWeights
    history: list = field(default_factory=list)
    test_auc: float = math.nan
    test_acc: float = math.nan

    def encode(self, pairs: pd.DataFrame):
        return encode_frame(self.schema, self.tables.rows(pairs))

    def score(self, pairs: pd.DataFrame) -> np.ndarray:
        if len(pairs) == 0:
            return np.zeros(0)
        return predict(self.weights, self.encode(pairs))


def split_validation(train_set: pd.DataFrame, fraction: float, seed: int):
    """Hold back a random ``fraction`` of the training rows for early stopping."""
    rng = _rng(seed, 99)
    order = rng.permutation(len(train_set))
    nv = max(1, int(round(fraction * len(train_set))))
    return train_set.iloc[np.sort(order[nv:])].reset_index(drop=True), train_set.iloc[np.sort(order[:nv])].reset_index(drop=True)


def train_config(config: ExperimentConfig) -> TrainConfig:
    m = config.model
    return TrainConfig(
        k=m.k, hidden=tuple(m.hidden), learning_rate=m.learning_rate, batch_size=m.batch_size,
        max_epochs=m.max_epochs, patience=m.patience, seed=m.seed, init_scale=m.init_scale,
        merge=m.merge, threshold=config.caching.delta,
    )


def prepare(config: ExperimentConfig, dataset: RawDataset | None = None, weights: ModelWeights | None = None) -> Workbench:
    """Load, split, encode and train (or reuse ``weights`` / ``model.weights``)."""
    ds = dataset
    if ds is None:
        if not config.dataset.path:
            raise ValueError("dataset.path is required")
        ds = load_dataset(config.dataset.path, config.dataset.format)
    labelled = label_interactions(ds, config.dataset.like_threshold)
    train_set, test_set, _ = split(ds, labelled, SplitSpec(config.dataset.train_fraction, config.dataset.split_seed))
    tables = build_attributes(ds, train_set, config.model.rating_prior)
    schema = schema_for(tables, train_set, scale=config.model.dense_scale)
    history = []
    if weights is None and config.model.weights:
        weights = load_weights(config.model.weights, schema_hash=schema.hash)
    if weights is None:
        fit, val = split_validation(train_set, config.dataset.validation_fraction, config.dataset.split_seed)
        X_fit = encode_frame(schema, tables.rows(fit))
        X_val = encode_frame(schema, tables.rows(val))
        result = train(X_fit, fit.label.to_numpy(), X_val, val.label.to_numpy(), train_config(config))
        weights, history = result.weights, result.history
    bench = Workbench(ds, train_set, test_set, tables, schema, weights, history)
    if len(test_set):
        bench.test_auc, bench.test_acc = evaluate(
            weights, bench.encode(test_set), test_set.label.to_numpy(), config.caching.delta
        )
    return bench


@dataclass
class RequestMatrix:
    """One requested video per included user (``alpha``)."""

    users: np.ndarray
    items: np.ndarray
    excluded: int = 0

    def alpha(self, catalog) -> np.ndarray:
        catalog = np.asarray(catalog)
        pos = pd.Index(catalog).get_indexer(self.items)
        out = np.zeros((self.users.size, catalog.size), dtype=bool)
        hit = pos >= 0
        out[np.nonzero(hit)[0], pos[hit]] = True
        return out


def generate_requests(candidates: dict, seed, positives: dict | None = None) -> RequestMatrix:
    """Draw one request per user.

    ``candidates`` maps user -> ``(item ids, scores)``; ``positives`` maps
    user -> held-out liked items. A user with positives requests one of them
    uniformly; otherwise a candidate is drawn with probability proportional to
    its score (uniformly if all scores are 0). Users with neither are excluded.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    users, items = [], []
    excluded = 0
    for user in candidates:
        u = rng.random()
        liked = None if positives is None else positives.get(user)
        if liked is not None and len(liked):
            liked = np.sort(np.asarray(liked))
            users.append(user)
            items.append(liked[min(int(u * liked.size), liked.size - 1)])
            continue
        ids, scores = candidates[user]
        ids = np.asarray(ids)
        if ids.size == 0:
            excluded += 1
            continue
        w = np.asarray(scores, dtype=float)
        w = np.ones(ids.size) if not w.sum() > 0 else w
        cdf = np.cumsum(w)
        users.append(user)
        items.append(ids[min(int(np.searchsorted(cdf, u * cdf[-1], side="right")), ids.size - 1)])
    if excluded:
        log.warning("%d user(s) without candidates excluded from requests", excluded)
    return RequestMatrix(np.asarray(users, dtype=np.int64), np.asarray(items, dtype=np.int64), excluded)


def compute_uhr(requests: RequestMatrix, plan: CachePlan) -> float:
    """Share of requests served from the cache."""
    if requests.items.size == 0:
        raise ValueError("hit rate undefined without requests")
    return float(plan.contains(requests.items).mean())


def compute_chr(requests: RequestMatrix, plan: CachePlan, E: int) -> float:
    """Share of the ``E`` cache slots holding a video someone requested."""
    if E <= 0:
        raise ValueError("cache capacity must be positive")
    return float(np.isin(plan.selected, requests.items).sum() / E)


@dataclass
class CachingTrial:
    plans: dict
    requests: RequestMatrix
    candidates: np.ndarray


def caching_trial(bench: Workbench, group, E: int, seed: int, config: ExperimentConfig) -> CachingTrial:
    """Plans of every caching scheme for one user group and capacity."""
    group = np.asarray(group, dtype=np.int64)
    ds = bench.dataset
    delta = config.caching.delta
    new = sample_unwatched(ds, group, config.caching.new_multiplier * E, _rng(seed, _NEW, E))
    held = bench.test[bench.test.user_id.isin(group)]
    pool = pd.concat([new[["user_id", "item_id"]], held[["user_id", "item_id"]]], ignore_index=True)
    pool = pool.drop_duplicates().sort_values(["user_id", "item_id"], kind="mergesort").reset_index(drop=True)
    scores = bench.score(pool)
    catalog = np.unique(pool.item_id.to_numpy())
    history = bench.train[bench.train.user_id.isin(group)]
    if config.caching.scoring == "group":
        # every member scored on every candidate. A video watched in training
        # keeps its predicted score: having seen it says nothing against liking it
        everyone = pd.DataFrame({"user_id": np.repeat(group, catalog.size), "item_id": np.tile(catalog, group.size)})
        P = bench.score(everyone).reshape(group.size, catalog.size)
    else:
        P = np.zeros((group.size, catalog.size))
        rows = pd.Index(group).get_indexer(pool.user_id)
        cols = np.searchsorted(catalog, pool.item_id.to_numpy())
        P[rows, cols] = scores

    index = HistoryIndex(history, users=group, items=np.sort(ds.items.item_id.to_numpy()))
    a_si = similarity_weights(group_similarities(index)) if group.size > 1 else np.ones(1)
    plans = {
        "proposed": decide_cache(group_interest(P, a_si, delta, items=catalog), E),
        "popularity": baseline_popularity(index, E, catalog=index.items),
        "topk": baseline_topk(P, E, items=catalog),
    }

    # keyed in group order so request draws nest across group sizes
    candidates = {int(u): (np.zeros(0, np.int64), np.zeros(0)) for u in group}
    candidates.update(zip(*_grouped(pool, scores)))
    positives = None
    if config.caching.request_mode == "held-out":
        liked = held[held.label == 1]
        positives = {int(u): g.item_id.to_numpy() for u, g in liked.groupby("user_id")}
    requests = generate_requests(candidates, _rng(seed, _REQUESTS), positives)
    return CachingTrial(plans, requests, catalog)


def _grouped(pool: pd.DataFrame, scores):
    users, out = [], []
    uid = pool.user_id.to_numpy()
    iid = pool.item_id.to_numpy()
    if uid.size == 0:
        return users, out
    cuts = np.flatnonzero(np.diff(uid)) + 1
    for part in np.split(np.arange(uid.size), cuts):
        users.append(int(uid[part[0]]))
        out.append((iid[part], scores[part]))
    return users, out


def _cached_flags(group, requests: RequestMatrix, plan: CachePlan) -> np.ndarray:
    """Per user of ``group``: is the requested video in the cache (False
    for users without a request)."""
    hit = dict(zip(requests.users.tolist(), plan.contains(requests.items).tolist()))
    return np.array([hit.get(int(u), False) for u in group], dtype=bool)


def _links(distances, config: ExperimentConfig):
    ch = config.channel
    power = dbm_to_watt(ch.power_dbm)
    noise = dbm_to_watt(ch.noise_dbm_per_hz)
    return [
        LinkProfile(ch.bandwidth_hz, power, float(r), noise, ch.block_s, ch.ref_loss_db, ch.path_loss_exponent)
        for r in distances
    ]


def delivery_trial(links, cached_flags: dict, config: ExperimentConfig) -> list[dict]:
    """Allocate for every delivery scheme; ``cached_flags`` maps cache scheme
    -> per-user bool array."""
    d = config.delay
    n = len(links)
    flag_sets = dict(cached_flags)
    flag_sets["ideal"] = np.ones(n, dtype=bool)
    flag_sets["no-cache"] = np.zeros(n, dtype=bool)
    out = []
    for scheme in DELIVERY_SCHEMES:
        base = scheme.removesuffix("-identical")
        flags = flag_sets[base]
        users = [
            (link, DelayConstraint(d.target_s, d.violation, d.cloud_delay_s, bool(c))) for link, c in zip(links, flags)
        ]
        problem = AllocationProblem(users, config.channel.bandwidth_hz, config.allocator.phi_v, config.allocator.phi_b)
        res = identical_bandwidth(problem) if scheme.endswith("-identical") else double_bisection(problem)
        out.append({
            "scheme": scheme,
            "min_rate": res.min_rate,
            "throughput": res.throughput,
            "cached_users": int(np.sum(flags)),
            "feasible": res.feasible,
        })
    return out


def rate_table(config: ExperimentConfig) -> pd.DataFrame:
    """Sustainable rate of one link over the delay/violation grid."""
    ex, ch = config.experiment, config.channel
    link = LinkProfile(
        ex.rate_bandwidth_hz, dbm_to_watt(ch.power_dbm), ex.rate_distance_m,
        dbm_to_watt(ch.noise_dbm_per_hz), ch.block_s, ch.ref_loss_db, ch.path_loss_exponent,
    )
    mean = mean_capacity(link)
    rows = []
    for d in ex.rate_delays_s:
        for eps in ex.rate_violations:
            c = DelayConstraint(d, eps, config.delay.cloud_delay_s, cached=True)
            rows.append({
                "delay_s": d, "violation": eps, "bandwidth_hz": link.bandwidth, "distance_m": link.distance,
                "power_dbm": ch.power_dbm, "rate_bps": sustainable_rate(link, c), "mean_capacity_bps": mean,
            })
    return pd.DataFrame(rows)


@dataclass
class ExperimentReport:
    caching: pd.DataFrame  # seed, users, capacity, scheme, uhr, chr
    delivery: pd.DataFrame  # seed, users, capacity, scheme, min_rate, throughput, ...
    rates: pd.DataFrame
    training: list = field(default_factory=list)
    test_auc: float = math.nan
    test_acc: float = math.nan


def run_seed(bench: Workbench, seed: int, config: ExperimentConfig):
    ex = config.experiment
    sizes = sorted(set(ex.users))
    all_users = np.sort(bench.dataset.users.user_id.to_numpy())
    if sizes[-1] > all_users.size:
        raise ValueError(f"requested {sizes[-1]} users but the dataset has {all_users.size}")
    order = _rng(seed, _USERS).permutation(all_users)
    distances = place_users(sizes[-1], config.channel.distance_range_m, _rng(seed, _PLACEMENT))
    links_all = _links(distances, config)
    capacities = sorted(set(config.caching.capacities) | {ex.uhr_capacity, ex.delivery_capacity})
    caching_rows, delivery_rows = [], []
    for n in sizes:
        group = order[:n]
        for E in capacities:
            trial = caching_trial(bench, group, E, seed, config)
            for scheme in CACHE_SCHEMES:
                plan = trial.plans[scheme]
                caching_rows.append({
                    "seed": seed, "users": n, "capacity": E, "scheme": scheme,
                    "uhr": compute_uhr(trial.requests, plan), "chr": compute_chr(trial.requests, plan, E),
                })
            if E == ex.delivery_capacity:
                flags = {s: _cached_flags(group, trial.requests, trial.plans[s]) for s in CACHE_SCHEMES}
                for row in delivery_trial(links_all[:n], flags, config):
                    delivery_rows.append({"seed": seed, "users": n, "capacity": E, **row})
        log.info("seed %d: N=%d done", seed, n)
    return caching_rows, delivery_rows


def run_experiment(config: ExperimentConfig, bench: Workbench | None = None) -> ExperimentReport:
    bench = prepare(config) if bench is None else bench
    caching_rows, delivery_rows = [], []
    for seed in config.experiment.seeds:
        c, d = run_seed(bench, seed, config)
        caching_rows += c
        delivery_rows += d
    caching = pd.DataFrame(caching_rows, columns=["seed", "users", "capacity", "scheme", "uhr", "chr"])
    delivery = pd.DataFrame(
        delivery_rows, columns=["seed", "users", "capacity", "scheme", "min_rate", "throughput", "cached_users", "feasible"]
    )
    return ExperimentReport(caching, delivery, rate_table(config), bench.history, bench.test_auc, bench.test_acc)


SUMMARY_COLUMNS = ["n_seeds", "mean", "std", "ci95_low", "ci95_high"]


def summarise(frame: pd.DataFrame, keys: list, value: str) -> pd.DataFrame:
    """Mean and normal 95% interval of ``value`` across seeds per ``keys``."""
    rows = []
    for key, g in frame.groupby(keys, sort=True):
        v = g[value].to_numpy(dtype=float)
        n = v.size
        mean = float(v.mean())
        std = float(v.std(ddof=1)) if n > 1 else 0.0
        half = 1.96 * std / math.sqrt(n)
        rows.append([*(key if isinstance(key, tuple) else (key,)), n, mean, std, mean - half, mean + half])
    return pd.DataFrame(rows, columns=[*keys, *SUMMARY_COLUMNS])


def figure_tables(report: ExperimentReport, config: ExperimentConfig) -> dict:
    ex = config.experiment
    c = report.caching
    d = report.delivery
    return {
        "fig4_uhr.csv": summarise(c[c.capacity == ex.uhr_capacity], ["scheme", "users", "capacity"], "uhr"),
        "fig5_uhr.csv": summarise(c, ["scheme", "users", "capacity"], "uhr"),
        "fig6_chr.csv": summarise(c[c.users == ex.chr_users], ["scheme", "users", "capacity"], "chr"),
        "fig7_rate.csv": report.rates,
        "fig8_minrate.csv": summarise(d, ["scheme", "users"], "min_rate"),
        "fig9_throughput.csv": summarise(d, ["scheme", "users"], "throughput"),
    }


def write_csv(frame: pd.DataFrame, path, header: str) -> None:
    """CSV with a leading ``#`` provenance line and fixed float formatting."""
    text = frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")
    Path(path).write_text(f"# {header}\n{text}", encoding="utf-8")


def write_report(report: ExperimentReport, config: ExperimentConfig, out_dir, header: str) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, table in figure_tables(report, config).items():
        write_csv(table, out / name, header)
        written.append(out / name)
    write_csv(report.caching, out / "caching_replicates.csv", header)
    write_csv(report.delivery, out / "delivery_replicates.csv", header)
    written += [out / "caching_replicates.csv", out / "delivery_replicates.csv"]
    return written
