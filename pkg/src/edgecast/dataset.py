"""MovieLens-style interaction data: loading, labelling, personas and splits.

Three on-disk layouts are understood:

``ml-100k``
    ``u.data`` (tab separated ``user item rating timestamp``), ``u.user``
    and ``u.item`` (``|`` separated, latin-1).
``ml-1m``
    ``ratings.dat``, ``users.dat``, ``movies.dat`` (``::`` separated).
``csv``
    ``users.csv``, ``items.csv``, ``ratings.csv`` with header rows; see
    ``CSV_COLUMNS``. ``genres`` in ``items.csv`` is a ``|``-joined list.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

log = logging.getLogger(__name__)

CANONICAL_FORMAT = "edgecast.dataset"
CANONICAL_VERSION = 1

ML_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime", "Documentary", "Drama",
    "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
)

CSV_COLUMNS = {
    "users.csv": ("user_id", "age", "gender", "occupation", "zip"),
    "items.csv": ("item_id", "title", "release_year", "genres"),
    "ratings.csv": ("user_id", "item_id", "rating", "timestamp"),
}

USER_COLUMNS = ["user_id", "age", "gender", "occupation", "zip"]
RATING_COLUMNS = ["user_id", "item_id", "rating", "timestamp"]


class DatasetParseError(ValueError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class DatasetIntegrityError(ValueError):
    pass


@dataclass
class RawDataset:
    """``users``/``items``/``ratings`` frames; ``items`` carries one 0/1
    column per entry of ``genres``."""

    users: pd.DataFrame
    items: pd.DataFrame
    ratings: pd.DataFrame
    genres: tuple

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def check(self) -> "RawDataset":
        for frame, key in ((self.users, "user_id"), (self.items, "item_id")):
            dup = frame[key].duplicated()
            if dup.any():
                raise DatasetIntegrityError(f"duplicate {key} {frame[key][dup].iloc[0]}")
        r = self.ratings
        for key, frame in (("user_id", self.users), ("item_id", self.items)):
            dangling = ~r[key].isin(frame[key])
            if dangling.any():
                row = r[dangling].iloc[0]
                raise DatasetIntegrityError(
                    f"rating ({row.user_id}, {row.item_id}) references unknown {key} {row[key]}"
                )
        dup = r.duplicated(["user_id", "item_id"])
        if dup.any():
            row = r[dup].iloc[0]
            raise DatasetIntegrityError(f"duplicate rating for pair ({row.user_id}, {row.item_id})")
        return self


def _rows(path: Path, sep: str, ncols: int, encoding="latin-1"):
    with open(path, encoding=encoding, newline="") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) != ncols:
                raise DatasetParseError(path, lineno, f"expected {ncols} fields, got {len(parts)}")
            yield lineno, parts


def _int(path, lineno, value, what):
    try:
        return int(value)
    except ValueError:
        raise DatasetParseError(path, lineno, f"bad {what} {value!r}") from None


def _rating(path, lineno, value):
    try:
        r = float(value)
    except ValueError:
        raise DatasetParseError(path, lineno, f"bad rating {value!r}") from None
    if not 1 <= r <= 5:
        raise DatasetParseError(path, lineno, f"rating {value!r} outside 1..5")
    return r


def _ratings_frame(records):
    frame = pd.DataFrame(records, columns=RATING_COLUMNS)
    return frame.astype({"user_id": "int64", "item_id": "int64", "rating": "float64", "timestamp": "int64"})


def _items_frame(records, genres):
    cols = ["item_id", "title", "release_year", *genres]
    frame = pd.DataFrame(records, columns=cols)
    return frame.astype({"item_id": "int64", "release_year": "float64", **{g: "int8" for g in genres}})


def _year(text):
    m = re.search(r"(\d{4})\s*$", text.strip()) or re.search(r"\((\d{4})\)\s*$", text.strip())
    return float(m.group(1)) if m else math.nan


def _load_ml100k(root: Path) -> RawDataset:
    ratings = []
    path = root / "u.data"
    for lineno, p in _rows(path, "\t", 4):
        ratings.append((_int(path, lineno, p[0], "user id"), _int(path, lineno, p[1], "item id"),
                        _rating(path, lineno, p[2]), _int(path, lineno, p[3], "timestamp")))
    users = []
    path = root / "u.user"
    for lineno, p in _rows(path, "|", 5):
        users.append((_int(path, lineno, p[0], "user id"), _int(path, lineno, p[1], "age"), p[2], p[3], p[4]))
    items = []
    path = root / "u.item"
    for lineno, p in _rows(path, "|", 5 + len(ML_GENRES)):
        flags = [_int(path, lineno, f, "genre flag") for f in p[5:]]
        items.append((_int(path, lineno, p[0], "item id"), p[1], _year(p[2]), *flags))
    return RawDataset(
        pd.DataFrame(users, columns=USER_COLUMNS).astype({"user_id": "int64", "age": "int64"}),
        _items_frame(items, ML_GENRES),
        _ratings_frame(ratings),
        ML_GENRES,
    )


def _load_ml1m(root: Path) -> RawDataset:
    ratings = []
    path = root / "ratings.dat"
    for lineno, p in _rows(path, "::", 4):
        ratings.append((_int(path, lineno, p[0], "user id"), _int(path, lineno, p[1], "item id"),
                        _rating(path, lineno, p[2]), _int(path, lineno, p[3], "timestamp")))
    users = []
    path = root / "users.dat"
    for lineno, p in _rows(path, "::", 5):
        # ml-1m order is id, gender, age, occupation, zip
        users.append((_int(path, lineno, p[0], "user id"), _int(path, lineno, p[2], "age"), p[1], p[3], p[4]))
    raw_items = []
    genres = set()
    path = root / "movies.dat"
    for lineno, p in _rows(path, "::", 3):
        g = [x for x in p[2].split("|") if x]
        genres.update(g)
        raw_items.append((_int(path, lineno, p[0], "item id"), p[1], _year(p[1]), g))
    return _with_genre_lists(users, raw_items, ratings, tuple(sorted(genres)))


def _with_genre_lists(users, raw_items, ratings, genres):
    items = [(i, t, y, *[int(g in gl) for g in genres]) for i, t, y, gl in raw_items]
    return RawDataset(
        pd.DataFrame(users, columns=USER_COLUMNS).astype({"user_id": "int64", "age": "int64"}),
        _items_frame(items, genres),
        _ratings_frame(ratings),
        genres,
    )


def _csv_rows(path: Path, columns):
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != columns:
            raise DatasetParseError(path, 1, f"header must be {','.join(columns)}")
        for row in reader:
            if not row:
                continue
            if len(row) != len(columns):
                raise DatasetParseError(path, reader.line_num, f"expected {len(columns)} fields, got {len(row)}")
            yield reader.line_num, row


def _load_csv(root: Path) -> RawDataset:
    path = root / "ratings.csv"
    ratings = [
        (_int(path, n, p[0], "user id"), _int(path, n, p[1], "item id"), _rating(path, n, p[2]), _int(path, n, p[3], "timestamp"))
        for n, p in _csv_rows(path, CSV_COLUMNS["ratings.csv"])
    ]
    path = root / "users.csv"
    users = [
        (_int(path, n, p[0], "user id"), _int(path, n, p[1], "age"), p[2], p[3], p[4])
        for n, p in _csv_rows(path, CSV_COLUMNS["users.csv"])
    ]
    path = root / "items.csv"
    raw_items = []
    genres = set()
    for n, p in _csv_rows(path, CSV_COLUMNS["items.csv"]):
        year = math.nan
        if p[2].strip():
            year = float(_int(path, n, p[2], "release year"))
        g = [x for x in p[3].split("|") if x]
        genres.update(g)
        raw_items.append((_int(path, n, p[0], "item id"), p[1], year, g))
    return _with_genre_lists(users, raw_items, ratings, tuple(sorted(genres)))


_LOADERS = {"ml-100k": _load_ml100k, "ml-1m": _load_ml1m, "csv": _load_csv}


def load_dataset(path, format: str = "ml-100k") -> RawDataset:
    """Load and integrity-check a dataset directory."""
    try:
        loader = _LOADERS[format]
    except KeyError:
        raise ValueError(f"unknown dataset format {format!r}; choose from {sorted(_LOADERS)}") from None
    root = Path(path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    ds = loader(root)
    log.info("loaded %s: %d users, %d items, %d ratings", root, ds.n_users, ds.n_items, len(ds.ratings))
    return ds.check()


def label_interactions(ds: RawDataset, threshold: float = 4.0) -> pd.DataFrame:
    """``(user_id, item_id, label)`` with ``label = rating >= threshold``."""
    if not 1 <= threshold <= 5:
        raise ValueError("like threshold must lie in [1, 5]")
    r = ds.ratings
    return pd.DataFrame({
        "user_id": r.user_id.to_numpy(),
        "item_id": r.item_id.to_numpy(),
        "label": (r.rating.to_numpy() >= threshold).astype(np.int8),
    })


def build_personas(ds: RawDataset, ratings: pd.DataFrame | None = None) -> pd.DataFrame:
    """Per-user statistics indexed by ``user_id``.

    Columns: ``count``, ``mean_rating`` and ``frac_<genre>`` (share of the
    user's rated items carrying that genre). ``ratings`` restricts the
    history used, e.g. to a training split; users without history get zeros.
    """
    r = ds.ratings if ratings is None else ratings
    if "rating" not in r:
        r = r.merge(ds.ratings[["user_id", "item_id", "rating"]], on=["user_id", "item_id"], how="left")
    genre_cols = list(ds.genres)
    flags = ds.items.set_index("item_id")[genre_cols]
    joined = flags.reindex(r.item_id.to_numpy()).to_numpy(dtype=float)
    frame = pd.DataFrame(joined, columns=[f"frac_{g}" for g in genre_cols])
    frame["user_id"] = r.user_id.to_numpy()
    frame["rating"] = r.rating.to_numpy(dtype=float)
    grouped = frame.groupby("user_id")
    out = grouped[[f"frac_{g}" for g in genre_cols]].mean()
    out.insert(0, "mean_rating", grouped["rating"].mean())
    out.insert(0, "count", grouped.size().astype(float))
    out = out.reindex(ds.users.user_id.to_numpy()).fillna(0.0)
    out.index.name = "user_id"
    return out


@dataclass(frozen=True)
class SplitSpec:
    """``new_per_user`` is ``M``; with ``None`` no new set is drawn."""

    train_fraction: float = 0.8
    seed: int = 0
    new_per_user: int | None = None

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must lie in (0, 1)")
        if self.new_per_user is not None and self.new_per_user < 0:
            raise ValueError("new_per_user must be non-negative")


def train_size(n: int, fraction: float) -> int:
    """Nearest integer to ``fraction * n``, halves rounded up."""
    return int(math.floor(fraction * n + 0.5))


def sample_unwatched(ds: RawDataset, users, m: int, rng: np.random.Generator) -> pd.DataFrame:
    """Up to ``m`` items per user drawn without replacement from those absent
    from the user's full rating history; rows are ``(user_id, item_id)``."""
    catalog = np.sort(ds.items.item_id.to_numpy())
    watched = ds.ratings.groupby("user_id").item_id.apply(np.asarray)
    uid, iid = [], []
    short = 0
    for u in users:
        seen = watched.get(u)
        pool = catalog if seen is None else np.setdiff1d(catalog, seen, assume_unique=True)
        if pool.size < m:
            short += 1
            pick = pool
        else:
            pick = np.sort(rng.choice(pool, size=m, replace=False))
        uid.append(np.full(pick.size, u, dtype=np.int64))
        iid.append(pick)
    if short:
        log.warning("%d user(s) have fewer than %d unwatched items; sampled all available", short, m)
    if not uid:
        return pd.DataFrame({"user_id": np.array([], np.int64), "item_id": np.array([], np.int64)})
    return pd.DataFrame({"user_id": np.concatenate(uid), "item_id": np.concatenate(iid)})


def split(ds: RawDataset, interactions: pd.DataFrame, spec: SplitSpec):
    """Random train/test partition of ``interactions`` plus the unwatched set.

    Returns ``(train, test, new)``; ``new`` has a ``label`` column of NaN
    (unknown) and is empty when ``spec.new_per_user`` is ``None``.
    """
    rng = np.random.default_rng(spec.seed)
    n = len(interactions)
    order = rng.permutation(n)
    k = train_size(n, spec.train_fraction)
    train = interactions.iloc[np.sort(order[:k])].reset_index(drop=True)
    test = interactions.iloc[np.sort(order[k:])].reset_index(drop=True)
    if spec.new_per_user is None:
        new = pd.DataFrame({"user_id": np.array([], np.int64), "item_id": np.array([], np.int64)})
    else:
        new = sample_unwatched(ds, ds.users.user_id.to_numpy(), spec.new_per_user, rng)
    new["label"] = np.nan
    return train, test, new


def _clean(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return None if math.isnan(v) else float(v)
    return v


def canonical_bytes(ds: RawDataset) -> bytes:
    """Versioned, self-describing JSON rendering; equal datasets give equal bytes."""
    users = ds.users.sort_values("user_id")
    items = ds.items.sort_values("item_id")
    ratings = ds.ratings.sort_values(["user_id", "item_id"])
    doc = {
        "format": CANONICAL_FORMAT,
        "version": CANONICAL_VERSION,
        "genres": list(ds.genres),
        "columns": {
            "users": USER_COLUMNS,
            "items": ["item_id", "title", "release_year", "genre_flags"],
            "ratings": RATING_COLUMNS,
        },
        "users": [[_clean(v) for v in row] for row in users[USER_COLUMNS].itertuples(index=False)],
        "items": [
            [_clean(row[0]), row[1], _clean(row[2]), [int(x) for x in row[3:]]]
            for row in items[["item_id", "title", "release_year", *ds.genres]].itertuples(index=False)
        ],
        "ratings": [[_clean(v) for v in row] for row in ratings[RATING_COLUMNS].itertuples(index=False)],
    }
    return (json.dumps(doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False) + "\n").encode("utf-8")


def save_canonical(ds: RawDataset, path) -> None:
    Path(path).write_bytes(canonical_bytes(ds))


def load_canonical(path) -> RawDataset:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != CANONICAL_FORMAT:
        raise DatasetParseError(path, 1, "not a canonical dataset file")
    if doc.get("version") != CANONICAL_VERSION:
        raise DatasetParseError(path, 1, f"unsupported canonical version {doc.get('version')!r}")
    genres = tuple(doc["genres"])
    users = pd.DataFrame(doc["users"], columns=USER_COLUMNS).astype({"user_id": "int64", "age": "int64"})
    items = _items_frame(
        [(i, t, math.nan if y is None else y, *flags) for i, t, y, flags in doc["items"]], genres
    )
    return RawDataset(users, items, _ratings_frame(doc["ratings"]), genres).check()
