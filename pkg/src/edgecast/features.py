"""Feature vectors for (user, item) pairs.

A vector is a one-hot block (one slot per training category of every
categorical field, plus a trailing "unknown" slot) followed by a dense block
of normalised reals. Offsets are fixed by the fitted :class:`EncodingSchema`.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import scipy.sparse as sp

from .dataset import RawDataset, build_personas

log = logging.getLogger(__name__)

SCHEMA_FORMAT = "edgecast.schema"
SCHEMA_VERSION = 1

USER_FIELDS = ("user_id", "gender", "occupation")
ITEM_FIELDS = ("item_id",)


@dataclass(frozen=True)
class FeatureVector:
    indices: np.ndarray  # active one-hot slots, one per categorical field
    dense: np.ndarray
    dim: int

    def to_array(self) -> np.ndarray:
        x = np.zeros(self.dim)
        x[self.indices] = 1.0
        x[self.dim - self.dense.size:] = self.dense
        return x


@dataclass(frozen=True)
class EncodingSchema:
    """``fields`` maps each categorical column to its sorted vocabulary;
    ``dense`` lists ``(column, mu, sigma)``."""

    fields: tuple = ()
    dense: tuple = ()
    scale: str = "std"
    _lookup: dict = field(default=None, compare=False, repr=False, hash=False)

    def __post_init__(self):
        lookup = {name: {v: i for i, v in enumerate(vocab)} for name, vocab in self.fields}
        object.__setattr__(self, "_lookup", lookup)

    @property
    def offsets(self) -> dict:
        out, pos = {}, 0
        for name, vocab in self.fields:
            out[name] = pos
            pos += len(vocab) + 1
        return out

    @property
    def sparse_dim(self) -> int:
        return sum(len(v) + 1 for _, v in self.fields)

    @property
    def dim(self) -> int:
        return self.sparse_dim + len(self.dense)

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    def to_json(self) -> str:
        doc = {
            "format": SCHEMA_FORMAT,
            "version": SCHEMA_VERSION,
            "scale": self.scale,
            "fields": [[name, list(vocab)] for name, vocab in self.fields],
            "dense": [[name, mu, sigma] for name, mu, sigma in self.dense],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    @classmethod
    def from_json(cls, text: str) -> "EncodingSchema":
        doc = json.loads(text)
        if doc.get("format") != SCHEMA_FORMAT or doc.get("version") != SCHEMA_VERSION:
            raise ValueError("not a supported encoding schema document")
        return cls(
            fields=tuple((name, tuple(vocab)) for name, vocab in doc["fields"]),
            dense=tuple((name, float(mu), float(sigma)) for name, mu, sigma in doc["dense"]),
            scale=doc["scale"],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EncodingSchema":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def _key(v) -> str:
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        v = int(v)
    return str(v)


def _sorted_vocab(values) -> tuple:
    uniq = pd.unique(pd.Series(values).dropna())
    try:
        uniq = sorted(uniq)
    except TypeError:
        uniq = sorted(uniq, key=str)
    return tuple(_key(v) for v in uniq)


def fit_schema(rows: pd.DataFrame, categorical, dense, scale: str = "std") -> EncodingSchema:
    """Vocabularies and normalisation statistics from training rows.

    ``scale="std"`` z-scores with the population standard deviation;
    ``"variance"`` divides by the variance instead. Missing dense values are
    imputed with the training mean before the spread is taken. Constant
    dense columns are dropped with a warning.
    """
    if len(rows) == 0:
        raise ValueError("cannot fit an encoding schema on zero rows")
    if scale not in ("std", "variance"):
        raise ValueError("scale must be 'std' or 'variance'")
    fields = tuple((name, _sorted_vocab(rows[name])) for name in categorical)
    stats = []
    for name in dense:
        col = rows[name].to_numpy(dtype=float)
        if np.isnan(col).all():
            log.warning("dense feature %r has no values in training; dropped", name)
            continue
        mu = float(np.nanmean(col))
        filled = np.where(np.isnan(col), mu, col)
        sd = float(np.sqrt(np.mean((filled - mu) ** 2)))
        if not sd > 1e-12 * max(1.0, abs(mu)):
            log.warning("dense feature %r is constant in training; dropped", name)
            continue
        stats.append((name, mu, sd if scale == "std" else sd * sd))
    return EncodingSchema(fields=fields, dense=tuple(stats), scale=scale)


def _normalise(mu, sigma, values):
    values = np.asarray(values, dtype=float)
    return np.where(np.isnan(values), 0.0, (values - mu) / sigma)


def encode(schema: EncodingSchema, row) -> FeatureVector:
    """Encode one row (mapping with the schema's columns)."""
    idx = np.empty(schema.n_fields, dtype=np.int64)
    for j, ((name, vocab), off) in enumerate(zip(schema.fields, schema.offsets.values())):
        idx[j] = off + schema._lookup[name].get(_key(row[name]), len(vocab))
    dense = np.array([_normalise(mu, s, row[n]) for n, mu, s in schema.dense], dtype=float)
    return FeatureVector(idx, dense.reshape(-1), schema.dim)


def encode_frame(schema: EncodingSchema, rows: pd.DataFrame) -> sp.csr_matrix:
    """Row-wise encoding of a frame into an ``n x dim`` CSR matrix."""
    n = len(rows)
    cols = []
    for (name, vocab), off in zip(schema.fields, schema.offsets.values()):
        lookup = schema._lookup[name]
        keys = rows[name].astype(object).map(_key)
        cols.append(off + keys.map(lookup).fillna(len(vocab)).to_numpy(dtype=np.int64))
    base = schema.sparse_dim
    values = [np.ones((n, len(cols)))]
    if schema.dense:
        dense = np.column_stack([_normalise(mu, s, rows[name]) for name, mu, s in schema.dense])
        cols.extend(np.full(n, base + j, dtype=np.int64) for j in range(len(schema.dense)))
        values.append(dense)
    width = len(cols)
    indices = np.column_stack(cols).reshape(-1) if width else np.zeros(0, np.int64)
    data = np.hstack(values).reshape(-1) if width else np.zeros(0)
    indptr = np.arange(0, n * width + 1, width) if width else np.zeros(n + 1, np.int64)
    return sp.csr_matrix((data, indices, indptr), shape=(n, schema.dim))


@dataclass
class AttributeTables:
    """User and item attribute frames used to build feature rows.

    Persona and item statistics come from the ratings passed to
    :func:`build_attributes` (normally the training split only).
    """

    users: pd.DataFrame
    items: pd.DataFrame

    @property
    def categorical(self) -> list:
        return [*USER_FIELDS, *ITEM_FIELDS]

    @property
    def dense(self) -> list:
        skip = set(self.categorical)
        return [c for c in (*self.users.columns, *self.items.columns) if c not in skip]

    def rows(self, pairs: pd.DataFrame) -> pd.DataFrame:
        """Join attributes onto ``(user_id, item_id)`` pairs, order kept."""
        u = self.users.reindex(pairs.user_id.to_numpy()).reset_index(drop=True)
        i = self.items.reindex(pairs.item_id.to_numpy()).reset_index(drop=True)
        out = pd.concat([u, i], axis=1)
        out["user_id"] = pairs.user_id.to_numpy()
        out["item_id"] = pairs.item_id.to_numpy()
        return out


def _shrunk_mean(total, count, prior_mean, strength):
    return (total + strength * prior_mean) / (count + strength)


def build_attributes(ds: RawDataset, history: pd.DataFrame, prior_strength: float = 10.0) -> AttributeTables:
    """Attribute tables with personas and item statistics over ``history``
    (``user_id``, ``item_id`` pairs that must appear in ``ds.ratings``).

    Mean ratings are pulled toward the global mean by ``prior_strength``
    pseudo-ratings, so a video rated once does not hand its own label back
    to the model as a feature.
    """
    hist = history[["user_id", "item_id"]].merge(ds.ratings, on=["user_id", "item_id"], how="left")
    if prior_strength < 0:
        raise ValueError("prior_strength must be non-negative")
    mu = float(hist.rating.mean()) if len(hist) else 0.0
    personas = build_personas(ds, hist)
    personas["mean_rating"] = _shrunk_mean(
        personas.mean_rating * personas["count"], personas["count"], mu, prior_strength
    ).where(personas["count"] > 0, mu)
    users = ds.users.set_index("user_id")[["gender", "occupation", "age"]].join(personas.add_prefix("user_"))
    grouped = hist.groupby("item_id").rating
    items = ds.items.set_index("item_id")[["release_year", *ds.genres]].astype(float)
    items = items.rename(columns={g: f"genre_{g}" for g in ds.genres})
    count = grouped.size().reindex(items.index).fillna(0.0)
    total = grouped.sum().reindex(items.index).fillna(0.0)
    items["item_count"] = count
    items["item_mean_rating"] = _shrunk_mean(total, count, mu, prior_strength) if prior_strength > 0 else (
        total / count.where(count > 0))
    return AttributeTables(users=users, items=items)


def schema_for(tables: AttributeTables, train_pairs: pd.DataFrame, scale: str = "std") -> EncodingSchema:
    return fit_schema(tables.rows(train_pairs), tables.categorical, tables.dense, scale=scale)


def dense_block_stats(schema: EncodingSchema, X: sp.csr_matrix):
    """Column means and population stds of the dense block of ``X``."""
    block = X[:, schema.sparse_dim:].toarray()
    if block.shape[1] == 0:
        return np.zeros(0), np.zeros(0)
    return block.mean(axis=0), block.std(axis=0)
