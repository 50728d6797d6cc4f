"""Group-interest cache placement and the popularity / Top-K baselines.

Individual scores ``P[n, m]`` of ``N`` users on ``C`` candidate videos are
folded into one group score per video. Each user's vote is weighted by how
similar the user is to the rest of the group (co-watch similarity with an
inverse-popularity penalty) and by the share of the group that likes the
video (scores ``>= delta``) or does not.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
import scipy.sparse as sp


class HistoryIndex:
    """Watched sets of a user group, as a sparse users x items incidence."""

    def __init__(self, pairs: pd.DataFrame, users=None, items=None):
        pairs = pairs[["user_id", "item_id"]].drop_duplicates()
        self.users = np.asarray(sorted(pairs.user_id.unique()) if users is None else users, dtype=np.int64)
        if items is None:
            items = np.unique(pairs.item_id.to_numpy())
        self.items = np.asarray(items, dtype=np.int64)
        upos = pd.Index(self.users).get_indexer(pairs.user_id)
        ipos = pd.Index(self.items).get_indexer(pairs.item_id)
        keep = (upos >= 0) & (ipos >= 0)
        self.matrix = sp.csr_matrix(
            (np.ones(int(keep.sum())), (upos[keep], ipos[keep])), shape=(self.users.size, self.items.size)
        )
        self._upos = {int(u): i for i, u in enumerate(self.users)}
        self._ipos = {int(m): i for i, m in enumerate(self.items)}

    @classmethod
    def from_sets(cls, watched: dict) -> "HistoryIndex":
        rows = [(u, m) for u, ms in watched.items() for m in ms]
        frame = pd.DataFrame(rows, columns=["user_id", "item_id"]) if rows else pd.DataFrame(
            {"user_id": np.array([], np.int64), "item_id": np.array([], np.int64)})
        return cls(frame, users=sorted(watched))

    @property
    def user_degree(self) -> np.ndarray:
        """``|X(n)|`` per user."""
        return np.asarray(self.matrix.sum(axis=1)).reshape(-1)

    @property
    def item_degree(self) -> np.ndarray:
        """``|I(m)|`` per item, over the indexed users only."""
        return np.asarray(self.matrix.sum(axis=0)).reshape(-1)

    def watched(self, user) -> set:
        row = self.matrix.getrow(self._upos[int(user)])
        return {int(self.items[j]) for j in row.indices}

    def watchers(self, item) -> set:
        j = self._ipos.get(int(item))
        if j is None:
            return set()
        col = self.matrix.getcol(j)
        return {int(self.users[i]) for i in col.nonzero()[0]}

    def watch_counts(self, items) -> np.ndarray:
        """Watcher count for each id in ``items`` (0 for unseen ids)."""
        deg = self.item_degree
        pos = pd.Index(self.items).get_indexer(np.asarray(items))
        return np.where(pos >= 0, deg[np.maximum(pos, 0)], 0.0)


def _penalty(item_degree):
    deg = np.asarray(item_degree, dtype=float)
    out = np.zeros_like(deg)
    live = deg > 0
    out[live] = 1.0 / np.log1p(deg[live])
    return out


def similarity_matrix(index: HistoryIndex, penalized: bool = True) -> np.ndarray:
    """All pairwise user similarities (the diagonal is self-similarity).

    Common videos count ``1/ln(1+|I(m)|)`` each when ``penalized``, else 1,
    over ``sqrt(|X(u1)| |X(u2)|)``; users without history score 0.
    """
    H = index.matrix
    weight = _penalty(index.item_degree) if penalized else np.ones(H.shape[1])
    S = np.asarray((H @ sp.diags(weight) @ H.T).todense(), dtype=float)
    deg = index.user_degree
    norm = np.sqrt(np.outer(deg, deg))
    return np.divide(S, norm, out=np.zeros_like(S), where=norm > 0)


def penalized_similarity(index: HistoryIndex, u1, u2) -> float:
    x1, x2 = index.watched(u1), index.watched(u2)
    if not x1 or not x2:
        return 0.0
    total = sum(1.0 / math.log1p(len(index.watchers(m))) for m in x1 & x2)
    return total / math.sqrt(len(x1) * len(x2))


def cosine_similarity(index: HistoryIndex, u1, u2) -> float:
    x1, x2 = index.watched(u1), index.watched(u2)
    if not x1 or not x2:
        return 0.0
    return len(x1 & x2) / math.sqrt(len(x1) * len(x2))


def group_similarities(index: HistoryIndex, penalized: bool = True) -> np.ndarray:
    """``simg`` for every indexed user: similarity summed over the others."""
    S = similarity_matrix(index, penalized)
    return S.sum(axis=1) - np.diag(S)


def group_similarity(index: HistoryIndex, user, penalized: bool = True) -> float:
    if index.users.size < 2:
        raise ValueError("group similarity needs at least two users")
    return float(group_similarities(index, penalized)[index._upos[int(user)]])


def similarity_weights(simg) -> np.ndarray:
    """Min-max scaling to [0, 1]; all-equal input maps to all ones."""
    s = np.asarray(simg, dtype=float)
    if s.size == 0:
        raise ValueError("no users")
    lo, hi = s.min(), s.max()
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.ones_like(s)
    return (s - lo) / (hi - lo)


def emotion_proportions(scores, delta: float = 0.5):
    """``(a_po, a_ne)`` along the first axis; ``score == delta`` is positive."""
    s = np.asarray(scores, dtype=float)
    if s.shape[0] < 1:
        raise ValueError("need at least one user")
    po = (s >= delta).mean(axis=0)
    return po, 1.0 - po


@dataclass
class GroupScore:
    items: np.ndarray
    pre: np.ndarray
    a_po: np.ndarray
    a_ne: np.ndarray


def group_interest(predictions, a_si, delta: float = 0.5, items=None) -> GroupScore:
    """Group score of each column of the ``N x C`` prediction matrix.

    ``Pre_m = 1/N sum_n a_si[n] P[n, m] (a_po[m] if P[n, m] >= delta else a_ne[m])``.
    """
    P = np.atleast_2d(np.asarray(predictions, dtype=float))
    a_si = np.asarray(a_si, dtype=float)
    if a_si.shape != (P.shape[0],):
        raise ValueError("one similarity weight per user is required")
    a_po, a_ne = emotion_proportions(P, delta)
    liked = P >= delta
    weighted = a_si[:, None] * P
    pre = (np.where(liked, a_po[None, :], a_ne[None, :]) * weighted).sum(axis=0) / P.shape[0]
    ids = np.arange(P.shape[1]) if items is None else np.asarray(items)
    return GroupScore(ids, pre, a_po, a_ne)


@dataclass
class CachePlan:
    """``cached[j]`` flags ``items[j]``; ``selected`` lists cached ids by rank."""

    items: np.ndarray
    cached: np.ndarray
    selected: np.ndarray
    scores: np.ndarray | None = None

    @property
    def size(self) -> int:
        return int(self.selected.size)

    def contains(self, item_ids) -> np.ndarray:
        return np.isin(np.asarray(item_ids), self.selected)


def _top(items, scores, E: int) -> CachePlan:
    if E < 1:
        raise ValueError("cache capacity E must be at least 1")
    items = np.asarray(items)
    scores = np.asarray(scores, dtype=float)
    order = np.lexsort((items, -scores))
    chosen = order[:E]
    cached = np.zeros(items.size, dtype=bool)
    cached[chosen] = True
    return CachePlan(items, cached, items[chosen], scores)


def decide_cache(score: GroupScore, E: int) -> CachePlan:
    """Cache the ``E`` best group scores; ties go to the lower video id."""
    return _top(score.items, score.pre, E)


def baseline_popularity(history: HistoryIndex, E: int, catalog=None) -> CachePlan:
    """Cache the ``E`` videos of ``catalog`` with the most watchers in ``history``."""
    catalog = history.items if catalog is None else np.asarray(catalog)
    return _top(catalog, history.watch_counts(catalog), E)


def baseline_topk(predictions, E: int, items=None) -> CachePlan:
    """Cache the distinct videos that carry the highest individual scores."""
    P = np.atleast_2d(np.asarray(predictions, dtype=float))
    ids = np.arange(P.shape[1]) if items is None else np.asarray(items)
    best = P.max(axis=0)
    # ranking videos by their best individual score == walking the pooled
    # score list in order and skipping repeats
    return _top(ids, best, E)
