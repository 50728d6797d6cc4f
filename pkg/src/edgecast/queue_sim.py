"""Discrete-time fluid queue of one user stream.

Each block ``i`` enqueues ``V T`` bits and the link drains up to
``R(i) T`` bits of backlog-plus-arrival, i.e. the Lindley recursion
``Q(i+1) = max(0, Q(i) + V T - R(i) T)``. The delay of block ``k``'s
arrivals is the number of further blocks until the cumulative departures
catch up with the cumulative arrivals through block ``k``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .channel import LinkProfile, sample_capacity
from .delay import DelayConstraint, dvp_bound, effective_budget, sustainable_rate

DEFAULT_BLOCKS = 1_000_000
DEFAULT_WARMUP = 10_000
DEFAULT_BACKLOG_CAP = 1e15
DEFAULT_BATCHES = 50


@dataclass
class QueueTrace:
    """Backlog ``backlog[i]`` is the queue content at the start of block ``i``
    (length ``blocks + 1``); ``service`` holds the bits the link could send in
    each block."""

    arrival: float
    service: np.ndarray
    backlog: np.ndarray
    warmup: int
    unstable: bool

    @property
    def blocks(self) -> int:
        return self.service.shape[0]

    def delays(self) -> np.ndarray:
        """Per-arrival-block delay in blocks; ``-1`` if still queued at trace end."""
        n = self.blocks
        arrived = self.arrival * np.arange(n + 1)
        departed = np.maximum.accumulate(arrived - self.backlog)
        # block k's bits are out once departed[k + 1 + d] >= arrived[k + 1]
        pos = np.searchsorted(departed, arrived[1:], side="left")
        delay = pos - np.arange(1, n + 1)
        delay[pos > n] = -1
        return delay

    def violations(self, budget_blocks: int) -> np.ndarray:
        """Per measured arrival block: did it miss a ``budget_blocks`` deadline."""
        b = int(budget_blocks)
        n = self.blocks
        last = n - 1 - b
        if last < self.warmup:
            raise ValueError("trace too short for this delay budget")
        window = np.concatenate(([0.0], np.cumsum(self.service)))
        k = np.arange(self.warmup, last + 1)
        # arrivals of block k miss the deadline iff Q(k+1) exceeds the next b blocks of service
        ahead = window[k + 1 + b] - window[k + 1]
        return self.backlog[k + 1] > ahead

    def dvp(self, budget_blocks: int) -> tuple[float, float, int]:
        """Empirical ``Pr{delay > budget}`` after warmup, its binomial standard
        error and the number of measured arrival blocks.

        The binomial error treats blocks as independent, which the backlog is
        not; see :meth:`batch_stderr` for an error that accounts for it.
        """
        violated = self.violations(budget_blocks)
        count = violated.size
        p = float(violated.mean())
        return p, math.sqrt(p * (1.0 - p) / count), count

    def batch_stderr(self, budget_blocks: int, batches: int = DEFAULT_BATCHES) -> float:
        """Batch-means standard error of the empirical DVP.

        Contiguous batches are long compared with the backlog's memory, so
        their means are close to independent.
        """
        violated = self.violations(budget_blocks)
        usable = violated.size - violated.size % batches
        if batches < 2 or usable < batches:
            raise ValueError("not enough measured blocks for the requested batches")
        means = violated[:usable].reshape(batches, -1).mean(axis=1)
        return float(means.std(ddof=1) / math.sqrt(batches))


def run_queue(arrival: float, service: np.ndarray, warmup: int = 0, cap: float = DEFAULT_BACKLOG_CAP) -> QueueTrace:
    """Queue driven by a given service sequence (bits per block)."""
    service = np.asarray(service, dtype=float)
    steps = arrival - service
    walk = np.concatenate(([0.0], np.cumsum(steps)))
    # reflected walk == Lindley recursion started empty
    backlog = walk - np.minimum(np.minimum.accumulate(walk), 0.0)
    backlog = np.maximum(backlog, 0.0)
    return QueueTrace(
        arrival=float(arrival),
        service=service,
        backlog=backlog,
        warmup=int(warmup),
        unstable=bool(backlog.max() > cap),
    )


def simulate_queue(
    link: LinkProfile,
    V: float,
    blocks: int = DEFAULT_BLOCKS,
    warmup: int = DEFAULT_WARMUP,
    seed=None,
    cap: float = DEFAULT_BACKLOG_CAP,
) -> QueueTrace:
    """Simulate ``blocks`` fading blocks with arrivals ``V T`` per block."""
    if V < 0:
        raise ValueError("coding rate must be non-negative")
    if blocks <= warmup:
        raise ValueError("blocks must exceed warmup")
    rng = np.random.default_rng(seed)
    T = link.block_length
    service = sample_capacity(link, rng, size=blocks) * T
    return run_queue(V * T, service, warmup, cap)


@dataclass(frozen=True)
class SweepRow:
    delay: float
    violation: float
    bandwidth: float
    rate: float
    bound: float
    empirical: float
    stderr: float
    batch_stderr: float
    ci_low: float
    ci_high: float
    measured: int


SWEEP_COLUMNS = (
    "delay_s", "violation", "bandwidth_hz", "rate_bps", "bound", "empirical", "stderr", "batch_stderr", "ci_low", "ci_high", "measured",
)


def dvp_sweep(
    link: LinkProfile,
    grid: Iterable[tuple[float, float]],
    blocks: int = DEFAULT_BLOCKS,
    seed=0,
    warmup: int = DEFAULT_WARMUP,
    cached: bool = True,
    cloud_delay: float = 0.1,
) -> list[SweepRow]:
    """For every ``(delay_s, violation)`` point: calibrate ``V*``, simulate,
    and report analytic bound next to the empirical violation rate."""
    points = list(grid)
    streams = np.random.SeedSequence(seed).spawn(len(points))
    rows = []
    for (d, eps), stream in zip(points, streams):
        c = DelayConstraint(target=d, violation=eps, cloud_delay=cloud_delay, cached=cached)
        v = sustainable_rate(link, c)
        bound = dvp_bound(link, c, v)
        trace = simulate_queue(link, v, blocks, warmup, seed=np.random.default_rng(stream))
        budget = effective_budget(c, link.block_length)
        p, se, count = trace.dvp(budget)
        bse = trace.batch_stderr(budget)
        rows.append(
            SweepRow(d, eps, link.bandwidth, v, bound, p, se, bse, max(0.0, p - 1.96 * se), min(1.0, p + 1.96 * se), count)
        )
    return rows
