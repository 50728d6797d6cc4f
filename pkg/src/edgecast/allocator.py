"""Max-min fair coding-rate / bandwidth allocation by double bisection.

The outer bisection searches the common coding rate ``V``; for every
candidate the inner bisection finds, per user, the smallest bandwidth whose
effective capacity at ``theta(V)`` still reaches ``V``. The outer step moves
up while the summed bandwidth fits in ``B`` and down otherwise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel import LinkProfile, log_neg_moment
from .delay import DelayConstraint, effective_budget, sustainable_rates

log = logging.getLogger(__name__)

DEFAULT_PHI_V = 1e3
DEFAULT_PHI_B = 1e2


class AllocationError(RuntimeError):
    pass


@dataclass
class AllocationProblem:
    """Users as ``(link, constraint)`` pairs; ``link.bandwidth`` is ignored.

    All links must share one block length.
    """

    users: Sequence[tuple[LinkProfile, DelayConstraint]]
    total_bandwidth: float
    phi_v: float = DEFAULT_PHI_V
    phi_b: float = DEFAULT_PHI_B

    def __post_init__(self):
        if not self.users:
            raise ValueError("allocation needs at least one user")
        if self.total_bandwidth <= 0 or self.phi_v <= 0 or self.phi_b <= 0:
            raise ValueError("total bandwidth and tolerances must be positive")
        lengths = {link.block_length for link, _ in self.users}
        if len(lengths) != 1:
            raise ValueError("all users must share the same block length")
        for link, c in self.users:
            effective_budget(c, link.block_length)

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def block_length(self) -> float:
        return self.users[0][0].block_length

    def arrays(self):
        """Per-user ``(gain_to_noise, budget_blocks, violation)``."""
        T = self.block_length
        g = np.array([link.gain_to_noise for link, _ in self.users])
        blocks = np.array([effective_budget(c, T) for _, c in self.users], dtype=float)
        eps = np.array([c.violation for _, c in self.users])
        return g, blocks, eps


@dataclass
class AllocationResult:
    """``coding_rates`` are the rates users are coded at; ``sustainable`` the
    effective capacity each user's bandwidth actually supports."""

    v_star: float
    bandwidths: np.ndarray
    coding_rates: np.ndarray
    sustainable: np.ndarray
    feasible: bool
    outer_iterations: int = 0
    inner_iterations: int = 0
    trace: list = field(default_factory=list)

    @property
    def min_rate(self) -> float:
        return float(self.coding_rates.min())

    @property
    def throughput(self) -> float:
        return float(self.coding_rates.sum())


def _meets_rate(bandwidth, gain_to_noise, theta, log_target, T):
    """Whether the effective capacity at ``theta`` reaches the rate behind ``log_target``."""
    return log_neg_moment(bandwidth, gain_to_noise / bandwidth, theta, T, check=False) <= log_target


def required_bandwidths(V, gain_to_noise, blocks, violation, T, cap, phi_b):
    """Vectorised inner bisection.

    Returns ``(bandwidths, iterations)``; the upper bracket end is returned so
    every finite entry sustains ``V``. Users that cannot sustain ``V`` even
    with ``cap`` get ``inf``.
    """
    gain_to_noise = np.asarray(gain_to_noise, float)
    n = gain_to_noise.shape[0]
    log_eps = np.log(violation)
    theta = -log_eps / (V * T * blocks)
    log_target = log_eps / blocks
    hi = np.full(n, float(cap))
    lo = np.zeros(n)
    ok = _meets_rate(hi, gain_to_noise, theta, log_target, T)
    iterations = 0
    if ok.any():
        while True:
            active = ok & (hi - lo > phi_b)
            if not active.any():
                break
            iterations += 1
            mid = 0.5 * (lo + hi)
            meets = _meets_rate(mid, gain_to_noise, theta, log_target, T)
            hi = np.where(active & meets, mid, hi)
            lo = np.where(active & ~meets, mid, lo)
    return np.where(ok, hi, np.inf), iterations


def min_bandwidth_for_rate(link: LinkProfile, c: DelayConstraint, V: float, cap: float, phi_b: float = DEFAULT_PHI_B):
    """Smallest bandwidth in ``(0, cap]`` (to within ``phi_b``) sustaining ``V``.

    Returns ``None`` when even ``cap`` is insufficient.
    """
    if V <= 0:
        raise ValueError("coding rate must be positive")
    T = link.block_length
    blocks = effective_budget(c, T)
    bw, _ = required_bandwidths(
        V, np.array([link.gain_to_noise]), np.array([float(blocks)]), np.array([c.violation]), T, cap, phi_b
    )
    return None if math.isinf(bw[0]) else float(bw[0])


def _sustainable(problem: AllocationProblem, bandwidths):
    g, blocks, eps = problem.arrays()
    return sustainable_rates(bandwidths, g, blocks, eps, problem.block_length)


def identical_bandwidth(problem: AllocationProblem) -> AllocationResult:
    """Equal split ``B / N``; every user is coded at its own sustainable rate."""
    n = problem.n_users
    bw = np.full(n, problem.total_bandwidth / n)
    rates = _sustainable(problem, bw)
    return AllocationResult(
        v_star=float(rates.min()),
        bandwidths=bw,
        coding_rates=rates,
        sustainable=rates.copy(),
        feasible=bool(np.all(rates > 0)),
    )


def double_bisection(problem: AllocationProblem) -> AllocationResult:
    """Max-min allocation: common rate ``V*`` and per-user bandwidths.

    The bracket starts at the min/max sustainable rates of the equal split.
    Iteration stops when the rate bracket is no wider than ``phi_v`` or the
    bandwidth sum lands within ``N * phi_b`` below ``B``. Bandwidth left over
    is then spread in proportion to each user's demand growth across the
    final bracket, which uses the budget up while keeping rates level.
    """
    n = problem.n_users
    B = problem.total_bandwidth
    T = problem.block_length
    g, blocks, eps = problem.arrays()
    phi_v, phi_b = problem.phi_v, problem.phi_b

    equal = np.full(n, B / n)
    rates0 = sustainable_rates(equal, g, blocks, eps, T)
    v_lo, v_hi = float(rates0.min()), float(rates0.max())
    trace = []
    outer = inner = 0

    def demand(V):
        nonlocal inner
        bw, it = required_bandwidths(V, g, blocks, eps, T, B, phi_b)
        inner = max(inner, it)
        return bw

    if v_lo <= 0:
        raise AllocationError("equal split cannot sustain any positive rate")

    best_v, best_bw = None, None
    bw_hi = None
    if v_hi - v_lo > phi_v:
        # equal split is feasible at v_lo, infeasible above v_hi; widen only on contradiction
        bw_lo = demand(v_lo)
        while bw_lo.sum() > B + n * phi_b and v_lo > phi_v:
            log.warning("outer bracket widened below %.6g bit/s", v_lo)
            v_lo /= 2.0
            bw_lo = demand(v_lo)
        best_v, best_bw = v_lo, bw_lo
        while (bw_hi := demand(v_hi)).sum() <= B:
            log.warning("outer bracket widened above %.6g bit/s", v_hi)
            v_lo, best_v, best_bw = v_hi, v_hi, bw_hi
            v_hi *= 2.0
        while v_hi - v_lo > phi_v:
            outer += 1
            v_mid = 0.5 * (v_lo + v_hi)
            bw = demand(v_mid)
            total = float(bw.sum())
            trace.append((v_lo, v_hi, v_mid, total))
            if total <= B:
                v_lo, best_v, best_bw = v_mid, v_mid, bw
                if B - total <= n * phi_b:
                    break
            else:
                v_hi, bw_hi = v_mid, bw
    else:
        best_v, best_bw = v_lo, equal.copy()

    bandwidths = np.asarray(best_bw, float)
    leftover = B - bandwidths.sum()
    if leftover > 0:
        # share what is left along the final bracket so all rates rise together
        step = None if bw_hi is None else np.minimum(bw_hi, B) - bandwidths
        if step is not None and np.all(step >= 0) and step.sum() > leftover:
            bandwidths = bandwidths + step * (leftover / step.sum())
        else:
            bandwidths = bandwidths + leftover / n
    sustainable = sustainable_rates(bandwidths, g, blocks, eps, T)
    return AllocationResult(
        v_star=float(best_v),
        bandwidths=bandwidths,
        coding_rates=np.full(n, float(best_v)),
        sustainable=sustainable,
        feasible=bool(np.all(np.isfinite(bandwidths))),
        outer_iterations=outer,
        inner_iterations=inner,
        trace=trace,
    )
