"""Statistical delay guarantee of a fading downlink.

A stream coded at rate ``V`` with delay target ``d`` and violation
probability ``eps`` is admissible when the Chernoff bound
``E[exp(-theta R T)] ** b <= eps`` holds, ``b`` being the budget in blocks
left after the cloud fetch (if any) and ``theta = -ln(eps) / (V T b)``.
The largest such ``V`` is the effective capacity fixed point returned by
:func:`sustainable_rate`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .channel import LinkProfile, log_neg_moment, mean_rate

# slack used when turning seconds into whole blocks
_BLOCK_EPS = 1e-9


class InfeasibleConstraint(ValueError):
    """The delay budget left for the wireless hop is not positive."""


class StabilityError(ValueError):
    """The coding rate exceeds what the link sustains at the calibrated theta."""


@dataclass(frozen=True)
class DelayConstraint:
    """Delay target ``target`` (s), tolerated violation probability ``violation``,
    cloud-to-edge delay ``cloud_delay`` (s) and whether the request is served
    from the edge cache."""

    target: float = 0.2
    violation: float = 1e-3
    cloud_delay: float = 0.1
    cached: bool = True

    def __post_init__(self):
        if not 0.0 < self.violation < 1.0:
            raise ValueError(f"violation probability must lie in (0, 1), got {self.violation!r}")
        if self.target <= 0 or self.cloud_delay < 0:
            raise ValueError("delay target must be positive and cloud delay non-negative")


def _to_blocks(seconds: float, T: float) -> float:
    blocks = seconds / T
    nearest = round(blocks)
    if abs(blocks - nearest) > 1e-6 * max(1.0, abs(blocks)):
        raise ValueError(f"{seconds} s is not a whole number of {T} s blocks")
    return float(nearest)


def effective_budget(c: DelayConstraint, T: float) -> int:
    """Blocks available to the wireless hop: ``floor((d - d_C * miss) / T)``."""
    _to_blocks(c.target, T)
    _to_blocks(c.cloud_delay, T)
    miss = 0.0 if c.cached else 1.0
    blocks = math.floor((c.target - c.cloud_delay * miss) / T + _BLOCK_EPS)
    if blocks <= 0:
        raise InfeasibleConstraint(
            f"no wireless delay budget left: d={c.target}s, cloud={c.cloud_delay}s, cached={c.cached}"
        )
    return blocks


def theta_from_constraint(c: DelayConstraint, V: float, T: float) -> float:
    """QoS exponent that turns the Chernoff bound into exactly ``eps`` at rate ``V``."""
    if V <= 0:
        raise ValueError("coding rate must be positive")
    return -math.log(c.violation) / (V * T * effective_budget(c, T))


def max_coding_rate(link: LinkProfile, theta: float) -> float:
    """Effective capacity ``-ln E[exp(-theta R T)] / (theta T)``; the mean rate at 0."""
    if theta < 0:
        raise ValueError("theta must be non-negative")
    if theta == 0:
        return float(mean_rate(link.bandwidth, link.snr))
    T = link.block_length
    return float(-log_neg_moment(link.bandwidth, link.snr, theta, T) / (theta * T))


def dvp_bound(link: LinkProfile, c: DelayConstraint, V: float) -> float:
    """Upper bound on ``Pr{delay > d}`` for a stream coded at ``V``.

    Raises :class:`StabilityError` when ``V`` exceeds the effective capacity
    at the calibrated exponent (the bound only holds under stability).
    """
    T = link.block_length
    blocks = effective_budget(c, T)
    theta = theta_from_constraint(c, V, T)
    log_m = float(log_neg_moment(link.bandwidth, link.snr, theta, T))
    vmax = -log_m / (theta * T)
    if V > vmax * (1 + 1e-9):
        raise StabilityError(
            f"stability violated: V={V:.6g} bit/s exceeds -ln E[e^(-theta R T)]/(theta T)={vmax:.6g} bit/s"
        )
    return math.exp(blocks * log_m)


def solve_theta(bandwidth, snr, log_target, T, rtol: float = 1e-13, max_iter: int = 200):
    """Vectorised root of ``ln E[exp(-theta R T)] = log_target`` in ``theta``.

    ``log_target`` is negative; the log-moment is strictly decreasing in
    ``theta`` so the root is unique. Returns the root for every broadcast
    element.
    """
    bandwidth, snr, log_target = np.broadcast_arrays(
        np.asarray(bandwidth, float), np.asarray(snr, float), np.asarray(log_target, float)
    )
    mu = mean_rate(bandwidth, snr)
    # Jensen: ln M(theta) >= -theta T mu, so this theta never overshoots the root
    lo = -log_target / (T * mu)
    hi = lo * 2.0
    for _ in range(max_iter):
        over = log_neg_moment(bandwidth, snr, hi, T, check=False) > log_target
        if not over.any():
            break
        lo = np.where(over, hi, lo)
        hi = np.where(over, hi * 2.0, hi)
    else:
        raise ArithmeticError("could not bracket the QoS exponent")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        above = log_neg_moment(bandwidth, snr, mid, T, check=False) > log_target
        lo = np.where(above, mid, lo)
        hi = np.where(above, hi, mid)
        if np.all(hi - lo <= rtol * hi):
            break
    theta = 0.5 * (lo + hi)
    log_neg_moment(bandwidth, snr, theta, T)  # convergence check on the final point
    return theta


def sustainable_rates(bandwidth, gain_to_noise, blocks, violation, T):
    """Fixed point ``V = V^max(theta(V))`` for arrays of users.

    ``bandwidth`` may be zero, in which case the rate is zero.
    """
    bandwidth = np.asarray(bandwidth, float)
    gain_to_noise, blocks, violation = np.broadcast_arrays(
        np.asarray(gain_to_noise, float), np.asarray(blocks, float), np.asarray(violation, float)
    )
    bandwidth = np.broadcast_to(bandwidth, gain_to_noise.shape)
    rates = np.zeros(gain_to_noise.shape)
    live = bandwidth > 0
    if live.any():
        target = np.log(violation[live]) / blocks[live]
        theta = solve_theta(bandwidth[live], gain_to_noise[live] / bandwidth[live], target, T)
        rates[live] = -np.log(violation[live]) / (theta * T * blocks[live])
    return rates


def sustainable_rate(link: LinkProfile, c: DelayConstraint) -> float:
    """Largest coding rate whose delay-violation bound equals ``c.violation``."""
    T = link.block_length
    blocks = effective_budget(c, T)
    return float(sustainable_rates(link.bandwidth, link.gain_to_noise, blocks, c.violation, T))
