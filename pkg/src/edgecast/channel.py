"""Downlink radio model: user placement, path loss and Rayleigh block fading.

Every user owns an orthogonal channel of bandwidth ``B``. The per-block
capacity is ``R = B log2(1 + p h l / (N0 B))`` with ``h ~ Exp(1)`` drawn
independently for every transmission block of length ``T``.

Expectations over the fading law are evaluated with a fixed trapezoid rule
in ``y = ln h`` (see :data:`QUADRATURE_NODES`). The integrand
``e^{-h} f(h)`` becomes smooth and doubly-exponentially decaying after the
substitution, including the near-singular ``(s h)^{-a}`` shape the moment
takes at high SNR, so a uniform rule converges geometrically.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

LN2 = math.log(2.0)

#: node count of the log-space trapezoid rule used for every fading expectation
QUADRATURE_NODES = 769
_Y_LO, _Y_HI = -90.0, math.log(60.0)
#: relative disagreement tolerated between the full rule and its half-density subrule
QUADRATURE_RTOL = 1e-8


class QuadratureError(ArithmeticError):
    """The fading expectation did not converge on the fixed node set."""


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def _log_trapezoid_rule(n: int):
    y = np.linspace(_Y_LO, _Y_HI, n)
    step = y[1] - y[0]
    h = np.exp(y)
    logw = math.log(step) + y - h
    logw[0] -= LN2
    logw[-1] -= LN2
    # normalise so that E[1] == 1 exactly on the discrete measure
    shift = logw.max()
    logw -= shift + math.log(np.exp(logw - shift).sum())
    return h, logw


_NODES, _LOGW = _log_trapezoid_rule(QUADRATURE_NODES)
_WEIGHTS = np.exp(_LOGW)
_NODES_HALF, _LOGW_HALF = _log_trapezoid_rule((QUADRATURE_NODES + 1) // 2)
_WEIGHTS_HALF = np.exp(_LOGW_HALF)


def path_loss(distance, ref_loss_db: float = 30.0, exponent: float = 2.0):
    """Large-scale power gain ``10^(-ref/10) * rho^-exponent`` (reference at 1 m)."""
    rho = np.asarray(distance, dtype=float)
    if np.any(rho < 1.0):
        raise ValueError(f"path loss undefined below the 1 m reference distance: {distance!r}")
    gain = 10.0 ** (-ref_loss_db / 10.0) * rho ** (-exponent)
    return float(gain) if gain.ndim == 0 else gain


def place_users(n: int, distance_range=(15.0, 20.0), seed=None) -> np.ndarray:
    """Draw ``n`` i.i.d. AP-user distances uniformly in ``distance_range`` (m)."""
    lo, hi = map(float, distance_range)
    if not 1.0 <= lo <= hi:
        raise ValueError(f"invalid distance range {distance_range!r}")
    rng = np.random.default_rng(seed)
    if lo == hi:
        return np.full(n, lo)
    return rng.uniform(lo, hi, size=n)


@dataclass(frozen=True)
class LinkProfile:
    """Radio parameters of one user's downlink.

    ``bandwidth`` in Hz, ``power`` in W, ``distance`` in m, ``noise_density``
    in W/Hz, ``block_length`` in s. The large-scale gain follows from the
    distance and the configured path-loss rule.
    """

    bandwidth: float
    power: float
    distance: float
    noise_density: float = dbm_to_watt(-130.0)
    block_length: float = 0.1
    ref_loss_db: float = 30.0
    path_loss_exponent: float = 2.0

    def __post_init__(self):
        for name in ("bandwidth", "power", "distance", "noise_density", "block_length"):
            value = getattr(self, name)
            if not (value > 0 and math.isfinite(value)):
                raise ValueError(f"LinkProfile.{name} must be positive and finite, got {value!r}")
        if self.distance < 1.0:
            raise ValueError("LinkProfile.distance must be >= 1 m")

    @property
    def path_gain(self) -> float:
        return path_loss(self.distance, self.ref_loss_db, self.path_loss_exponent)

    @property
    def gain_to_noise(self) -> float:
        """``p l / N0`` in Hz; the mean SNR at bandwidth ``B`` is this over ``B``."""
        return self.power * self.path_gain / self.noise_density

    @property
    def snr(self) -> float:
        return self.gain_to_noise / self.bandwidth

    def with_bandwidth(self, bandwidth: float) -> "LinkProfile":
        return replace(self, bandwidth=float(bandwidth))


def capacity(bandwidth, snr, h):
    """Shannon rate ``B log2(1 + snr h)`` in bit/s (broadcasting)."""
    return np.asarray(bandwidth) * np.log1p(np.asarray(snr) * np.asarray(h)) / LN2


def sample_capacity(link: LinkProfile, rng: np.random.Generator, size=None):
    """Draw block capacities with ``h ~ Exp(1)``."""
    h = rng.exponential(1.0, size=size)
    return capacity(link.bandwidth, link.snr, h)


def _log_moment_on(nodes, logw, weights, bandwidth, snr, theta, T):
    bandwidth = np.asarray(bandwidth, dtype=float)[..., None]
    snr = np.asarray(snr, dtype=float)[..., None]
    c = (np.asarray(theta, dtype=float) * T)[..., None]
    rate = bandwidth * np.log1p(snr * nodes) / LN2
    mean = (weights * rate).sum(axis=-1, keepdims=True)
    z = -c * (rate - mean)
    zmax = z.max(axis=-1, keepdims=True)
    spread = np.maximum(zmax, -z.min(axis=-1, keepdims=True))
    out = zmax + np.log(np.exp(logw + z - zmax).sum(axis=-1, keepdims=True))
    near = spread[..., 0] < 1.0
    if near.any():
        # centred log1p form keeps relative accuracy as theta -> 0
        zn = z[near]
        out[near] = np.log1p((weights * np.expm1(zn)).sum(axis=-1, keepdims=True))
    return (-c * mean + out)[..., 0]


def log_neg_moment(bandwidth, snr, theta, T, check: bool = True):
    """``ln E[exp(-theta R T)]`` for ``R = B log2(1 + snr h)``, ``h ~ Exp(1)``.

    Vectorised over broadcastable ``bandwidth``, ``snr`` and ``theta``. With
    ``check`` the result is compared with the half-density subrule and a
    :class:`QuadratureError` raised when they disagree.
    """
    value = _log_moment_on(_NODES, _LOGW, _WEIGHTS, bandwidth, snr, theta, T)
    if check:
        coarse = _log_moment_on(_NODES_HALF, _LOGW_HALF, _WEIGHTS_HALF, bandwidth, snr, theta, T)
        scale = np.maximum(np.abs(value), 1e-300)
        bad = np.abs(value - coarse) > QUADRATURE_RTOL * scale + 1e-15
        if np.any(bad):
            raise QuadratureError(
                f"fading moment residual {np.max(np.abs(value - coarse) / scale):.3e} above tolerance"
            )
    return value


def mean_rate(bandwidth, snr):
    """``E[R]`` on the quadrature measure (bit/s)."""
    bandwidth = np.asarray(bandwidth, dtype=float)[..., None]
    snr = np.asarray(snr, dtype=float)[..., None]
    rate = bandwidth * np.log1p(snr * _NODES) / LN2
    return (_WEIGHTS * rate).sum(axis=-1)


def neg_moment(link: LinkProfile, theta: float) -> float:
    """``E[exp(-theta R T)]`` for one link; exactly 1 at ``theta == 0``."""
    if theta < 0:
        raise ValueError("theta must be non-negative")
    if theta == 0:
        return 1.0
    return float(np.exp(log_neg_moment(link.bandwidth, link.snr, theta, link.block_length)))


def mean_capacity(link: LinkProfile) -> float:
    return float(mean_rate(link.bandwidth, link.snr))
