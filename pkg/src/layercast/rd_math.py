"""Rate-distortion math for independent parallel Gaussian sources.

The rate-distortion function of s independent Gaussian components with
variances sigma_1^2 >= ... >= sigma_s^2 has the reverse-waterfilling
parametric form

    R(gamma) = (1/s) * sum_i max(0, 0.5*log2(sigma_i^2 / gamma))
    D(gamma) = (1/s) * sum_i min(gamma, sigma_i^2)

where gamma is the water level: components with variance above gamma are
quantized down to distortion gamma, the rest are discarded and contribute
their full variance.

Rate convention used throughout this package: rates are bits per source
symbol AVERAGED over the s components, so describing a block of s*k symbols
at rate R costs s*k*R bits.  Off-by-s errors are the main hazard when
wiring these functions to anything else; every rate in this module follows
the averaged convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

__all__ = [
    "SourceSpec",
    "ChannelSpec",
    "WaterLevel",
    "RatePoint",
    "rate_of_distortion",
    "distortion_of_rate",
    "rate_increment",
    "min_bandwidth",
]

_BISECT_REL_TOL = 1e-12


@dataclass(frozen=True)
class SourceSpec:
    """s parallel Gaussian components: nonincreasing variances, block length k."""

    variances: tuple[float, ...]
    block_length: int = 1

    def __post_init__(self):
        if len(self.variances) < 1:
            raise ValueError("need at least one source component")
        object.__setattr__(self, "variances", tuple(float(v) for v in self.variances))
        for v in self.variances:
            if not (v > 0.0) or not math.isfinite(v):
                raise ValueError(f"variances must be positive and finite, got {v}")
        if any(a < b for a, b in zip(self.variances, self.variances[1:])):
            raise ValueError("variances must be nonincreasing")
        if self.block_length < 1:
            raise ValueError("block_length must be >= 1")

    @property
    def count(self) -> int:
        return len(self.variances)

    @property
    def mean_variance(self) -> float:
        return sum(self.variances) / len(self.variances)


@dataclass(frozen=True)
class ChannelSpec:
    """L-user erasure broadcast channel, worst user first."""

    erasure_probs: tuple[float, ...]

    def __post_init__(self):
        if len(self.erasure_probs) < 1:
            raise ValueError("need at least one user")
        object.__setattr__(
            self, "erasure_probs", tuple(float(e) for e in self.erasure_probs)
        )
        for e in self.erasure_probs:
            if not (0.0 <= e < 1.0):
                raise ValueError(f"erasure probabilities must be in [0, 1), got {e}")
        if any(a < b for a, b in zip(self.erasure_probs, self.erasure_probs[1:])):
            raise ValueError("erasure probabilities must be nonincreasing")

    @property
    def capacities(self) -> tuple[float, ...]:
        return tuple(1.0 - e for e in self.erasure_probs)

    @property
    def users(self) -> int:
        return len(self.erasure_probs)


@dataclass(frozen=True)
class WaterLevel:
    """Water level gamma plus the count of active components (sigma_i^2 > gamma).

    A component whose variance ties gamma exactly counts as inactive; its
    rate contribution max(0, 0.5*log2(sigma^2/gamma)) is zero either way.
    """

    gamma: float
    active: int

    def validate(self, spec: SourceSpec) -> None:
        v = spec.variances
        m = self.active
        if not 0 <= m <= spec.count:
            raise ValueError(f"active count {m} out of range")
        if m < spec.count and self.gamma < v[m]:
            raise ValueError("gamma below the first inactive component's variance")
        if m >= 1 and self.gamma >= v[m - 1]:
            raise ValueError("gamma not below the last active component's variance")


@dataclass(frozen=True)
class RatePoint:
    """One point on the rate-distortion curve with its waterfilling params."""

    rate: float
    avg_distortion: float
    per_component: tuple[float, ...] = field(repr=False)
    level: WaterLevel

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError("rate must be nonnegative")


def _active_count(variances: tuple[float, ...], gamma: float) -> int:
    # variances sorted nonincreasing; count strictly above gamma
    m = 0
    for v in variances:
        if v > gamma:
            m += 1
        else:
            break
    return m


def _point_from_gamma(spec: SourceSpec, gamma: float) -> RatePoint:
    v = spec.variances
    s = spec.count
    m = _active_count(v, gamma)
    per = tuple(min(gamma, vi) for vi in v)
    d = sum(per) / s
    r = sum(0.5 * math.log2(vi / gamma) for vi in v[:m]) / s
    return RatePoint(rate=max(0.0, r), avg_distortion=d, per_component=per,
                     level=WaterLevel(gamma=gamma, active=m))


def _bisect_gamma(f, lo: float, hi: float) -> float:
    """Bisection for the unique root of a monotone f on [lo, hi]."""
    flo = f(lo)
    fhi = f(hi)
    if flo == 0.0:
        return lo
    if fhi == 0.0:
        return hi
    if (flo > 0) == (fhi > 0):
        raise ValueError("bisection bracket does not straddle the root")
    increasing = fhi > flo
    while hi - lo > _BISECT_REL_TOL * hi:
        mid = 0.5 * (lo + hi)
        fm = f(mid)
        if fm == 0.0:
            return mid
        if (fm > 0) == increasing:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi)


def rate_of_distortion(spec: SourceSpec, d: float) -> RatePoint:
    """Rate needed to reach average distortion d, via reverse waterfilling.

    Bisection on the water level locates the active-component segment; the
    exact gamma within the segment then follows from the linear relation
    s*d = m*gamma + sum of inactive variances.
    """
    dbar = spec.mean_variance
    if not (0.0 < d <= dbar):
        raise ValueError(f"distortion must be in (0, {dbar}], got {d}")
    if d == dbar:
        return _point_from_gamma(spec, spec.variances[0])
    v = spec.variances
    s = spec.count

    def gap(g: float) -> float:
        return sum(min(g, vi) for vi in v) / s - d

    lo = min(v) * 2.0 ** -64
    gamma = _bisect_gamma(gap, lo, v[0])
    m = _active_count(v, gamma)
    # polish: D(gamma) is linear in gamma inside the segment
    tail = sum(v[m:])
    if m > 0:
        gamma = (s * d - tail) / m
        # knife-edge ties can push gamma one segment over; recount and redo
        m2 = _active_count(v, gamma)
        if m2 != m and m2 > 0:
            gamma = (s * d - sum(v[m2:])) / m2
    return _point_from_gamma(spec, gamma)


def distortion_of_rate(spec: SourceSpec, r: float) -> RatePoint:
    """Average distortion at rate r bits/symbol (inverse of rate_of_distortion)."""
    if r < 0:
        raise ValueError(f"rate must be nonnegative, got {r}")
    v = spec.variances
    s = spec.count
    if r == 0.0:
        return _point_from_gamma(spec, v[0])

    def gap(g: float) -> float:
        m = _active_count(v, g)
        return sum(0.5 * math.log2(vi / g) for vi in v[:m]) / s - r

    lo = min(v) * 2.0 ** -64
    while gap(lo) < 0.0:  # extremely large r: widen the bracket
        lo *= 2.0 ** -64
    gamma = _bisect_gamma(gap, lo, v[0])
    m = _active_count(v, gamma)
    if m > 0:
        # polish: log2 gamma is linear in r inside the segment
        log2g = (sum(math.log2(vi) for vi in v[:m]) - 2.0 * s * r) / m
        gamma2 = 2.0 ** log2g
        m2 = _active_count(v, gamma2)
        if m2 != m and m2 > 0:
            log2g = (sum(math.log2(vi) for vi in v[:m2]) - 2.0 * s * r) / m2
            gamma2 = 2.0 ** log2g
        gamma = gamma2
    return _point_from_gamma(spec, gamma)


def rate_increment(spec: SourceSpec, level1: WaterLevel, level2: WaterLevel) -> float:
    """Extra rate to refine from water level 1 down to water level 2.

    Equals R(D2) - R(D1) exactly (successive refinability): the first term
    pays for refining the components already active at level 1, the second
    for newly activated components.
    """
    g1, m1 = level1.gamma, level1.active
    g2, m2 = level2.gamma, level2.active
    if g2 > g1:
        raise ValueError("refinement requires gamma2 <= gamma1")
    v = spec.variances
    s = spec.count
    inc = m1 * 0.5 * math.log2(g1 / g2)
    inc += sum(0.5 * math.log2(v[i] / g2) for i in range(m1, m2))
    return inc / s


def min_bandwidth(
    spec: SourceSpec, chan: ChannelSpec, targets: list[float]
) -> tuple[float, list[float]]:
    """Minimum bandwidth expansion b* for per-user distortion targets.

    The optimum spends each layer's rate exactly on the increment
    R(d_l) - R(d_{l-1}), so b* = sum of increments weighted by 1/C_l and
    the channel rates R_l = increment_l / b* saturate sum R_l/C_l = 1.
    """
    if len(targets) != chan.users:
        raise ValueError("need one target distortion per user")
    if any(a < b for a, b in zip(targets, targets[1:])):
        raise ValueError("target distortions must be nonincreasing")
    caps = chan.capacities
    rates = [rate_of_distortion(spec, d).rate for d in targets]
    prev = 0.0
    b_star = 0.0
    increments = []
    for r, c in zip(rates, caps):
        inc = max(0.0, r - prev)
        increments.append(inc)
        b_star += inc / c
        prev = max(prev, r)
    if b_star == 0.0:
        return 0.0, [0.0] * chan.users
    layer_rates = [inc / b_star for inc in increments]
    return b_star, layer_rates
