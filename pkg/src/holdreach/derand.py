"""Lipschitz bump lower bound for de-randomizing probabilistic guarantees.

``h(x) = delta - L ||x||`` on the unit ball is L-Lipschitz and positive only
on the ball of radius ``delta / L``, which has relative volume
``(delta / L) ** d``. Calibrating that probability to ``eps`` leaves a bump of
height ``L * eps ** (1/d)``, which barely shrinks with ``eps`` in high
dimension.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

QUERY_COUNT_CAP = 2 ** 32
_MC_CHUNK = 100_000


@dataclass(frozen=True)
class BumpInstance:
    d: int
    L: float
    delta: float

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if self.L <= 0:
            raise ValueError("Lipschitz constant must be positive")
        if self.delta < 0:
            raise ValueError("bump height must be non-negative")


def bump_value(b: BumpInstance, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != b.d:
        raise ValueError(f"points have dimension {x.shape[-1]}, bump has {b.d}")
    return b.delta - b.L * np.linalg.norm(x, axis=-1)


def bump_violation_probability(b: BumpInstance) -> float:
    return min(1.0, b.delta / b.L) ** b.d


def calibrate_delta(L: float, d: int, eps: float) -> float:
    """Height ``delta*`` whose positive region has probability ``eps`` under Unif(ball)."""
    if not 0.0 < eps <= 1.0:
        raise ValueError("eps must lie in (0, 1]")
    if L <= 0 or d < 1:
        raise ValueError("need L > 0 and d >= 1")
    return L * eps ** (1.0 / d)


def sample_unit_ball(d: int, n: int, seed: int = 0) -> np.ndarray:
    """Uniform points in the closed unit ball: Gaussian direction, radius ``U ** (1/d)``."""
    if d < 1 or n < 1:
        raise ValueError("need d >= 1 and n >= 1")
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((n, d))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # a zero Gaussian vector has probability zero, guard anyway
    norms[norms == 0] = 1.0
    r = rng.random((n, 1)) ** (1.0 / d)
    return g / norms * r


def mc_violation_estimate(b: BumpInstance, n: int, seed: int = 0) -> float:
    """Fraction of ``n`` uniform ball samples where the bump is positive.

    Sampled in fixed chunks with seeds spawned from ``seed``, so the result
    does not depend on how the chunks are scheduled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    sizes = [_MC_CHUNK] * (n // _MC_CHUNK) + ([n % _MC_CHUNK] if n % _MC_CHUNK else [])
    children = np.random.SeedSequence(seed).spawn(len(sizes))
    hits = 0
    for size, child in zip(sizes, children):
        x = sample_unit_ball(b.d, size, child)
        hits += int(np.count_nonzero(bump_value(b, x) > 0))
    return hits / n


@dataclass(frozen=True)
class QueryBound:
    """``count`` is ``None`` when the bound exceeds :data:`QUERY_COUNT_CAP`."""

    log10: float
    count: int | None

    @property
    def saturated(self) -> bool:
        return self.count is None

    def display(self) -> str:
        return str(self.count) if self.count is not None else f">={QUERY_COUNT_CAP} (10^{self.log10:.2f})"


def _ceil_power(base: float, d: int, scale: float = 1.0) -> int:
    exact = Fraction(scale) * Fraction(base) ** d
    value = math.ceil(exact)
    # snap float-noise overshoots such as 100.00000000000003 back to the integer
    if value - exact > 0 and float(exact - (value - 1)) <= 1e-9 * float(exact):
        value -= 1
    return int(value)


def zeroth_order_query_lower_bound(L: float, gamma: float, d: int) -> QueryBound:
    """``ceil((L/gamma) ** d)`` queries, saturating above the cap with the exact log10."""
    if L <= 0 or gamma <= 0 or d < 1:
        raise ValueError("need L > 0, gamma > 0 and d >= 1")
    ratio = L / gamma
    log10 = d * math.log10(ratio)
    if log10 > math.log10(QUERY_COUNT_CAP):
        return QueryBound(log10, None)
    return QueryBound(log10, _ceil_power(ratio, d))


def derandomization_sample_count(L: float, gamma: float, d: int, rate: float = 1.0) -> QueryBound:
    """Holdout samples needed when ``eps = rate / M`` and the bump height must stay below ``gamma``.

    From ``L * (rate / M) ** (1/d) <= gamma`` one gets ``M >= rate * (L/gamma) ** d``.
    """
    if rate <= 0:
        raise ValueError("rate must be positive")
    q = zeroth_order_query_lower_bound(L, gamma, d)
    log10 = q.log10 + math.log10(rate)
    if log10 > math.log10(QUERY_COUNT_CAP):
        return QueryBound(log10, None)
    return QueryBound(log10, _ceil_power(L / gamma, d, rate))


def lipschitz_violations(b: BumpInstance, n_pairs: int = 10_000, seed: int = 0,
                         slack: float = 1e-12) -> int:
    """Number of random ball pairs breaking ``|h(x) - h(y)| <= L ||x - y||``."""
    rng = np.random.default_rng(seed)
    x = sample_unit_ball(b.d, n_pairs, rng)
    y = sample_unit_ball(b.d, n_pairs, rng)
    lhs = np.abs(bump_value(b, x) - bump_value(b, y))
    rhs = b.L * np.linalg.norm(x - y, axis=1) + slack
    return int(np.count_nonzero(lhs > rhs))
