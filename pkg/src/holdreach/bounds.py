"""Binomial tail arithmetic and a-posteriori violation bounds.

The holdout certificate inverts the lower binomial tail: given ``k_hat``
violations among ``M`` fresh scenarios, the largest violation rate ``e`` for
which observing at most ``k_hat`` violations still has probability ``>= beta``
bounds the true violation probability with confidence ``1 - beta``.

All functions are pure; nothing here holds state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln, logsumexp

INVERSION_TOL = 1e-10


def _check_count(k: int, M: int, name: str = "k") -> None:
    if M < 0 or k < 0:
        raise ValueError(f"counts must be non-negative, got {name}={k}, M={M}")
    if k > M:
        raise ValueError(f"{name}={k} exceeds M={M}")


def _check_beta(beta: float) -> None:
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")


def log_binom_coef(n: int, k) -> np.ndarray:
    return gammaln(n + 1.0) - gammaln(np.asarray(k) + 1.0) - gammaln(n - np.asarray(k) + 1.0)


def binomial_cdf(k: int, M: int, e: float) -> float:
    """P(X <= k) for X ~ Binomial(M, e).

    Terms are formed in log space from log-gamma and combined with a
    max-shifted log-sum-exp, so M in the millions is fine.
    """
    _check_count(k, M)
    if not 0.0 <= e <= 1.0:
        raise ValueError(f"e must lie in [0, 1], got {e}")
    if k == M or e == 0.0:
        return 1.0
    if e == 1.0:
        return 0.0
    j = np.arange(k + 1, dtype=float)
    log_terms = log_binom_coef(M, j) + j * math.log(e) + (M - j) * math.log1p(-e)
    return float(min(1.0, math.exp(logsumexp(log_terms))))


def binomial_tail_inversion(k_hat: int, M: int, beta: float, tol: float = INVERSION_TOL) -> float:
    """Largest ``e`` in [0, 1] with ``binomial_cdf(k_hat, M, e) >= beta``.

    Bisection on the decreasing map ``e -> Bin(k_hat, M, e)``. The returned
    value is the feasible end of the final bracket, so the defining
    inequality always holds at the result.
    """
    _check_count(k_hat, M, "k_hat")
    _check_beta(beta)
    if k_hat == M:
        return 1.0
    lo, hi = 0.0, 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if binomial_cdf(k_hat, M, mid) >= beta:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class HoldoutCertificate:
    """``P{V(R) > epsilon} <= beta`` over the draw of the ``M`` holdout scenarios."""

    k_hat: int
    M: int
    beta: float
    epsilon: float

    @property
    def empirical_error(self) -> float:
        return empirical_error(self.k_hat, self.M)

    def to_dict(self) -> dict:
        return {"k_hat": self.k_hat, "M": self.M, "beta": self.beta, "epsilon": self.epsilon}


@dataclass(frozen=True)
class WaitAndJudgeCertificate:
    support_count: int
    N: int
    beta: float
    epsilon: float

    def to_dict(self) -> dict:
        return {"support_count": self.support_count, "N": self.N,
                "beta": self.beta, "epsilon": self.epsilon}


def holdout_certificate(k_hat: int, M: int, beta: float) -> HoldoutCertificate:
    return HoldoutCertificate(int(k_hat), int(M), float(beta),
                              binomial_tail_inversion(k_hat, M, beta))


def fast_rate_bound(M: int, beta: float) -> float:
    """Zero-violation upper bound ``ln(1/beta) / M`` on the inverted tail."""
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    _check_beta(beta)
    return min(1.0, math.log(1.0 / beta) / M)


def clt_scale_bound(k_hat: int, M: int, beta: float) -> float:
    """Hoeffding-style ``k_hat/M + sqrt(ln(1/beta) / (2M))``, clipped to 1.

    Diagnostic only: this shows the square-root rate for ``k_hat > 0`` and is
    never used as a certificate.
    """
    _check_count(k_hat, M, "k_hat")
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    _check_beta(beta)
    return min(1.0, k_hat / M + math.sqrt(math.log(1.0 / beta) / (2.0 * M)))


def wait_and_judge_epsilon(s: int, N: int, beta: float) -> float:
    """A-posteriori bound from ``s`` support scenarios out of ``N``.

    Uses the standard nonconvex scenario form
    ``1 - ((beta / N) / C(N, s)) ** (1 / (N - s))``, evaluated in log space.
    """
    _check_count(s, N, "s")
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    _check_beta(beta)
    if s == N:
        return 1.0
    log_rhs = math.log(beta) - math.log(N) - float(log_binom_coef(N, s))
    return float(min(1.0, max(0.0, -math.expm1(log_rhs / (N - s)))))


def wait_and_judge_certificate(s: int, N: int, beta: float) -> WaitAndJudgeCertificate:
    return WaitAndJudgeCertificate(int(s), int(N), float(beta), wait_and_judge_epsilon(s, N, beta))


def empirical_error(violations: int, M: int) -> float:
    if M < 1:
        raise ValueError("empirical error needs at least one holdout scenario")
    _check_count(violations, M, "violations")
    return violations / M
