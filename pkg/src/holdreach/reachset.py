"""Minimum-volume RBF sublevel-set reachable sets.

A point ``x`` belongs to the estimate when the sum of isotropic Gaussian
bumps reaches the threshold::

    score(x) = sum_i exp(-||x - mu_i||^2 / (2 sigma_i^2)) >= gamma

Fitting minimizes ``sum_i sigma_i^2`` subject to every training scenario
being covered, with SLSQP started from a feasible k-means initialization.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from sklearn.base import BaseEstimator
from sklearn.cluster import kmeans_plusplus
from sklearn.utils.validation import check_array, check_is_fitted

SIGMA_MIN = 1e-3
FEAS_TOL = 1e-6
SUPPORT_TOL = 1e-4
KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6
_CHUNK = 1 << 15


class InfeasibleFitError(RuntimeError):
    def __init__(self, message: str, report: "FitReport | None" = None):
        super().__init__(message)
        self.report = report


def rbf_scores(X, centers, widths) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    centers = np.asarray(centers, dtype=float)
    inv = 1.0 / (2.0 * np.asarray(widths, dtype=float) ** 2)
    out = np.empty(X.shape[0])
    for lo in range(0, X.shape[0], _CHUNK):
        diff = X[lo:lo + _CHUNK, None, :] - centers[None, :, :]
        sq = np.einsum("nmd,nmd->nm", diff, diff)
        out[lo:lo + _CHUNK] = np.exp(-sq * inv).sum(axis=1)
    return out


@dataclass(frozen=True)
class FitReport:
    objective: float
    constraint_violation: float
    iterations: int
    converged: bool
    initial_objective: float = math.nan
    raw_violation: float = 0.0
    repaired: bool = False
    message: str = ""

    def to_dict(self) -> dict:
        return {"objective": self.objective, "constraint_violation": self.constraint_violation,
                "iterations": self.iterations, "converged": self.converged,
                "initial_objective": self.initial_objective, "raw_violation": self.raw_violation,
                "repaired": self.repaired, "message": self.message}

    @classmethod
    def from_dict(cls, d: dict) -> "FitReport":
        return cls(**d)


@dataclass(frozen=True)
class RbfEstimate:
    centers: np.ndarray
    widths: np.ndarray
    threshold: float
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        widths = np.atleast_1d(np.asarray(self.widths, dtype=float))
        if centers.shape[0] != widths.shape[0] or centers.shape[0] < 1:
            raise ValueError("need one width per center and at least one basis function")
        if np.any(widths <= 0):
            raise ValueError("widths must be positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "threshold", float(self.threshold))

    @property
    def n_basis(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def score(self, X) -> np.ndarray:
        return rbf_scores(self._check(X), self.centers, self.widths)

    def level(self, X) -> np.ndarray:
        """``gamma - score``; non-positive exactly on the set."""
        return self.threshold - self.score(X)

    def contains(self, X) -> np.ndarray:
        return self.score(X) >= self.threshold

    @property
    def volume_proxy(self) -> float:
        return float(np.sqrt(np.sum(self.widths ** 2)))

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.dim:
            raise ValueError(f"points have dimension {X.shape[1]}, estimate has {self.dim}")
        return X

    def to_dict(self) -> dict:
        return {**self.metadata, "m": self.n_basis, "gamma": self.threshold,
                "centers": self.centers.tolist(), "widths": self.widths.tolist()}

    def to_json(self) -> str:
        # json writes floats with repr, which round-trips exactly
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RbfEstimate":
        meta = {k: v for k, v in d.items() if k not in ("m", "gamma", "centers", "widths")}
        return cls(np.asarray(d["centers"], dtype=float), np.asarray(d["widths"], dtype=float),
                   float(d["gamma"]), meta)

    @classmethod
    def from_json(cls, text: str) -> "RbfEstimate":
        return cls.from_dict(json.loads(text))


def score(est: RbfEstimate, x) -> np.ndarray:
    return est.score(x)


def contains(est: RbfEstimate, x) -> np.ndarray:
    return est.contains(x)


def volume_proxy(est: RbfEstimate) -> float:
    return est.volume_proxy


def data_fingerprint(X) -> str:
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    return hashlib.sha256(X.tobytes() + repr(X.shape).encode()).hexdigest()[:16]


def kmeans_init(samples, m: int, seed: int = 0) -> np.ndarray:
    """k-means++ seeding followed by Lloyd iterations.

    Stops after 50 iterations or once the relative change in inertia drops
    below 1e-6. Empty clusters keep their previous center.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if m < 1:
        raise ValueError("m must be >= 1")
    if m > X.shape[0]:
        raise ValueError(f"cannot place {m} centers with only {X.shape[0]} samples")
    centers, _ = kmeans_plusplus(X, n_clusters=m, random_state=seed)
    inertia = math.inf
    for _ in range(KMEANS_MAX_ITER):
        sq = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = sq.argmin(axis=1)
        for i in range(m):
            members = X[labels == i]
            if len(members):
                centers[i] = members.mean(axis=0)
        new_inertia = float(((X - centers[labels]) ** 2).sum())
        if abs(inertia - new_inertia) <= KMEANS_TOL * max(new_inertia, 1e-300):
            break
        inertia = new_inertia
    return centers


def initial_widths(samples, centers, gamma: float, sigma_min: float = SIGMA_MIN) -> np.ndarray:
    """Widths making every sample reach ``gamma`` through its nearest center.

    A sample at distance ``r`` from its cluster center scores at least
    ``exp(-r^2 / (2 sigma^2))``, which is ``>= gamma`` for
    ``sigma >= r / sqrt(2 ln(1/gamma))``.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    sq = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = sq.argmin(axis=1)
    radius = np.zeros(len(centers))
    for i in range(len(centers)):
        d = sq[labels == i, i]
        if d.size:
            radius[i] = math.sqrt(d.max())
    # slight inflation keeps rounding from putting the farthest point on the wrong side
    widths = radius * (1.0 + 1e-9) / math.sqrt(2.0 * math.log(1.0 / gamma))
    return np.maximum(widths, sigma_min)


def initialize_rbf(samples, m: int, gamma: float, seed: int = 0, sigma_min: float = SIGMA_MIN):
    centers = kmeans_init(samples, m, seed)
    return centers, initial_widths(samples, centers, gamma, sigma_min)


def _check_gamma(gamma: float) -> None:
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"threshold gamma must lie in (0, 1), got {gamma}")


def _constraint_parts(z, X, m, n):
    mu = z[:m * n].reshape(m, n)
    sig = z[m * n:]
    diff = X[:, None, :] - mu[None, :, :]
    sq = np.einsum("nmd,nmd->nm", diff, diff)
    e = np.exp(-sq / (2.0 * sig ** 2))
    return mu, sig, diff, sq, e


def solve_rbf_block(X, mu0, sig0, gamma, objective, gradient, sigma_min=SIGMA_MIN,
                    max_iter=500, tol=1e-10):
    """SLSQP over (centers, widths) with coverage constraints on the rows of ``X``.

    ``objective``/``gradient`` act on the width vector only. Returns
    ``(mu, sigma, scipy_result)``.
    """
    m, n = mu0.shape

    def cons(z):
        _, _, _, _, e = _constraint_parts(z, X, m, n)
        return e.sum(axis=1) - gamma

    def cons_jac(z):
        _, sig, diff, sq, e = _constraint_parts(z, X, m, n)
        d_mu = e[:, :, None] * diff / (sig ** 2)[None, :, None]
        d_sig = e * sq / sig ** 3
        return np.hstack([d_mu.reshape(X.shape[0], m * n), d_sig])

    def f(z):
        return objective(z[m * n:])

    def fgrad(z):
        g = np.zeros_like(z)
        g[m * n:] = gradient(z[m * n:])
        return g

    z0 = np.concatenate([mu0.ravel(), sig0])
    bounds = [(None, None)] * (m * n) + [(sigma_min, None)] * m
    with warnings.catch_warnings():
        # SLSQP clips line-search steps to the width bounds and says so
        warnings.filterwarnings("ignore", "Values in x were outside bounds", RuntimeWarning)
        res = minimize(f, z0, jac=fgrad, method="SLSQP", bounds=bounds,
                       constraints=[{"type": "ineq", "fun": cons, "jac": cons_jac}],
                       options={"maxiter": max_iter, "ftol": tol})
    z = res.x
    mu = z[:m * n].reshape(m, n).copy()
    sig = np.maximum(z[m * n:], sigma_min)
    return mu, sig, res


def repair_widths(X, mu, sig, gamma, max_halvings: int = 200):
    """Smallest common scale factor ``kappa >= 1`` on the widths restoring coverage.

    Scores are non-decreasing in every width, so bisection on ``kappa``
    is exact up to floating point; the feasible end is returned.
    """
    def feasible(k):
        return rbf_scores(X, mu, sig * k).min() >= gamma

    if feasible(1.0):
        return sig, 1.0
    hi = 2.0
    while not feasible(hi):
        hi *= 2.0
        if hi > 1e12:
            raise InfeasibleFitError("width repair failed to restore coverage")
    lo = 1.0
    for _ in range(max_halvings):
        mid = 0.5 * (lo + hi)
        if mid in (lo, hi):
            break
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return sig * hi, hi


def fit_rbf(samples, m: int, gamma: float = 0.25, *, seed: int = 0, sigma_min: float = SIGMA_MIN,
            max_iter: int = 500, tol: float = 1e-10, init=None):
    """Fit a minimum-volume RBF reachable set to ``samples``.

    Returns ``(RbfEstimate, FitReport)``. Duplicate samples are collapsed
    before optimizing since they add identical constraints. Data are shifted
    to their mean internally, which makes the fit translation-equivariant.
    ``init`` overrides the k-means initialization with ``(centers, widths)``.
    """
    _check_gamma(gamma)
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    if X.shape[0] < 1:
        raise ValueError("need at least one sample")
    if not np.all(np.isfinite(X)):
        raise ValueError("samples must be finite")
    if init is None:
        mu0, sig0 = initialize_rbf(X, m, gamma, seed, sigma_min)
    else:
        mu0 = np.array(init[0], dtype=float)
        sig0 = np.maximum(np.array(init[1], dtype=float), sigma_min)
        if mu0.shape != (m, X.shape[1]):
            raise ValueError("initial centers have the wrong shape")
    U = np.unique(X, axis=0)
    shift = U.mean(axis=0)
    Uc = U - shift

    obj0 = float(np.sum(sig0 ** 2))
    scale = max(obj0, 1e-300)
    mu, sig, res = solve_rbf_block(Uc, mu0 - shift, sig0, gamma,
                                   lambda s: float(np.sum(s ** 2)) / scale,
                                   lambda s: 2.0 * s / scale,
                                   sigma_min, max_iter, tol)
    message = str(res.message)
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sig))):
        raise InfeasibleFitError(f"optimizer returned non-finite parameters: {message}",
                                 FitReport(math.nan, math.nan, int(res.nit), False, obj0, math.nan,
                                           False, message))
    raw_violation = max(0.0, gamma - float(rbf_scores(Uc, mu, sig).min()))
    sig, kappa = repair_widths(Uc, mu, sig, gamma)
    objective = float(np.sum(sig ** 2))
    if objective > obj0:
        # never hand back something worse than the feasible starting point
        mu, sig, objective = mu0 - shift, sig0, obj0
        sig, kappa = repair_widths(Uc, mu, sig, gamma)
        objective = float(np.sum(sig ** 2))
    # membership is tested on raw coordinates, where un-shifting can cost an ulp
    sig, kappa_raw = repair_widths(U, mu + shift, sig, gamma)
    kappa *= kappa_raw
    objective = float(np.sum(sig ** 2))
    violation = max(0.0, gamma - float(rbf_scores(U, mu + shift, sig).min()))
    report = FitReport(objective, violation, int(res.nit), bool(res.success) and violation <= FEAS_TOL,
                       obj0, raw_violation, kappa != 1.0, message)
    if violation > FEAS_TOL:
        raise InfeasibleFitError(f"fit violates coverage by {violation:.3g}", report)
    est = RbfEstimate(mu + shift, sig, gamma,
                      {"seed": seed, "data_fingerprint": data_fingerprint(X)})
    return est, report


def _params(est: RbfEstimate) -> np.ndarray:
    return np.concatenate([est.centers.ravel(), est.widths])


def support_scenarios(samples, m: int, gamma: float = 0.25, *, seed: int = 0,
                      rel_tol: float = SUPPORT_TOL, **opts) -> np.ndarray:
    """Indices whose removal changes the fitted solution.

    Re-solves the program once per sample from the full-data initialization,
    so the cost is N + 1 fits. A removal counts as changing the solution when
    the objective or the parameter vector moves by more than ``rel_tol``
    relative to the full fit.
    """
    X = np.atleast_2d(np.asarray(samples, dtype=float))
    sigma_min = opts.get("sigma_min", SIGMA_MIN)
    init = initialize_rbf(X, m, gamma, seed, sigma_min)
    full, rep = fit_rbf(X, m, gamma, seed=seed, init=init, **opts)
    theta = _params(full)
    support = []
    for i in range(X.shape[0]):
        reduced = np.delete(X, i, axis=0)
        if reduced.shape[0] == 0:
            support.append(i)
            continue
        try:
            est, r = fit_rbf(reduced, m, gamma, seed=seed, init=init, **opts)
        except InfeasibleFitError as err:
            raise InfeasibleFitError(f"refit without sample {i} failed: {err}", err.report) from err
        d_obj = abs(r.objective - rep.objective) / max(abs(rep.objective), 1e-300)
        d_par = np.linalg.norm(_params(est) - theta) / max(np.linalg.norm(theta), 1e-300)
        if d_obj > rel_tol or d_par > rel_tol:
            support.append(i)
    return np.asarray(support, dtype=int)


def count_support_scenarios(samples, m: int, gamma: float = 0.25, **opts) -> int:
    return int(len(support_scenarios(samples, m, gamma, **opts)))


def count_violations(est: RbfEstimate, holdout) -> int:
    """Number of holdout scenarios falling outside ``est``."""
    H = getattr(holdout, "states", holdout)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if H.shape[0] == 0:
        raise ValueError("holdout set is empty")
    return int(np.count_nonzero(~est.contains(H)))


class RbfReachSet(BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_rbf`.

    ``predict`` follows the outlier-detection convention: +1 inside the
    reachable set estimate, -1 outside. ``decision_function`` is
    ``score - threshold`` (non-negative inside).
    """

    def __init__(self, n_basis: int = 2, threshold: float = 0.25, sigma_min: float = SIGMA_MIN,
                 max_iter: int = 500, tol: float = 1e-10, random_state: int = 0):
        self.n_basis = n_basis
        self.threshold = threshold
        self.sigma_min = sigma_min
        self.max_iter = max_iter
        self.tol = tol
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X)
        self.estimate_, self.fit_report_ = fit_rbf(
            X, self.n_basis, self.threshold, seed=self.random_state, sigma_min=self.sigma_min,
            max_iter=self.max_iter, tol=self.tol)
        self.n_features_in_ = X.shape[1]
        self.centers_ = self.estimate_.centers
        self.widths_ = self.estimate_.widths
        return self

    def _validated(self, X):
        check_is_fitted(self, "estimate_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, estimator was fitted with "
                             f"{self.n_features_in_}")
        return X

    def score_samples(self, X):
        X = self._validated(X)
        return self.estimate_.score(X)

    def decision_function(self, X):
        return self.score_samples(X) - self.threshold

    def contains(self, X):
        return self.score_samples(X) >= self.threshold

    def predict(self, X):
        return np.where(self.contains(X), 1, -1)

    def count_violations(self, X) -> int:
        return int(np.count_nonzero(~self.contains(X)))

    @property
    def volume_proxy_(self) -> float:
        check_is_fitted(self, "estimate_")
        return self.estimate_.volume_proxy
