"""Time-varying RBF reach tubes with width smoothing over time.

One set of centers and widths per time instant. The objective sums squared
widths over all instants plus ``lam`` times the squared deviation of each
width from the mean width of the whole tube. Every training trajectory must
be covered at every instant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .reachset import (FEAS_TOL, SIGMA_MIN, InfeasibleFitError, initialize_rbf, rbf_scores,
                       repair_widths, solve_rbf_block)


@dataclass(frozen=True)
class TubeEstimate:
    times: np.ndarray
    centers: np.ndarray
    widths: np.ndarray
    threshold: float
    lam: float
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        centers = np.asarray(self.centers, dtype=float)
        widths = np.asarray(self.widths, dtype=float)
        if centers.ndim != 3 or widths.shape != centers.shape[:2] or len(times) != len(widths):
            raise ValueError("expected centers (T, m, n), widths (T, m) and T grid times")
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "widths", widths)

    @property
    def n_instants(self) -> int:
        return len(self.times)

    @property
    def n_basis(self) -> int:
        return self.widths.shape[1]

    def instant_scores(self, X) -> np.ndarray:
        """Scores of trajectories ``X`` (N, T, n) against each instant's RBFs, shape (N, T)."""
        X = self._check(X)
        return np.stack([rbf_scores(X[:, t], self.centers[t], self.widths[t])
                         for t in range(self.n_instants)], axis=1)

    def instant_contains(self, X) -> np.ndarray:
        return self.instant_scores(X) >= self.threshold

    def contains(self, X) -> np.ndarray:
        return self.instant_contains(X).all(axis=1)

    def _check(self, X) -> np.ndarray:
        times = getattr(X, "times", None)
        if times is not None and (len(times) != self.n_instants
                                  or not np.allclose(times, self.times, rtol=0, atol=1e-9)):
            raise ValueError("trajectory grid does not match the tube grid")
        X = np.asarray(getattr(X, "states", X), dtype=float)
        if X.ndim == 2:
            X = X[None]
        if X.shape[1] != self.n_instants:
            raise ValueError(f"trajectories have {X.shape[1]} instants, tube has {self.n_instants}")
        if X.shape[2] != self.centers.shape[2]:
            raise ValueError("trajectory state dimension does not match the tube")
        return X

    def to_dict(self) -> dict:
        return {"times": self.times.tolist(), "centers": self.centers.tolist(),
                "widths": self.widths.tolist(), "gamma": self.threshold, "lam": self.lam,
                "fit": self.metadata}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TubeEstimate":
        return cls(np.asarray(d["times"]), np.asarray(d["centers"]), np.asarray(d["widths"]),
                   float(d["gamma"]), float(d["lam"]), d.get("fit", {}))


def widths_objective(widths, lam: float) -> float:
    W = np.asarray(widths, dtype=float)
    return float(np.sum(W ** 2) + lam * np.sum((W.mean() - W) ** 2))


def tube_objective(tube: TubeEstimate) -> float:
    return widths_objective(tube.widths, tube.lam)


def _block_objective(W, t, lam):
    """Objective and gradient in the widths of instant ``t`` with the others held fixed."""
    K = W.size
    other = W.sum() - W[t].sum()
    mask = np.ones(W.shape[0], dtype=bool)
    mask[t] = False
    W_other = W[mask].ravel()

    def f(s):
        avg = (other + s.sum()) / K
        return float(np.sum(s ** 2) + lam * (np.sum((avg - W_other) ** 2) + np.sum((avg - s) ** 2)))

    def grad(s):
        # the mean's own derivative cancels: deviations from the mean sum to zero
        avg = (other + s.sum()) / K
        return 2.0 * s - 2.0 * lam * (avg - s)

    return f, grad


def fit_tube(trajectories, m: int = 1, gamma: float = 0.25, lam: float = 1.0, *, seed: int = 0,
             sigma_min: float = SIGMA_MIN, max_sweeps: int = 100, sweep_tol: float = 1e-6,
             max_iter: int = 500, tol: float = 1e-10, times=None) -> TubeEstimate:
    """Block-coordinate fit of a smoothed RBF reach tube.

    Each sweep re-solves every instant's centers and widths with SLSQP
    against the coupled objective, keeping the other instants fixed, and
    stops once the relative objective change falls below ``sweep_tol``.
    With ``lam == 0`` the instants decouple and the first sweep coincides
    with independent :func:`~holdreach.reachset.fit_rbf` calls.
    """
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if not 0.0 < gamma < 1.0:
        raise ValueError(f"threshold gamma must lie in (0, 1), got {gamma}")
    if times is None:
        times = getattr(trajectories, "times", None)
    X = np.asarray(getattr(trajectories, "states", trajectories), dtype=float)
    if X.ndim != 3:
        raise ValueError("trajectories must have shape (N, T, n_x)")
    N, T, n = X.shape
    times = np.arange(T, dtype=float) if times is None else np.asarray(times, dtype=float)

    blocks = []
    for t in range(T):
        U = np.unique(X[:, t], axis=0)
        blocks.append((U - U.mean(axis=0), U.mean(axis=0)))
    mu = np.empty((T, m, n))
    W = np.empty((T, m))
    for t in range(T):
        c, w = initialize_rbf(X[:, t], m, gamma, seed, sigma_min)
        mu[t] = c - blocks[t][1]
        W[t] = w
    scales = np.maximum(np.sum(W ** 2, axis=1), 1e-300)

    J = widths_objective(W, lam)
    history = [J]
    converged = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        for t in range(T):
            f, g = _block_objective(W, t, lam)
            s = scales[t]
            Uc = blocks[t][0]
            mu_t, w_t, _ = solve_rbf_block(Uc, mu[t], W[t], gamma, lambda v: f(v) / s,
                                           lambda v: g(v) / s, sigma_min, max_iter, tol)
            if not (np.all(np.isfinite(mu_t)) and np.all(np.isfinite(w_t))):
                continue
            w_t, _ = repair_widths(Uc, mu_t, w_t, gamma)
            trial = W.copy()
            trial[t] = w_t
            if widths_objective(trial, lam) <= widths_objective(W, lam):
                mu[t], W[t] = mu_t, w_t
        J_new = widths_objective(W, lam)
        history.append(J_new)
        change = abs(J - J_new) / max(abs(J_new), 1e-300)
        J = J_new
        if change < sweep_tol:
            converged = True
            break

    worst = [max(0.0, gamma - float(rbf_scores(blocks[t][0], mu[t], W[t]).min())) for t in range(T)]
    t_bad = int(np.argmax(worst))
    if worst[t_bad] > FEAS_TOL:
        raise InfeasibleFitError(f"tube violates coverage by {worst[t_bad]:.3g} at instant "
                                 f"{t_bad} (t={times[t_bad]:.4g})")
    centers = mu + np.stack([b[1] for b in blocks])[:, None, :]
    for t in range(T):
        # membership is tested on raw coordinates, where un-shifting can cost an ulp
        W[t], _ = repair_widths(blocks[t][0] + blocks[t][1], centers[t], W[t], gamma)
    J = widths_objective(W, lam)
    meta = {"sweeps": sweeps, "converged": converged, "objective": J,
            "objective_history": history, "max_violation": float(max(worst)), "seed": seed,
            "sigma_min": sigma_min}
    return TubeEstimate(times, centers, W, float(gamma), float(lam), meta)


def tube_contains(tube: TubeEstimate, traj) -> bool:
    """True iff the trajectory is inside the tube at every instant."""
    return bool(tube.contains(traj)[0])


def tube_violations(tube: TubeEstimate, trajectories) -> int:
    return int(np.count_nonzero(~tube.contains(trajectories)))


def per_instant_violations(tube: TubeEstimate, trajectories) -> np.ndarray:
    """Count of trajectories outside the tube at each instant."""
    return np.count_nonzero(~tube.instant_contains(trajectories), axis=0)


class RbfReachTube(BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_tube`; ``X`` is (N, T, n_x)."""

    def __init__(self, n_basis: int = 1, threshold: float = 0.25, lam: float = 1.0,
                 sigma_min: float = SIGMA_MIN, max_sweeps: int = 100, random_state: int = 0):
        self.n_basis = n_basis
        self.threshold = threshold
        self.lam = lam
        self.sigma_min = sigma_min
        self.max_sweeps = max_sweeps
        self.random_state = random_state

    def fit(self, X, y=None, times=None):
        X = check_array(X, allow_nd=True, ensure_2d=False)
        self.tube_ = fit_tube(X, self.n_basis, self.threshold, self.lam, seed=self.random_state,
                              sigma_min=self.sigma_min, max_sweeps=self.max_sweeps, times=times)
        self.n_features_in_ = X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "tube_")
        X = check_array(X, allow_nd=True, ensure_2d=False)
        return np.where(self.tube_.contains(X), 1, -1)

    def count_violations(self, X) -> int:
        check_is_fitted(self, "tube_")
        return int(np.count_nonzero(self.predict(X) < 0))
