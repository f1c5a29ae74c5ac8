"""System models, fixed-step RK4 integration and seeded scenario generation.

Vector fields use an in-place convention, ``f(t, x, u, out)``, writing dx/dt
into ``out``. The builtin models are numba-compiled; the integrator runs the
same RK4 source either compiled (when ``f`` is a numba dispatcher) or as
plain Python, so user-supplied callables work without numba.

Disturbances are constant over the horizon and drawn once per scenario.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np
from numba import njit
from numba.core.registry import CPUDispatcher

DEFAULT_STEP = 1e-2
RNG_IDENTITY = "numpy.random.Philox seeded by SeedSequence(seed, spawn_key=(stream, index))"
TRAIN_STREAM = 0
HOLDOUT_STREAM = 1


class IntegrationDivergedError(RuntimeError):
    def __init__(self, time: float, sample_index: int | None = None):
        self.time = time
        self.sample_index = sample_index
        where = "" if sample_index is None else f" (sample {sample_index})"
        super().__init__(f"non-finite state at t={time:.6g}{where}")


@dataclass(frozen=True)
class SystemModel:
    name: str
    state_dim: int
    disturbance_dim: int
    vector_field: Callable = field(repr=False)
    params: dict = field(default_factory=dict, compare=False)

    def derivative(self, t: float, x, u=None) -> np.ndarray:
        """Evaluate dx/dt at a single state (convenience for inspection and tests)."""
        x = np.asarray(x, dtype=float)
        u = np.zeros(0) if u is None else np.asarray(u, dtype=float)
        out = np.empty(self.state_dim)
        self.vector_field(float(t), x, u, out)
        return out


@dataclass(frozen=True)
class UniformBoxSpec:
    """Product of independent uniforms on ``[lower, upper]``."""

    lower: tuple
    upper: tuple

    def __post_init__(self):
        lo = tuple(float(v) for v in np.ravel(self.lower))
        hi = tuple(float(v) for v in np.ravel(self.upper))
        if len(lo) != len(hi):
            raise ValueError("lower and upper bounds differ in length")
        if any(a > b for a, b in zip(lo, hi)):
            raise ValueError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return len(self.lower)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        lo = np.asarray(self.lower)
        hi = np.asarray(self.upper)
        return lo + (hi - lo) * rng.random(self.dim)

    def to_dict(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper)}


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]


def _rk4_batch_py(f, X0, U, t0, save_times, step):
    # fail[b] is NaN unless sample b went non-finite at that time.
    B, n = X0.shape
    K = save_times.shape[0]
    out = np.empty((B, K, n))
    fail = np.full(B, np.nan)
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    for b in range(B):
        x = X0[b].copy()
        u = U[b]
        t_seg = t0
        ok = True
        for s in range(K):
            t_end = save_times[s]
            span = t_end - t_seg
            nsteps = 0
            if span > 0.0:
                nsteps = int(math.ceil(span / step - 1e-9))
            for j in range(nsteps):
                t = t_seg + j * step
                h = step
                if j == nsteps - 1:
                    h = t_end - t
                    # grid-aligned saves would otherwise perturb h by rounding
                    if abs(h - step) <= 1e-12 * step:
                        h = step
                f(t, x, u, k1)
                for i in range(n):
                    tmp[i] = x[i] + 0.5 * h * k1[i]
                f(t + 0.5 * h, tmp, u, k2)
                for i in range(n):
                    tmp[i] = x[i] + 0.5 * h * k2[i]
                f(t + 0.5 * h, tmp, u, k3)
                for i in range(n):
                    tmp[i] = x[i] + h * k3[i]
                f(t + h, tmp, u, k4)
                for i in range(n):
                    x[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                for i in range(n):
                    if not math.isfinite(x[i]):
                        ok = False
                if not ok:
                    fail[b] = t + h
                    break
            if not ok:
                for r in range(s, K):
                    for i in range(n):
                        out[b, r, i] = np.nan
                break
            for i in range(n):
                out[b, s, i] = x[i]
            t_seg = t_end
    return out, fail


_rk4_batch_jit = njit(cache=True)(_rk4_batch_py)


def _integration_grid(t0: float, t1: float, step: float) -> np.ndarray:
    n = int(math.ceil((t1 - t0) / step - 1e-9))
    grid = t0 + step * np.arange(n + 1, dtype=float)
    grid[-1] = t1
    return grid


def integrate_batch(model: SystemModel, X0, U, t0: float, save_times, step: float = DEFAULT_STEP):
    """Integrate many initial states at once; returns states of shape (B, K, n_x).

    Raises :class:`IntegrationDivergedError` naming the first failing sample.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    X0 = np.ascontiguousarray(np.atleast_2d(np.asarray(X0, dtype=float)))
    B = X0.shape[0]
    U = np.asarray(U, dtype=float).reshape(B, model.disturbance_dim)
    U = np.ascontiguousarray(U)
    save_times = np.ascontiguousarray(np.atleast_1d(np.asarray(save_times, dtype=float)))
    if X0.shape[1] != model.state_dim:
        raise ValueError(f"initial states have dimension {X0.shape[1]}, model expects {model.state_dim}")
    if np.any(np.diff(save_times) < 0) or save_times[0] < t0:
        raise ValueError("save times must be non-decreasing and start at or after t0")
    kernel = _rk4_batch_jit if isinstance(model.vector_field, CPUDispatcher) else _rk4_batch_py
    out, fail = kernel(model.vector_field, X0, U, float(t0), save_times, float(step))
    bad = np.flatnonzero(~np.isnan(fail))
    if bad.size:
        raise IntegrationDivergedError(float(fail[bad[0]]), int(bad[0]))
    return out


def integrate(model: SystemModel, x0, u, t0: float, t1: float, step: float = DEFAULT_STEP,
              save_at=None) -> Trajectory:
    """Classical RK4 from ``t0`` to ``t1``.

    Without ``save_at`` the trajectory holds every integration grid point
    (uniform ``step``, last step shortened to land on ``t1``).
    """
    if t1 < t0:
        raise ValueError("t1 must not precede t0")
    if save_at is None:
        times = _integration_grid(t0, t1, step) if t1 > t0 else np.array([float(t0)])
    else:
        times = np.asarray(save_at, dtype=float)
    u = np.zeros(model.disturbance_dim) if u is None else np.asarray(u, dtype=float)
    try:
        states = integrate_batch(model, np.asarray(x0, dtype=float)[None, :], u[None, :],
                                 t0, times, step)[0]
    except IntegrationDivergedError as err:
        raise IntegrationDivergedError(err.time) from None
    return Trajectory(times=times, states=states)


# -- builtin models --------------------------------------------------------

DUFFING_ALPHA = 0.05
DUFFING_FORCING_AMPLITUDE = 0.4
DUFFING_OMEGA = 1.3


@njit(cache=True)
def _duffing_field(t, x, u, out):
    out[0] = x[1]
    out[1] = (-DUFFING_ALPHA * x[1] + x[0] - x[0] ** 3
              + DUFFING_FORCING_AMPLITUDE * math.cos(DUFFING_OMEGA * t))


QUAD_G = 9.81
QUAD_K = 0.89 / 1.4
QUAD_D0 = 70.0
QUAD_D1 = 17.0
QUAD_N0 = 55.0


@njit(cache=True)
def _quadrotor_field(t, x, u, out):
    # state: (x, h, theta, dx, dh, dtheta); input: (thrust u1, desired angle u2)
    out[0] = x[3]
    out[1] = x[4]
    out[2] = x[5]
    out[3] = u[0] * QUAD_K * math.sin(x[2])
    out[4] = -QUAD_G + u[0] * QUAD_K * math.cos(x[2])
    out[5] = -QUAD_D0 * x[2] - QUAD_D1 * x[5] + QUAD_N0 * u[1]


LINEAR2D_A = np.array([[-0.7, -1.0], [1.0, -0.7]])


@njit(cache=True)
def _linear2d_field(t, x, u, out):
    out[0] = -0.7 * x[0] - 1.0 * x[1]
    out[1] = 1.0 * x[0] - 0.7 * x[1]


def linear2d_propagator(t: float) -> np.ndarray:
    """Closed-form ``exp(A t)`` for the builtin linear system (a scaled rotation)."""
    c, s = math.cos(t), math.sin(t)
    return math.exp(-0.7 * t) * np.array([[c, -s], [s, c]])


class BuiltinSystem(NamedTuple):
    model: SystemModel
    x0_spec: UniformBoxSpec
    d_spec: UniformBoxSpec
    t0: float
    t1: float


def builtin_model(name: str) -> BuiltinSystem:
    if name == "duffing":
        model = SystemModel("duffing", 2, 0, _duffing_field,
                            {"alpha": DUFFING_ALPHA, "forcing_amplitude": DUFFING_FORCING_AMPLITUDE,
                             "omega": DUFFING_OMEGA})
        return BuiltinSystem(model, UniformBoxSpec((0.95, -0.05), (1.05, 0.05)),
                             UniformBoxSpec((), ()), 0.0, 100.0)
    if name == "quadrotor":
        model = SystemModel("quadrotor", 6, 2, _quadrotor_field,
                            {"g": QUAD_G, "K": QUAD_K, "d0": QUAD_D0, "d1": QUAD_D1, "n0": QUAD_N0})
        x0 = UniformBoxSpec((-1.7, 0.3, -math.pi / 12, -0.8, -1.0, -math.pi / 2),
                            (1.7, 2.0, math.pi / 12, 0.8, 1.0, math.pi / 2))
        d = UniformBoxSpec((-1.5 + QUAD_G / QUAD_K, -math.pi / 4),
                           (1.5 + QUAD_G / QUAD_K, math.pi / 4))
        return BuiltinSystem(model, x0, d, 0.0, 5.0)
    if name == "linear2d":
        model = SystemModel("linear2d", 2, 0, _linear2d_field, {"A": LINEAR2D_A.tolist()})
        return BuiltinSystem(model, UniformBoxSpec((1.0, 1.0), (1.25, 1.25)),
                             UniformBoxSpec((), ()), 0.0, 10.0)
    raise KeyError(f"unknown model {name!r}; expected one of {BUILTIN_MODELS}")


BUILTIN_MODELS = ("duffing", "quadrotor", "linear2d")


# -- scenario generation ---------------------------------------------------

def sample_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator for one scenario, keyed by (seed, stream, index)."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(stream), int(index)))
    return np.random.Generator(np.random.Philox(ss))


def draw_initial_conditions(x0_spec: UniformBoxSpec, d_spec: UniformBoxSpec, N: int,
                            seed: int, stream: int = TRAIN_STREAM, start: int = 0):
    X0 = np.empty((N, x0_spec.dim))
    U = np.empty((N, d_spec.dim))
    for i in range(N):
        rng = sample_rng(seed, stream, start + i)
        X0[i] = x0_spec.sample(rng)
        U[i] = d_spec.sample(rng)
    return X0, U


@dataclass
class ScenarioSet:
    """Sampled terminal states (``times`` of length 1) or trajectories.

    ``states`` has shape (N, n_x) for terminal scenarios and (N, T, n_x) for
    trajectories. Scenario ``i`` came from RNG key ``(seed, stream, indices[i])``.
    """

    states: np.ndarray
    times: np.ndarray
    seed: int
    stream: int
    indices: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.states.shape[0]

    @property
    def keys(self) -> set:
        return {(self.seed, self.stream, int(i)) for i in self.indices}

    def to_csv(self, path) -> Path:
        """One row per scenario (index, state components); JSON sidecar alongside."""
        path = Path(path)
        if self.states.ndim != 2:
            raise ValueError("CSV export is for terminal-state scenario sets")
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["index"] + [f"x{j}" for j in range(self.states.shape[1])])
            for idx, row in zip(self.indices, self.states):
                writer.writerow([int(idx)] + [repr(float(v)) for v in row])
        sidecar = {**self.metadata, "seed": self.seed, "stream": self.stream,
                   "times": [float(t) for t in self.times], "rng": RNG_IDENTITY}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        return path

    @classmethod
    def from_csv(cls, path) -> "ScenarioSet":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        with path.open(newline="") as fh:
            rows = list(csv.reader(fh))[1:]
        indices = np.array([int(r[0]) for r in rows], dtype=int)
        states = np.array([[float(v) for v in r[1:]] for r in rows], dtype=float)
        seed, stream = meta.pop("seed"), meta.pop("stream")
        times = np.asarray(meta.pop("times"), dtype=float)
        meta.pop("rng", None)
        return cls(states, times, seed, stream, indices, meta)


def sample_scenarios(model: SystemModel, x0_spec: UniformBoxSpec, d_spec: UniformBoxSpec, N: int,
                     t0: float, t1: float, step: float = DEFAULT_STEP, seed: int = 0,
                     stream: int = TRAIN_STREAM, save_at=None, start: int = 0) -> ScenarioSet:
    """Simulate ``N`` independent scenarios.

    Terminal states at ``t1`` by default; pass ``save_at`` to keep whole
    trajectories on that grid. Training and holdout sets use different
    ``stream`` values so no RNG key is ever shared between them.
    """
    if N < 1:
        raise ValueError("N must be >= 1")
    if x0_spec.dim != model.state_dim or d_spec.dim != model.disturbance_dim:
        raise ValueError("distribution specs do not match the model dimensions")
    X0, U = draw_initial_conditions(x0_spec, d_spec, N, seed, stream, start)
    times = np.array([float(t1)]) if save_at is None else np.asarray(save_at, dtype=float)
    try:
        out = integrate_batch(model, X0, U, t0, times, step)
    except IntegrationDivergedError as err:
        raise IntegrationDivergedError(err.time, start + err.sample_index) from None
    states = out[:, -1, :] if save_at is None else out
    meta = {"model": model.name, "x0_spec": x0_spec.to_dict(), "d_spec": d_spec.to_dict(),
            "t0": float(t0), "t1": float(t1), "step": float(step)}
    return ScenarioSet(states, times, int(seed), int(stream),
                       np.arange(start, start + N), meta)


def uniform_grid(t0: float, t1: float, n_instants: int) -> np.ndarray:
    return np.linspace(t0, t1, n_instants)
