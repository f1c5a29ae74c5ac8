"""Declarative experiments: split sweeps, wait-and-judge baseline, coverage
studies, reach tubes and the de-randomization table.

Every ``run_*`` function is deterministic given its config and seed. The
``write_*`` helpers persist results as CSV (tables) and JSON (estimates and
run manifests). Wall-clock times go to the manifests only, which keeps the
CSV outputs byte-identical across repeated runs.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from .bounds import (binomial_tail_inversion, empirical_error, holdout_certificate,
                     wait_and_judge_epsilon)
from .derand import (BumpInstance, bump_violation_probability, calibrate_delta,
                     mc_violation_estimate, zeroth_order_query_lower_bound)
from .dynamics import (BUILTIN_MODELS, DEFAULT_STEP, HOLDOUT_STREAM, RNG_IDENTITY, TRAIN_STREAM,
                       builtin_model, integrate_batch, linear2d_propagator, sample_scenarios,
                       uniform_grid)
from .reachset import FEAS_TOL, InfeasibleFitError, count_violations, fit_rbf, support_scenarios
from .tube import fit_tube, per_instant_violations, tube_violations

log = logging.getLogger(__name__)

DEFAULT_SPLITS = ((10, 2990), (50, 2950), (100, 2900), (1000, 2000), (1500, 1500),
                (2000, 1000), (2900, 100), (2950, 50), (2990, 10))
DEFAULT_BASIS = {"duffing": 2, "quadrotor": 3, "linear2d": 1}
SWEEP_HEADER = ("N", "M", "vol", "k_hat", "e_hat", "epsilon", "seed")
REFERENCE_STREAM = 2


class ConfigError(ValueError):
    pass


@dataclass
class TubeOptions:
    n_instants: int = 41
    lam: float = 1.0
    n_train: int = 1500
    n_holdout: int = 1500
    m: int = 1


@dataclass
class CoverageOptions:
    trials: int = 500
    n_train: int = 200
    n_holdout: int = 200
    beta: float = 0.1
    m: int = 1
    t1: float | None = None
    reference_size: int = 1_000_000


@dataclass
class DerandOptions:
    dims: list = field(default_factory=lambda: [1, 2, 3, 6, 10, 20])
    eps: list = field(default_factory=lambda: [0.1, 0.01])
    L: float = 1.0
    n: int = 1_000_000


@dataclass
class ExperimentConfig:
    model: str = "duffing"
    m: int | None = None
    gamma: float = 0.25
    beta: float = 1e-9
    total: int = 3000
    splits: list = field(default_factory=lambda: [list(s) for s in DEFAULT_SPLITS])
    seed: int = 0
    step: float = DEFAULT_STEP
    tube: TubeOptions = field(default_factory=TubeOptions)
    coverage: CoverageOptions = field(default_factory=CoverageOptions)
    derand: DerandOptions = field(default_factory=DerandOptions)
    out_dir: str = "runs"

    def __post_init__(self):
        if self.m is None:
            self.m = DEFAULT_BASIS.get(self.model, 1)
        self.splits = [tuple(int(v) for v in s) for s in self.splits]
        for name, cls in (("tube", TubeOptions), ("coverage", CoverageOptions),
                          ("derand", DerandOptions)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))

    def validate(self, splits: bool = True) -> "ExperimentConfig":
        if self.model not in BUILTIN_MODELS:
            raise ConfigError(f"unknown model {self.model!r}")
        if not 0.0 < self.beta < 1.0:
            raise ConfigError("beta must lie in (0, 1)")
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError("gamma must lie in (0, 1)")
        if self.m < 1:
            raise ConfigError("m must be >= 1")
        if self.step <= 0:
            raise ConfigError("step must be positive")
        for N, M in (self.splits if splits else ()):
            if N < 1 or M < 1:
                raise ConfigError(f"split ({N}, {M}) needs N >= 1 and M >= 1")
            if N + M != self.total:
                raise ConfigError(f"split ({N}, {M}) does not sum to total {self.total}")
        if not 0.0 < self.coverage.beta < 1.0:
            raise ConfigError("coverage beta must lie in (0, 1)")
        if self.tube.lam < 0:
            raise ConfigError("tube lam must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["splits"] = [list(s) for s in self.splits]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class ResultRow:
    N: int
    M: int
    vol: float
    k_hat: int
    e_hat: float
    epsilon: float
    runtime_s: float
    seed: int
    error: str | None = None

    def csv_values(self) -> list:
        return [self.N, self.M, repr(self.vol), self.k_hat, repr(self.e_hat),
                repr(self.epsilon), self.seed]


@dataclass
class WaitAndJudgeRow:
    N: int
    support_count: int
    vol: float
    epsilon: float
    runtime_s: float
    seed: int


def _system(config: ExperimentConfig):
    return builtin_model(config.model)


def _holdout_row(config, sysm, train, N, M):
    """Fit on ``train[:N]``, generate and score ``M`` holdout scenarios."""
    start = time.perf_counter()
    est, report = fit_rbf(train[:N], config.m, config.gamma, seed=config.seed)
    holdout = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, M, sysm.t0, sysm.t1,
                               config.step, config.seed, HOLDOUT_STREAM)
    k = count_violations(est, holdout)
    cert = holdout_certificate(k, M, config.beta)
    runtime = time.perf_counter() - start
    row = ResultRow(N, M, est.volume_proxy, k, empirical_error(k, M), cert.epsilon, runtime,
                    config.seed)
    return row, est, report


def run_split_sweep(config: ExperimentConfig, estimates: list | None = None) -> list:
    """Holdout certificates for every (N, M) split in ``config.splits``.

    Training scenarios come from the training stream and holdout scenarios
    from the holdout stream of the same seed. A failing split yields a row
    with ``error`` set and the sweep carries on. Runtime covers fitting,
    holdout generation and the bound, not training-set generation.
    """
    config.validate()
    sysm = _system(config)
    n_max = max(N for N, _ in config.splits)
    train = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, n_max, sysm.t0, sysm.t1,
                             config.step, config.seed, TRAIN_STREAM).states
    rows = []
    for N, M in config.splits:
        try:
            row, est, report = _holdout_row(config, sysm, train, N, M)
        except (InfeasibleFitError, RuntimeError, ValueError) as err:
            log.warning("split (%d, %d) failed: %s", N, M, err)
            rows.append(ResultRow(N, M, math.nan, -1, math.nan, math.nan, math.nan, config.seed,
                                  str(err)))
            continue
        rows.append(row)
        if estimates is not None:
            estimates.append((N, M, est, report))
    return rows


def run_wait_and_judge(config: ExperimentConfig, estimates: list | None = None) -> WaitAndJudgeRow:
    """Wait-and-judge baseline on ``config.total`` training scenarios.

    The runtime covers the full fit, the N leave-one-out refits and the bound;
    scenario generation is excluded.
    """
    config.validate(splits=False)
    sysm = _system(config)
    N = config.total
    train = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, N, sysm.t0, sysm.t1,
                             config.step, config.seed, TRAIN_STREAM).states
    start = time.perf_counter()
    est, report = fit_rbf(train, config.m, config.gamma, seed=config.seed)
    support = support_scenarios(train, config.m, config.gamma, seed=config.seed)
    eps = wait_and_judge_epsilon(len(support), N, config.beta)
    runtime = time.perf_counter() - start
    if estimates is not None:
        estimates.append((N, 0, est, report))
    return WaitAndJudgeRow(N, int(len(support)), est.volume_proxy, eps, runtime, config.seed)


@dataclass
class CoverageResult:
    miscoverage: float
    k_hat: np.ndarray
    epsilon: np.ndarray
    true_violation: np.ndarray
    beta: float

    @property
    def trials(self) -> int:
        return len(self.epsilon)

    @property
    def violated(self) -> np.ndarray:
        return self.true_violation > self.epsilon


def miscoverage_rate(true_violation, epsilon) -> float:
    true_violation = np.asarray(true_violation, dtype=float)
    return float(np.mean(true_violation > np.asarray(epsilon, dtype=float)))


def _trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, trial]).generate_state(1)[0])


def reference_terminal_states(model: str, n: int, seed: int, t1: float | None = None,
                              step: float = DEFAULT_STEP) -> np.ndarray:
    """Large sample of the true terminal distribution, used to evaluate V exactly enough.

    ``linear2d`` uses the closed-form propagator; other models are simulated.
    """
    sysm = builtin_model(model)
    t1 = sysm.t1 if t1 is None else t1
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(REFERENCE_STREAM,))))
    lo, hi = np.asarray(sysm.x0_spec.lower), np.asarray(sysm.x0_spec.upper)
    X0 = lo + (hi - lo) * rng.random((n, len(lo)))
    if model == "linear2d":
        return X0 @ linear2d_propagator(t1 - sysm.t0).T
    dlo, dhi = np.asarray(sysm.d_spec.lower), np.asarray(sysm.d_spec.upper)
    U = dlo + (dhi - dlo) * rng.random((n, len(dlo)))
    return integrate_batch(sysm.model, X0, U, sysm.t0, [t1], step)[:, -1, :]


def run_coverage_study(model: str = "linear2d", trials: int = 500, N: int = 200, M: int = 200,
                       beta: float = 0.1, seed: int = 0, *, m: int = 1, gamma: float = 0.25,
                       t1: float | None = None, reference_size: int = 1_000_000,
                       step: float = DEFAULT_STEP) -> CoverageResult:
    """Frequency with which the true violation probability exceeds the certificate.

    Each trial draws fresh training and holdout sets, fits, certifies, and
    measures V against one shared reference sample of the terminal law.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    sysm = builtin_model(model)
    horizon = sysm.t1 if t1 is None else float(t1)
    reference = reference_terminal_states(model, reference_size, seed, horizon, step)
    ks, eps, true_v = [], [], []
    for j in range(trials):
        s = _trial_seed(seed, j)
        train = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, N, sysm.t0, horizon,
                                 step, s, TRAIN_STREAM)
        holdout = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, M, sysm.t0, horizon,
                                   step, s, HOLDOUT_STREAM)
        est, _ = fit_rbf(train.states, m, gamma, seed=s)
        k = count_violations(est, holdout)
        ks.append(k)
        eps.append(binomial_tail_inversion(k, M, beta))
        true_v.append(1.0 - float(np.mean(est.contains(reference))))
    eps = np.asarray(eps)
    true_v = np.asarray(true_v)
    return CoverageResult(miscoverage_rate(true_v, eps), np.asarray(ks), eps, true_v, beta)


@dataclass
class TubeExperimentResult:
    tube: object
    row: ResultRow
    instant_violations: np.ndarray


def run_tube_experiment(config: ExperimentConfig) -> TubeExperimentResult:
    """Reach tube on training trajectories, certified on holdout trajectories.

    A holdout trajectory counts as one violation if it leaves the tube at
    any grid instant.
    """
    config.validate(splits=False)
    opts = config.tube
    sysm = _system(config)
    grid = uniform_grid(sysm.t0, sysm.t1, opts.n_instants)
    train = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, opts.n_train, sysm.t0,
                             sysm.t1, config.step, config.seed, TRAIN_STREAM, save_at=grid)
    start = time.perf_counter()
    tube = fit_tube(train, opts.m, config.gamma, opts.lam, seed=config.seed)
    holdout = sample_scenarios(sysm.model, sysm.x0_spec, sysm.d_spec, opts.n_holdout, sysm.t0,
                               sysm.t1, config.step, config.seed, HOLDOUT_STREAM, save_at=grid)
    k = tube_violations(tube, holdout)
    cert = holdout_certificate(k, opts.n_holdout, config.beta)
    runtime = time.perf_counter() - start
    vol = float(np.sqrt(np.sum(tube.widths ** 2)))
    row = ResultRow(opts.n_train, opts.n_holdout, vol, k, empirical_error(k, opts.n_holdout),
                    cert.epsilon, runtime, config.seed)
    return TubeExperimentResult(tube, row, per_instant_violations(tube, holdout))


def run_derand_demo(dims, eps_list, L: float = 1.0, n: int = 1_000_000, seed: int = 0) -> list:
    """Rows of (d, eps, delta*, exact probability, MC estimate, query bound).

    The query bound takes the target sub-optimality equal to ``delta*``.
    """
    rows = []
    for d in dims:
        for eps in eps_list:
            delta = calibrate_delta(L, int(d), float(eps))
            bump = BumpInstance(int(d), float(L), delta)
            mc_seed = _trial_seed(seed, 1000 * int(d) + len(rows))
            q = zeroth_order_query_lower_bound(L, delta, int(d))
            rows.append({"d": int(d), "epsilon": float(eps), "delta_star": delta,
                         "exact_p": bump_violation_probability(bump),
                         "mc_estimate": mc_violation_estimate(bump, n, mc_seed),
                         "query_bound": q.display(), "log10_query_bound": q.log10})
    return rows


# -- persistence -----------------------------------------------------------

def write_csv(path: Path, header, rows) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_sweep_csv(rows, path) -> Path:
    return write_csv(Path(path), SWEEP_HEADER, [r.csv_values() for r in rows if r.error is None])


def read_sweep_csv(path) -> list:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [ResultRow(int(r["N"]), int(r["M"]), float(r["vol"]), int(r["k_hat"]),
                          float(r["e_hat"]), float(r["epsilon"]), math.nan, int(r["seed"]))
                for r in reader]


def write_derand_csv(rows, path) -> Path:
    header = ("d", "epsilon", "delta_star", "exact_p", "mc_estimate", "query_bound")
    return write_csv(Path(path), header,
                      [[r["d"], repr(r["epsilon"]), repr(r["delta_star"]), repr(r["exact_p"]),
                        repr(r["mc_estimate"]), r["query_bound"]] for r in rows])


def write_coverage_csv(result: CoverageResult, path) -> Path:
    header = ("trial", "k_hat", "epsilon", "true_v", "violated")
    return write_csv(Path(path), header,
                      [[j, int(k), repr(float(e)), repr(float(v)), int(v > e)]
                       for j, (k, e, v) in enumerate(zip(result.k_hat, result.epsilon,
                                                         result.true_violation))])


def write_instants_csv(result: TubeExperimentResult, path) -> Path:
    tube = result.tube
    header = ["instant", "time", "violations"] + [f"width_{i}" for i in range(tube.n_basis)]
    return write_csv(Path(path), header,
                      [[t, repr(float(tube.times[t])), int(result.instant_violations[t])]
                       + [repr(float(w)) for w in tube.widths[t]] for t in range(tube.n_instants)])


def estimate_document(est, report, config: ExperimentConfig) -> dict:
    doc = est.to_dict()
    doc.update({"model": config.model, "fit_report": report.to_dict(), "seed": config.seed})
    return doc


def manifest(config: ExperimentConfig, command: str, **extra) -> dict:
    return {"command": command, "config": config.to_dict(), "version": __version__,
            "rng": RNG_IDENTITY, "feasibility_tol": FEAS_TOL,
            "environment": {"python": platform.python_version(), "numpy": np.__version__,
                            "scipy": scipy.__version__, "sklearn": sklearn.__version__},
            **extra}


def write_json(obj, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
