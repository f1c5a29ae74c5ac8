"""Data-driven reachable sets and reach tubes certified with the holdout method."""

__version__ = "0.1.0"

from .bounds import (HoldoutCertificate, WaitAndJudgeCertificate, binomial_cdf,
                     binomial_tail_inversion, clt_scale_bound, empirical_error, fast_rate_bound,
                     holdout_certificate, wait_and_judge_certificate, wait_and_judge_epsilon)
from .dynamics import (ScenarioSet, SystemModel, Trajectory, UniformBoxSpec, builtin_model,
                       integrate, sample_scenarios)
from .reachset import (FitReport, InfeasibleFitError, RbfEstimate, RbfReachSet,
                       count_support_scenarios, count_violations, fit_rbf, kmeans_init)
from .tube import RbfReachTube, TubeEstimate, fit_tube, tube_contains, tube_objective, tube_violations

__all__ = [
    "HoldoutCertificate", "WaitAndJudgeCertificate", "binomial_cdf", "binomial_tail_inversion",
    "clt_scale_bound", "empirical_error", "fast_rate_bound", "holdout_certificate",
    "wait_and_judge_certificate", "wait_and_judge_epsilon",
    "ScenarioSet", "SystemModel", "Trajectory", "UniformBoxSpec", "builtin_model", "integrate",
    "sample_scenarios",
    "FitReport", "InfeasibleFitError", "RbfEstimate", "RbfReachSet", "count_support_scenarios",
    "count_violations", "fit_rbf", "kmeans_init",
    "RbfReachTube", "TubeEstimate", "fit_tube", "tube_contains", "tube_objective",
    "tube_violations",
]
