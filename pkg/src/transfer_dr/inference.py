"""Stratified nonparametric bootstrap and Wald inference.

Source and target rows are resampled separately with their sizes preserved;
every replicate refits the density ratio and the imputation model before
re-solving the estimating equations. Replicate ``b`` draws from
``SeedSequence(master_seed, spawn_key=(b,))`` (PCG64), so results do not
depend on how replicates are scheduled across workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist

import numpy as np

from .data import Study
from .estimators import (
    METHODS,
    EstimateOptions,
    assemble_dr,
    assemble_imp,
    assemble_iw,
    estimate_many,
    solve,
)
from .density_ratio import evaluate_weights, fit_density_ratio
from .exceptions import (
    BootstrapError,
    ConvergenceError,
    NumericalError,
    RankDeficiencyError,
    RatioOverflowError,
    SingularSystemError,
    ValidationError,
)
from .imputation import fit_gaussian_imputation

__all__ = [
    "BootstrapConfig",
    "BootstrapResult",
    "replicate_seed",
    "stratified_resample",
    "bootstrap",
    "bootstrap_many",
    "summarize_replicates",
    "norm_cdf",
    "norm_quantile",
    "wald_interval",
    "wald_pvalue",
]

CHUNK = 25


def norm_cdf(x):
    """Standard normal CDF through the complementary error function."""
    return 0.5 * math.erfc(-x / math.sqrt(2.0))


def norm_quantile(p):
    return NormalDist().inv_cdf(p)


def wald_interval(coef, se, level=0.95):
    se = np.asarray(se, dtype=float)
    if np.any(se <= 0):
        raise ValidationError("standard errors must be positive")
    if not 0 < level < 1:
        raise ValidationError("confidence level must lie in (0, 1)")
    z = norm_quantile(0.5 + level / 2)
    coef = np.asarray(coef, dtype=float)
    return coef - z * se, coef + z * se


def wald_pvalue(coef, se):
    """Two-sided normal p-value for ``H0: coef = 0``."""
    coef = np.asarray(coef, dtype=float)
    se = np.asarray(se, dtype=float)
    if np.any(se <= 0):
        raise ValidationError("standard errors must be positive")
    t = np.abs(coef / se)
    p = np.vectorize(lambda v: math.erfc(v / math.sqrt(2.0)))(t)
    return float(p) if p.ndim == 0 else p


@dataclass(frozen=True)
class BootstrapConfig:
    B: int = 500
    master_seed: int = 0
    ci_level: float = 0.95
    max_failure_fraction: float = 0.01
    interval: str = "wald"
    store_replicates: bool = True

    def __post_init__(self):
        if self.B < 2:
            raise ValidationError("bootstrap needs B >= 2")
        if not 0 < self.ci_level < 1:
            raise ValidationError("ci_level must lie in (0, 1)")
        if self.interval not in ("wald", "percentile"):
            raise ValidationError(f"unknown interval type {self.interval!r}")
        if not 0 <= self.max_failure_fraction < 1:
            raise ValidationError("max_failure_fraction must lie in [0, 1)")


@dataclass(frozen=True, eq=False)
class BootstrapResult:
    estimate: np.ndarray
    cov: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    p_values: np.ndarray
    n_failed: int
    failure_causes: dict = field(default_factory=dict)
    replicate_estimates: np.ndarray | None = None
    B: int = 0


def replicate_seed(master_seed, index):
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))


def _resample_indices(n, N, seed):
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(int(seed))
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.integers(0, n, size=n), rng.integers(0, N, size=N)


def stratified_resample(study: Study, seed) -> Study:
    """Draw n source and N target rows with replacement, each stratum separately."""
    si, ti = _resample_indices(study.n, study.N, seed)
    return study.subset(si, ti)


def _one_replicate(study, methods, options, seed):
    """Estimates for one resample: ``{method: vector or failure cause}``."""
    rs = stratified_resample(study, seed)
    out = {}
    w = imp = None
    ratio_err = imp_err = None
    if any(m in ("iw", "dr") for m in methods):
        try:
            ratio = fit_density_ratio(rs, options.max_iter, options.grad_tol, options.weight_cap)
            if not ratio.converged:
                ratio_err = "ratio_nonconvergence"
            else:
                w = evaluate_weights(ratio, rs.y_source, rs.z_source)
        except (ConvergenceError, RatioOverflowError):
            ratio_err = "ratio_nonconvergence"
    if any(m in ("imp", "dr") for m in methods):
        try:
            imp = fit_gaussian_imputation(rs, options.resolve_map(rs))
        except (RankDeficiencyError, ValidationError):
            imp_err = "imputation_rank_deficiency"
    for m in methods:
        if m in ("iw", "dr") and ratio_err:
            out[m] = ratio_err
            continue
        if m in ("imp", "dr") and imp_err:
            out[m] = imp_err
            continue
        try:
            if m == "iw":
                system = assemble_iw(rs, w)
            elif m == "imp":
                system = assemble_imp(rs, imp)
            else:
                system = assemble_dr(rs, w, imp)
            out[m] = solve(system)
        except SingularSystemError:
            out[m] = "solver_singularity"
        except NumericalError:
            out[m] = "numerical_error"
    return out


def summarize_replicates(estimate, replicates, level=0.95, interval="wald", store=True):
    """Covariance, SEs, intervals and p-values from ordered replicate estimates.

    With ``store=False`` the covariance is accumulated by a streaming
    (Welford) pass instead of from the stacked matrix.
    """
    R = np.asarray(replicates, dtype=float)
    k = len(estimate)
    m = len(R)
    if m < 2:
        raise BootstrapError("fewer than two successful bootstrap replicates", {})
    if store:
        cov = np.cov(R, rowvar=False, ddof=1).reshape(k, k)
    else:
        mean = np.zeros(k)
        M2 = np.zeros((k, k))
        for i, r in enumerate(R, start=1):
            delta = r - mean
            mean = mean + delta / i
            M2 = M2 + np.outer(delta, r - mean)
        cov = M2 / (m - 1)
    cov = 0.5 * (cov + cov.T)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    est = np.asarray(estimate, dtype=float)
    pos = se > 0
    lo = np.full(k, np.nan)
    hi = np.full(k, np.nan)
    pv = np.full(k, np.nan)
    if interval == "percentile":
        a = (1 - level) / 2
        lo, hi = np.quantile(R, [a, 1 - a], axis=0)
    elif pos.any():
        lo[pos], hi[pos] = wald_interval(est[pos], se[pos], level)
    if pos.any():
        pv[pos] = wald_pvalue(est[pos], se[pos])
    return cov, se, lo, hi, pv


def bootstrap_many(
    study: Study,
    methods=METHODS,
    config: BootstrapConfig | None = None,
    options: EstimateOptions | None = None,
    estimates=None,
    n_jobs=1,
):
    """Bootstrap several estimators on shared resamples.

    Returns ``{method: BootstrapResult}``; each entry equals what
    :func:`bootstrap` would return for that method alone.
    """
    config = config or BootstrapConfig()
    options = options or EstimateOptions()
    methods = tuple(methods)
    if estimates is None:
        estimates = estimate_many(study, methods, options)
    seeds = [replicate_seed(config.master_seed, b) for b in range(config.B)]
    chunks = [seeds[i:i + CHUNK] for i in range(0, len(seeds), CHUNK)]

    def run(chunk):
        return [_one_replicate(study, methods, options, s) for s in chunk]

    if n_jobs and n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as ex:
            parts = list(ex.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    reps = [r for part in parts for r in part]

    results = {}
    for m in methods:
        good, causes = [], {}
        for r in reps:
            v = r[m]
            if isinstance(v, str):
                causes[v] = causes.get(v, 0) + 1
            else:
                good.append(v)
        n_failed = config.B - len(good)
        if n_failed > config.max_failure_fraction * config.B:
            raise BootstrapError(
                f"{m}: {n_failed} of {config.B} bootstrap replicates failed ({causes})", causes
            )
        est = estimates[m].coef.vector if hasattr(estimates[m], "coef") else np.asarray(estimates[m])
        cov, se, lo, hi, pv = summarize_replicates(
            est, good, config.ci_level, config.interval, config.store_replicates
        )
        results[m] = BootstrapResult(
            estimate=est,
            cov=cov,
            se=se,
            ci_lower=lo,
            ci_upper=hi,
            p_values=pv,
            n_failed=n_failed,
            failure_causes=causes,
            replicate_estimates=np.array(good) if config.store_replicates else None,
            B=config.B,
        )
    return results


def bootstrap(study: Study, method="dr", config: BootstrapConfig | None = None,
              options: EstimateOptions | None = None, estimate_=None, n_jobs=1) -> BootstrapResult:
    est = None if estimate_ is None else {method: estimate_}
    return bootstrap_many(study, (method,), config, options, est, n_jobs)[method]
