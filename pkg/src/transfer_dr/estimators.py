"""Importance-weighting, imputation and doubly robust estimators.

All three estimating equations are affine in ``vartheta = (beta, theta)``, so
each estimator is a single ``(p+q) x (p+q)`` linear solve. Source sums are
scaled by ``1/n`` and target sums by ``1/N``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator, RegressorMixin

from .data import FeatureMap, Study
from .density_ratio import RatioFit, evaluate_weights, fit_density_ratio
from .exceptions import ConvergenceError, SingularSystemError, ValidationError
from .imputation import ImputationFit, fit_gaussian_imputation, m1

__all__ = [
    "METHODS",
    "Coefficients",
    "LinearSystem",
    "EstimateOptions",
    "EstimateResult",
    "assemble_iw",
    "assemble_imp",
    "assemble_imp_moments",
    "assemble_dr",
    "assemble_dr_moments",
    "solve",
    "estimating_equations",
    "estimate",
    "estimate_many",
    "TransferRegression",
]

METHODS = ("iw", "imp", "dr")
MAX_CONDITION = 1e12
RESIDUAL_RTOL = 1e-8


@dataclass(frozen=True, eq=False)
class Coefficients:
    beta: np.ndarray
    theta: np.ndarray

    @property
    def vector(self):
        return np.concatenate([self.beta, self.theta])

    @classmethod
    def from_vector(cls, v, p):
        v = np.asarray(v, dtype=float)
        return cls(v[:p].copy(), v[p:].copy())


@dataclass(frozen=True, eq=False)
class LinearSystem:
    A: np.ndarray
    b: np.ndarray
    condition_estimate: float = field(default=np.nan)
    method: str = ""

    def __post_init__(self):
        if np.isnan(self.condition_estimate):
            c = np.linalg.cond(self.A) if np.all(np.isfinite(self.A)) else np.inf
            object.__setattr__(self, "condition_estimate", float(max(c, 1.0)))


@dataclass(frozen=True)
class EstimateOptions:
    """Nuisance-model settings shared by point estimation and the bootstrap.

    ``feature_map`` is a preset name or a :class:`FeatureMap`; ``weights``,
    when given, replaces the fitted density ratio on the source rows.
    """

    feature_map: object = "linear"
    max_iter: int = 100
    grad_tol: float = 1e-10
    weight_cap: float | None = None

    def resolve_map(self, study: Study) -> FeatureMap:
        if isinstance(self.feature_map, FeatureMap):
            return self.feature_map
        return FeatureMap.preset(self.feature_map, study.q, study.intercept_in_z)


@dataclass(frozen=True, eq=False)
class EstimateResult:
    method: str
    coef: Coefficients
    residual_norm: float
    system: LinearSystem
    ratio_fit: RatioFit | None = None
    imputation_fit: ImputationFit | None = None


def _design(study):
    return np.hstack([study.x_source, study.z_source])


def assemble_iw(study: Study, weights) -> LinearSystem:
    w = np.asarray(weights, dtype=float)
    if w.shape != (study.n,):
        raise ValidationError(f"need {study.n} source weights, got shape {w.shape}")
    if np.any(w <= 0):
        raise ValidationError("importance weights must be positive")
    W = _design(study)
    n = study.n
    A = (W.T * w) @ W / n
    b = (w * study.y_source) @ W / n
    return LinearSystem(A, b, method="iw")


def assemble_imp_moments(y_t, z_t, m1_t, m2_t) -> LinearSystem:
    """Imputation system from target rows and their imputed moments.

    ``m1_t`` has shape (N, p) and ``m2_t`` shape (N, p, p).
    """
    N = len(y_t)
    A11 = m2_t.sum(axis=0) / N
    A12 = m1_t.T @ z_t / N
    A22 = z_t.T @ z_t / N
    A = np.block([[A11, A12], [A12.T, A22]])
    b = np.concatenate([m1_t.T @ y_t, z_t.T @ y_t]) / N
    return LinearSystem(A, b, method="imp")


def _target_moments(study, imp):
    M1 = m1(imp, study.y_target, study.z_target)
    return M1, imp.sigma[None] + M1[:, :, None] * M1[:, None, :]


def assemble_imp(study: Study, imp: ImputationFit) -> LinearSystem:
    M1, M2 = _target_moments(study, imp)
    return assemble_imp_moments(study.y_target, study.z_target, M1, M2)


def assemble_dr_moments(y_s, x_s, z_s, w, m1_s, m2_s, y_t, z_t, m1_t, m2_t) -> LinearSystem:
    """Doubly robust system from explicit imputed moments on both samples."""
    n, N = len(y_s), len(y_t)
    r = x_s - m1_s
    wr = r * w[:, None]
    # x x^T - m2 on source rows, weighted
    S = (x_s.T * w) @ x_s - np.einsum("i,ijk->jk", w, m2_s)
    A11 = S / n + m2_t.sum(axis=0) / N
    A12 = wr.T @ z_s / n + m1_t.T @ z_t / N
    A21 = z_s.T @ wr / n + z_t.T @ m1_t / N
    A22 = z_t.T @ z_t / N
    A = np.block([[A11, A12], [A21, A22]])
    b = np.concatenate([wr.T @ y_s / n + m1_t.T @ y_t / N, z_t.T @ y_t / N])
    return LinearSystem(A, b, method="dr")


def assemble_dr(study: Study, weights, imp: ImputationFit) -> LinearSystem:
    w = np.asarray(weights, dtype=float)
    if w.shape != (study.n,):
        raise ValidationError(f"need {study.n} source weights, got shape {w.shape}")
    if np.any(w <= 0):
        raise ValidationError("importance weights must be positive")
    # self-normalised so the augmentation does not depend on the weight scale
    w = w / w.mean()
    Ms = m1(imp, study.y_source, study.z_source)
    M2s = imp.sigma[None] + Ms[:, :, None] * Ms[:, None, :]
    Mt, M2t = _target_moments(study, imp)
    return assemble_dr_moments(
        study.y_source, study.x_source, study.z_source, w, Ms, M2s,
        study.y_target, study.z_target, Mt, M2t,
    )


def solve(system: LinearSystem) -> np.ndarray:
    """LU solve with partial pivoting and a residual check.

    The system is never symmetrised: the doubly robust matrix is only
    symmetric in expectation.
    """
    label = system.method.upper() or "linear"
    if not np.isfinite(system.condition_estimate) or system.condition_estimate > MAX_CONDITION:
        raise SingularSystemError(label, system.condition_estimate)
    lu, piv = scipy.linalg.lu_factor(system.A, check_finite=True)
    sol = scipy.linalg.lu_solve((lu, piv), system.b)
    res = np.linalg.norm(system.A @ sol - system.b)
    if not res <= RESIDUAL_RTOL * (1.0 + np.linalg.norm(system.b)):
        raise SingularSystemError(label, system.condition_estimate)
    return sol


def estimating_equations(method, study: Study, vartheta, weights=None, imp=None):
    """Empirical estimating function evaluated at ``vartheta``.

    Computed from residuals row by row rather than from the assembled
    system, so it serves as an independent plug-back check.
    """
    p = study.p
    vt = np.asarray(vartheta, dtype=float)
    beta, theta = vt[:p], vt[p:]
    n, N = study.n, study.N
    ys, xs, zs = study.y_source, study.x_source, study.z_source
    yt, zt = study.y_target, study.z_target
    if method == "iw":
        W = _design(study)
        resid = ys - W @ vt
        return (W * (weights * resid)[:, None]).sum(axis=0) / n
    Mt = m1(imp, yt, zt)
    M2t = imp.sigma[None] + Mt[:, :, None] * Mt[:, None, :]
    ut = yt - zt @ theta
    U0 = (Mt * ut[:, None] - M2t @ beta).sum(axis=0) / N
    V0 = (zt * (yt - Mt @ beta - zt @ theta)[:, None]).sum(axis=0) / N
    if method == "imp":
        return np.concatenate([U0, V0])
    if method != "dr":
        raise ValidationError(f"unknown method {method!r}")
    weights = np.asarray(weights, dtype=float)
    weights = weights / weights.mean()
    Ms = m1(imp, ys, zs)
    M2s = imp.sigma[None] + Ms[:, :, None] * Ms[:, None, :]
    us = ys - zs @ theta
    XXt = xs[:, :, None] * xs[:, None, :]
    term = (xs - Ms) * us[:, None] + (M2s - XXt) @ beta
    U1 = (term * weights[:, None]).sum(axis=0) / n
    V1 = (zs * (weights * ((Ms - xs) @ beta))[:, None]).sum(axis=0) / n
    return np.concatenate([U1 + U0, V1 + V0])


def _fit_nuisances(study, methods, options, weights=None):
    ratio = imp = None
    if weights is None and any(m in ("iw", "dr") for m in methods):
        ratio = fit_density_ratio(
            study, max_iter=options.max_iter, grad_tol=options.grad_tol, weight_cap=options.weight_cap
        )
        if not ratio.converged:
            raise ConvergenceError(
                f"density-ratio fit did not converge in {ratio.iterations} iterations "
                f"(gradient norm {ratio.grad_norm:.3e})"
            )
        weights = evaluate_weights(ratio, study.y_source, study.z_source)
    if any(m in ("imp", "dr") for m in methods):
        imp = fit_gaussian_imputation(study, options.resolve_map(study))
    return ratio, imp, weights


def _finish(method, study, system, weights, ratio, imp):
    sol = solve(system)
    ee = estimating_equations(method, study, sol, weights, imp)
    return EstimateResult(
        method=method,
        coef=Coefficients.from_vector(sol, study.p),
        residual_norm=float(np.linalg.norm(ee)),
        system=system,
        ratio_fit=ratio,
        imputation_fit=imp,
    )


def estimate_many(study: Study, methods=METHODS, options: EstimateOptions | None = None, weights=None):
    """Estimate several methods with shared nuisance fits.

    Returns ``{method: EstimateResult}``. Each method's result is identical
    to a separate :func:`estimate` call.
    """
    options = options or EstimateOptions()
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}; expected one of {METHODS}")
    ratio, imp, w = _fit_nuisances(study, methods, options, weights)
    out = {}
    for m in methods:
        if m == "iw":
            system = assemble_iw(study, w)
        elif m == "imp":
            system = assemble_imp(study, imp)
        else:
            system = assemble_dr(study, w, imp)
        out[m] = _finish(m, study, system, w, ratio if m != "imp" else None, imp if m != "iw" else None)
    return out


def estimate(study: Study, method="dr", options: EstimateOptions | None = None, weights=None) -> EstimateResult:
    """Fit the nuisance models required by ``method`` and solve its equations."""
    return estimate_many(study, (method,), options, weights)[method]


class TransferRegression(RegressorMixin, BaseEstimator):
    """Target-population linear regression with covariates missing in the target.

    Parameters
    ----------
    method : {"dr", "iw", "imp"}
        Doubly robust, importance weighting, or imputation estimator.
    impute_model : {"linear", "quadratic", "interaction"}
        Feature map of the Gaussian imputation model.
    fit_intercept : bool
        Prepend a constant column to ``Z``.
    weight_cap : float, optional
        Clip the fitted density ratio at this value.
    n_bootstrap : int
        Stratified bootstrap replicates for standard errors (0 disables).
    ci_level : float
    random_state : int
        Master seed of the bootstrap.
    n_jobs : int
        Worker threads used by the bootstrap.

    Attributes
    ----------
    coef_ : ndarray of shape (p + q,)
        Coefficients of ``X`` followed by those of ``Z`` (without intercept).
    intercept_ : float
    result_ : EstimateResult
    bootstrap_ : BootstrapResult or None
    """

    def __init__(
        self,
        method="dr",
        impute_model="linear",
        fit_intercept=True,
        weight_cap=None,
        max_iter=100,
        grad_tol=1e-10,
        n_bootstrap=0,
        ci_level=0.95,
        random_state=0,
        n_jobs=1,
    ):
        self.method = method
        self.impute_model = impute_model
        self.fit_intercept = fit_intercept
        self.weight_cap = weight_cap
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.n_bootstrap = n_bootstrap
        self.ci_level = ci_level
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _study(self, X, y, Z, y_target, Z_target):
        from sklearn.utils.validation import check_array, check_X_y

        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        Z = check_array(Z, dtype=np.float64)
        Z_target = check_array(Z_target, dtype=np.float64)
        y_target = check_array(np.reshape(y_target, (-1, 1)), dtype=np.float64).ravel()
        if self.fit_intercept:
            Z = np.column_stack([np.ones(len(Z)), Z])
            Z_target = np.column_stack([np.ones(len(Z_target)), Z_target])
        return Study(y, X, Z, y_target, Z_target, intercept_in_z=bool(self.fit_intercept))

    def fit(self, X, y, Z, y_target, Z_target):
        """Fit on source ``(X, y, Z)`` and target ``(y_target, Z_target)``."""
        study = self._study(X, y, Z, y_target, Z_target)
        return self.fit_study(study)

    def fit_study(self, study: Study):
        from .inference import BootstrapConfig, bootstrap

        opts = EstimateOptions(self.impute_model, self.max_iter, self.grad_tol, self.weight_cap)
        self.study_ = study
        self.result_ = estimate(study, self.method, opts)
        v = self.result_.coef.vector
        p = study.p
        if study.intercept_in_z:
            self.intercept_ = float(v[p])
            self.coef_ = np.delete(v, p)
        else:
            self.intercept_ = 0.0
            self.coef_ = v.copy()
        self.n_features_in_ = study.p + study.q - int(study.intercept_in_z)
        self.bootstrap_ = None
        if self.n_bootstrap:
            cfg = BootstrapConfig(B=self.n_bootstrap, master_seed=self.random_state, ci_level=self.ci_level)
            self.bootstrap_ = bootstrap(study, self.method, cfg, opts, estimate_=self.result_, n_jobs=self.n_jobs)
        return self

    def predict(self, X, Z):
        from sklearn.utils.validation import check_array, check_is_fitted

        check_is_fitted(self, "coef_")
        X = check_array(X, dtype=np.float64)
        Z = check_array(Z, dtype=np.float64)
        return np.hstack([X, Z]) @ self.coef_ + self.intercept_

    def score(self, X, y, Z):
        from sklearn.metrics import r2_score

        return r2_score(y, self.predict(X, Z))
