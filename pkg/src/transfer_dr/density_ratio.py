"""Exponential-tilting density ratio between target and source ``(y, z)`` laws.

The working model is ``w(y, z) = exp(eta_y * y + z @ eta_z)``. Its parameters
minimise the convex empirical criterion

    mean_source exp(u @ eta) - mean_target(u) @ eta,    u = (y, z),

whose first-order condition matches the reweighted source moments of ``u``
to the target moments. The minimiser is found with damped Newton steps and an
Armijo backtracking line search.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .data import Study
from .exceptions import ConvergenceError, RatioOverflowError, ValidationError

__all__ = [
    "EXP_GUARD",
    "RatioFit",
    "ratio_design",
    "ratio_objective",
    "ratio_gradient",
    "ratio_hessian",
    "fit_density_ratio",
    "evaluate_weights",
    "DensityRatioEstimator",
]

EXP_GUARD = 700.0
MAX_CONDITION = 1e12
ARMIJO_C = 1e-4


@dataclass(frozen=True, eq=False)
class RatioFit:
    """Fitted density-ratio parameters and optimiser diagnostics.

    ``intercept`` is non-zero only when the study has no constant z-column
    and the fit added its own.
    """

    eta_y: float
    eta_z: np.ndarray
    objective: float
    grad_norm: float
    iterations: int
    converged: bool
    truncation_cap: float | None = None
    intercept: float = 0.0
    history: tuple = ()
    damped: bool = False

    @property
    def eta(self):
        return np.concatenate([[self.eta_y], self.eta_z])


def ratio_design(y, z):
    """Stack ``(y, z)`` into the design matrix of the ratio model."""
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return np.column_stack([y, z])


def _linpred(U, eta):
    lin = U @ eta
    top = lin.max(initial=-np.inf)
    if top > EXP_GUARD:
        raise RatioOverflowError(top, EXP_GUARD)
    return lin


def _parts(study):
    return (
        ratio_design(study.y_source, study.z_source),
        ratio_design(study.y_target, study.z_target),
    )


def _check_eta(eta, k):
    eta = np.asarray(eta, dtype=np.float64).ravel()
    if eta.shape != (k,):
        raise ValidationError(f"eta must have length {k}, got {eta.shape[0]}")
    return eta


def ratio_objective(eta, study: Study) -> float:
    Us, Ut = _parts(study)
    eta = _check_eta(eta, Us.shape[1])
    e = np.exp(_linpred(Us, eta))
    return float(e.mean() - Ut.mean(axis=0) @ eta)


def ratio_gradient(eta, study: Study):
    Us, Ut = _parts(study)
    eta = _check_eta(eta, Us.shape[1])
    e = np.exp(_linpred(Us, eta))
    return e @ Us / Us.shape[0] - Ut.mean(axis=0)


def ratio_hessian(eta, study: Study):
    Us, _ = _parts(study)
    eta = _check_eta(eta, Us.shape[1])
    e = np.exp(_linpred(Us, eta))
    H = (Us.T * e) @ Us / Us.shape[0]
    return 0.5 * (H + H.T)


def _newton(Us, tbar, max_iter, grad_tol):
    n, k = Us.shape
    eta = np.zeros(k)

    def evaluate(eta):
        e = np.exp(_linpred(Us, eta))
        return float(e.mean() - tbar @ eta), e

    f, e = evaluate(eta)
    history = [f]
    damped = False
    converged = False
    it = 0
    while True:
        g = e @ Us / n - tbar
        gnorm = float(np.abs(g).max())
        if gnorm <= grad_tol:
            converged = True
            break
        if it >= max_iter:
            break
        it += 1
        H = (Us.T * e) @ Us / n
        H = 0.5 * (H + H.T)
        cond = np.linalg.cond(H)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            damped = True
            lam = 1e-10 * max(np.trace(H) / k, 1e-300)
            for _ in range(40):
                Hd = H + lam * np.eye(k)
                if np.linalg.cond(Hd) <= MAX_CONDITION:
                    break
                lam *= 10.0
            else:
                raise ConvergenceError(f"ratio Hessian stays ill-conditioned after damping (cond={cond:.3e})")
            H = Hd
        d = -np.linalg.solve(H, g)
        slope = float(g @ d)
        if slope >= 0:
            raise ConvergenceError("Newton direction is not a descent direction")
        # below this Newton decrement f cannot resolve the descent, so Armijo is skipped
        tiny = -slope <= 1e-12 * (1.0 + abs(f))
        t = 1.0
        for _ in range(60):
            trial = eta + t * d
            try:
                f_new, e_new = evaluate(trial)
            except RatioOverflowError:
                t *= 0.5
                continue
            if tiny or f_new <= f + ARMIJO_C * t * slope:
                break
            t *= 0.5
        else:
            raise ConvergenceError(f"line search failed at iteration {it} (gradient norm {gnorm:.3e})")
        eta, f, e = trial, f_new, e_new
        history.append(f)
    return eta, f, gnorm, it, converged, tuple(history), damped


def fit_density_ratio(study: Study, max_iter=100, grad_tol=1e-10, weight_cap=None, add_intercept=True) -> RatioFit:
    """Fit the exponential-tilting density ratio by Newton's method.

    Parameters
    ----------
    study : Study
    max_iter : int
        Newton iteration budget. Exhausting it returns a fit with
        ``converged=False``.
    grad_tol : float
        Convergence threshold on the infinity norm of the gradient.
    weight_cap : float, optional
        Upper clip applied by :func:`evaluate_weights`.
    add_intercept : bool
        Add a constant to the tilt when ``study.intercept_in_z`` is false.
    """
    if weight_cap is not None and not weight_cap > 0:
        raise ValidationError("weight_cap must be positive")
    Us, Ut = _parts(study)
    extra = add_intercept and not study.intercept_in_z
    if extra:
        Us = np.column_stack([Us, np.ones(len(Us))])
        Ut = np.column_stack([Ut, np.ones(len(Ut))])
    eta, f, gnorm, it, conv, hist, damped = _newton(Us, Ut.mean(axis=0), max_iter, grad_tol)
    return RatioFit(
        eta_y=float(eta[0]),
        eta_z=eta[1:1 + study.q].copy(),
        objective=f,
        grad_norm=gnorm,
        iterations=it,
        converged=conv,
        truncation_cap=weight_cap,
        intercept=float(eta[-1]) if extra else 0.0,
        history=hist,
        damped=damped,
    )


def evaluate_weights(fit: RatioFit, y, z):
    """Density-ratio weights ``exp(eta_y*y + z @ eta_z)``, clipped at the cap."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != fit.eta_z.shape[0]:
        raise ValidationError(f"z has {z.shape[1]} columns, fit expects {fit.eta_z.shape[0]}")
    lin = y * fit.eta_y + z @ fit.eta_z + fit.intercept
    top = lin.max(initial=-np.inf)
    if top > EXP_GUARD:
        raise RatioOverflowError(top, EXP_GUARD)
    w = np.exp(lin)
    if fit.truncation_cap is not None:
        w = np.minimum(w, fit.truncation_cap)
    return w


class DensityRatioEstimator(BaseEstimator):
    """Scikit-learn style wrapper around :func:`fit_density_ratio`.

    ``fit`` takes the source and target ``(y, z)`` samples; ``predict``
    returns weights for new rows.

    Examples
    --------
    >>> est = DensityRatioEstimator().fit(y_src, Z_src, y_tgt, Z_tgt)  # doctest: +SKIP
    >>> w = est.predict(y_src, Z_src)                                  # doctest: +SKIP
    """

    def __init__(self, max_iter=100, grad_tol=1e-10, weight_cap=None, add_intercept=True):
        self.max_iter = max_iter
        self.grad_tol = grad_tol
        self.weight_cap = weight_cap
        self.add_intercept = add_intercept

    def fit(self, y_source, Z_source, y_target, Z_target):
        from sklearn.utils.validation import check_array

        Z_source = check_array(Z_source, dtype=np.float64)
        Z_target = check_array(Z_target, dtype=np.float64)
        y_source = check_array(np.reshape(y_source, (-1, 1)), dtype=np.float64).ravel()
        y_target = check_array(np.reshape(y_target, (-1, 1)), dtype=np.float64).ravel()
        Us = ratio_design(y_source, Z_source)
        Ut = ratio_design(y_target, Z_target)
        intercept_in_z = bool(np.all(Z_source[:, 0] == 1) and np.all(Z_target[:, 0] == 1))
        if self.add_intercept and not intercept_in_z:
            Us = np.column_stack([Us, np.ones(len(Us))])
            Ut = np.column_stack([Ut, np.ones(len(Ut))])
            extra = True
        else:
            extra = False
        eta, f, gnorm, it, conv, hist, damped = _newton(Us, Ut.mean(axis=0), self.max_iter, self.grad_tol)
        q = Z_source.shape[1]
        self.fit_ = RatioFit(
            float(eta[0]), eta[1:1 + q].copy(), f, gnorm, it, conv, self.weight_cap,
            float(eta[-1]) if extra else 0.0, hist, damped,
        )
        self.eta_ = self.fit_.eta
        self.n_iter_ = it
        self.converged_ = conv
        return self

    def predict(self, y, Z):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "fit_")
        return evaluate_weights(self.fit_, y, Z)
