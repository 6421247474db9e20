"""Gaussian conditional model for the missing covariates.

``X | Y, Z ~ N(Gamma @ (1, phi(Y, Z)), Sigma)`` is fitted by maximum
likelihood on the source sample: multivariate least squares for ``Gamma``
and residual covariance with divisor ``n`` for ``Sigma``. Only the first two
conditional moments are ever used downstream:

    m1(y, z) = Gamma @ (1, phi(y, z))
    m2(y, z) = Sigma + m1 m1^T
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
from sklearn.base import BaseEstimator

from .data import FeatureMap, Study, expand_features
from .exceptions import RankDeficiencyError, ValidationError

__all__ = [
    "ImputationFit",
    "imputation_design",
    "fit_gaussian_imputation",
    "m1",
    "m2",
    "GaussianImputer",
]

RANK_RTOL = 1e-10


def _active_terms(fmap: FeatureMap, intercept_in_z: bool):
    # the prepended constant replaces any pure power of the intercept column
    if not intercept_in_z:
        return fmap.terms
    return tuple(t for t in fmap.terms if not (t.y_power == 0 and all(k == 0 for k, _ in t.z_powers)))


def imputation_design(y, z, fmap: FeatureMap, intercept_in_z=False):
    """Regressor matrix ``(1, phi(y, z))`` of the imputation model."""
    terms = _active_terms(fmap, intercept_in_z)
    feats = expand_features(y, z, FeatureMap(fmap.kind, terms))
    if feats.ndim == 1:
        return np.concatenate([[1.0], feats])
    return np.column_stack([np.ones(len(feats)), feats])


@dataclass(frozen=True, eq=False)
class ImputationFit:
    """Fitted conditional-Gaussian imputation model.

    ``gamma`` has shape (p, d) with column 0 the intercept; ``column_names``
    labels the d regressors.
    """

    gamma: np.ndarray
    sigma: np.ndarray
    feature_map: FeatureMap
    n_used: int
    intercept_in_z: bool = False
    column_names: tuple = ()

    @property
    def p(self):
        return self.gamma.shape[0]


def _lstsq_qr(A, B, names=()):
    """Least squares via QR with column pivoting; rank-deficient designs raise."""
    Q, R, piv = scipy.linalg.qr(A, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = RANK_RTOL * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < A.shape[1]:
        bad = [int(j) for j in piv[rank:]]
        label = [names[j] if j < len(names) else f"col{j}" for j in bad]
        raise RankDeficiencyError(
            f"imputation design has rank {rank} < {A.shape[1]}; dependent column(s): {label}", bad
        )
    coef_p = scipy.linalg.solve_triangular(R, Q.T @ B)
    coef = np.empty_like(coef_p)
    coef[piv] = coef_p
    return coef


def fit_gaussian_imputation(study: Study, feature_map: FeatureMap | None = None) -> ImputationFit:
    """Maximum-likelihood fit of the Gaussian imputation model on source rows."""
    if feature_map is None:
        feature_map = FeatureMap.linear(study.q)
    feature_map.check(study.q)
    A = imputation_design(study.y_source, study.z_source, feature_map, study.intercept_in_z)
    n, d = A.shape
    if n <= d:
        raise ValidationError(f"imputation model needs n > d, got n={n}, d={d}")
    names = ("1",) + tuple(str(t) for t in _active_terms(feature_map, study.intercept_in_z))
    coef = _lstsq_qr(A, study.x_source, names)
    resid = study.x_source - A @ coef
    sigma = resid.T @ resid / n
    sigma = 0.5 * (sigma + sigma.T)
    return ImputationFit(
        gamma=coef.T.copy(),
        sigma=sigma,
        feature_map=feature_map,
        n_used=n,
        intercept_in_z=study.intercept_in_z,
        column_names=names,
    )


def m1(fit: ImputationFit, y, z):
    """Imputed conditional mean of X; shape (p,) for one point, (m, p) for arrays."""
    A = imputation_design(y, z, fit.feature_map, fit.intercept_in_z)
    return A @ fit.gamma.T


def m2(fit: ImputationFit, y, z):
    """Imputed conditional second moment of X; shape (p, p) or (m, p, p)."""
    mu = m1(fit, y, z)
    if mu.ndim == 1:
        return fit.sigma + np.outer(mu, mu)
    return fit.sigma[None, :, :] + mu[:, :, None] * mu[:, None, :]


class GaussianImputer(BaseEstimator):
    """Scikit-learn style wrapper: ``fit(y, Z, X)`` then ``predict(y, Z)``.

    Parameters
    ----------
    impute_model : {"linear", "quadratic", "interaction"} or list of str
        Feature map preset, or explicit terms such as ``["y", "z2^2"]``.
    """

    def __init__(self, impute_model="linear"):
        self.impute_model = impute_model

    def _feature_map(self, q, intercept_in_z):
        if isinstance(self.impute_model, str):
            return FeatureMap.preset(self.impute_model, q, intercept_in_z)
        return FeatureMap.custom(self.impute_model)

    def fit(self, y, Z, X):
        from sklearn.utils.validation import check_array

        Z = check_array(Z, dtype=np.float64)
        X = check_array(np.reshape(X, (len(Z), -1)), dtype=np.float64)
        y = check_array(np.reshape(y, (-1, 1)), dtype=np.float64).ravel()
        icpt = bool(np.all(Z[:, 0] == 1))
        fmap = self._feature_map(Z.shape[1], icpt)
        fmap.check(Z.shape[1])
        A = imputation_design(y, Z, fmap, icpt)
        if A.shape[0] <= A.shape[1]:
            raise ValidationError("imputation model needs more rows than regressors")
        coef = _lstsq_qr(A, X)
        resid = X - A @ coef
        sigma = resid.T @ resid / len(y)
        self.fit_ = ImputationFit(coef.T.copy(), 0.5 * (sigma + sigma.T), fmap, len(y), icpt)
        self.gamma_ = self.fit_.gamma
        self.sigma_ = self.fit_.sigma
        return self

    def predict(self, y, Z):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "fit_")
        return m1(self.fit_, y, Z)

    def predict_second_moment(self, y, Z):
        from sklearn.utils.validation import check_is_fitted

        check_is_fitted(self, "fit_")
        return m2(self.fit_, y, Z)
