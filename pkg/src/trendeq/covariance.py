"""Variance estimators for the placebo coefficient vector."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RankError, ValidationError
from .panel import PretrendFit, _readonly


@dataclass(frozen=True)
class CovEstimate:
    """Estimated asymptotic covariance of ``sqrt(n) * (beta_hat - beta)``.

    ``sigma_hat / n`` is therefore the finite-sample variance of ``beta_hat``.
    ``flavor`` records which estimator produced it.
    """

    sigma_hat: np.ndarray
    flavor: str

    def __post_init__(self) -> None:
        s = np.asarray(self.sigma_hat, dtype=float)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValidationError("sigma_hat must be square")
        object.__setattr__(self, "sigma_hat", _readonly(s))

    def coef_se(self, n: int) -> np.ndarray:
        """Per-coefficient standard errors of ``beta_hat`` for sample size n."""
        return np.sqrt(np.diag(self.sigma_hat) / n)

    def mean_se(self, n: int) -> float:
        """Standard error of the average coefficient for sample size n."""
        T = self.sigma_hat.shape[0]
        ones = np.ones(T)
        return float(np.sqrt(ones @ self.sigma_hat @ ones / (T * T * n)))


def cluster_robust_cov(fit: PretrendFit) -> CovEstimate:
    """Unit-clustered sandwich covariance of the placebo estimator.

    Computes ``gram^-1 @ [ (1/n) sum_i s_i s_i' ] @ gram^-1`` with
    ``s_i = W_i' u_i`` the per-unit score of the demeaned regression, which is
    robust to arbitrary within-unit correlation and heteroskedasticity.  No
    small-sample degrees-of-freedom factor is applied; multiply by ``n/(n-1)``
    yourself if you need to match software that does.
    """
    if fit.n <= fit.T:
        raise ValidationError(f"need more units than coefficients (n={fit.n}, T={fit.T})")
    scores = np.einsum("itl,it->il", fit.demeaned.ddW, fit.residuals)  # (n, K)
    middle = scores.T @ scores / fit.n
    try:
        gram_inv = np.linalg.inv(fit.gram)
    except np.linalg.LinAlgError:
        raise RankError("singular gram matrix in sandwich covariance") from None
    sigma = gram_inv @ middle @ gram_inv
    sigma = (sigma + sigma.T) / 2.0
    return CovEstimate(sigma_hat=sigma, flavor="cluster_robust")


def spherical_sigma(fit: PretrendFit, beta_ref: np.ndarray) -> float:
    """Pooled residual variance of the demeaned regression at ``beta_ref``.

    Returns ``sum_{i,t} (ddY_it - ddW_it' beta_ref)^2 / ((n - 1) * T)``; with
    ``beta_ref`` equal to the null-constrained estimator this is the error
    variance the parametric bootstrap draws from.
    """
    beta_ref = np.asarray(beta_ref, dtype=float)
    if beta_ref.shape != (fit.T,):
        raise ValidationError(f"beta_ref must have length {fit.T}")
    resid = fit.demeaned.ddY - np.einsum("itl,l->it", fit.demeaned.ddW, beta_ref)
    return float(np.sum(resid * resid) / ((fit.n - 1) * fit.T))
