"""Generative-model metrics: Frechet distance of Gaussian feature fits and the Inception Score."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

LOG_EPS = 1e-12
COV_EPS = 1e-6
SYMMETRY_TOL = 1e-9


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if cov.shape != (mu.size, mu.size):
            raise ShapeError(f"covariance {cov.shape} does not match mean of length {mu.size}")
        scale = max(1.0, float(np.abs(cov).max()))
        if np.abs(cov - cov.T).max() > SYMMETRY_TOL * scale:
            raise NumericError("covariance is not symmetric")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def from_features(cls, features, eps: float = COV_EPS) -> "GaussianStats":
        """Sample mean and covariance, with ``eps`` added to the diagonal.

        Fewer samples than ``dim + 1`` give a singular covariance; that case
        warns and relies on the diagonal floor.
        """
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ShapeError(f"need a (n >= 2, dim) feature matrix, got shape {x.shape}")
        if len(x) < x.shape[1] + 1:
            warnings.warn(
                f"{len(x)} samples for {x.shape[1]}-dim features: covariance is rank deficient",
                RuntimeWarning,
                stacklevel=2,
            )
        cov = np.cov(x, rowvar=False)
        cov = 0.5 * (cov + cov.T) + eps * np.eye(x.shape[1])
        return cls(x.mean(axis=0), cov)


def sqrtm_psd(a: np.ndarray) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix via eigh, eigenvalues floored at 0."""
    a = np.asarray(a, dtype=np.float64)
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def trace_sqrt_product(s1: np.ndarray, s2: np.ndarray) -> float:
    """Tr((S1 S2)^{1/2}) as the sum of singular values of S1^{1/2} S2^{1/2}.

    (S1^{1/2} S2^{1/2})(S1^{1/2} S2^{1/2})^T = S1^{1/2} S2 S1^{1/2}, so both give
    the same trace.  The singular values avoid squaring the spectrum, which
    would cost small eigenvalues half their significant digits.
    """
    a = sqrtm_psd(s1) @ sqrtm_psd(s2)
    return float(np.linalg.svd(a, compute_uv=False).sum())


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), clamped at 0."""
    if a.mean.shape != b.mean.shape:
        raise ShapeError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    diff = a.mean - b.mean
    tr = np.trace(a.covariance) + np.trace(b.covariance)
    # the product's trace-root is symmetric in theory; average both orders so
    # the computed value is symmetric in floating point as well
    cross = 0.5 * (trace_sqrt_product(a.covariance, b.covariance)
                   + trace_sqrt_product(b.covariance, a.covariance))
    return max(0.0, float(diff @ diff + tr - 2.0 * cross))


def inception_score(posteriors, eps: float = LOG_EPS) -> float:
    """exp(mean_x KL(p(y|x) || p(y))) with p(y) the bank-average posterior."""
    p = np.asarray(posteriors, dtype=np.float64)
    if p.ndim != 2 or len(p) == 0:
        raise ShapeError(f"posteriors must be a non-empty (n, classes) array, got {p.shape}")
    if not np.all(np.isfinite(p)) or p.min() < 0 or np.abs(p.sum(axis=1) - 1).max() > 1e-6:
        raise NumericError("posterior rows must be finite probability vectors")
    marginal = p.mean(axis=0)
    kl = (p * (np.log(np.maximum(p, eps)) - np.log(np.maximum(marginal, eps)))).sum(axis=1)
    return float(np.exp(kl.mean()))


def fid_from_features(real_features, fake_features, eps: float = COV_EPS) -> float:
    return frechet_distance(
        GaussianStats.from_features(real_features, eps),
        GaussianStats.from_features(fake_features, eps),
    )
