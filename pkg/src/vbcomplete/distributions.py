"""Gaussian and Gamma posterior containers, plus the Student's t predictive law."""

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

__all__ = [
    "GammaPosterior",
    "GaussianVecPosterior",
    "StudentT",
    "gamma_mean",
    "student_t_logpdf",
    "student_t_pdf",
    "student_t_moments",
    "marginalize_gaussian_gamma",
]


@dataclass(frozen=True)
class GammaPosterior:
    """Gamma distribution in the shape/rate parametrization."""

    shape: float
    rate: float

    def __post_init__(self):
        if not (self.shape > 0 and self.rate > 0):
            raise ValueError(f"Gamma parameters must be positive, got {self.shape}, {self.rate}")

    @property
    def mean(self):
        return self.shape / self.rate


@dataclass
class GaussianVecPosterior:
    """Gaussian over the column-stacked factor ``vec(U)`` of a ``(m, k)`` matrix."""

    mean: np.ndarray
    cov: np.ndarray
    m: int
    k: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)
        n = self.m * self.k
        if self.mean.shape != (n,) or self.cov.shape != (n, n):
            raise ValueError(
                f"expected mean ({n},) and cov ({n}, {n}); got {self.mean.shape}, {self.cov.shape}"
            )

    @property
    def mean_matrix(self):
        """The ``(m, k)`` matricization of the mean."""
        return self.mean.reshape(self.k, self.m).T

    def check(self, sym_tol=1e-12):
        """Raise if the covariance is asymmetric or not positive definite."""
        from .core_linalg import spd_factorize

        asym = np.max(np.abs(self.cov - self.cov.T)) if self.cov.size else 0.0
        if asym > sym_tol:
            raise ValueError(f"covariance asymmetric by {asym:.3g}")
        spd_factorize(self.cov)


@dataclass(frozen=True)
class StudentT:
    """Student's t with location, precision ``xi`` and degrees of freedom."""

    location: float
    precision: float
    dof: float

    def __post_init__(self):
        if not (self.precision > 0 and self.dof > 0):
            raise ValueError(f"precision and dof must be positive, got {self.precision}, {self.dof}")

    @property
    def variance(self):
        return student_t_moments(self)[1]


def gamma_mean(g):
    return g.shape / g.rate


def student_t_logpdf(t, x):
    """Log density, evaluated through log-gamma so large ``dof`` does not overflow."""
    a = 0.5 * t.dof
    b = a / t.precision
    z = np.asarray(x, dtype=float) - t.location
    return (
        gammaln(a + 0.5)
        - gammaln(a)
        - 0.5 * np.log(2.0 * np.pi * b)
        - (a + 0.5) * np.log1p(z * z / (2.0 * b))
    )


def student_t_pdf(t, x):
    return np.exp(student_t_logpdf(t, x))


def student_t_moments(t):
    """Return ``(mean, variance)``; the variance needs ``dof > 2``."""
    c0 = 0.5 * t.dof
    if c0 <= 1.0:
        raise ValueError(f"variance undefined for dof={t.dof} <= 2")
    return t.location, c0 / (t.precision * (c0 - 1.0))


def marginalize_gaussian_gamma(mu, a, b):
    """Integrate a Gamma(a, b) precision out of a Gaussian with mean ``mu``."""
    if not (a > 0 and b > 0):
        raise ValueError(f"a and b must be positive, got {a}, {b}")
    return StudentT(location=float(mu), precision=a / b, dof=2.0 * a)
