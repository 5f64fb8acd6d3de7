"""Matrix and distribution primitives.

Two flavours live here. The public functions take and return NumPy values,
validate their inputs and raise package errors. The underscore-prefixed
``jnp`` kernels are pure and traceable; the variational objective calls them
inside ``jax.jit`` where raising is impossible, so validation happens at the
call boundary instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import jax.numpy as jnp
import jax.scipy.linalg as jsl
import jax.scipy.special as jsp
import numpy as np
import scipy.linalg as sla

from .errors import (
    DimensionMismatch,
    InsufficientData,
    InvalidDegreesOfFreedom,
    NotPositiveDefinite,
)

DEFAULT_JITTER = 1e-6
JITTER_DOUBLINGS = 3
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class MomentVector:
    """Mean, population variance, standardized skewness and (non-excess) kurtosis."""

    mean: float
    variance: float
    skewness: float
    kurtosis: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mean, self.variance, self.skewness, self.kurtosis])

    @classmethod
    def zeros(cls) -> "MomentVector":
        return cls(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class BartlettNoise:
    """Base randomness for one 2x2 Bartlett draw.

    ``chi2`` holds draws from chi-square(d) and chi-square(d - 1); ``normal``
    is the standard-normal below-diagonal entry.
    """

    chi2: tuple[float, float]
    normal: float

    @classmethod
    def draw(cls, rng: np.random.Generator, dof: float) -> "BartlettNoise":
        c1 = rng.chisquare(dof)
        c2 = rng.chisquare(dof - 1.0)
        return cls((float(c1), float(c2)), float(rng.standard_normal()))

    @classmethod
    def draw_many(cls, rng: np.random.Generator, dof: float, size: int) -> "BartlettNoise":
        """A batch of ``size`` draws; fields carry a leading batch axis."""
        chi2 = np.stack([rng.chisquare(dof, size), rng.chisquare(dof - 1.0, size)], axis=-1)
        return cls(chi2, rng.standard_normal(size))

    @classmethod
    def identity(cls) -> "BartlettNoise":
        return cls((1.0, 1.0), 0.0)


def _as_square(A, name: str = "A") -> np.ndarray:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {A.shape}")
    return A


def _try_cholesky(A: np.ndarray) -> np.ndarray | None:
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(L)) or np.any(np.diag(L) <= 0.0):
        return None
    return L


def cholesky(A, jitter: float = 0.0) -> np.ndarray:
    """Lower Cholesky factor of ``A + jitter * I``.

    If that fails, the diagonal boost is escalated through 1e-6 and three
    doublings of it before giving up with :class:`NotPositiveDefinite`.
    """
    A = _as_square(A)
    if jitter < 0:
        raise ValueError("jitter must be non-negative")
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(A).max(initial=0.0))):
        raise NotPositiveDefinite("matrix is not symmetric")
    eye = np.eye(A.shape[0])
    ladder = [jitter] + [DEFAULT_JITTER * 2.0**k for k in range(JITTER_DOUBLINGS + 1)]
    for j in ladder:
        if j < jitter:
            continue
        L = _try_cholesky(A + j * eye)
        if L is not None:
            return L
    raise NotPositiveDefinite(
        f"Cholesky failed for {A.shape[0]}x{A.shape[0]} matrix even with jitter "
        f"{ladder[-1]:.1e}"
    )


def mvn_logpdf(y, mean, cov, jitter: float = 0.0) -> float:
    """Exact Gaussian log-density of ``y`` under ``N(mean, cov)``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if y.shape != mean.shape or cov.shape != (y.size, y.size):
        raise DimensionMismatch(
            f"y {y.shape}, mean {mean.shape} and cov {cov.shape} disagree"
        )
    L = cholesky(cov, jitter)
    alpha = sla.solve_triangular(L, y - mean, lower=True)
    return float(
        -0.5 * alpha @ alpha - np.log(np.diag(L)).sum() - 0.5 * y.size * _LOG_2PI
    )


def mvn_sample(mean, cov, base) -> np.ndarray:
    """Reparameterized draw ``mean + chol(cov) @ base``."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    base = np.atleast_1d(np.asarray(base, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if base.shape != mean.shape or cov.shape != (mean.size, mean.size):
        raise DimensionMismatch(
            f"mean {mean.shape}, base {base.shape} and cov {cov.shape} disagree"
        )
    return mean + cholesky(cov) @ base


def _check_dof(d: float, name: str = "d") -> None:
    if not np.isfinite(d) or d < 2.0:
        raise InvalidDegreesOfFreedom(f"{name}={d} must be >= 2")


def wishart_sample(V, d: float, base: BartlettNoise) -> np.ndarray:
    """2x2 Wishart(V, d) draw built from fixed Bartlett noise.

    A batched ``base`` (see :meth:`BartlettNoise.draw_many`) gives a stack of draws.
    """
    _check_dof(d)
    V = _as_square(V, "V")
    if V.shape != (2, 2):
        raise DimensionMismatch("only 2x2 scale matrices are supported")
    return np.asarray(_wishart_from_chol(jnp.asarray(cholesky(V)), *_bartlett_arrays(base)))


def _bartlett_arrays(base: BartlettNoise):
    return jnp.asarray(base.chi2, dtype=float), jnp.asarray(base.normal, dtype=float)


def _bartlett_factor(chi2, normal):
    # lower-triangular A with A A^T ~ Wishart(I_2, d)
    a11 = jnp.sqrt(chi2[..., 0])
    a22 = jnp.sqrt(chi2[..., 1])
    zero = jnp.zeros_like(a11)
    return jnp.stack(
        [jnp.stack([a11, zero], -1), jnp.stack([normal, a22], -1)], -2
    )


def _wishart_from_chol(L, chi2, normal):
    B = L @ _bartlett_factor(chi2, normal)
    return B @ jnp.swapaxes(B, -1, -2)


def _scale_chol(log_a, corr):
    """Cholesky factor of [[a1^2, c a1 a2], [c a1 a2, a2^2]] in closed form."""
    a1, a2 = jnp.exp(log_a[0]), jnp.exp(log_a[1])
    return jnp.array([[a1, 0.0], [corr * a2, a2 * jnp.sqrt(1.0 - corr**2)]])


def kl_gaussian(m_q, C_q, m_p, C_p) -> float:
    """KL(N(m_q, C_q) || N(m_p, C_p))."""
    m_q = np.atleast_1d(np.asarray(m_q, dtype=float))
    m_p = np.atleast_1d(np.asarray(m_p, dtype=float))
    C_q = np.atleast_2d(np.asarray(C_q, dtype=float))
    C_p = np.atleast_2d(np.asarray(C_p, dtype=float))
    k = m_q.size
    if m_p.shape != m_q.shape or C_q.shape != (k, k) or C_p.shape != (k, k):
        raise DimensionMismatch("mean/covariance shapes disagree")
    Lq, Lp = cholesky(C_q), cholesky(C_p)
    value = float(_kl_gaussian_chol(m_q, jnp.asarray(Lq), m_p, jnp.asarray(Lp)))
    return max(value, 0.0)


def _kl_gaussian_chol(m_q, L_q, m_p, L_p):
    k = m_q.shape[-1]
    M = jsl.solve_triangular(L_p, L_q, lower=True)
    a = jsl.solve_triangular(L_p, m_p - m_q, lower=True)
    logdet_p = 2.0 * jnp.sum(jnp.log(jnp.diag(L_p)))
    logdet_q = 2.0 * jnp.sum(jnp.log(jnp.diag(L_q)))
    return 0.5 * (jnp.sum(M**2) + a @ a - k + logdet_p - logdet_q)


def _multidigamma(a, p: int = 2):
    return sum(jsp.digamma(a - 0.5 * i) for i in range(p))


def _kl_wishart(V_q, d_q, V_0, d_0, logdet_q=None):
    p = 2
    L0 = jnp.linalg.cholesky(V_0)
    if logdet_q is None:
        logdet_q = jnp.linalg.slogdet(V_q)[1]
    logdet_0 = 2.0 * jnp.sum(jnp.log(jnp.diag(L0)))
    trace = jnp.trace(jsl.cho_solve((L0, True), V_q))
    return (
        0.5 * d_0 * (logdet_0 - logdet_q)
        + 0.5 * d_q * (trace - p)
        + jsp.multigammaln(0.5 * d_0, p)
        - jsp.multigammaln(0.5 * d_q, p)
        + 0.5 * (d_q - d_0) * _multidigamma(0.5 * d_q, p)
    )


def kl_wishart(V_q, d_q: float, V_0, d_0: float) -> float:
    """Closed-form KL(Wishart(V_q, d_q) || Wishart(V_0, d_0)) for 2x2 scales."""
    for d, name in ((d_q, "d_q"), (d_0, "d_0")):
        if not np.isfinite(d) or d <= 1.0:
            raise InvalidDegreesOfFreedom(f"{name}={d} must exceed p - 1 = 1")
    V_q = _as_square(V_q, "V_q")
    V_0 = _as_square(V_0, "V_0")
    if V_q.shape != (2, 2) or V_0.shape != (2, 2):
        raise DimensionMismatch("only 2x2 scale matrices are supported")
    cholesky(V_q)
    cholesky(V_0)
    value = float(_kl_wishart(jnp.asarray(V_q), d_q, jnp.asarray(V_0), d_0))
    return max(value, 0.0)


def moments4(samples) -> MomentVector:
    """First four sample moments, standardized; degenerate variance gives zero shape moments."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size < 2:
        raise InsufficientData(f"need at least 2 samples, got {x.size}")
    mean = x.mean()
    centred = x - mean
    var = float(np.mean(centred**2))
    if var < 1e-12:
        return MomentVector(float(mean), var, 0.0, 0.0)
    sd = math.sqrt(var)
    skew = float(np.mean(centred**3)) / sd**3
    kurt = float(np.mean(centred**4)) / var**2
    return MomentVector(float(mean), var, skew, kurt)


def _gaussian_logpdf_chol(r, L):
    """log N(r; 0, L L^T) for a residual ``r``."""
    alpha = jsl.solve_triangular(L, r, lower=True)
    return -0.5 * alpha @ alpha - jnp.sum(jnp.log(jnp.diag(L))) - 0.5 * r.shape[0] * _LOG_2PI
