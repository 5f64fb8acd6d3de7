"""Generative model: kernels, mean functions and the per-source outcome Gaussians.

Per source ``s`` the potential outcomes follow

    [y(0); y(1)] | Phi, Sigma, g  ~  N((L_Phi kron I)[mu0(X) + g0; mu1(X) + g1],
                                       Phi kron K + Sigma kron I)

where ``L_Phi`` is the lower Cholesky factor of ``Phi``. Observed and missing
outcomes are the treatment-dependent reshuffle of that joint. The latent GP
draws never exist at runtime; they are marginalized into ``Phi kron K``.

Array-valued builders are written against ``jax.numpy`` so the variational
objective can trace them; they accept NumPy input as well.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import jax.numpy as jnp
import numpy as np

from . import mathcore
from .errors import (
    DimensionMismatch,
    InvalidDegreesOfFreedom,
    MissingTruth,
    NotPositiveDefinite,
    ValidationError,
)
from .mathcore import MomentVector

log = logging.getLogger(__name__)


@dataclass
class SourceData:
    """Records held by one data source.

    ``y0``/``y1`` are ground-truth potential outcomes, present only for
    synthetic or semi-synthetic data; training code never reads them.
    """

    source_id: int
    w: np.ndarray
    y_obs: np.ndarray
    X: np.ndarray
    y0: Optional[np.ndarray] = None
    y1: Optional[np.ndarray] = None
    keys: Optional[list[str]] = field(default=None, repr=False)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float).ravel()
        self.y_obs = np.asarray(self.y_obs, dtype=float).ravel()
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        n = self.w.size
        if self.y_obs.size != n or self.X.shape[0] != n:
            raise DimensionMismatch(
                f"source {self.source_id}: w has {n} rows, y_obs {self.y_obs.size}, "
                f"X {self.X.shape[0]}"
            )
        if not np.all((self.w == 0.0) | (self.w == 1.0)):
            raise ValidationError(f"source {self.source_id}: treatments must be 0/1")
        for name in ("y0", "y1"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=float).ravel()
                if val.size != n:
                    raise DimensionMismatch(f"{name} has {val.size} rows, expected {n}")
                setattr(self, name, val)
        if self.keys is not None and len(self.keys) != n:
            raise DimensionMismatch(f"keys has {len(self.keys)} rows, expected {n}")

    @property
    def n(self) -> int:
        return self.w.size

    @property
    def d_x(self) -> int:
        return self.X.shape[1]

    @property
    def has_truth(self) -> bool:
        return self.y0 is not None and self.y1 is not None

    def true_ite(self) -> np.ndarray:
        if not self.has_truth:
            raise MissingTruth(f"source {self.source_id} carries no potential outcomes")
        return self.y1 - self.y0

    def take(self, rows) -> "SourceData":
        """Sub-source with the given rows, in the given order."""
        rows = np.asarray(rows, dtype=int)
        pick = lambda a: None if a is None else a[rows]
        return SourceData(
            self.source_id,
            self.w[rows],
            self.y_obs[rows],
            self.X[rows],
            pick(self.y0),
            pick(self.y1),
            None if self.keys is None else [self.keys[i] for i in rows],
        )


@dataclass(frozen=True)
class SourceSummary:
    """Per-source sufficient statistics shared with the other sources."""

    x_tilde: np.ndarray
    y0_tilde: MomentVector
    y1_tilde: MomentVector
    w_tilde_moments: MomentVector

    @property
    def u(self) -> np.ndarray:
        return np.concatenate(
            [
                self.y0_tilde.as_array(),
                self.y1_tilde.as_array(),
                np.asarray(self.x_tilde, dtype=float),
                self.w_tilde_moments.as_array(),
            ]
        )

    def to_dict(self) -> dict:
        return {
            "x_tilde": [float(v) for v in self.x_tilde],
            "y0_tilde": self.y0_tilde.as_array().tolist(),
            "y1_tilde": self.y1_tilde.as_array().tolist(),
            "w_tilde": self.w_tilde_moments.as_array().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SourceSummary":
        return cls(
            np.asarray(d["x_tilde"], dtype=float),
            MomentVector(*d["y0_tilde"]),
            MomentVector(*d["y1_tilde"]),
            MomentVector(*d["w_tilde"]),
        )


def stack_summaries(summaries) -> tuple[np.ndarray, np.ndarray]:
    """(m x 4 d_x) covariate moments and (m x 4 (d_x + 3)) full summary vectors."""
    x_tilde = np.stack([np.asarray(s.x_tilde, dtype=float) for s in summaries])
    u = np.stack([s.u for s in summaries])
    return x_tilde, u


class KernelParams(NamedTuple):
    log_lengthscale: float
    log_signal_variance: float


class Affine(NamedTuple):
    """Affine mean function ``x -> x @ weights + bias``."""

    weights: np.ndarray
    bias: float

    def __call__(self, X):
        return X @ self.weights + self.bias


@dataclass(frozen=True)
class PriorConfig:
    V0: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(2))
    S0: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(2))
    d0: float = 2.0
    n0: float = 2.0

    def __post_init__(self):
        for name in ("V0", "S0"):
            M = np.asarray(getattr(self, name), dtype=float)
            if M.shape != (2, 2):
                raise DimensionMismatch(f"{name} must be 2x2")
            mathcore.cholesky(M)
            object.__setattr__(self, name, M)
        for name in ("d0", "n0"):
            if getattr(self, name) < 2.0:
                raise InvalidDegreesOfFreedom(f"{name} must be >= 2")

    def to_dict(self) -> dict:
        return {"V0": self.V0.tolist(), "S0": self.S0.tolist(), "d0": self.d0, "n0": self.n0}

    @classmethod
    def from_dict(cls, d: dict) -> "PriorConfig":
        return cls(np.asarray(d["V0"]), np.asarray(d["S0"]), float(d["d0"]), float(d["n0"]))


def _sqdist(A, B):
    diff = A[:, None, :] - B[None, :, :]
    return jnp.sum(diff * diff, axis=-1)


def rbf_kernel(A, B, p: KernelParams):
    """Squared-exponential kernel ``s2 * exp(-|a - b|^2 / (2 l^2))``."""
    A = jnp.atleast_2d(jnp.asarray(A, dtype=float))
    B = jnp.atleast_2d(jnp.asarray(B, dtype=float))
    if A.shape[1] != B.shape[1]:
        raise DimensionMismatch(f"column dimensions {A.shape[1]} and {B.shape[1]} differ")
    ls2 = jnp.exp(2.0 * p.log_lengthscale)
    return jnp.exp(p.log_signal_variance) * jnp.exp(-0.5 * _sqdist(A, B) / ls2)


def source_gram_M(summaries, p: KernelParams):
    """Source-level covariance from the covariate-moment vectors of every source."""
    if isinstance(summaries, (list, tuple)):
        if not summaries:
            raise ValidationError("need at least one source summary")
        x_tilde = np.stack([np.asarray(s.x_tilde, dtype=float) for s in summaries])
    else:
        x_tilde = summaries
    return rbf_kernel(x_tilde, x_tilde, p)


def chol2(M):
    """Closed-form lower Cholesky factor of a 2x2 PSD matrix."""
    l11 = jnp.sqrt(M[0, 0])
    l21 = jnp.where(l11 > 0, M[1, 0] / jnp.where(l11 > 0, l11, 1.0), 0.0)
    l22 = jnp.sqrt(jnp.maximum(M[1, 1] - l21**2, 0.0))
    return jnp.array([[l11, 0.0], [l21, l22]])


def joint_covariance(X, Phi, Sigma, p: KernelParams):
    """Covariance of the stacked ``[y(0); y(1)]`` of one source: ``Phi kron K + Sigma kron I``."""
    K = rbf_kernel(X, X, p)
    n = K.shape[0]
    return jnp.kron(jnp.asarray(Phi), K) + jnp.kron(jnp.asarray(Sigma), jnp.eye(n))


def joint_mean(X, Phi, g_s, mu0: Affine, mu1: Affine, Phi_chol=None):
    """Mean of the stacked ``[y(0); y(1)]``: ``(L_Phi kron I)[mu0 + g0; mu1 + g1]``."""
    L = chol2(jnp.asarray(Phi)) if Phi_chol is None else Phi_chol
    X = jnp.asarray(X, dtype=float)
    n = X.shape[0]
    base = jnp.concatenate([mu0(X) + g_s[0], mu1(X) + g_s[1]])
    return jnp.kron(L, jnp.eye(n)) @ base


def arm_means(X, Phi_chol, g_s, mu0: Affine, mu1: Affine):
    f0 = mu0(X) + g_s[0]
    f1 = mu1(X) + g_s[1]
    m0 = Phi_chol[0, 0] * f0
    m1 = Phi_chol[1, 0] * f0 + Phi_chol[1, 1] * f1
    return m0, m1


def obs_mis_means(X, w, Phi, g_s, mu0: Affine, mu1: Affine, Phi_chol=None):
    """Means of the observed and missing outcome vectors of one source."""
    X = jnp.asarray(X, dtype=float)
    w = jnp.asarray(w, dtype=float)
    L = chol2(jnp.asarray(Phi)) if Phi_chol is None else Phi_chol
    m0, m1 = arm_means(X, L, jnp.asarray(g_s), mu0, mu1)
    mu_obs = (1.0 - w) * m0 + w * m1
    mu_mis = w * m0 + (1.0 - w) * m1
    return mu_obs, mu_mis


def obs_kernel_from_gram(K, w, Phi, Sigma):
    """``K_obs`` alone; the training objective never needs the other blocks."""
    w = jnp.asarray(w, dtype=float)
    wi, wj = w[:, None], w[None, :]
    ci, cj = 1.0 - wi, 1.0 - wj
    coef = ci * cj * Phi[0, 0] + wi * wj * Phi[1, 1] + ci * wj * Phi[0, 1] + wi * cj * Phi[1, 0]
    return coef * K + jnp.diag((1.0 - w) * Sigma[0, 0] + w * Sigma[1, 1])


def kernels_from_gram(K, w, Phi, Sigma):
    """Observed, missing and cross blocks given the source gram matrix ``K``.

    ``K_om[i, j]`` is ``Cov(y_obs_i, y_mis_j)``, so the joint of
    ``[y_obs; y_mis]`` is ``[[K_obs, K_om], [K_om.T, K_mis]]``.
    """
    w = jnp.asarray(w, dtype=float)
    wi, wj = w[:, None], w[None, :]
    ci, cj = 1.0 - wi, 1.0 - wj
    p11, p12, p21, p22 = Phi[0, 0], Phi[0, 1], Phi[1, 0], Phi[1, 1]
    s11, s12, s21, s22 = Sigma[0, 0], Sigma[0, 1], Sigma[1, 0], Sigma[1, 1]
    eye = jnp.eye(w.shape[0])
    K_obs = obs_kernel_from_gram(K, w, Phi, Sigma)
    K_mis = (wi * wj * p11 + ci * cj * p22 + ci * wj * p21 + wi * cj * p12) * K + jnp.diag(
        w * s11 + (1.0 - w) * s22
    )
    # row i follows the observed arm of unit i, column j the missing arm of unit j
    K_om = (ci * cj * p12 + wi * wj * p21 + ci * wj * p11 + wi * cj * p22) * K + eye * (
        ci * s12 + wi * s21
    )
    return K_obs, K_mis, K_om


def obs_mis_kernels(X, w, Phi, Sigma, p: KernelParams):
    """``(K_obs, K_mis, K_om)`` blocks for one source."""
    X = jnp.atleast_2d(jnp.asarray(X, dtype=float))
    w = jnp.asarray(w, dtype=float)
    if X.shape[0] != w.shape[0]:
        raise DimensionMismatch("X and w disagree on the number of units")
    K = rbf_kernel(X, X, p)
    return kernels_from_gram(K, w, jnp.asarray(Phi, dtype=float), jnp.asarray(Sigma, dtype=float))


def observed_loglik(
    src: SourceData,
    Phi,
    Sigma,
    g_s,
    k: KernelParams,
    mu0: Affine,
    mu1: Affine,
    jitter: float = mathcore.DEFAULT_JITTER,
) -> float:
    """``log N(y_obs; mu_obs, K_obs)`` for one source given (Phi, Sigma, g)."""
    Phi = np.asarray(Phi, dtype=float)
    if np.any(np.linalg.eigvalsh(Phi) < -1e-12):
        raise NotPositiveDefinite("Phi is not positive semi-definite")
    mu_obs, _ = obs_mis_means(src.X, src.w, Phi, g_s, mu0, mu1)
    K_obs, _, _ = obs_mis_kernels(src.X, src.w, Phi, Sigma, k)
    return mathcore.mvn_logpdf(src.y_obs, np.asarray(mu_obs), np.asarray(K_obs), jitter)
