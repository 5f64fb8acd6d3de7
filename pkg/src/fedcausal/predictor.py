"""Posterior-predictive imputation of missing outcomes and treatment-effect estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsla
import numpy as np
import scipy.linalg as sla

from . import mathcore
from .errors import EmptyDraws, ValidationError
from .model import (
    Affine,
    KernelParams,
    SourceData,
    SourceSummary,
    arm_means,
    kernels_from_gram,
    rbf_kernel,
    stack_summaries,
)
from .variational import GlobalParams, NoiseBundle, VariationalConfig, _q_draws, _stack_noise


@dataclass
class PredictiveDraws:
    """Sampled missing outcomes, ``y_mis[source_id]`` of shape (S, n_s).

    ``phi``, ``sigma`` and ``g`` hold the variational draw shared by every
    source within a draw. ``cond_mean``/``cond_cov`` are kept only on request.
    """

    y_mis: dict[int, np.ndarray]
    phi: np.ndarray
    sigma: np.ndarray
    g: np.ndarray
    cond_mean: Optional[dict[int, list[np.ndarray]]] = None
    cond_cov: Optional[dict[int, list[np.ndarray]]] = None

    @property
    def S(self) -> int:
        return self.phi.shape[0]


@dataclass
class EffectEstimate:
    ite_mean: np.ndarray
    ite_var: np.ndarray
    ate_mean: float
    ate_var: float
    interval: tuple[float, float]
    w_signed: np.ndarray
    source_ids: np.ndarray
    ate_draws: np.ndarray = field(repr=False)


@jax.jit
def _conditional_core(K, w, y, X, Phi_chol, Sigma, g_s, mu0, mu1, jitter):
    Phi = Phi_chol @ Phi_chol.T
    K_obs, K_mis, K_om = kernels_from_gram(K, w, Phi, Sigma)
    m0, m1 = arm_means(X, Phi_chol, g_s, mu0, mu1)
    mu_obs = (1.0 - w) * m0 + w * m1
    mu_mis = w * m0 + (1.0 - w) * m1
    L = jnp.linalg.cholesky(K_obs + jitter * jnp.eye(K.shape[0]))
    A = jsla.solve_triangular(L, K_om, lower=True)
    a = jsla.solve_triangular(L, y - mu_obs, lower=True)
    cov = K_mis - A.T @ A
    return mu_mis + A.T @ a, 0.5 * (cov + cov.T), jnp.all(jnp.isfinite(L))


def _conditional_slow(K, w, y, X, Phi_chol, Sigma, g_s, mu0, mu1, jitter):
    # numpy route with jitter escalation, used when the fast factorization fails
    Phi = Phi_chol @ Phi_chol.T
    K_obs, K_mis, K_om = (np.asarray(a) for a in kernels_from_gram(K, w, Phi, Sigma))
    m0, m1 = (np.asarray(a) for a in arm_means(X, Phi_chol, g_s, mu0, mu1))
    mu_obs = (1.0 - w) * m0 + w * m1
    mu_mis = w * m0 + (1.0 - w) * m1
    L = mathcore.cholesky(K_obs, jitter)
    A = sla.solve_triangular(L, K_om, lower=True)
    a = sla.solve_triangular(L, y - mu_obs, lower=True)
    cov = K_mis - A.T @ A
    return mu_mis + A.T @ a, 0.5 * (cov + cov.T)


def conditional_missing(src: SourceData, Phi, Sigma, g_s, k: KernelParams, mu0: Affine, mu1: Affine,
                        jitter: float = mathcore.DEFAULT_JITTER, K=None, Phi_chol=None):
    """Mean and covariance of ``y_mis | y_obs`` for one source given (Phi, Sigma, g).

    ``jitter`` is added to the diagonal of ``K_obs``, as in training. ``K`` (the
    source gram matrix) may be passed in to reuse it across draws.
    """
    if Phi_chol is None:
        Phi_chol = mathcore.cholesky(Phi)
    if K is None:
        K = rbf_kernel(src.X, src.X, k)
    args = (
        np.asarray(K, dtype=float), src.w, src.y_obs, src.X,
        np.asarray(Phi_chol, dtype=float), np.asarray(Sigma, dtype=float),
        np.asarray(g_s, dtype=float),
        Affine(np.asarray(mu0.weights, dtype=float), float(mu0.bias)),
        Affine(np.asarray(mu1.weights, dtype=float), float(mu1.bias)),
    )
    mean, cov, ok = _conditional_core(*args, jitter)
    if bool(ok):
        return np.asarray(mean), np.asarray(cov)
    return _conditional_slow(*args, jitter)


def _unpack_model(theta: GlobalParams):
    P = theta.unflatten()
    k = KernelParams(P["k"][0], P["k"][1])
    mu0 = Affine(np.asarray(P["mu0_w"]), float(P["mu0_b"]))
    mu1 = Affine(np.asarray(P["mu1_w"]), float(P["mu1_b"]))
    return k, mu0, mu1


def predict_missing(
    sources: Sequence[SourceData],
    theta: GlobalParams,
    summaries: Sequence[SourceSummary],
    S: int = 500,
    seed: int = 0,
    vcfg: VariationalConfig | None = None,
    ablate_g: bool = False,
    keep_moments: bool = False,
) -> PredictiveDraws:
    """Draw missing outcomes from the approximate posterior predictive.

    Each draw samples (Phi, Sigma, g) from q once and then, independently per
    source, samples ``y_mis`` from its Gaussian conditional given ``y_obs``.
    """
    if S < 1:
        raise ValidationError("need at least one draw")
    vcfg = vcfg or VariationalConfig()
    m = len(summaries)
    for src in sources:
        if not 0 <= src.source_id < m:
            raise ValidationError(f"source_id {src.source_id} outside 0..{m - 1}")
    rng = np.random.default_rng(seed)
    bundles = [NoiseBundle.draw(rng, m, vcfg.d_q, vcfg.n_q) for _ in range(S)]
    _, u = stack_summaries(summaries)
    P = theta.layout.unflatten(jnp.asarray(theta.vector))
    L_phi, Sigma, g = (np.asarray(a) for a in _q_draws(P, jnp.asarray(u), _stack_noise(bundles), vcfg.jitter, ablate_g))
    Phi = L_phi @ np.swapaxes(L_phi, -1, -2)

    k, mu0, mu1 = _unpack_model(theta)
    ordered = sorted(sources, key=lambda s: s.source_id)
    grams = {s.source_id: np.asarray(rbf_kernel(s.X, s.X, k)) for s in ordered}
    y_mis = {s.source_id: np.empty((S, s.n)) for s in ordered}
    cmean = {s.source_id: [] for s in ordered} if keep_moments else None
    ccov = {s.source_id: [] for s in ordered} if keep_moments else None
    for t in range(S):
        for src in ordered:
            sid = src.source_id
            mean, cov = conditional_missing(
                src, Phi[t], Sigma[t], g[t][:, sid], k, mu0, mu1, vcfg.jitter, grams[sid], L_phi[t]
            )
            z = rng.standard_normal(src.n)
            y_mis[sid][t] = mean + mathcore.cholesky(cov) @ z
            if keep_moments:
                cmean[sid].append(mean)
                ccov[sid].append(cov)
    return PredictiveDraws(y_mis, Phi, Sigma, g, cmean, ccov)


def _ordered(sources: Sequence[SourceData], draws: PredictiveDraws, source_filter=None):
    chosen = sorted(sources, key=lambda s: s.source_id)
    if source_filter is not None:
        keep = set(np.atleast_1d(source_filter).tolist())
        chosen = [s for s in chosen if s.source_id in keep]
    if not chosen:
        raise EmptyDraws("no sources selected")
    for s in chosen:
        if s.source_id not in draws.y_mis:
            raise ValidationError(f"no draws for source {s.source_id}")
    return chosen


def ate_draws(sources: Sequence[SourceData], draws: PredictiveDraws, source_filter=None) -> np.ndarray:
    """Per-draw ATE over the selected sources, ``w~^T (y_obs - y_mis) / n``."""
    if draws is None or draws.S < 1:
        raise EmptyDraws("no predictive draws")
    chosen = _ordered(sources, draws, source_filter)
    n = sum(s.n for s in chosen)
    total = np.zeros(draws.S)
    for s in chosen:
        w_signed = 2.0 * s.w - 1.0
        total += (w_signed * (s.y_obs[None, :] - draws.y_mis[s.source_id])).sum(axis=1)
    return total / n


def estimate_effects(sources: Sequence[SourceData], draws: PredictiveDraws) -> EffectEstimate:
    """ITE and ATE posterior summaries from predictive draws; ground truth is never read."""
    if draws is None or draws.S < 1:
        raise EmptyDraws("no predictive draws")
    chosen = _ordered(sources, draws)
    w_signed = np.concatenate([2.0 * s.w - 1.0 for s in chosen])
    y_obs = np.concatenate([s.y_obs for s in chosen])
    y_mis = np.concatenate([draws.y_mis[s.source_id] for s in chosen], axis=1)
    ite_mean = w_signed * (y_obs - y_mis.mean(axis=0))
    ite_var = w_signed**2 * y_mis.var(axis=0)
    tau = ate_draws(chosen, draws)
    lo, hi = np.percentile(tau, [2.5, 97.5])
    ate_mean = float(tau.mean())
    return EffectEstimate(
        ite_mean,
        ite_var,
        ate_mean,
        float(tau.var()),
        (float(min(lo, ate_mean)), float(max(hi, ate_mean))),
        w_signed,
        np.concatenate([np.full(s.n, s.source_id) for s in chosen]),
        tau,
    )


MAX_BINS = 200


def ate_distribution(sources: Sequence[SourceData], draws: PredictiveDraws, source_filter=None) -> dict:
    """Freedman-Diaconis histogram of per-draw ATE values, plus their mean and sd."""
    tau = ate_draws(sources, draws, source_filter)
    if tau.size == 1 or np.ptp(tau) == 0.0:
        edges = np.array([tau[0] - 0.5, tau[0] + 0.5])
    else:
        edges = np.histogram_bin_edges(tau, bins="fd")
        if edges.size - 1 > MAX_BINS:
            edges = np.histogram_bin_edges(tau, bins=MAX_BINS)
    counts, edges = np.histogram(tau, bins=edges)
    return {
        "bin_edges": edges,
        "counts": counts,
        "mean": float(tau.mean()),
        "sd": float(tau.std()),
    }
