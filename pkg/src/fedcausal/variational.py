"""Variational posterior q(Phi) q(Sigma) q(g), reparameterized draws and the per-source ELBO.

The ELBO is a sum of per-source terms

    L_s = E_q[log N(y_obs_s; mu_obs, K_obs)] - (KL_Phi + KL_Sigma + KL_g) / m

so the gradient of the total is the sum of per-source gradients. Monte Carlo
expectations use a fixed set of :class:`NoiseBundle` values (common random
numbers); every source evaluates its term against the same set.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from . import mathcore
from .errors import DimensionMismatch, NonFiniteLoss, NotPositiveDefinite, ValidationError
from .mathcore import BartlettNoise
from .model import (
    Affine,
    KernelParams,
    PriorConfig,
    SourceData,
    SourceSummary,
    obs_kernel_from_gram,
    rbf_kernel,
    stack_summaries,
)


@dataclass(frozen=True)
class VariationalConfig:
    """Fixed (not learned) settings of the variational family."""

    d_q: float = 5.0
    n_q: float = 5.0
    mc_samples: int = 16
    jitter: float = mathcore.DEFAULT_JITTER

    def __post_init__(self):
        mathcore._check_dof(self.d_q, "d_q")
        mathcore._check_dof(self.n_q, "n_q")
        if self.mc_samples < 1:
            raise ValidationError("mc_samples must be positive")


@dataclass(frozen=True)
class ParamLayout:
    """Stable name -> slice map for the flat parameter vector."""

    d_x: int

    @property
    def blocks(self) -> tuple[tuple[str, int], ...]:
        dx, dt, du = self.d_x, 4 * self.d_x, 4 * (self.d_x + 3)
        return (
            ("k", 2),
            ("gamma", 2),
            ("kappa", 2),
            ("mu0_w", dx),
            ("mu0_b", 1),
            ("mu1_w", dx),
            ("mu1_b", 1),
            ("r0_w", dt),
            ("r0_b", 1),
            ("r1_w", dt),
            ("r1_b", 1),
            ("h0_w", du),
            ("h0_b", 1),
            ("h1_w", du),
            ("h1_b", 1),
            ("log_nu", 2),
            ("rho_logit", 1),
            ("log_delta", 2),
            ("eta_logit", 1),
        )

    @functools.cached_property
    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, size in self.blocks:
            out[name] = slice(start, start + size)
            start += size
        return out

    @property
    def size(self) -> int:
        return sum(size for _, size in self.blocks)

    def unflatten(self, vec) -> dict:
        # biases and logits are scalars; every other block stays a vector even at d_x = 1
        parts = {}
        for name, _ in self.blocks:
            v = vec[self.slices[name]]
            parts[name] = v[0] if name.endswith(("_b", "_logit")) else v
        return parts

    def flatten(self, parts: dict) -> np.ndarray:
        vec = np.empty(self.size)
        for name, _ in self.blocks:
            vec[self.slices[name]] = np.ravel(parts[name])
        return vec

    # groups used by the ablation invariant
    def names_for_latent_g(self) -> tuple[str, ...]:
        return ("gamma", "kappa", "r0_w", "r0_b", "r1_w", "r1_b", "h0_w", "h0_b", "h1_w", "h1_b")


@dataclass
class GlobalParams:
    """All shared learnable parameters as one flat vector."""

    layout: ParamLayout
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=float).copy()
        if self.vector.shape != (self.layout.size,):
            raise DimensionMismatch(
                f"parameter vector has shape {self.vector.shape}, layout needs {self.layout.size}"
            )

    @classmethod
    def initial(cls, d_x: int, vcfg: VariationalConfig | None = None) -> "GlobalParams":
        vcfg = vcfg or VariationalConfig()
        layout = ParamLayout(d_x)
        dt, du = 4 * d_x, 4 * (d_x + 3)
        parts = {name: np.zeros(size) for name, size in layout.blocks}
        parts["k"] = np.array([0.5 * np.log(d_x), 0.0])
        parts["gamma"] = np.array([0.5 * np.log(dt), 0.0])
        parts["kappa"] = np.array([0.5 * np.log(du), np.log(0.1)])
        # E[Phi] = d_q V_q = I and E[Sigma] = I at the start
        parts["log_nu"] = np.full(2, -0.5 * np.log(vcfg.d_q))
        parts["log_delta"] = np.full(2, -0.5 * np.log(vcfg.n_q))
        return cls(layout, layout.flatten(parts))

    def unflatten(self) -> dict:
        return self.layout.unflatten(self.vector)

    def index(self, name: str) -> slice:
        return self.layout.slices[name]

    def copy(self) -> "GlobalParams":
        return GlobalParams(self.layout, self.vector.copy())

    def to_dict(self) -> dict:
        return {"d_x": self.layout.d_x, "theta": [float(v) for v in self.vector]}

    @classmethod
    def from_dict(cls, d: dict) -> "GlobalParams":
        return cls(ParamLayout(int(d["d_x"])), np.asarray(d["theta"], dtype=float))


@dataclass(frozen=True)
class NoiseBundle:
    """Base randomness for one Monte Carlo replicate of (g, Phi, Sigma)."""

    xi0: np.ndarray
    xi1: np.ndarray
    bartlett_phi: BartlettNoise
    bartlett_sigma: BartlettNoise

    @classmethod
    def draw(cls, rng: np.random.Generator, m: int, d_q: float, n_q: float) -> "NoiseBundle":
        xi = rng.standard_normal((2, m))
        return cls(
            xi[0], xi[1], BartlettNoise.draw(rng, d_q), BartlettNoise.draw(rng, n_q)
        )


def draw_noise_set(seed: int, count: int, m: int, vcfg: VariationalConfig) -> list[NoiseBundle]:
    rng = np.random.default_rng(seed)
    return [NoiseBundle.draw(rng, m, vcfg.d_q, vcfg.n_q) for _ in range(count)]


def _stack_noise(noise_set: Sequence[NoiseBundle]):
    if not noise_set:
        raise ValidationError("noise_set must be nonempty")
    xi = np.stack([np.stack([b.xi0, b.xi1]) for b in noise_set])
    return (
        jnp.asarray(xi),
        jnp.asarray([b.bartlett_phi.chi2 for b in noise_set]),
        jnp.asarray([b.bartlett_phi.normal for b in noise_set]),
        jnp.asarray([b.bartlett_sigma.chi2 for b in noise_set]),
        jnp.asarray([b.bartlett_sigma.normal for b in noise_set]),
    )


# --- traced core --------------------------------------------------------------


def _kp(v) -> KernelParams:
    return KernelParams(v[0], v[1])


def _scale_params(P):
    rho = jax.nn.sigmoid(P["rho_logit"])
    eta = jax.nn.sigmoid(P["eta_logit"])
    Vq_chol = mathcore._scale_chol(P["log_nu"], rho)
    Sq_chol = mathcore._scale_chol(P["log_delta"], eta)
    logdet_v = 2.0 * jnp.sum(P["log_nu"]) + jnp.log1p(-(rho**2))
    logdet_s = 2.0 * jnp.sum(P["log_delta"]) + jnp.log1p(-(eta**2))
    return Vq_chol, Sq_chol, logdet_v, logdet_s


def _q_g_moments(P, u_all, jitter):
    """Means (2, m) and Cholesky factor of the shared covariance U of q(g)."""
    m = u_all.shape[0]
    U = rbf_kernel(u_all, u_all, _kp(P["kappa"])) + jitter * jnp.eye(m)
    h = jnp.stack([u_all @ P["h0_w"] + P["h0_b"], u_all @ P["h1_w"] + P["h1_b"]])
    return h, jnp.linalg.cholesky(U)


def _p_g_moments(P, x_tilde_all, jitter):
    m = x_tilde_all.shape[0]
    M = rbf_kernel(x_tilde_all, x_tilde_all, _kp(P["gamma"])) + jitter * jnp.eye(m)
    r = jnp.stack([x_tilde_all @ P["r0_w"] + P["r0_b"], x_tilde_all @ P["r1_w"] + P["r1_b"]])
    return r, jnp.linalg.cholesky(M)


def _q_draws(P, u_all, noise, jitter, ablate):
    """Reparameterized (L_Phi, Sigma, g) for every bundle; leading axis is the bundle."""
    xi, phi_chi2, phi_normal, sig_chi2, sig_normal = noise
    Vq_chol, Sq_chol, _, _ = _scale_params(P)
    B_phi = Vq_chol @ mathcore._bartlett_factor(phi_chi2, phi_normal)
    B_sig = Sq_chol @ mathcore._bartlett_factor(sig_chi2, sig_normal)
    Sigma = B_sig @ jnp.swapaxes(B_sig, -1, -2)
    if ablate:
        g = jnp.zeros(xi.shape)
    else:
        h, LU = _q_g_moments(P, u_all, jitter)
        g = h[None] + jnp.einsum("ij,tkj->tki", LU, xi)
    # B_phi is lower triangular with positive diagonal: it is Phi's Cholesky factor
    return B_phi, Sigma, g


def _kl_terms(P, x_tilde_all, u_all, priors, d_q, n_q, jitter, ablate):
    V0, S0, d0, n0 = priors
    Vq_chol, Sq_chol, logdet_v, logdet_s = _scale_params(P)
    kl = mathcore._kl_wishart(Vq_chol @ Vq_chol.T, d_q, V0, d0, logdet_v)
    kl = kl + mathcore._kl_wishart(Sq_chol @ Sq_chol.T, n_q, S0, n0, logdet_s)
    if not ablate:
        h, LU = _q_g_moments(P, u_all, jitter)
        r, LM = _p_g_moments(P, x_tilde_all, jitter)
        kl = kl + mathcore._kl_gaussian_chol(h[0], LU, r[0], LM)
        kl = kl + mathcore._kl_gaussian_chol(h[1], LU, r[1], LM)
    return kl


def _expected_loglik(P, y, w, X, s_idx, u_all, noise, jitter, ablate):
    L_phi, Sigma, g = _q_draws(P, u_all, noise, jitter, ablate)
    K = rbf_kernel(X, X, _kp(P["k"]))
    mu0 = Affine(P["mu0_w"], P["mu0_b"])
    mu1 = Affine(P["mu1_w"], P["mu1_b"])
    f0, f1 = mu0(X), mu1(X)
    eye = jnp.eye(y.shape[0])

    def one(Lp, Sg, gt):
        Phi = Lp @ Lp.T
        g0, g1 = gt[0, s_idx], gt[1, s_idx]
        m0 = Lp[0, 0] * (f0 + g0)
        m1 = Lp[1, 0] * (f0 + g0) + Lp[1, 1] * (f1 + g1)
        mu_obs = (1.0 - w) * m0 + w * m1
        K_obs = obs_kernel_from_gram(K, w, Phi, Sg) + jitter * eye
        return mathcore._gaussian_logpdf_chol(y - mu_obs, jnp.linalg.cholesky(K_obs))

    return jnp.mean(jax.vmap(one)(L_phi, Sigma, g))


def _elbo_source_core(theta, y, w, X, s_idx, x_tilde_all, u_all, noise, priors, jitter, layout, d_q, n_q, ablate):
    P = layout.unflatten(theta)
    m = u_all.shape[0]
    ell = _expected_loglik(P, y, w, X, s_idx, u_all, noise, jitter, ablate)
    return ell - _kl_terms(P, x_tilde_all, u_all, priors, d_q, n_q, jitter, ablate) / m


_STATIC = ("layout", "d_q", "n_q", "ablate")
_elbo_value = jax.jit(_elbo_source_core, static_argnames=_STATIC)
_elbo_value_and_grad = jax.jit(jax.value_and_grad(_elbo_source_core), static_argnames=_STATIC)


def _pooled_core(theta, data, x_tilde_all, u_all, noise, priors, jitter, layout, d_q, n_q, ablate):
    total = 0.0
    for s_idx, (y, w, X) in enumerate(data):
        total = total + _elbo_source_core(
            theta, y, w, X, s_idx, x_tilde_all, u_all, noise, priors, jitter, layout, d_q, n_q, ablate
        )
    return total


_pooled_value_and_grad = jax.jit(jax.value_and_grad(_pooled_core), static_argnames=_STATIC)


# --- public surface -----------------------------------------------------------


class Objective:
    """Per-source ELBO evaluator bound to the shared summaries and priors.

    Each source worker owns one; it sees only its own rows plus the shared
    summaries of every source.
    """

    def __init__(
        self,
        summaries: Sequence[SourceSummary],
        priors: PriorConfig,
        layout: ParamLayout,
        vcfg: VariationalConfig | None = None,
        ablate_g: bool = False,
    ):
        if not summaries:
            raise ValidationError("need at least one source summary")
        self.vcfg = vcfg or VariationalConfig()
        self.layout = layout
        self.ablate_g = bool(ablate_g)
        self.m = len(summaries)
        x_tilde, u = stack_summaries(summaries)
        if x_tilde.shape[1] != 4 * layout.d_x:
            raise DimensionMismatch("summaries do not match the parameter layout")
        self.x_tilde_all = jnp.asarray(x_tilde)
        self.u_all = jnp.asarray(u)
        self.priors = (
            jnp.asarray(priors.V0),
            jnp.asarray(priors.S0),
            float(priors.d0),
            float(priors.n0),
        )

    def _static(self):
        return dict(layout=self.layout, d_q=self.vcfg.d_q, n_q=self.vcfg.n_q, ablate=self.ablate_g)

    def _source_args(self, src: SourceData):
        if not 0 <= src.source_id < self.m:
            raise ValidationError(f"source_id {src.source_id} outside 0..{self.m - 1}")
        if src.n == 0:
            raise ValidationError(f"source {src.source_id} has no rows")
        return jnp.asarray(src.y_obs), jnp.asarray(src.w), jnp.asarray(src.X), src.source_id

    def _escalate(self, fn):
        """Run ``fn(jitter)``, doubling the jitter up to three times on non-finite output."""
        jitter = self.vcfg.jitter
        for _ in range(mathcore.JITTER_DOUBLINGS + 1):
            out = fn(jitter)
            value = out[0] if isinstance(out, tuple) else out
            finite = np.isfinite(value) and (
                not isinstance(out, tuple) or np.all(np.isfinite(out[1]))
            )
            if finite:
                return out
            jitter *= 2.0
        raise NonFiniteLoss(f"ELBO not finite even with jitter {jitter / 2.0:.1e}")

    def value(self, theta, src: SourceData, noise_set) -> float:
        theta = _theta_vec(theta)
        y, w, X, s = self._source_args(src)
        noise = _stack_noise(noise_set)

        def run(jitter):
            return float(
                _elbo_value(theta, y, w, X, s, self.x_tilde_all, self.u_all, noise, self.priors, jitter, **self._static())
            )

        return self._escalate(run)

    def value_and_grad(self, theta, src: SourceData, noise_set) -> tuple[float, np.ndarray]:
        theta = _theta_vec(theta)
        y, w, X, s = self._source_args(src)
        noise = _stack_noise(noise_set)

        def run(jitter):
            v, g = _elbo_value_and_grad(
                theta, y, w, X, s, self.x_tilde_all, self.u_all, noise, self.priors, jitter, **self._static()
            )
            return float(v), np.asarray(g)

        return self._escalate(run)

    def pooled_value_and_grad(self, theta, sources: Sequence[SourceData], noise_set) -> tuple[float, np.ndarray]:
        """Centralized gradient of the summed objective, one traced computation."""
        theta = _theta_vec(theta)
        ordered = sorted(sources, key=lambda s: s.source_id)
        if [s.source_id for s in ordered] != list(range(self.m)):
            raise ValidationError("pooled evaluation needs every source exactly once")
        data = tuple(self._source_args(s)[:3] for s in ordered)
        noise = _stack_noise(noise_set)

        def run(jitter):
            v, g = _pooled_value_and_grad(
                theta, data, self.x_tilde_all, self.u_all, noise, self.priors, jitter, **self._static()
            )
            return float(v), np.asarray(g)

        return self._escalate(run)

    def kl_total(self, theta) -> float:
        P = self.layout.unflatten(jnp.asarray(_theta_vec(theta)))
        return float(
            _kl_terms(P, self.x_tilde_all, self.u_all, self.priors, self.vcfg.d_q, self.vcfg.n_q, self.vcfg.jitter, self.ablate_g)
        )


def _theta_vec(theta) -> np.ndarray:
    if isinstance(theta, GlobalParams):
        return theta.vector
    return np.asarray(theta, dtype=float)


def q_sample(
    theta: GlobalParams,
    summaries: Sequence[SourceSummary],
    noise: NoiseBundle,
    vcfg: VariationalConfig | None = None,
    ablate_g: bool = False,
):
    """One reparameterized draw ``(Phi, Sigma, g)``; ``g`` has shape (2, m)."""
    vcfg = vcfg or VariationalConfig()
    _, u = stack_summaries(summaries)
    if noise.xi0.shape != (u.shape[0],):
        raise DimensionMismatch("noise bundle does not match the number of sources")
    P = theta.layout.unflatten(jnp.asarray(theta.vector))
    L_phi, Sigma, g = _q_draws(P, jnp.asarray(u), _stack_noise([noise]), vcfg.jitter, ablate_g)
    Phi = L_phi[0] @ L_phi[0].T
    out = np.asarray(Phi), np.asarray(Sigma[0]), np.asarray(g[0])
    if not all(np.all(np.isfinite(a)) for a in out):
        raise NotPositiveDefinite("variational draw produced non-finite values")
    return out


def q_g_mean(theta: GlobalParams, summaries: Sequence[SourceSummary]) -> np.ndarray:
    """Mean of q(g), shape (2, m)."""
    _, u = stack_summaries(summaries)
    P = theta.layout.unflatten(jnp.asarray(theta.vector))
    h, _ = _q_g_moments(P, jnp.asarray(u), 0.0)
    return np.asarray(h)


def elbo_source(
    src: SourceData,
    summaries: Sequence[SourceSummary],
    theta: GlobalParams,
    priors: PriorConfig,
    noise_set: Sequence[NoiseBundle],
    m: int | None = None,
    ablate_g: bool = False,
    vcfg: VariationalConfig | None = None,
) -> float:
    """Monte Carlo estimate of one source's ELBO term."""
    if m is not None and m != len(summaries):
        raise ValidationError(f"m={m} but {len(summaries)} summaries were given")
    obj = Objective(summaries, priors, theta.layout, vcfg, ablate_g)
    return obj.value(theta, src, noise_set)


def elbo_total(
    sources: Sequence[SourceData],
    summaries: Sequence[SourceSummary],
    theta: GlobalParams,
    priors: PriorConfig,
    noise_set: Sequence[NoiseBundle],
    ablate_g: bool = False,
    vcfg: VariationalConfig | None = None,
) -> float:
    """Sum of the per-source terms in ascending source order."""
    obj = Objective(summaries, priors, theta.layout, vcfg, ablate_g)
    total = 0.0
    for src in sorted(sources, key=lambda s: s.source_id):
        total += obj.value(theta, src, noise_set)
    return total


def grad_fd(loss: Callable[[np.ndarray], float], theta, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences, step ``eps * max(1, |theta_i|)`` per coordinate."""
    theta = np.array(_theta_vec(theta), dtype=float)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        h = eps * max(1.0, abs(theta[i]))
        up, down = theta.copy(), theta.copy()
        up[i] += h
        down[i] -= h
        f_up, f_down = float(loss(up)), float(loss(down))
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            raise NonFiniteLoss(f"loss not finite around coordinate {i}")
        grad[i] = (f_up - f_down) / (up[i] - down[i])
    return grad
