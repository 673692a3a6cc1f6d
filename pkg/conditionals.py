"""Blocked full-conditional updates of the Gibbs sampler.

Each ``update_*`` function mutates the :class:`ParameterState` it is given
and returns the refreshed block. All data-derived constants (basis grid,
prior covariance, random-effect design) live in a :class:`SamplerContext`
built once per fit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import gammaln
from scipy.stats import invwishart, norm

from config import ModelConfig
from gaussian_tools import (
    CirculantEmbedding,
    MaternKernel,
    SamplerError,
    ToeplitzCovariance,
    default_lengthscale,
    ess_step,
    sample_dirichlet,
    sample_inverse_gamma,
    sample_stationary_gp,
    sample_trunc_beta,
    sample_trunc_normal,
)
from model_core import CurrentStatusDataset, build_spatial_graph, subject_level_design
from monotone_link import KnotGrid, basis_matrix, coefficient_count

logger = logging.getLogger(__name__)

SIMPLEX_FLOOR = 1e-14
STICK_CEILING = 1.0 - 1e-12
REJECTION_ROUNDS = 64
REGION_TOLERANCE = 1e-10


# ---------------------------------------------------------------------------
# State containers
# ---------------------------------------------------------------------------

@dataclass
class MixtureState:
    """Truncated stick-breaking mixture for the log-time errors."""

    pi: np.ndarray
    phi: np.ndarray
    s2: np.ndarray
    z: np.ndarray
    gamma: float
    sticks: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def H(self) -> int:
        return self.pi.size

    def tooth_means(self) -> np.ndarray:
        return self.phi[self.z]

    def tooth_variances(self) -> np.ndarray:
        return self.s2[self.z]

    def copy(self) -> "MixtureState":
        return MixtureState(
            pi=self.pi.copy(), phi=self.phi.copy(), s2=self.s2.copy(),
            z=self.z.copy(), gamma=self.gamma, sticks=self.sticks.copy(),
        )


@dataclass
class ParameterState:
    """One configuration of every sampled quantity.

    ``b`` has one row per subject and one column per shared effect
    (m/2 for the spatial design, 1 for subject-level effects).
    """

    beta_tilde: np.ndarray
    xi: np.ndarray
    tau2: float
    sigma_b: np.ndarray
    b: np.ndarray
    mixture: MixtureState
    alpha: np.ndarray
    log_t: np.ndarray
    r: np.ndarray

    @property
    def beta(self) -> np.ndarray:
        return self.beta_tilde / np.linalg.norm(self.beta_tilde)

    def copy(self) -> "ParameterState":
        return ParameterState(
            beta_tilde=self.beta_tilde.copy(), xi=self.xi.copy(), tau2=self.tau2,
            sigma_b=self.sigma_b.copy(), b=self.b.copy(), mixture=self.mixture.copy(),
            alpha=self.alpha.copy(), log_t=self.log_t.copy(), r=self.r.copy(),
        )


@dataclass(frozen=True)
class TruncationRegion:
    """Interval of total times ``T`` compatible with an observed state."""

    state: int
    c: float
    r: np.ndarray

    def bounds(self) -> tuple[float, float]:
        partial = np.concatenate([[0.0], np.cumsum(self.r)])
        partial[-1] = 1.0
        upper = np.inf if self.state == 0 else self.c / partial[self.state]
        lower = 0.0 if self.state == partial.size - 1 else self.c / partial[self.state + 1]
        return lower, upper

    def contains(self, t: float) -> bool:
        lower, upper = self.bounds()
        return lower < t <= upper


# ---------------------------------------------------------------------------
# Context
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SamplerContext:
    """Fit-wide constants derived from the data and the model configuration."""

    data: CurrentStatusDataset
    config: ModelConfig
    grid: KnotGrid
    kernel: MaternKernel
    covariance: ToeplitzCovariance
    embedding: CirculantEmbedding
    Z: np.ndarray
    prior_scale: np.ndarray | None

    @property
    def log_c(self) -> np.ndarray:
        return np.log(self.data.c)

    @property
    def effect_dim(self) -> int:
        return self.Z.shape[1]

    @property
    def coefficient_count(self) -> int:
        return coefficient_count(self.config.link_kind, self.grid)

    def basis_at(self, beta: np.ndarray) -> np.ndarray:
        """Basis matrix at the single indices ``x_ij' beta`` (rows in tooth order)."""
        index = self.data.x.reshape(-1, self.data.p) @ beta
        return basis_matrix(self.config.link_kind, self.grid, index)

    def link_at(self, beta: np.ndarray, xi: np.ndarray) -> np.ndarray:
        return (self.basis_at(beta) @ xi).reshape(self.data.n, self.data.m)

    def with_states(self, s: np.ndarray) -> "SamplerContext":
        data = CurrentStatusDataset(
            x=self.data.x, c=self.data.c, s=s, K=self.data.K,
            covariate_names=self.data.covariate_names, subject_ids=self.data.subject_ids,
        )
        return replace(self, data=data)


def build_context(data: CurrentStatusDataset, config: ModelConfig) -> SamplerContext:
    hyper = config.hyper
    grid = KnotGrid(config.L)
    lengthscale = hyper.lengthscale or default_lengthscale(grid.max_separation, nu=hyper.nu)
    kernel = MaternKernel(hyper.nu, lengthscale)
    covariance = ToeplitzCovariance.from_kernel(kernel, grid.L + 1, grid.delta)
    embedding = CirculantEmbedding(covariance.first_row, lag_fn=lambda lags: kernel(grid.delta * lags))

    if config.effect_kind == "spatial":
        graph = build_spatial_graph(data.m)
        Z = graph.Z
        prior_scale = graph.car_scale(hyper.rho)
    else:
        Z = subject_level_design(data.m)
        prior_scale = None
    logger.debug("Context: L=%d, lengthscale=%.5f, embedding=%d, effect_dim=%d",
                 grid.L, lengthscale, embedding.embedding_size, Z.shape[1])
    return SamplerContext(
        data=data, config=config, grid=grid, kernel=kernel, covariance=covariance,
        embedding=embedding, Z=Z, prior_scale=prior_scale,
    )


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------

def tooth_effects(state: ParameterState, ctx: SamplerContext) -> np.ndarray:
    """``b_ij`` for every subject and tooth."""
    return state.b @ ctx.Z.T


def error_residuals(state: ParameterState, ctx: SamplerContext) -> np.ndarray:
    """``eps_ij = log T_ij - b_ij - g(x_ij' beta)``."""
    return state.log_t - tooth_effects(state, ctx) - ctx.link_at(state.beta, state.xi)


def residuals(state: ParameterState, ctx: SamplerContext) -> np.ndarray:
    """``e_ij = log T_ij - b_ij - g(x_ij' beta) - phi_{z_ij}``."""
    return error_residuals(state, ctx) - state.mixture.tooth_means()


def partial_sums(r: np.ndarray) -> np.ndarray:
    """``V^(0..K)`` with ``V^(0) = 0`` and ``V^(K) = 1`` exactly."""
    cum = np.cumsum(r, axis=-1)
    cum[..., -1] = 1.0
    zeros = np.zeros(r.shape[:-1] + (1,))
    return np.concatenate([zeros, cum], axis=-1)


def log_time_bounds(r: np.ndarray, log_c: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Bounds ``(lo, hi]`` on ``log T`` implied by increments and observed states."""
    V = partial_sums(r)
    V = np.concatenate([V, np.full(V.shape[:-1] + (1,), np.inf)], axis=-1)
    upper_v = np.take_along_axis(V, s[..., None], axis=-1)[..., 0]
    lower_v = np.take_along_axis(V, s[..., None] + 1, axis=-1)[..., 0]
    with np.errstate(divide="ignore"):
        return log_c - np.log(lower_v), log_c - np.log(upper_v)


def region_violations(state: ParameterState, ctx: SamplerContext) -> int:
    """Number of teeth whose ``(log T, R)`` lies outside its truncation region."""
    lo, hi = log_time_bounds(state.r, ctx.log_c, ctx.data.s)
    inside = (state.log_t >= lo - REGION_TOLERANCE) & (state.log_t <= hi + REGION_TOLERANCE)
    return int(np.count_nonzero(~inside))


def _cholesky(matrix: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(matrix)
    except np.linalg.LinAlgError as exc:
        raise SamplerError("Σ_b not SPD") from exc


# ---------------------------------------------------------------------------
# Regression direction and link
# ---------------------------------------------------------------------------

def update_beta(state: ParameterState, ctx: SamplerContext, rng: np.random.Generator) -> np.ndarray:
    mix = state.mixture
    u = state.log_t - tooth_effects(state, ctx) - mix.tooth_means()
    weights = 1.0 / mix.tooth_variances()
    xi = state.xi
    prior_sd = np.sqrt(ctx.config.hyper.sigma_beta2)
    p = state.beta_tilde.size

    def loglik(beta_tilde: np.ndarray) -> float:
        size = np.linalg.norm(beta_tilde)
        if size == 0:
            return -np.inf
        resid = u - ctx.link_at(beta_tilde / size, xi)
        return -0.5 * float(np.sum(resid * resid * weights))

    state.beta_tilde, _ = ess_step(
        state.beta_tilde, lambda g: prior_sd * g.standard_normal(p), loglik, rng
    )
    return state.beta_tilde


def _soft_nonnegativity(xi: np.ndarray, eta: float) -> float:
    """``log prod (1 + exp(-eta xi_l))^{-1}``."""
    return -float(np.sum(np.logaddexp(0.0, -eta * xi)))


def update_link(state: ParameterState, ctx: SamplerContext, rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """ESS step for the link coefficients, then the conjugate ``tau^2`` draw.

    The identity link has a single half-normal slope and no ``tau^2``.
    """

    hyper = ctx.config.hyper
    mix = state.mixture
    sd = np.sqrt(mix.tooth_variances()).reshape(-1)
    target = (state.log_t - tooth_effects(state, ctx) - mix.tooth_means()).reshape(-1) / sd
    design = ctx.basis_at(state.beta) / sd[:, None]
    gram = design.T @ design
    cross = design.T @ target
    const = float(target @ target)

    def gaussian_part(xi: np.ndarray) -> float:
        return -0.5 * (const - 2.0 * float(xi @ cross) + float(xi @ gram @ xi))

    if ctx.config.link_kind == "identity":
        def loglik(xi: np.ndarray) -> float:
            return -np.inf if xi[0] < 0 else gaussian_part(xi)

        state.xi, _ = ess_step(state.xi, lambda g: hyper.omega_scale * g.standard_normal(1), loglik, rng)
        return state.xi, state.tau2

    def loglik(xi: np.ndarray) -> float:
        return gaussian_part(xi) + _soft_nonnegativity(xi, hyper.eta)

    tau2 = state.tau2
    state.xi, _ = ess_step(state.xi, lambda g: sample_stationary_gp(ctx.embedding, tau2, g), loglik, rng)
    state.tau2 = sample_tau2(state.xi, ctx, rng)
    return state.xi, state.tau2


def sample_tau2(xi: np.ndarray, ctx: SamplerContext, rng: np.random.Generator) -> float:
    hyper = ctx.config.hyper
    shape = hyper.a_xi + 0.5 * xi.size
    scale = hyper.b_xi + 0.5 * ctx.covariance.quad_form(xi)
    return sample_inverse_gamma(shape, scale, rng)


# ---------------------------------------------------------------------------
# Random effects
# ---------------------------------------------------------------------------

def update_random_effects(state: ParameterState, ctx: SamplerContext, rng: np.random.Generator) -> np.ndarray:
    """Exact Gaussian draw of every subject's effect vector.

    ``Q_i = Sigma_b^{-1} + Z' Omega_i Z`` and ``a_i = Z' Omega_i u_i`` with
    ``Omega_i`` the diagonal of error precisions of subject *i*.
    """

    chol_prior = _cholesky(state.sigma_b)
    eye = np.eye(ctx.effect_dim)
    prior_precision = np.linalg.solve(chol_prior.T, np.linalg.solve(chol_prior, eye))

    mix = state.mixture
    precision = 1.0 / mix.tooth_variances()
    u = state.log_t - ctx.link_at(state.beta, state.xi) - mix.tooth_means()
    Z = ctx.Z
    Q = prior_precision[None, :, :] + np.einsum("jd,ij,je->ide", Z, precision, Z)
    a = np.einsum("jd,ij->id", Z, precision * u)

    chol = _cholesky(Q)
    mean = np.linalg.solve(Q, a[..., None])[..., 0]
    noise = rng.standard_normal(a.shape)
    deviation = np.linalg.solve(np.swapaxes(chol, -1, -2), noise[..., None])[..., 0]
    state.b = mean + deviation
    return state.b


def update_sigma_b(state: ParameterState, ctx: SamplerContext, rng: np.random.Generator) -> np.ndarray:
    """Inverse-Wishart draw centred on the CAR scale (inverse-gamma when effects are scalar)."""
    n = state.b.shape[0]
    if ctx.prior_scale is None:
        hyper = ctx.config.hyper
        shape = hyper.a_b + 0.5 * n
        scale = hyper.lambda_b + 0.5 * float(np.sum(state.b**2))
        state.sigma_b = np.array([[sample_inverse_gamma(shape, scale, rng)]])
        return state.sigma_b

    d = ctx.effect_dim
    df = d + 2 + n
    scale = ctx.prior_scale + state.b.T @ state.b
    draw = np.atleast_2d(invwishart.rvs(df=df, scale=scale, random_state=rng))
    draw = 0.5 * (draw + draw.T)
    _cholesky(draw)
    state.sigma_b = draw
    return state.sigma_b


# ---------------------------------------------------------------------------
# Error mixture
# ---------------------------------------------------------------------------

def sample_atoms(
    residuals: np.ndarray, z: np.ndarray, H: int, config: ModelConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Normal-inverse-gamma posterior draws of ``(phi_h, s2_h)``; empty clusters draw from the base."""
    hyper = config.hyper
    counts = np.bincount(z, minlength=H).astype(float)
    sums = np.bincount(z, weights=residuals, minlength=H)
    means = np.divide(sums, counts, out=np.zeros(H), where=counts > 0)
    sq_dev = np.bincount(z, weights=(residuals - means[z]) ** 2, minlength=H)

    nu_post = hyper.nu_eps + counts
    mu_post = (hyper.nu_eps * hyper.mu_eps + counts * means) / nu_post
    a_post = hyper.a_eps + 0.5 * counts
    lam_post = hyper.lambda_eps + 0.5 * (sq_dev + hyper.nu_eps * counts / nu_post * (means - hyper.mu_eps) ** 2)

    s2 = sample_inverse_gamma(a_post, lam_post, rng)
    phi = mu_post + np.sqrt(s2 / nu_post) * rng.standard_normal(H)
    return phi, np.atleast_1d(s2)


def stick_weights(sticks: np.ndarray) -> np.ndarray:
    """Mixture weights from stick fractions ``pi'_1..pi'_{H-1}``."""
    remaining = np.concatenate([[1.0], np.cumprod(1.0 - sticks)])
    return np.concatenate([sticks, [1.0]]) * remaining


def update_error_mixture(state: ParameterState, ctx: SamplerContext, rng: np.random.Generator) -> MixtureState:
    """Labels, stick fractions, atoms and concentration, in that order."""
    hyper = ctx.config.hyper
    mix = state.mixture
    H = mix.H
    eps = error_residuals(state, ctx).reshape(-1)

    if H == 1:
        z = np.zeros(eps.size, dtype=np.int64)
    else:
        with np.errstate(divide="ignore"):
            logw = np.log(mix.pi)[None, :] + norm.logpdf(eps[:, None], mix.phi[None, :], np.sqrt(mix.s2)[None, :])
        logw -= logw.max(axis=1, keepdims=True)
        cdf = np.cumsum(np.exp(logw), axis=1)
        u = rng.random(eps.size) * cdf[:, -1]
        z = np.minimum((u[:, None] > cdf).sum(axis=1), H - 1)

    counts = np.bincount(z, minlength=H)
    if H > 1:
        tails = np.cumsum(counts[::-1])[::-1][1:]
        sticks = np.minimum(rng.beta(counts[:-1] + 1.0, mix.gamma + tails), STICK_CEILING)
        pi = stick_weights(sticks)
    else:
        sticks = np.zeros(0)
        pi = np.ones(1)

    phi, s2 = sample_atoms(eps, z, H, ctx.config, rng)

    if H > 1:
        rate = hyper.b_gamma - float(np.sum(np.log1p(-sticks)))
        gamma = rng.gamma(hyper.a_gamma + H - 1, 1.0 / rate)
    else:
        gamma = rng.gamma(hyper.a_gamma, 1.0 / hyper.b_gamma)

    state.mixture = MixtureState(
        pi=pi, phi=phi, s2=s2, z=z.reshape(mix.z.shape), gamma=float(gamma), sticks=sticks
    )
    return state.mixture


# ---------------------------------------------------------------------------
# Latent times and increments
# ---------------------------------------------------------------------------

def update_latent_times(state: ParameterState, ctx: SamplerContext, rng: np.random.Generator) -> np.ndarray:
    mix = state.mixture
    lo, hi = log_time_bounds(state.r, ctx.log_c, ctx.data.s)
    mean = ctx.link_at(state.beta, state.xi) + tooth_effects(state, ctx) + mix.tooth_means()
    state.log_t = sample_trunc_normal(mean, np.sqrt(mix.tooth_variances()), lo, hi, rng)
    return state.log_t


def _middle_case(
    k: int, rho: np.ndarray, current: np.ndarray, alpha: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Truncated Dirichlet for ``V^(k) <= rho < V^(k+1)`` with ``1 <= k <= K-2``.

    ``V = V^(k)`` and ``U = R^(k+1) / (1 - V)`` are independent Betas a priori;
    the pair is drawn jointly by rejection. Teeth still unresolved after the
    last round take a Gibbs move (V given U, then U given V) from their
    current increments instead.
    """

    total = alpha.sum()
    head = alpha[:k].sum()
    nxt = alpha[k]
    tail = total - head - nxt
    size = rho.size
    V = np.empty(size)
    U = np.empty(size)
    done = np.zeros(size, dtype=bool)

    for _ in range(REJECTION_ROUNDS):
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            break
        v = sample_trunc_beta(head, total - head, 0.0, rho[todo], rng)
        u = rng.beta(nxt, tail, size=todo.size)
        ok = u > (rho[todo] - v) / (1.0 - v)
        V[todo[ok]] = v[ok]
        U[todo[ok]] = u[ok]
        done[todo[ok]] = True

    todo = np.flatnonzero(~done)
    if todo.size:
        logger.debug("Increment rejection fell back to a Gibbs move for %d teeth", todo.size)
        r_now = current[todo]
        v_now = r_now[:, :k].sum(axis=1)
        u_now = np.clip(r_now[:, k] / (1.0 - v_now), SIMPLEX_FLOOR, 1.0 - SIMPLEX_FLOOR)
        rho_t = rho[todo]
        v_lo = np.maximum((rho_t - u_now) / (1.0 - u_now), 0.0)
        v = sample_trunc_beta(head, total - head, v_lo, rho_t, rng)
        u = sample_trunc_beta(nxt, tail, np.clip((rho_t - v) / (1.0 - v), 0.0, 1.0 - SIMPLEX_FLOOR), 1.0, rng)
        V[todo] = v
        U[todo] = u

    out = np.empty((size, alpha.size))
    out[:, :k] = V[:, None] * sample_dirichlet(alpha[:k], rng, size=size)
    out[:, k] = U * (1.0 - V)
    out[:, k + 1:] = ((1.0 - V) * (1.0 - U))[:, None] * sample_dirichlet(alpha[k + 1:], rng, size=size)
    return out


def update_increments(state: ParameterState, ctx: SamplerContext, rng: np.random.Generator) -> np.ndarray:
    """Truncated-Dirichlet draw of every tooth's relative increments."""
    K = ctx.data.K
    alpha = state.alpha
    s = ctx.data.s.reshape(-1)
    current = state.r.reshape(-1, K)
    rho = np.exp(ctx.log_c - state.log_t).reshape(-1)
    out = np.empty_like(current)

    absorbed = s == K
    out[absorbed] = sample_dirichlet(alpha, rng, size=int(absorbed.sum()))
    if K == 1:
        state.r = np.ones_like(state.r)
        return state.r

    bounded = ~absorbed
    if np.any(~np.isfinite(rho[bounded])) or np.any(rho[bounded] > 1.0):
        raise SamplerError("truncation bounds outside [0,1]")
    rho = np.clip(rho, SIMPLEX_FLOOR, 1.0 - SIMPLEX_FLOOR)
    total = alpha.sum()

    sel = s == 0
    if sel.any():
        first = sample_trunc_beta(alpha[0], total - alpha[0], rho[sel], 1.0, rng)
        out[sel, 0] = first
        out[sel, 1:] = (1.0 - first)[:, None] * sample_dirichlet(alpha[1:], rng, size=int(sel.sum()))

    sel = s == K - 1
    if sel.any():
        V = sample_trunc_beta(total - alpha[-1], alpha[-1], 0.0, rho[sel], rng)
        out[sel, :-1] = V[:, None] * sample_dirichlet(alpha[:-1], rng, size=int(sel.sum()))
        out[sel, -1] = 1.0 - V

    for k in range(1, K - 1):
        sel = s == k
        if sel.any():
            out[sel] = _middle_case(k, rho[sel], current[sel], alpha, rng)

    state.r = out.reshape(state.r.shape)
    return state.r


# ---------------------------------------------------------------------------
# Dirichlet concentration
# ---------------------------------------------------------------------------

def _alpha_log_target(alpha: np.ndarray, log_r_sum: np.ndarray, count: int, a: float, lam: float) -> float:
    prior = float(np.sum((a - 1.0) * np.log(alpha) - lam * alpha))
    dirichlet = count * (gammaln(alpha.sum()) - float(np.sum(gammaln(alpha)))) + float(np.sum((alpha - 1.0) * log_r_sum))
    return prior + dirichlet


def update_alpha(
    state: ParameterState,
    ctx: SamplerContext,
    rng: np.random.Generator,
    proposal_sd: np.ndarray,
    proposal: str = "log",
) -> tuple[np.ndarray, np.ndarray]:
    """Componentwise random-walk Metropolis on ``alpha``.

    ``proposal="log"`` moves ``log alpha_k`` (with the Jacobian term);
    ``"natural"`` moves ``alpha_k`` directly and rejects nonpositive values.
    """

    hyper = ctx.config.hyper
    K = state.alpha.size
    r = state.r.reshape(-1, K)
    log_r_sum = np.log(r).sum(axis=0)
    count = r.shape[0]
    alpha = state.alpha.copy()
    accepted = np.zeros(K, dtype=bool)
    current = _alpha_log_target(alpha, log_r_sum, count, hyper.a_alpha, hyper.lambda_alpha)

    for k in range(K):
        step = proposal_sd[k] * rng.standard_normal()
        candidate = alpha.copy()
        if proposal == "log":
            candidate[k] = alpha[k] * np.exp(step)
            jacobian = np.log(candidate[k]) - np.log(alpha[k])
        else:
            candidate[k] = alpha[k] + step
            jacobian = 0.0
        u = rng.random()
        if not candidate[k] > 0:
            continue
        proposed = _alpha_log_target(candidate, log_r_sum, count, hyper.a_alpha, hyper.lambda_alpha)
        if np.log(u) < proposed - current + jacobian:
            alpha = candidate
            current = proposed
            accepted[k] = True

    state.alpha = alpha
    return alpha, accepted


def adapt_proposal_sd(proposal_sd: np.ndarray, accepted: np.ndarray, step: int, target: float = 0.3) -> np.ndarray:
    """Robbins-Monro step on ``log sd`` toward the target acceptance rate."""
    gain = 1.0 / (step + 1.0) ** 0.6
    return proposal_sd * np.exp(gain * (accepted.astype(float) - target))
