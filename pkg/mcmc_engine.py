"""Chain initialization, the Gibbs loop, kept-draw storage and convergence checks."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import invwishart
from tqdm import tqdm

import env
from conditionals import (
    MixtureState,
    ParameterState,
    SamplerContext,
    adapt_proposal_sd,
    build_context,
    log_time_bounds,
    partial_sums,
    region_violations,
    residuals,
    stick_weights,
    tooth_effects,
    update_alpha,
    update_beta,
    update_error_mixture,
    update_increments,
    update_latent_times,
    update_link,
    update_random_effects,
    update_sigma_b,
)
from config import ChainConfig, ModelConfig
from gaussian_tools import (
    SamplerError,
    log_normal_interval_mass,
    sample_dirichlet,
    sample_inverse_gamma,
    sample_stationary_gp,
)
from model_core import CurrentStatusDataset
from monotone_link import LinkSupportError

logger = logging.getLogger(__name__)

LOG_EVERY = 100
NEGLIGIBLE_WEIGHT = 1e-10
SIMPLEX_TOLERANCE = 1e-12

SWEEP_ORDER = (
    "beta",
    "link",
    "random_effects",
    "sigma_b",
    "mixture",
    "latent_times",
    "increments",
    "alpha",
)


# ---------------------------------------------------------------------------
# Kept draws
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorDraw:
    """Parameter summary of one kept sweep (latent variables excluded)."""

    beta: np.ndarray
    xi: np.ndarray
    tau2: float
    sigma_b: np.ndarray
    alpha: np.ndarray
    pi: np.ndarray
    phi: np.ndarray
    s2: np.ndarray
    gamma: float

    @classmethod
    def from_state(cls, state: ParameterState) -> "PosteriorDraw":
        mix = state.mixture
        return cls(
            beta=state.beta.copy(), xi=state.xi.copy(), tau2=float(state.tau2),
            sigma_b=state.sigma_b.copy(), alpha=state.alpha.copy(),
            pi=mix.pi.copy(), phi=mix.phi.copy(), s2=mix.s2.copy(), gamma=float(mix.gamma),
        )

    def effect_variances(self, Z: np.ndarray) -> np.ndarray:
        """``z_j' Sigma_b z_j`` for every tooth position."""
        return np.einsum("jd,de,je->j", Z, self.sigma_b, Z)


@dataclass
class ChainOutput:
    """Thinned post-burn-in draws of one chain."""

    beta: np.ndarray
    xi: np.ndarray
    tau2: np.ndarray
    sigma_b: np.ndarray
    alpha: np.ndarray
    pi: np.ndarray
    phi: np.ndarray
    s2: np.ndarray
    gamma: np.ndarray
    pointwise_loglik: np.ndarray
    residual_mean: np.ndarray
    acceptance: Dict[str, List[float]] = field(default_factory=dict)
    runtime_seconds: float = 0.0
    seed: int = 0

    @property
    def kept_count(self) -> int:
        return self.beta.shape[0]

    def draw(self, index: int) -> PosteriorDraw:
        return PosteriorDraw(
            beta=self.beta[index], xi=self.xi[index], tau2=float(self.tau2[index]),
            sigma_b=self.sigma_b[index], alpha=self.alpha[index], pi=self.pi[index],
            phi=self.phi[index], s2=self.s2[index], gamma=float(self.gamma[index]),
        )

    def draws(self) -> List[PosteriorDraw]:
        return [self.draw(k) for k in range(self.kept_count)]

    # ---- Flat table ----
    def to_frame(self) -> pd.DataFrame:
        """One row per kept draw with flattened, named columns."""
        columns: Dict[str, np.ndarray] = {}
        for k in range(self.beta.shape[1]):
            columns[f"beta[{k + 1}]"] = self.beta[:, k]
        for k in range(self.xi.shape[1]):
            columns[f"xi[{k}]"] = self.xi[:, k]
        columns["tau2"] = self.tau2
        d = self.sigma_b.shape[1]
        for a, b in zip(*np.triu_indices(d)):
            columns[f"sigma_b[{a + 1},{b + 1}]"] = self.sigma_b[:, a, b]
        for name in ("alpha", "pi", "phi", "s2"):
            values = getattr(self, name)
            for k in range(values.shape[1]):
                columns[f"{name}[{k + 1}]"] = values[:, k]
        columns["gamma"] = self.gamma
        return pd.DataFrame(columns)

    @classmethod
    def from_frame(
        cls,
        frame: pd.DataFrame,
        pointwise_loglik: np.ndarray | None = None,
        residual_mean: np.ndarray | None = None,
        **extra,
    ) -> "ChainOutput":
        def block(prefix: str) -> np.ndarray:
            cols = [c for c in frame.columns if c.startswith(prefix + "[")]
            return frame[cols].to_numpy(dtype=float)

        upper = [c for c in frame.columns if c.startswith("sigma_b[")]
        pairs = [tuple(int(v) - 1 for v in c[len("sigma_b["):-1].split(",")) for c in upper]
        d = max(max(p) for p in pairs) + 1
        sigma_b = np.zeros((len(frame), d, d))
        for col, (a, b) in zip(upper, pairs):
            sigma_b[:, a, b] = frame[col].to_numpy(dtype=float)
            sigma_b[:, b, a] = frame[col].to_numpy(dtype=float)
        rows = len(frame)
        return cls(
            beta=block("beta"), xi=block("xi"), tau2=frame["tau2"].to_numpy(dtype=float),
            sigma_b=sigma_b, alpha=block("alpha"), pi=block("pi"), phi=block("phi"), s2=block("s2"),
            gamma=frame["gamma"].to_numpy(dtype=float),
            pointwise_loglik=np.zeros((rows, 0)) if pointwise_loglik is None else pointwise_loglik,
            residual_mean=np.zeros((0, 0)) if residual_mean is None else residual_mean,
            **extra,
        )


# ---------------------------------------------------------------------------
# Initialization and prior simulation
# ---------------------------------------------------------------------------

def initial_log_times(r: np.ndarray, log_c: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Log-midpoint of each truncation region; one-sided regions sit ``log 2`` inside the finite bound."""
    lo, hi = log_time_bounds(r, log_c, s)
    out = 0.5 * (lo + hi)
    out = np.where(np.isneginf(lo), hi - np.log(2.0), out)
    return np.where(np.isposinf(hi), lo + np.log(2.0), out)


def _base_atoms(config: ModelConfig, H: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    hyper = config.hyper
    s2 = np.atleast_1d(sample_inverse_gamma(np.full(H, hyper.a_eps), np.full(H, hyper.lambda_eps), rng))
    phi = hyper.mu_eps + np.sqrt(s2 / hyper.nu_eps) * rng.standard_normal(H)
    return phi, s2


def init_state(
    data: CurrentStatusDataset,
    config: ModelConfig,
    rng: np.random.Generator,
    ctx: SamplerContext | None = None,
) -> ParameterState:
    ctx = ctx or build_context(data, config)
    hyper = config.hyper
    n, m, K = data.n, data.m, data.K
    H = config.mixture_size

    if ctx.prior_scale is not None:
        sigma_b = ctx.prior_scale.copy()
    else:
        sigma_b = np.array([[hyper.lambda_b / (hyper.a_b - 1.0)]])

    phi, s2 = _base_atoms(config, H, rng)
    gamma = 1.0
    sticks = rng.beta(1.0, gamma, size=H - 1)
    mixture = MixtureState(
        pi=stick_weights(sticks), phi=phi, s2=s2,
        z=rng.integers(H, size=(n, m)), gamma=gamma, sticks=sticks,
    )

    alpha = np.ones(K)
    r = np.broadcast_to(alpha / alpha.sum(), (n, m, K)).copy()
    return ParameterState(
        beta_tilde=np.sqrt(hyper.sigma_beta2) * rng.standard_normal(data.p),
        xi=np.full(ctx.coefficient_count, 0.1),
        tau2=1.0,
        sigma_b=sigma_b,
        b=np.zeros((n, ctx.effect_dim)),
        mixture=mixture,
        alpha=alpha,
        log_t=initial_log_times(r, ctx.log_c, data.s),
        r=r,
    )


def _sample_link_prior(ctx: SamplerContext, rng: np.random.Generator, max_tries: int = 100_000) -> tuple[np.ndarray, float]:
    """``(xi, tau2)`` from the joint prior including the soft nonnegativity factor (by rejection)."""
    hyper = ctx.config.hyper
    if ctx.config.link_kind == "identity":
        return np.abs(hyper.omega_scale * rng.standard_normal(1)), 1.0
    q = ctx.coefficient_count
    for _ in range(max_tries):
        tau2 = sample_inverse_gamma(hyper.a_xi, hyper.b_xi, rng)
        xi = sample_stationary_gp(ctx.embedding, tau2, rng)
        log_accept = -float(np.sum(np.logaddexp(0.0, -hyper.eta * xi)))
        if np.log(rng.random()) < log_accept:
            return xi, tau2
    raise SamplerError(f"link prior rejection sampler exceeded {max_tries} tries (q={q})")


def sample_prior_state(ctx: SamplerContext, rng: np.random.Generator) -> tuple[ParameterState, np.ndarray]:
    """Joint draw of parameters, latent variables and observed states from the model."""
    config = ctx.config
    hyper = config.hyper
    data = ctx.data
    n, m, K = data.n, data.m, data.K
    H = config.mixture_size

    beta_tilde = np.sqrt(hyper.sigma_beta2) * rng.standard_normal(data.p)
    xi, tau2 = _sample_link_prior(ctx, rng)
    if ctx.prior_scale is not None:
        d = ctx.effect_dim
        sigma_b = np.atleast_2d(invwishart.rvs(df=d + 2, scale=ctx.prior_scale, random_state=rng))
    else:
        sigma_b = np.array([[sample_inverse_gamma(hyper.a_b, hyper.lambda_b, rng)]])
    chol = np.linalg.cholesky(sigma_b)
    b = rng.standard_normal((n, ctx.effect_dim)) @ chol.T

    gamma = float(rng.gamma(hyper.a_gamma, 1.0 / hyper.b_gamma))
    sticks = rng.beta(1.0, gamma, size=H - 1) if H > 1 else np.zeros(0)
    pi = stick_weights(sticks)
    phi, s2 = _base_atoms(config, H, rng)
    z = rng.choice(H, size=(n, m), p=pi / pi.sum())
    alpha = rng.gamma(hyper.a_alpha, 1.0 / hyper.lambda_alpha, size=K)

    state = ParameterState(
        beta_tilde=beta_tilde, xi=xi, tau2=tau2, sigma_b=sigma_b, b=b,
        mixture=MixtureState(pi=pi, phi=phi, s2=s2, z=z, gamma=gamma, sticks=sticks),
        alpha=alpha, log_t=np.zeros((n, m)), r=np.zeros((n, m, K)),
    )
    return state, simulate_outcomes(state, ctx, rng)


def observed_states(log_t: np.ndarray, r: np.ndarray, log_c: np.ndarray) -> np.ndarray:
    """State at inspection: number of thresholds ``T V^(k)`` already passed."""
    with np.errstate(divide="ignore"):
        log_v = np.log(partial_sums(r)[..., 1:])
    return np.sum(log_t[..., None] + log_v <= log_c[..., None], axis=-1)


def simulate_outcomes(state: ParameterState, ctx: SamplerContext, rng: np.random.Generator) -> np.ndarray:
    """Redraw ``(log T, R)`` from their generative law and return the implied states."""
    n, m, K = ctx.data.n, ctx.data.m, ctx.data.K
    mix = state.mixture
    mean = ctx.link_at(state.beta, state.xi) + tooth_effects(state, ctx) + mix.tooth_means()
    state.log_t = mean + np.sqrt(mix.tooth_variances()) * rng.standard_normal((n, m))
    state.r = sample_dirichlet(state.alpha, rng, size=n * m).reshape(n, m, K)
    return observed_states(state.log_t, state.r, ctx.log_c)


# ---------------------------------------------------------------------------
# Pointwise likelihood for WAIC
# ---------------------------------------------------------------------------

def observed_state_loglik(draw: PosteriorDraw, ctx: SamplerContext, B: int, rng: np.random.Generator) -> np.ndarray:
    """``log P(S_ij = s_ij | draw)`` for every tooth, flattened.

    The random effect and error are integrated analytically (a Gaussian
    mixture in ``log T``); the increments are averaged over *B* Dirichlet
    draws.
    """

    data = ctx.data
    g = ctx.link_at(draw.beta, draw.xi).reshape(-1)
    effect_var = np.tile(draw.effect_variances(ctx.Z), data.n)
    log_c = ctx.log_c.reshape(-1)
    s = data.s.reshape(-1)

    r = sample_dirichlet(draw.alpha, rng, size=B)
    V = np.concatenate([partial_sums(r), np.full((B, 1), np.inf)], axis=1)
    with np.errstate(divide="ignore"):
        log_v = np.log(V)
    hi = log_c[:, None] - log_v[:, s].T
    lo = log_c[:, None] - log_v[:, s + 1].T

    total = np.full(hi.shape, -np.inf)
    for h in np.flatnonzero(draw.pi > NEGLIGIBLE_WEIGHT):
        mean = (g + draw.phi[h])[:, None]
        sd = np.sqrt(effect_var + draw.s2[h])[:, None]
        total = np.logaddexp(total, np.log(draw.pi[h]) + log_normal_interval_mass((lo - mean) / sd, (hi - mean) / sd))
    peak = total.max(axis=1, keepdims=True)
    return peak[:, 0] + np.log(np.mean(np.exp(total - peak), axis=1))


# ---------------------------------------------------------------------------
# Gibbs loop
# ---------------------------------------------------------------------------

def gibbs_sweep(
    state: ParameterState,
    ctx: SamplerContext,
    rng: np.random.Generator,
    proposal_sd: np.ndarray,
    alpha_proposal: str = "log",
    sweep_index: int = 0,
) -> np.ndarray:
    """One pass over every block in :data:`SWEEP_ORDER`; returns the α acceptance flags."""
    accepted = np.zeros(state.alpha.size, dtype=bool)
    for name in SWEEP_ORDER:
        try:
            if name == "beta":
                update_beta(state, ctx, rng)
            elif name == "link":
                update_link(state, ctx, rng)
            elif name == "random_effects":
                update_random_effects(state, ctx, rng)
            elif name == "sigma_b":
                update_sigma_b(state, ctx, rng)
            elif name == "mixture":
                update_error_mixture(state, ctx, rng)
            elif name == "latent_times":
                update_latent_times(state, ctx, rng)
            elif name == "increments":
                update_increments(state, ctx, rng)
            else:
                _, accepted = update_alpha(state, ctx, rng, proposal_sd, alpha_proposal)
        except (SamplerError, LinkSupportError, np.linalg.LinAlgError) as exc:
            raise SamplerError(f"sweep {sweep_index}, block {name}: {exc}") from exc
    return accepted


def check_kept_state(state: ParameterState, ctx: SamplerContext, sweep_index: int) -> None:
    """Raise :class:`SamplerError` unless every increment vector lies on the simplex
    and every latent time lies inside its truncation region."""
    r = state.r
    negative = np.any(~(r >= 0.0), axis=-1)
    unnormalized = ~(np.abs(r.sum(axis=-1) - 1.0) <= SIMPLEX_TOLERANCE)
    off_simplex = np.count_nonzero(negative | unnormalized)
    if off_simplex:
        raise SamplerError(f"sweep {sweep_index}: {off_simplex} increment vector(s) left the simplex")
    outside = region_violations(state, ctx)
    if outside:
        raise SamplerError(f"sweep {sweep_index}: {outside} latent time(s) outside their truncation region")


def run_chain(
    data: CurrentStatusDataset,
    model_config: ModelConfig,
    chain_config: ChainConfig,
    progress: bool = True,
    ctx: SamplerContext | None = None,
) -> ChainOutput:
    started = time.perf_counter()
    ctx = ctx or build_context(data, model_config)
    rng = np.random.default_rng(chain_config.seed)
    state = init_state(data, model_config, rng, ctx=ctx)
    K = data.K
    proposal_sd = np.full(K, chain_config.alpha_proposal_sd)
    kept = chain_config.kept_count
    logger.info(
        "Chain seed=%d: %s, %d iterations (%d burn-in, thin %d) -> %d draws",
        chain_config.seed, model_config.variant or model_config.link_kind,
        chain_config.iterations, chain_config.burn_in, chain_config.thin, kept,
    )

    H = model_config.mixture_size
    q = ctx.coefficient_count
    d = ctx.effect_dim
    store = {
        "beta": np.empty((kept, data.p)), "xi": np.empty((kept, q)), "tau2": np.empty(kept),
        "sigma_b": np.empty((kept, d, d)), "alpha": np.empty((kept, K)), "pi": np.empty((kept, H)),
        "phi": np.empty((kept, H)), "s2": np.empty((kept, H)), "gamma": np.empty(kept),
    }
    pointwise = np.empty((kept, data.n * data.m))
    residual_sum = np.zeros((data.n, data.m))
    accept_count = np.zeros(K)
    accept_total = 0
    window_accept = np.zeros(K)
    slot = 0

    sweeps = tqdm(
        range(chain_config.iterations), desc=f"chain {chain_config.seed}",
        disable=not progress, miniters=LOG_EVERY, leave=False,
    )
    for it in sweeps:
        accepted = gibbs_sweep(state, ctx, rng, proposal_sd, chain_config.alpha_proposal, sweep_index=it)
        if it < chain_config.burn_in:
            proposal_sd = adapt_proposal_sd(proposal_sd, accepted, it, chain_config.target_acceptance)
        else:
            accept_count += accepted
            accept_total += 1
        window_accept += accepted
        if (it + 1) % LOG_EVERY == 0:
            logger.info(
                "Chain seed=%d sweep %d/%d: alpha acceptance %s, proposal sd %s",
                chain_config.seed, it + 1, chain_config.iterations,
                np.round(window_accept / LOG_EVERY, 3), np.round(proposal_sd, 3),
            )
            window_accept[:] = 0

        if it >= chain_config.burn_in and (it - chain_config.burn_in + 1) % chain_config.thin == 0:
            check_kept_state(state, ctx, it)
            draw = PosteriorDraw.from_state(state)
            for name in store:
                store[name][slot] = getattr(draw, name)
            pointwise[slot] = observed_state_loglik(draw, ctx, chain_config.b_lik, rng)
            residual_sum += residuals(state, ctx)
            slot += 1

    rates = (accept_count / max(accept_total, 1)).tolist()
    elapsed = time.perf_counter() - started
    logger.info("Chain seed=%d finished in %.1fs; alpha acceptance %s", chain_config.seed, elapsed, np.round(rates, 3))
    return ChainOutput(
        **store,
        pointwise_loglik=pointwise,
        residual_mean=residual_sum / max(kept, 1),
        acceptance={"alpha": rates, "alpha_proposal_sd": proposal_sd.tolist()},
        runtime_seconds=elapsed,
        seed=chain_config.seed,
    )


def run_chains(
    data: CurrentStatusDataset,
    model_config: ModelConfig,
    chain_config: ChainConfig,
    progress: bool = True,
) -> List[ChainOutput]:
    """``chain_count`` chains with seeds ``seed + index``, run on worker threads."""
    ctx = build_context(data, model_config)
    count = chain_config.chain_count
    if count == 1:
        return [run_chain(data, model_config, chain_config.for_chain(0), progress=progress, ctx=ctx)]
    workers = min(count, env.thread_cap())
    logger.info("Running %d chains on %d worker(s)", count, workers)
    return Parallel(n_jobs=workers, prefer="threads")(
        delayed(run_chain)(data, model_config, chain_config.for_chain(i), False, ctx) for i in range(count)
    )


# ---------------------------------------------------------------------------
# Convergence
# ---------------------------------------------------------------------------

RHAT_MIN_DRAWS = 10


def gelman_rubin(chains: np.ndarray | Sequence[np.ndarray]) -> np.ndarray:
    """Split-chain potential scale reduction for each trailing coordinate.

    *chains* has shape ``(chain, draw, ...)``. Zero within-chain variance
    yields ``inf``.
    """

    chains = np.asarray(chains, dtype=float)
    if chains.ndim < 2 or chains.shape[0] < 2:
        raise ValueError("gelman_rubin needs at least 2 chains")
    length = chains.shape[1]
    if length < RHAT_MIN_DRAWS:
        raise ValueError(f"gelman_rubin needs at least {RHAT_MIN_DRAWS} draws per chain, got {length}")
    half = length // 2
    split = np.concatenate([chains[:, :half], chains[:, length - half:]], axis=0)
    W = split.var(axis=1, ddof=1).mean(axis=0)
    B = half * split.mean(axis=1).var(axis=0, ddof=1)
    var_hat = (half - 1) / half * W + B / half
    with np.errstate(divide="ignore", invalid="ignore"):
        rhat = np.sqrt(var_hat / W)
    return np.where(W > 0, rhat, np.inf)


def gelman_rubin_table(outputs: Sequence[ChainOutput]) -> pd.Series:
    """Split-R-hat for every flattened scalar column of the draws table."""
    frames = [out.to_frame() for out in outputs]
    lengths = {len(f) for f in frames}
    if len(lengths) != 1:
        raise ValueError("chains have different kept lengths")
    stacked = np.stack([f.to_numpy(dtype=float) for f in frames])
    return pd.Series(gelman_rubin(stacked), index=frames[0].columns, name="rhat")
