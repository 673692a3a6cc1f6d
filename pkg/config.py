"""Centralised model configuration.

Exposes the registry of model variants, the frozen hyperparameter / model /
chain settings, and helpers to resolve a variant label and to read a TOML or
JSON config file into those settings.
"""
from __future__ import annotations

import json
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping

from dotenv import load_dotenv

# Load variables from a .env file (if present) – same behaviour as env.py
load_dotenv(override=True)

LINK_KINDS = ("monotone_gp", "bernstein", "identity")
ERROR_KINDS = ("dp_mixture", "gaussian")
EFFECT_KINDS = ("spatial", "subject_level")
ALPHA_PROPOSALS = ("log", "natural")

# ---------------------------------------------------------------------------
# Model variant registry
# ---------------------------------------------------------------------------

# Each entry maps a variant label to the three structural choices. 'H' is the
# mixture truncation level used when the variant does not override it.
MODEL_VARIANTS: List[Dict[str, Any]] = [
    {"model": "s-gp-dp", "link_kind": "monotone_gp", "error_kind": "dp_mixture", "effect_kind": "spatial",
     "description": "Spatial effects, monotone GP link, DP mixture errors"},
    {"model": "s-bp-dp", "link_kind": "bernstein", "error_kind": "dp_mixture", "effect_kind": "spatial",
     "description": "Spatial effects, Bernstein link, DP mixture errors"},
    {"model": "s-gp-n", "link_kind": "monotone_gp", "error_kind": "gaussian", "effect_kind": "spatial",
     "description": "Spatial effects, monotone GP link, Gaussian errors"},
    {"model": "s-bp-n", "link_kind": "bernstein", "error_kind": "gaussian", "effect_kind": "spatial",
     "description": "Spatial effects, Bernstein link, Gaussian errors"},
    {"model": "s-lin-dp", "link_kind": "identity", "error_kind": "dp_mixture", "effect_kind": "spatial",
     "description": "Spatial effects, linear index, DP mixture errors"},
    {"model": "ns-gp-dp", "link_kind": "monotone_gp", "error_kind": "dp_mixture", "effect_kind": "subject_level",
     "description": "Subject-level effects, monotone GP link, DP mixture errors"},
]

DEFAULT_VARIANT = "s-gp-dp"
STRUCTURAL_FIELDS = ("link_kind", "error_kind", "effect_kind")


def _ig_from_moments(mean: float, variance: float) -> tuple[float, float]:
    """Inverse-gamma (shape, scale) with the given mean and variance."""
    shape = 2.0 + mean * mean / variance
    return shape, mean * (shape - 1.0)


def _gamma_from_moments(mean: float, variance: float) -> tuple[float, float]:
    """Gamma (shape, rate) with the given mean and variance."""
    return mean * mean / variance, mean / variance


_A_EPS, _LAMBDA_EPS = _ig_from_moments(0.1, 10.0)
_A_GAMMA, _B_GAMMA = _gamma_from_moments(1.0, 10.0)
_A_ALPHA, _LAMBDA_ALPHA = _gamma_from_moments(1.0, 100.0)


@dataclass(frozen=True)
class Hyperparameters:
    """Prior settings shared by every variant.

    ``lengthscale=None`` means "solve for the Matérn length-scale whose
    correlation at the largest knot separation is 0.05".
    """

    sigma_beta2: float = 100.0
    nu: float = 0.75
    lengthscale: float | None = None
    eta: float = 100.0
    a_xi: float = 0.01
    b_xi: float = 0.01
    rho: float = 0.9
    mu_eps: float = 0.0
    nu_eps: float = 1.0
    a_eps: float = _A_EPS
    lambda_eps: float = _LAMBDA_EPS
    a_gamma: float = _A_GAMMA
    b_gamma: float = _B_GAMMA
    a_alpha: float = _A_ALPHA
    lambda_alpha: float = _LAMBDA_ALPHA
    a_b: float = _A_EPS
    lambda_b: float = _LAMBDA_EPS
    omega_scale: float = 10.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name in {"mu_eps", "lengthscale"}:
                continue
            if not (math.isfinite(value) and value > 0):
                raise ValueError(f"Hyperparameter '{f.name}' must be a positive finite number, got {value}")
        if self.lengthscale is not None and not self.lengthscale > 0:
            raise ValueError(f"Hyperparameter 'lengthscale' must be > 0, got {self.lengthscale}")
        if not 0.0 < self.rho < 1.0:
            raise ValueError(f"Hyperparameter 'rho' must lie in (0, 1), got {self.rho}")
        if not math.isfinite(self.mu_eps):
            raise ValueError("Hyperparameter 'mu_eps' must be finite")


@dataclass(frozen=True)
class ModelConfig:
    """Structural choices plus priors for one fit."""

    link_kind: str = "monotone_gp"
    error_kind: str = "dp_mixture"
    effect_kind: str = "spatial"
    L: int = 30
    H: int = 10
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    variant: str | None = None

    def __post_init__(self):
        if self.link_kind not in LINK_KINDS:
            raise ValueError(f"Unknown link_kind '{self.link_kind}'. Available: {', '.join(LINK_KINDS)}")
        if self.error_kind not in ERROR_KINDS:
            raise ValueError(f"Unknown error_kind '{self.error_kind}'. Available: {', '.join(ERROR_KINDS)}")
        if self.effect_kind not in EFFECT_KINDS:
            raise ValueError(f"Unknown effect_kind '{self.effect_kind}'. Available: {', '.join(EFFECT_KINDS)}")
        if self.L < 2:
            raise ValueError(f"L must be >= 2, got {self.L}")
        if self.H < 1:
            raise ValueError(f"H must be >= 1, got {self.H}")

    @property
    def mixture_size(self) -> int:
        """Truncation level actually sampled (Gaussian errors collapse to one atom)."""
        return 1 if self.error_kind == "gaussian" else self.H

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ChainConfig:
    """Run-length, seeding, and α-proposal settings for the Gibbs sampler."""

    iterations: int = 7000
    burn_in: int = 5000
    thin: int = 1
    seed: int = 0
    chain_count: int = 1
    b_lik: int = 200
    alpha_proposal: str = "log"
    alpha_proposal_sd: float = 0.1
    target_acceptance: float = 0.3

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError(f"burn_in must satisfy 0 <= burn_in < iterations, got {self.burn_in}")
        if self.thin < 1:
            raise ValueError(f"thin must be >= 1, got {self.thin}")
        if self.chain_count < 1:
            raise ValueError(f"chain_count must be >= 1, got {self.chain_count}")
        if self.b_lik < 1:
            raise ValueError(f"b_lik must be >= 1, got {self.b_lik}")
        if self.alpha_proposal not in ALPHA_PROPOSALS:
            raise ValueError(f"alpha_proposal must be one of {ALPHA_PROPOSALS}, got '{self.alpha_proposal}'")
        if not self.alpha_proposal_sd > 0:
            raise ValueError("alpha_proposal_sd must be > 0")
        if not 0.0 < self.target_acceptance < 1.0:
            raise ValueError("target_acceptance must lie in (0, 1)")

    @property
    def kept_count(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def for_chain(self, index: int) -> "ChainConfig":
        """Settings for chain *index*: same everything, seed offset by the index."""
        return replace(self, seed=self.seed + index, chain_count=1)


# ---------------------------------------------------------------------------
# Public helpers
# ---------------------------------------------------------------------------

def get_variant(name: str) -> Dict[str, Any]:
    entry = next((v for v in MODEL_VARIANTS if v["model"] == name), None)
    if entry is None:
        available = ", ".join(v["model"] for v in MODEL_VARIANTS)
        raise ValueError(f"Unknown model variant '{name}'. Available: {available}")
    return entry


def _match_variant(variant: str | None, structural: Mapping[str, str]) -> Dict[str, Any]:
    if variant is not None or not structural:
        entry = get_variant(variant or DEFAULT_VARIANT)
        conflicts = [f"{k}={v!r} (variant has {entry[k]!r})" for k, v in structural.items() if entry[k] != v]
        if conflicts:
            raise ValueError(f"Model variant '{entry['model']}' conflicts with {', '.join(conflicts)}")
        return entry
    entry = next((v for v in MODEL_VARIANTS if all(v[k] == value for k, value in structural.items())), None)
    if entry is None:
        wanted = ", ".join(f"{k}={v}" for k, v in structural.items())
        raise ValueError(f"No model variant with {wanted}. Available: {', '.join(v['model'] for v in MODEL_VARIANTS)}")
    return entry


def get_model_config(variant: str | None = None, overrides: Mapping[str, Any] | None = None) -> ModelConfig:
    """Resolve a variant label (default ``s-gp-dp``) into a :class:`ModelConfig`.

    *overrides* may hold ``L``, ``H``, any :class:`Hyperparameters` field and
    the structural fields ``link_kind``, ``error_kind`` and ``effect_kind``.
    Without a label the structural fields pick the first registered variant
    they match; with a label they must agree with it. Unknown keys raise
    ``ValueError``.
    """

    overrides = dict(overrides or {})
    structural = {k: overrides.pop(k) for k in STRUCTURAL_FIELDS if k in overrides}
    entry = _match_variant(variant, structural)

    hyper_names = {f.name for f in fields(Hyperparameters)}
    hyper_updates = {k: overrides.pop(k) for k in list(overrides) if k in hyper_names}
    nested = overrides.pop("hyper", None) or {}
    unknown_nested = set(nested) - hyper_names
    if unknown_nested:
        raise ValueError(f"Unknown hyperparameter(s): {', '.join(sorted(unknown_nested))}")
    hyper_updates.update(nested)

    allowed = {"L", "H"}
    unknown = set(overrides) - allowed
    if unknown:
        raise ValueError(f"Unknown model setting(s): {', '.join(sorted(unknown))}")

    return ModelConfig(
        link_kind=entry["link_kind"],
        error_kind=entry["error_kind"],
        effect_kind=entry["effect_kind"],
        L=int(overrides.get("L", 30)),
        H=int(overrides.get("H", 10)),
        hyper=Hyperparameters(**hyper_updates),
        variant=entry["model"],
    )


def load_config_file(path: str | Path) -> tuple[str | None, Dict[str, Any], Dict[str, Any]]:
    """Read a TOML or JSON document mirroring the config field names.

    Returns ``(model label or None, model overrides, chain settings)``.
    """

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    raw = path.read_bytes()
    if path.suffix.lower() == ".json":
        doc = json.loads(raw.decode("utf-8"))
    elif path.suffix.lower() == ".toml":
        doc = tomllib.loads(raw.decode("utf-8"))
    else:
        raise ValueError(f"Config file must be .toml or .json, got '{path.suffix}'")

    doc = dict(doc)
    model = doc.pop("model", None)
    label = doc.pop("variant", None)
    if model is not None and label is not None and model != label:
        raise ValueError(f"Config file names two variants: model='{model}', variant='{label}'")
    model = model or label
    chain = dict(doc.pop("chain", {}) or {})
    chain_names = {f.name for f in fields(ChainConfig)}
    unknown_chain = set(chain) - chain_names
    if unknown_chain:
        raise ValueError(f"Unknown chain setting(s): {', '.join(sorted(unknown_chain))}")
    return model, doc, chain
