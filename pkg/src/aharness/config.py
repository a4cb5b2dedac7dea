"""Run configuration: defaults, JSON config files, environment overrides.

Precedence: explicit flags > AHARNESS_* environment variables > config file
> built-in defaults.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from .router import RouterConfig
from .verifier import DEFAULT_BASE_WEIGHTS, VerifierConfig

MODES = ("adaptive", "det_seg", "full_chain")


@dataclass
class RunConfig:
    # verifier
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.2
    delta: float = 0.8
    omega_floor: float = 0.5
    tau_zeta: float = 0.7
    tau_mu: float = 0.6
    sigmoid_slope: float = 10.0
    sigmoid_center: float = 0.5
    corroboration_iou: float = 0.5
    stability_floor: float = 0.7
    base_weights: dict = field(default_factory=lambda: dict(DEFAULT_BASE_WEIGHTS))
    # router
    lambda_omega: float = 1.0
    lambda_zeta: float = 0.8
    lambda_mu: float = 0.6
    eta_off: float = 0.5
    tie_gap: float = 0.10
    repeat_limit: int = 2
    similarity_floor: float = 0.6
    # budgets and memory
    budget: float = 3.0
    top_n: int = 2
    cs_capacity: int = 1000
    tt_capacity: int = 80
    # noise reliabilities
    p_det: float = 0.8
    p_seg: float = 0.9
    p_web: float = 0.8
    p_dream: float = 0.85
    zoom_relief: float = 0.6
    noise_difficulty: float = 1.0
    # run plumbing
    seed: int = 0
    orderings: int = 1
    mode: str = "adaptive"
    budget_truncation: bool = True
    max_steps: int = 32
    verifier_enabled: bool = True
    memory_enabled: bool = True
    cost_weights: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.budget < 0 or self.top_n < 1 or self.max_steps < 1:
            raise ValueError("budget must be >= 0, top_n and max_steps >= 1")
        # constructing the sub-configs validates their invariants
        self.verifier_config()
        self.router_config()

    def verifier_config(self) -> VerifierConfig:
        return VerifierConfig(
            alpha=self.alpha, beta=self.beta, gamma=self.gamma,
            delta=self.delta, omega_floor=self.omega_floor,
            tau_zeta=self.tau_zeta, tau_mu=self.tau_mu,
            sigmoid_slope=self.sigmoid_slope,
            sigmoid_center=self.sigmoid_center,
            base_weights=dict(self.base_weights),
            corroboration_iou=self.corroboration_iou,
            stability_floor=self.stability_floor)

    def router_config(self) -> RouterConfig:
        return RouterConfig(
            lambda_omega=self.lambda_omega, lambda_zeta=self.lambda_zeta,
            lambda_mu=self.lambda_mu, eta_off=self.eta_off,
            tie_gap=self.tie_gap, repeat_limit=self.repeat_limit,
            similarity_floor=self.similarity_floor)

    def noise_model(self):
        from .skills import NoiseModel
        return NoiseModel(seed=self.seed, difficulty=self.noise_difficulty,
                          p_det=self.p_det, p_seg=self.p_seg,
                          p_web=self.p_web, p_dream=self.p_dream,
                          zoom_relief=self.zoom_relief)

    def to_json(self) -> dict:
        return asdict(self)

    def replaced(self, **kwargs) -> "RunConfig":
        d = asdict(self)
        d.update(kwargs)
        return RunConfig(**d)


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    t = _FIELD_TYPES.get(name)
    if t in ("bool",):
        return raw.lower() in ("1", "true", "yes", "on")
    if t in ("int",):
        return int(raw)
    if t in ("float",):
        return float(raw)
    if t in ("dict",):
        return json.loads(raw)
    return raw


def load_config(path: str | None = None, overrides: dict | None = None,
                env: dict | None = None) -> RunConfig:
    """Merge defaults, config file, environment, and explicit overrides."""
    merged: dict = {}
    if path is not None:
        with open(path) as f:
            data = json.load(f)
        unknown = set(data) - set(_FIELD_TYPES)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        merged.update(data)
    env = os.environ if env is None else env
    for name in _FIELD_TYPES:
        key = "AHARNESS_" + name.upper()
        if key in env:
            merged[name] = _coerce(name, env[key])
    for k, v in (overrides or {}).items():
        if v is not None:
            merged[k] = v
    return RunConfig(**merged)
