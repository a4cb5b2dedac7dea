"""Verification-gated, budget-aware skill orchestration for grounding
object affordances in simulated scenes."""

from .config import RunConfig, load_config
from .geometry import Box, Grid, KeyPoint, Mask
from .memory import MemoryStore
from .runtime import run_batch, run_episode, run_fixed_chain
from .scenario import Scene, build_benchmark, evaluate, generate_scene
from .skills import SkillRegistry, default_registry
from .verifier import VerifierConfig

__version__ = "0.1.0"

__all__ = [
    "Box", "Grid", "KeyPoint", "Mask", "MemoryStore", "RunConfig", "Scene",
    "SkillRegistry", "VerifierConfig", "build_benchmark", "default_registry",
    "evaluate", "generate_scene", "load_config", "run_batch", "run_episode",
    "run_fixed_chain", "__version__",
]
