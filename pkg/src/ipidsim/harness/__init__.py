"""Scenario configuration, seeded runs and batch statistics."""

from .config import ConfigError, ScenarioConfig, ScenarioKind, load_config, parse_config
from .scenario import ScenarioResult, build_world, run_scenario

__all__ = [
    "ConfigError",
    "ScenarioConfig",
    "ScenarioKind",
    "ScenarioResult",
    "build_world",
    "load_config",
    "parse_config",
    "run_scenario",
]
