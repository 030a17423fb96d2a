"""Hierarchical goal-conditioned offline RL (value-derived subgoal
representations) on deterministic gridworlds, with exact oracles and a
closed-form analysis of policy error under value noise."""

from .envs import Chain, GoalEnv, Grid, load_map, parse_map

__version__ = "0.1.0"

__all__ = ["Chain", "GoalEnv", "Grid", "load_map", "parse_map", "__version__"]
