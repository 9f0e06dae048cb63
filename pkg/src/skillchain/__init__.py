"""Adversarial skill chaining with terminal-state regularization on a toy
2-D chained-assembly task, plus baselines and analysis tooling."""

__version__ = "0.1.0"
