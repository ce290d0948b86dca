"""Federated deep Q-learning for selecting moving-target-defense techniques."""

from pathlib import Path

__version__ = "0.1.0"

DEFAULT_CONFIG = Path(__file__).with_name("configs") / "default.yaml"
