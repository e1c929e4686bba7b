"""Deep-RL curtailment control for long-term voltage stability on QSS grid models."""

__version__ = "0.1.0"
