"""PPO with mode-dependent layers, the two-phase rectification schedule, and mismatch diagnostics."""

__version__ = "0.1.0"
