"""Multi-scenario modeling with a shared heavy model, per-scenario fine-tuning
and FLOPs-budgeted searched light models."""

__version__ = "0.1.0"
