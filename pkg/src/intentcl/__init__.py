"""Class-incremental intent classification: rehearsal memory, dual knowledge
distillation over a TCN audio encoder, and gradient-projection baselines."""

__version__ = "0.1.0"
