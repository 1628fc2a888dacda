"""Channel-spatial attention vision transformer with self-distillation
pretraining, on a small numpy autodiff engine."""

__version__ = "0.1.0"
