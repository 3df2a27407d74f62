"""Single-step adversarial training, catastrophic overfitting and gradient
alignment diagnostics on a small CPU autodiff engine."""

__version__ = "0.1.0"
