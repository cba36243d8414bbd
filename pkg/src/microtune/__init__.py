"""microtune: a desk-scale multi-stage fine-tuning pipeline for a miniature
decoder-only language model, built from scratch on a float64 autodiff engine."""

__version__ = "0.1.0"
