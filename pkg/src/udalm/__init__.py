"""Unsupervised domain adaptation by mixed classification + masked-language-model
fine-tuning of a small from-scratch transformer, with source-only,
domain-pretraining and domain-adversarial baselines and divergence diagnostics."""

__version__ = "0.1.0"
