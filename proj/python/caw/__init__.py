"""Confidence-aware adversarial fine-tuning for zero-shot dual encoders.

Thin Python surface over the C++ core: synthetic data, the dual-encoder
model, l-inf attacks, the combined training objective, the fine-tuning
loop, and the evaluation/ablation harness.
"""

from ._core import (
    ConfigError,
    Dataset,
    DimensionError,
    DomainError,
    IoError,
    Model,
    NumericError,
    __version__,
    attack,
    clean_pretrain,
    cross_entropy,
    evaluate,
    fit,
    generate_dataset,
    kl_divergence,
    make_model,
    model_for_dataset,
    project_linf,
    run_ablation,
    run_gradcheck,
    softmax,
    total_loss,
    transfer_dataset,
)

__all__ = [
    "ConfigError",
    "Dataset",
    "DimensionError",
    "DomainError",
    "IoError",
    "Model",
    "NumericError",
    "__version__",
    "attack",
    "clean_pretrain",
    "cross_entropy",
    "evaluate",
    "fit",
    "generate_dataset",
    "kl_divergence",
    "make_model",
    "model_for_dataset",
    "project_linf",
    "run_ablation",
    "run_gradcheck",
    "softmax",
    "total_loss",
    "transfer_dataset",
]
