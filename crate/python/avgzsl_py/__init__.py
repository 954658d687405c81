"""Audio-visual generalized zero-shot learning toolkit (Rust core).

Configs are JSON documents with the same schema the CLI consumes; training
reports come back as JSON strings.
"""

from avgzsl_py._native import auc, harmonic_mean, make_dataset, run_pipeline

__all__ = ["auc", "harmonic_mean", "make_dataset", "run_pipeline"]
