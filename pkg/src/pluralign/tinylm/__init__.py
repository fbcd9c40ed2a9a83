"""Tiny causal transformer, tokenizer and checkpoint I/O."""
from __future__ import annotations

import numpy as np
import torch

from .. import checkpoint
from ..errors import CheckpointError, InvalidArgumentError
from .model import (
    InterventionSpec,
    ModelConfig,
    PositionPolicy,
    ResidualCapture,
    TinyLM,
    final_logits_batch,
    final_residuals_batch,
    forward,
    forward_with_intervention,
    init_model,
    mean_cross_entropy,
    next_token_distribution,
    parameters_equal,
    train_lm,
)
from .tokenizer import Tokenizer

__all__ = [
    "InterventionSpec",
    "ModelConfig",
    "PositionPolicy",
    "ResidualCapture",
    "TinyLM",
    "Tokenizer",
    "final_logits_batch",
    "final_residuals_batch",
    "forward",
    "forward_with_intervention",
    "init_model",
    "load_model",
    "mean_cross_entropy",
    "next_token_distribution",
    "parameters_equal",
    "save_model",
    "train_lm",
]


def save_model(model: TinyLM, path) -> str:
    """Persist weights in state_dict order; returns the file's sha256."""
    header = {"kind": "tinylm", "config": model.config.to_dict(), "vocab": model.vocab}
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    return checkpoint.write(path, checkpoint.LM_MAGIC, header, tensors)


def load_model(path) -> TinyLM:
    header, tensors = checkpoint.read(path, checkpoint.LM_MAGIC)
    try:
        config = ModelConfig(**header["config"])
        model = TinyLM(config)
    except (KeyError, TypeError, InvalidArgumentError) as exc:
        raise CheckpointError(f"bad model header: {exc}") from exc
    expected = list(model.state_dict().keys())
    if list(tensors) != expected:
        raise CheckpointError("tensor names/order do not match the model layout")
    state = {k: torch.from_numpy(np.array(v)) for k, v in tensors.items()}
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(str(exc)) from exc
    model.vocab = header.get("vocab")
    model.eval()
    return model
