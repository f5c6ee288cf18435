"""Straight-through quantization of token distributions into text embeddings.

Forward, each distribution collapses to the one-hot of its argmax token and
is multiplied with the text embedding table, so the result is bit-identical
to a hard embedding lookup of the transcript. Backward, the one-hot is
bypassed and gradients follow a temperature-sharpened softmax of the logits,
keeping the whole speech branch trainable from the contrastive loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, softmax

__all__ = ["QuantizedTokens", "quantize_st", "map_to_text_space"]


@dataclass
class QuantizedTokens:
    values: Tensor              # (n, vocab); forward value is exactly one-hot rows
    hard_indices: np.ndarray    # (n,)
    gamma: float


def quantize_st(logits: Tensor, gamma: float = 0.1, st_gradients: bool = True) -> QuantizedTokens:
    """Collapse each row to its argmax one-hot while keeping a soft gradient path.

    ``st_gradients=False`` is an ablation switch: the output becomes a pure
    constant and no gradient reaches the logits from downstream.
    """
    if gamma <= 0:
        raise ConfigError(f"temperature must be positive, got {gamma}")
    if logits.data.ndim != 2:
        raise ShapeError(f"expected 2-D logits, got shape {logits.shape}")
    hard = logits.data.argmax(axis=1)
    onehot = np.zeros_like(logits.data)
    onehot[np.arange(logits.shape[0]), hard] = 1.0
    if st_gradients:
        soft = softmax(logits * (1.0 / gamma), axis=1)
        # grouping matters: (soft - soft.detach()) is exactly zero forward,
        # so the output value stays the exact one-hot
        values = Tensor(onehot) + (soft - soft.detach())
    else:
        values = Tensor(onehot)
    return QuantizedTokens(values=values, hard_indices=hard, gamma=gamma)


def map_to_text_space(quantized: QuantizedTokens | Tensor, table: Tensor) -> Tensor:
    """Multiply quantized rows with the text embedding table.

    With exact one-hot forward values this is a bit-exact table lookup;
    gradients reach both the quantized rows and the table.
    """
    values = quantized.values if isinstance(quantized, QuantizedTokens) else quantized
    if values.shape[1] != table.shape[0]:
        raise ShapeError(
            f"vocab mismatch: quantized rows have {values.shape[1]} entries, "
            f"table has {table.shape[0]} rows")
    return values @ table
