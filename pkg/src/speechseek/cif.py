"""Integrate-and-fire alignment from frames to token slots.

A weight in [0, 1] is predicted per frame; frames are accumulated left to
right and a token embedding is emitted each time the running weight reaches
the threshold, splitting the boundary frame's weight so every emitted token
integrates exactly one threshold's worth. The boundary frame's remainder
carries into the next accumulation.

Training scales the weights so they sum to the target token count, which
makes the fired length match the transcript exactly; inference fires on the
raw weights and rounds the trailing residue (fired if at least half a
threshold, dropped otherwise).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateWeightsError, ShapeError
from .tensor import Module, Parameter, Tensor, concat

__all__ = ["WeightPredictor", "FireResult", "scale_weights", "fire", "mae_length_loss"]


class WeightPredictor(Module):
    """Per-frame information weights: kernel-3 temporal conv, then linear, then sigmoid."""

    def __init__(self, dim: int, rng: np.random.Generator, dtype=np.float64):
        scale = 1.0 / np.sqrt(3 * dim)
        self.conv_w = Parameter(rng.uniform(-scale, scale, size=(3, dim, dim)).astype(dtype))
        self.conv_b = Parameter(np.zeros(dim, dtype=dtype))
        self.lin_w = Parameter(rng.uniform(-scale, scale, size=(dim, 1)).astype(dtype))
        self.lin_b = Parameter(np.zeros(1, dtype=dtype))

    def __call__(self, h: Tensor) -> Tensor:
        if h.data.ndim != 2:
            raise ShapeError(f"weight predictor expects 2-D input, got {h.shape}")
        t = h.shape[0]
        zero = Tensor(np.zeros((1, h.shape[1]), dtype=h.dtype))
        hp = concat([zero, h, zero], axis=0)
        mixed = (hp[0:t] @ self.conv_w[0] + hp[1:t + 1] @ self.conv_w[1]
                 + hp[2:t + 2] @ self.conv_w[2] + self.conv_b)
        logits = mixed @ self.lin_w + self.lin_b
        return logits.reshape(t).sigmoid()


@dataclass
class FireResult:
    """Fired token embeddings plus the frame attribution that produced them.

    ``allocations[k]`` lists ``(frame_index, weight)`` for token k;
    ``complete[k]`` is False only for a tail token emitted by the residue
    rounding rule, whose weights sum to less than the threshold.
    """

    embeddings: Tensor
    allocations: list[list[tuple[int, float]]]
    complete: list[bool]

    @property
    def fired_count(self) -> int:
        return len(self.allocations)


def scale_weights(alpha: Tensor, n_target: int) -> Tensor:
    """Rescale weights so they sum to ``n_target``. Training-time only."""
    if n_target < 1:
        raise ConfigError("n_target must be at least 1")
    total = float(alpha.data.sum())
    if total <= 0.0:
        raise DegenerateWeightsError("weights sum to zero; cannot scale")
    return alpha * (float(n_target) / alpha.sum())


def mae_length_loss(alpha: Tensor, n_target: int) -> Tensor:
    """Absolute difference between the unscaled weight mass and the target length."""
    return (alpha.sum() - float(n_target)).abs()


def fire(h: Tensor, alpha: Tensor, threshold: float = 1.0, tail: str = "round") -> FireResult:
    """Accumulate weighted frames left to right and emit on threshold crossings.

    Parameters
    ----------
    h : Tensor, shape (t, d)
        Frame representations.
    alpha : Tensor, shape (t,)
        Per-frame weights in [0, 1].
    threshold : float
        Weight mass integrated per emitted token.
    tail : {"round", "drop"}
        "round" fires a final token when the trailing residue is at least
        half the threshold; "drop" always discards the residue.

    Differentiable with respect to ``h`` and ``alpha`` wherever no partial
    sum lies exactly on a threshold boundary.
    """
    if threshold <= 0:
        raise ConfigError("threshold must be positive")
    if tail not in ("round", "drop"):
        raise ConfigError(f"unknown tail mode {tail!r}")
    if h.data.ndim != 2 or alpha.data.ndim != 1 or h.shape[0] != alpha.shape[0]:
        raise ShapeError(f"incompatible shapes h={h.shape}, alpha={alpha.shape}")

    t, d = h.shape
    # Current accumulation: contiguous frame span [seg_start, i], where the
    # first frame may contribute only a carried remainder and the boundary
    # frame only a partial weight. Node-side bookkeeping mirrors the floats.
    tokens: list[Tensor] = []
    allocations: list[list[tuple[int, float]]] = []
    complete: list[bool] = []

    seg_start = 0
    first_w: Tensor | None = None      # weight node for the segment's first frame
    acc_node: Tensor | None = None     # accumulated weight of the open segment
    acc_val = 0.0

    def emit(end_frame: int, last_w: Tensor, last_val: float, is_complete: bool):
        # weight vector over frames seg_start..end_frame inclusive
        parts = []
        alloc = []
        if end_frame > seg_start:
            head = first_w if first_w is not None else alpha[seg_start:seg_start + 1]
            parts.append(head)
            alloc.append((seg_start, float(head.data[0])))
            if end_frame - seg_start > 1:
                mid = alpha[seg_start + 1:end_frame]
                parts.append(mid)
                alloc.extend((seg_start + 1 + j, float(v)) for j, v in enumerate(mid.data))
        parts.append(last_w)
        alloc.append((end_frame, last_val))
        weights = parts[0] if len(parts) == 1 else concat(parts, axis=0)
        span = h[seg_start:end_frame + 1]
        tokens.append((weights.reshape(1, -1) @ span).reshape(d))
        allocations.append(alloc)
        complete.append(is_complete)

    i = 0
    while i < t:
        w_node = first_w if (first_w is not None and i == seg_start) else alpha[i:i + 1]
        w_val = float(w_node.data[0])
        if acc_val + w_val < threshold:
            acc_node = w_node.sum() if acc_node is None else acc_node + w_node.sum()
            acc_val += w_val
            if first_w is None and i == seg_start:
                first_w = w_node
            i += 1
            continue
        # threshold reached inside frame i: split its weight
        before = acc_node if acc_node is not None else Tensor(np.zeros((), dtype=alpha.dtype))
        fill = (Tensor(np.asarray(threshold, dtype=alpha.dtype)) - before).reshape(1)
        fill_val = threshold - acc_val
        emit(i, fill, fill_val, True)
        remainder = w_node - fill
        rem_val = w_val - fill_val
        seg_start = i
        first_w = remainder
        acc_node = None
        acc_val = 0.0
        if rem_val < threshold:
            # nothing more fires inside this frame; fold the remainder in
            acc_node = remainder.sum()
            acc_val = rem_val
            i += 1
        # else: loop continues on frame i with the remainder as its weight

    if acc_val > 0 and tail == "round" and acc_val >= threshold / 2.0:
        # the open segment spans seg_start..t-1
        last = first_w if (t - 1 == seg_start and first_w is not None) else alpha[t - 1:t]
        emit(t - 1, last, float(last.data[0]), False)

    if tokens:
        embeddings = concat([e.reshape(1, d) for e in tokens], axis=0)
    else:
        embeddings = Tensor(np.zeros((0, d), dtype=h.dtype))
    return FireResult(embeddings=embeddings, allocations=allocations, complete=complete)
