"""Non-autoregressive decoding, the two-pass error sampler, and ASR losses.

The decoder attends from token-slot queries over the frame memory, all
positions in parallel (no causal mask), then projects to vocabulary logits.
During training a first gradient-free pass transcribes; positions the
transcript got wrong may have their acoustic embeddings replaced by the
correct text embeddings before the gradient-bearing second pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (ConfigError, DegenerateTargetError, MetricError, ShapeError)
from .encoder import DecoderBlock, LayerNorm, glorot, positional_encoding
from .tensor import Module, Parameter, Tensor, log_softmax, softmax, stack

__all__ = [
    "Decoder",
    "transcribe",
    "token_embeddings_from_output_layer",
    "SamplerMix",
    "sampler_mix",
    "ce_loss",
    "mwer_loss",
    "expected_candidate_distance",
    "sample_candidates",
    "edit_distance",
    "wer",
]


class Decoder(Module):
    """Cross-attention decoder from token-slot queries over frame memory."""

    def __init__(self, dim: int, vocab_size: int, n_layers: int, n_heads: int, ff_dim: int,
                 rng: np.random.Generator, dtype=np.float64, use_posenc: bool = True):
        self.dim = dim
        self.vocab_size = vocab_size
        self.use_posenc = use_posenc
        out_scale = 1.0 / np.sqrt(3.0 * n_layers) if n_layers else 1.0
        self.blocks = [DecoderBlock(dim, n_heads, ff_dim, rng, dtype, out_scale)
                       for _ in range(n_layers)]
        self.ln_out = LayerNorm(dim, dtype)
        self.out_w = Parameter(glorot(rng, dim, vocab_size, dtype))
        self.out_b = Parameter(np.zeros(vocab_size, dtype=dtype))
        self.dtype = np.dtype(dtype)

    def __call__(self, memory: Tensor, queries: Tensor) -> Tensor:
        """Return logits of shape (n_queries, vocab)."""
        if queries.data.ndim != 2 or queries.shape[0] < 1:
            raise ShapeError(f"decoder needs at least one query row, got shape {queries.shape}")
        if queries.shape[1] != self.dim or memory.shape[1] != self.dim:
            raise ShapeError(
                f"decoder dim {self.dim} does not match queries {queries.shape} / memory {memory.shape}")
        x = queries
        if self.use_posenc:
            x = x + positional_encoding(x.shape[0], self.dim, self.dtype)
        for block in self.blocks:
            x = block(x, memory)
        return self.ln_out(x) @ self.out_w + self.out_b


def transcribe(logits: Tensor | np.ndarray) -> np.ndarray:
    """Per-row argmax token ids; ties break to the lowest id."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    if data.ndim != 2:
        raise ShapeError(f"expected 2-D logits, got shape {data.shape}")
    return data.argmax(axis=1)


def token_embeddings_from_output_layer(tokens, out_w: Tensor) -> Tensor:
    """Text embeddings read off the output projection.

    The projection maps model dim to vocabulary, so each token's embedding is
    the corresponding *column* of the weight matrix.
    """
    ids = np.asarray(tokens, dtype=np.intp)
    if ids.size and (ids.min() < 0 or ids.max() >= out_w.shape[1]):
        raise ShapeError(f"token id out of range for vocab {out_w.shape[1]}")
    return out_w.T.take(ids)


@dataclass
class SamplerMix:
    mixed: Tensor
    replaced_positions: np.ndarray
    error_positions: np.ndarray
    lam: float


def sampler_mix(e_acoustic: Tensor, e_text: Tensor, y_asr, y_con, lam: float,
                rng: np.random.Generator, pad_id: int | None = None) -> SamplerMix:
    """Replace a sampled share of erroneous positions with correct text embeddings.

    Positions where the first-pass transcript disagrees with the target (pad
    positions excluded) are erroneous; ``ceil(lam * n_errors)`` of them are
    drawn uniformly without replacement and take rows of ``e_text``, all
    other rows keep ``e_acoustic``.
    """
    if not (0.0 < lam < 1.0):
        raise ConfigError(f"mixing ratio must be in (0, 1), got {lam}")
    y_asr = np.asarray(y_asr)
    y_con = np.asarray(y_con)
    n = e_acoustic.shape[0]
    if not (len(y_asr) == len(y_con) == n == e_text.shape[0]):
        raise ShapeError(
            f"sampler length mismatch: acoustic {n}, text {e_text.shape[0]}, "
            f"asr {len(y_asr)}, target {len(y_con)}")
    nonpad = np.ones(n, dtype=bool) if pad_id is None else (y_con != pad_id)
    errors = np.flatnonzero((y_asr != y_con) & nonpad)
    n_replace = int(np.ceil(lam * len(errors)))
    if n_replace == 0:
        return SamplerMix(mixed=e_acoustic, replaced_positions=np.array([], dtype=np.intp),
                          error_positions=errors, lam=lam)
    chosen = np.sort(rng.choice(errors, size=n_replace, replace=False))
    mask = np.zeros((n, 1), dtype=e_acoustic.dtype)
    mask[chosen] = 1.0
    mixed = e_acoustic * (1.0 - mask) + e_text * mask
    return SamplerMix(mixed=mixed, replaced_positions=chosen, error_positions=errors, lam=lam)


def ce_loss(logits: Tensor, targets, label_smoothing: float = 0.0,
            pad_id: int | None = None) -> Tensor:
    """Mean token-level cross-entropy over non-pad positions."""
    ids = np.asarray(targets, dtype=np.intp)
    n, vocab = logits.shape
    if len(ids) != n:
        raise ShapeError(f"{len(ids)} targets for {n} logit rows")
    valid = np.ones(n, dtype=bool) if pad_id is None else (ids != pad_id)
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise DegenerateTargetError("all target positions are padding")
    q = np.zeros((n, vocab), dtype=logits.dtype)
    q[np.arange(n), ids] = 1.0 - label_smoothing
    q += label_smoothing / vocab
    q[~valid] = 0.0
    return -(log_softmax(logits, axis=1) * q).sum() * (1.0 / n_valid)


def sample_candidates(logits_data: np.ndarray, n_candidates: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Draw candidate token sequences by independent per-position sampling."""
    probs = np.exp(logits_data - logits_data.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    u = rng.random((n_candidates, probs.shape[0]))
    ids = (u[:, :, None] > cum[None, :, :]).sum(axis=-1)
    return np.minimum(ids, probs.shape[1] - 1)


def expected_candidate_distance(logits: Tensor, candidates: np.ndarray, ref) -> Tensor:
    """Edit distance to the reference, averaged under renormalized sequence probability.

    Candidates are treated as fixed draws; only the probabilities carry
    gradient. This is the differentiable core of the sequence-error loss.
    """
    ref = list(ref)
    ls = log_softmax(logits, axis=1)
    n = logits.shape[0]
    rows = np.arange(n)
    seq_logps = [ls[(rows, cand)].sum() for cand in candidates]
    p_hat = softmax(stack(seq_logps).reshape(len(candidates)))
    dists = np.array([edit_distance(list(cand), ref) for cand in candidates],
                     dtype=logits.dtype)
    return (p_hat * dists).sum()


def mwer_loss(logits: Tensor, ref, n_candidates: int = 4,
              rng: np.random.Generator | None = None,
              candidates: np.ndarray | None = None) -> Tensor:
    """Centered expected-edit-distance sequence loss over sampled candidates.

    The mean distance is subtracted as a constant baseline, so the value sits
    at zero while the gradient pushes probability mass toward candidates with
    lower edit distance. ``candidates`` pins the sample set (used by tests
    and finite-difference checks); otherwise ``n_candidates`` sequences are
    drawn from the per-position softmax.
    """
    if candidates is None:
        if n_candidates < 2:
            raise ConfigError("n_candidates must be at least 2")
        if rng is None:
            rng = np.random.default_rng(0)
        candidates = sample_candidates(logits.data, n_candidates, rng)
    ref = list(ref)
    ls = log_softmax(logits, axis=1)
    rows = np.arange(logits.shape[0])
    seq_logps = [ls[(rows, cand)].sum() for cand in candidates]
    p_hat = softmax(stack(seq_logps).reshape(len(candidates)))
    dists = np.array([edit_distance(list(cand), ref) for cand in candidates],
                     dtype=logits.dtype)
    baseline = (p_hat * dists).sum().detach()
    return (p_hat * (Tensor(dists) - baseline)).sum()


def edit_distance(a, b) -> int:
    """Token-level Levenshtein distance."""
    a, b = list(a), list(b)
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[-1]


def wer(hyp, ref) -> float:
    """Levenshtein distance between token sequences divided by reference length."""
    ref = list(ref)
    if not ref:
        raise MetricError("reference sequence is empty")
    return edit_distance(hyp, ref) / len(ref)
