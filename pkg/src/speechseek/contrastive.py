"""Cosine similarity and the symmetric in-batch contrastive objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateVectorError, ShapeError
from .tensor import Tensor, concat, log_softmax

__all__ = ["SimilarityMatrix", "cosine", "similarity_matrix", "nll_symmetric", "total_loss"]


@dataclass
class SimilarityMatrix:
    """Batch cosine similarities; rows are questions, columns contexts,
    gold pairs on the diagonal."""

    values: Tensor
    temperature: float = 0.05


def _as_tensor(v) -> Tensor:
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))


def cosine(u, v) -> Tensor:
    """Cosine similarity of two vectors; zero vectors are refused."""
    u, v = _as_tensor(u), _as_tensor(v)
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine of a zero vector is undefined")
    return (u * v).sum() / ((u * u).sum().sqrt() * (v * v).sum().sqrt())


def _normalize_rows(m: Tensor) -> Tensor:
    return m / (m * m).sum(axis=1, keepdims=True).sqrt()


def similarity_matrix(questions, contexts, temperature: float = 0.05) -> SimilarityMatrix:
    """Pairwise cosine matrix between two equal-sized batches of sentence vectors.

    Accepts a list of vectors or a (B, d) tensor per side.
    """
    if isinstance(questions, (list, tuple)):
        questions = concat([_as_tensor(q).reshape(1, -1) for q in questions], axis=0)
    if isinstance(contexts, (list, tuple)):
        contexts = concat([_as_tensor(c).reshape(1, -1) for c in contexts], axis=0)
    questions, contexts = _as_tensor(questions), _as_tensor(contexts)
    if questions.shape != contexts.shape:
        raise ShapeError(f"batch shapes differ: {questions.shape} vs {contexts.shape}")
    for name, m in (("question", questions), ("context", contexts)):
        norms = np.linalg.norm(m.data, axis=1)
        bad = np.flatnonzero(norms == 0.0)
        if bad.size:
            raise DegenerateVectorError(f"{name} vector {bad[0]} has zero norm")
    sims = _normalize_rows(questions) @ _normalize_rows(contexts).T
    return SimilarityMatrix(values=sims, temperature=temperature)


def nll_symmetric(sim: SimilarityMatrix) -> Tensor:
    """Symmetric negative log-likelihood over a batch similarity matrix.

    Averages the cross-entropy of retrieving the gold context per question
    (softmax over rows) and the gold question per context (softmax over
    columns), with the similarity scores divided by the temperature.
    """
    s = sim.values
    if s.data.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeError(f"similarity matrix must be square, got {s.shape}")
    b = s.shape[0]
    logits = s * (1.0 / sim.temperature)
    eye = np.eye(b, dtype=s.dtype)
    row_loss = -(log_softmax(logits, axis=1) * eye).sum() * (1.0 / b)
    col_loss = -(log_softmax(logits, axis=0) * eye).sum() * (1.0 / b)
    return (row_loss + col_loss) * 0.5


def total_loss(l_asr, l_mae, l_nll, alpha: float = 1.0 / 3.0, beta: float = 1.0 / 3.0) -> Tensor:
    """Weighted combination of the three training objectives."""
    if not (0.0 < alpha < 1.0 and 0.0 < beta < 1.0 and alpha + beta < 1.0):
        raise ConfigError(
            f"loss weights must satisfy 0 < alpha, beta and alpha + beta < 1, "
            f"got alpha={alpha}, beta={beta}")
    return (_as_tensor(l_asr) * (1.0 - alpha - beta)
            + _as_tensor(l_mae) * alpha + _as_tensor(l_nll) * beta)
