"""Long-audio segmentation, the persistent vector index, and similarity export.

Index file layout (little-endian):

    magic               8 bytes  b"SPSKIDX1"
    version             u32
    crc32               u32      checksum of everything that follows
    dim                 u32
    count               u64
    window, hop         u32, u32
    hash_len + hash     u16 + UTF-8 model parameter digest
    records             count * (doc_id u64, segment_index u32,
                                 dim float32 values)
"""

from __future__ import annotations

import logging
import struct
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, IntegrityError, ShapeError, VersionError
from .model import SpeechTextRetriever
from .tensor import no_grad

__all__ = ["Segment", "RetrievalIndex", "segment", "embed_segment", "embed_query",
           "build_index", "save_index", "load_index", "search_topk", "export_heatmap",
           "heatmap_matrix"]

log = logging.getLogger(__name__)

INDEX_MAGIC = b"SPSKIDX1"
INDEX_VERSION = 1


@dataclass
class Segment:
    doc_id: int
    segment_index: int
    start: int
    end: int
    features: np.ndarray


def segment(features: np.ndarray, window: int, hop: int, doc_id: int = 0) -> list[Segment]:
    """Tile a feature sequence into windows starting every ``hop`` frames.

    Count is ``ceil((t - window) / hop) + 1`` for t >= window, else one short
    segment covering the whole sequence.
    """
    if window < 1:
        raise ConfigError("window must be at least 1 frame")
    if not (1 <= hop <= window):
        raise ConfigError(f"hop must be in [1, window], got hop={hop}, window={window}")
    t = features.shape[0] if features.ndim == 2 else 0
    if t < 1:
        raise DataError("cannot segment an empty document")
    count = 1 if t <= window else int(np.ceil((t - window) / hop)) + 1
    segments = []
    for k in range(count):
        start = k * hop
        end = min(start + window, t)
        segments.append(Segment(doc_id=doc_id, segment_index=k, start=start, end=end,
                                features=features[start:end]))
    return segments


def embed_segment(seg: Segment, model: SpeechTextRetriever) -> np.ndarray | None:
    """Unit vector for one segment; None when no token fires (logged, skipped)."""
    vec = model.embed_speech(seg.features)
    if vec is None:
        log.warning("segment (doc=%d, idx=%d) fired no tokens; excluded from index",
                    seg.doc_id, seg.segment_index)
    return vec


def embed_query(question, model: SpeechTextRetriever) -> np.ndarray | None:
    """Embed a query: a token-id sequence goes through the text branch, a
    feature matrix through the speech branch."""
    if isinstance(question, np.ndarray) and question.ndim == 2:
        return model.embed_speech(question)
    return model.embed_text(question)


@dataclass
class RetrievalIndex:
    dim: int
    doc_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint64))
    segment_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.float32))
    window: int = 0
    hop: int = 0
    model_hash: str = ""

    def __len__(self) -> int:
        return len(self.doc_ids)


def build_index(segments: list[Segment], model: SpeechTextRetriever,
                window: int, hop: int) -> RetrievalIndex:
    if not segments:
        raise DataError("cannot build an index from zero segments")
    doc_ids, seg_ids, vecs = [], [], []
    with no_grad():
        for seg in segments:
            vec = embed_segment(seg, model)
            if vec is None:
                continue
            doc_ids.append(seg.doc_id)
            seg_ids.append(seg.segment_index)
            vecs.append(vec.astype(np.float32))
    if not vecs:
        raise DataError("all segments were degenerate; index would be empty")
    return RetrievalIndex(
        dim=len(vecs[0]),
        doc_ids=np.array(doc_ids, dtype=np.uint64),
        segment_indices=np.array(seg_ids, dtype=np.uint32),
        vectors=np.stack(vecs),
        window=window,
        hop=hop,
        model_hash=model.params_hash(),
    )


def save_index(path, index: RetrievalIndex) -> None:
    parts = []
    parts.append(struct.pack("<IQ", index.dim, len(index)))
    parts.append(struct.pack("<II", index.window, index.hop))
    hash_b = index.model_hash.encode("utf-8")
    parts.append(struct.pack("<H", len(hash_b)) + hash_b)
    for doc, seg, vec in zip(index.doc_ids, index.segment_indices, index.vectors):
        parts.append(struct.pack("<QI", int(doc), int(seg)))
        parts.append(vec.astype("<f4").tobytes())
    payload = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(INDEX_MAGIC + struct.pack("<II", INDEX_VERSION, zlib.crc32(payload)) + payload)


def load_index(path, expect_window: int | None = None,
               expect_hop: int | None = None) -> RetrievalIndex:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:8] != INDEX_MAGIC:
        raise DataError(f"{path}: not an index file")
    version, crc = struct.unpack("<II", blob[8:16])
    if version != INDEX_VERSION:
        raise VersionError(f"{path}: index version {version}, expected {INDEX_VERSION}")
    payload = blob[16:]
    if zlib.crc32(payload) != crc:
        raise IntegrityError(f"{path}: checksum mismatch")
    pos = 0
    dim, count = struct.unpack_from("<IQ", payload, pos)
    pos += 12
    window, hop = struct.unpack_from("<II", payload, pos)
    pos += 8
    (hash_len,) = struct.unpack_from("<H", payload, pos)
    pos += 2
    model_hash = payload[pos:pos + hash_len].decode("utf-8")
    pos += hash_len
    doc_ids = np.zeros(count, dtype=np.uint64)
    seg_ids = np.zeros(count, dtype=np.uint32)
    vectors = np.zeros((count, dim), dtype=np.float32)
    vec_bytes = dim * 4
    for i in range(count):
        doc_ids[i], seg_ids[i] = struct.unpack_from("<QI", payload, pos)
        pos += 12
        vectors[i] = np.frombuffer(payload, dtype="<f4", count=dim, offset=pos)
        pos += vec_bytes
    if pos != len(payload):
        raise DataError(f"{path}: trailing bytes after {count} records")
    index = RetrievalIndex(dim=dim, doc_ids=doc_ids, segment_indices=seg_ids,
                           vectors=vectors, window=window, hop=hop, model_hash=model_hash)
    if expect_window is not None and expect_window != window:
        warnings.warn(f"index was built with window={window}, pipeline configured {expect_window}")
    if expect_hop is not None and expect_hop != hop:
        warnings.warn(f"index was built with hop={hop}, pipeline configured {expect_hop}")
    return index


def search_topk(index: RetrievalIndex, query_vec: np.ndarray, k: int):
    """Top-k entries by cosine (dot of unit vectors), descending.

    Ties break by (doc_id, segment_index) ascending; returns
    ``min(k, len(index))`` results, empty for an empty index.
    """
    if k < 1:
        raise ConfigError("k must be at least 1")
    if len(index) == 0:
        return []
    query_vec = np.asarray(query_vec, dtype=np.float64)
    if query_vec.shape != (index.dim,):
        raise ShapeError(f"query dim {query_vec.shape} does not match index dim {index.dim}")
    scores = index.vectors.astype(np.float64) @ query_vec
    order = np.lexsort((index.segment_indices, index.doc_ids, -scores))
    top = order[:k]
    return [(int(index.doc_ids[i]), int(index.segment_indices[i]), float(scores[i]))
            for i in top]


def heatmap_matrix(question_tokens, context_features: np.ndarray,
                   model: SpeechTextRetriever) -> np.ndarray:
    """Frame-by-token cosine similarities between the two branches.

    Each frame is attributed to the fired token that consumed most of its
    weight (leftover tail frames go to the last fired token); the frame's row
    holds cosines between that token's text-encoder representation on the
    speech side and every question token's representation on the text side.
    """
    with no_grad():
        h = model.encode_speech(context_features)
        _, fired = model.acoustic_tokens(h)
        if fired.fired_count == 0:
            raise DataError("no tokens fired for this context; model looks untrained")
        logits = model.decoder(h, fired.embeddings)
        text_like = model.text_like(logits, acoustic=fired.embeddings)
        speech_reps = model.text.encode(text_like).data[1:]  # drop sentence token
        q_reps = model.text.encode(model.text.embed_tokens(question_tokens)).data[1:]

    t = context_features.shape[0]
    owner = np.zeros(t, dtype=np.intp)
    best_weight = np.full(t, -1.0)
    for tok_idx, alloc in enumerate(fired.allocations):
        for frame, weight in alloc:
            if weight > best_weight[frame]:
                best_weight[frame] = weight
                owner[frame] = tok_idx
    last_owned = int(max(f for alloc in fired.allocations for f, _ in alloc))
    owner[last_owned + 1:] = fired.fired_count - 1

    frame_reps = speech_reps[owner]
    fn = frame_reps / np.linalg.norm(frame_reps, axis=1, keepdims=True)
    qn = q_reps / np.linalg.norm(q_reps, axis=1, keepdims=True)
    return fn @ qn.T


def export_heatmap(question_tokens, context_features: np.ndarray,
                   model: SpeechTextRetriever, path, token_labels=None) -> np.ndarray:
    """Write the frame-by-token similarity grid as CSV with a token header row."""
    matrix = heatmap_matrix(question_tokens, context_features, model)
    labels = token_labels if token_labels is not None else [str(t) for t in question_tokens]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(labels) + "\n")
        for row in matrix:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    return matrix
