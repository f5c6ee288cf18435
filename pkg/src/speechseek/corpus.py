"""Deterministic synthetic speech/text corpora.

Speech is faked at desk scale: every vocabulary token owns a short random
prototype (2-5 frames), and an utterance is the concatenation of its
tokens' prototypes plus Gaussian noise. That gives the alignment model a
genuine variable-length monotonic segmentation problem while keeping CPU
training in the minutes range.

Questions are built as subsets of their own context's tokens, with a
generation-time guarantee that each question shares strictly more content
tokens with its own context than with any other context in the corpus, so
desk-scale retrieval targets are achievable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, ParseError

__all__ = [
    "FRAMES_PER_SECOND",
    "Vocabulary",
    "AcousticPrototypeBank",
    "QAPair",
    "LongFormDocument",
    "CorpusConfig",
    "build_vocabulary",
    "build_prototype_bank",
    "render_speech",
    "generate_corpus",
    "compose_longform",
    "write_corpus",
    "read_corpus",
    "write_longform",
    "read_longform",
]

# Synthetic clock: 5 frames per "second", so a 200-frame window is 40 s.
FRAMES_PER_SECOND = 5

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    pad_id: int = 0
    unk_id: int = 1
    cls_id: int = 2

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def content_ids(self) -> list[int]:
        specials = {self.pad_id, self.unk_id, self.cls_id}
        return [i for i in range(len(self.tokens)) if i not in specials]

    def id_of(self, token: str) -> int:
        try:
            return self.tokens.index(token)
        except ValueError:
            return self.unk_id

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]


def build_vocabulary(size: int, seed: int) -> Vocabulary:
    """Create a vocabulary of ``size`` tokens: three specials plus CVC syllables."""
    if size < 8:
        raise ConfigError(f"vocabulary size must be at least 8, got {size}")
    syllables = [c + v + c2 for c in _CONSONANTS for v in _VOWELS for c2 in _CONSONANTS]
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(syllables))
    content = [syllables[i] for i in order[: size - 3]]
    return Vocabulary(tokens=("<pad>", "<unk>", "<cls>", *content))


@dataclass
class AcousticPrototypeBank:
    """Per-token frame prototypes. Regeneration from the same seed is bit-identical."""

    feat_dim: int
    seed: int
    prototypes: dict[int, np.ndarray] = field(repr=False)

    def length_of(self, token_id: int) -> int:
        return self.prototypes[token_id].shape[0]


def build_prototype_bank(vocab: Vocabulary, feat_dim: int, seed: int,
                         length_range: tuple[int, int] = (2, 5)) -> AcousticPrototypeBank:
    lo, hi = length_range
    if lo < 1 or hi < lo:
        raise ConfigError(f"bad prototype length range {length_range}")
    rng = np.random.default_rng([seed, 11])
    protos: dict[int, np.ndarray] = {}
    for tid in range(vocab.size):
        if tid in (vocab.pad_id, vocab.cls_id):
            continue
        length = int(rng.integers(lo, hi + 1))
        protos[tid] = rng.normal(0.0, 1.0, size=(length, feat_dim))
    return AcousticPrototypeBank(feat_dim=feat_dim, seed=seed, prototypes=protos)


def render_speech(tokens, bank: AcousticPrototypeBank, noise_sigma: float,
                  seed: int | list[int]) -> np.ndarray:
    """Concatenate token prototypes and add zero-mean Gaussian noise.

    Frame count equals the sum of the tokens' prototype lengths.
    """
    if noise_sigma < 0:
        raise ConfigError("noise_sigma must be non-negative")
    tokens = list(tokens)
    if not tokens:
        raise DataError("cannot render an empty token sequence")
    missing = [t for t in tokens if t not in bank.prototypes]
    if missing:
        raise DataError(f"tokens without acoustic prototypes: {missing}")
    frames = np.concatenate([bank.prototypes[t] for t in tokens], axis=0)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        frames = frames + rng.normal(0.0, noise_sigma, size=frames.shape)
    return frames


@dataclass
class QAPair:
    pair_id: int
    question_tokens: list[int]
    context_tokens: list[int]
    context_speech: np.ndarray
    question_speech: np.ndarray | None = None


@dataclass
class LongFormDocument:
    doc_id: int
    speech: np.ndarray
    gold_segment: int
    question_tokens: list[int]
    window_frames: int
    source_pair_id: int


@dataclass
class CorpusConfig:
    pairs: int = 500
    context_len: tuple[int, int] = (8, 16)
    question_len: tuple[int, int] = (3, 6)
    vocab_size: int = 50
    feat_dim: int = 24
    noise_sigma: float = 0.5
    seed: int = 13
    question_speech: bool = True
    prototype_len: tuple[int, int] = (2, 5)

    def validate(self) -> None:
        if self.pairs < 1:
            raise ConfigError("pairs must be positive")
        if self.vocab_size < 8:
            raise ConfigError("vocab_size must be at least 8")
        clo, chi = self.context_len
        qlo, qhi = self.question_len
        if not (1 <= clo <= chi):
            raise ConfigError(f"bad context length range {self.context_len}")
        if not (1 <= qlo <= qhi <= chi):
            raise ConfigError(f"bad question length range {self.question_len}")
        content = self.vocab_size - 3
        if content < chi:
            raise ConfigError(
                f"vocabulary too small: {content} content tokens cannot fill contexts of length {chi}")


def _overlap(question: frozenset, context: frozenset) -> int:
    return len(question & context)


def _identifiable_both_ways(q_new: frozenset, c_new: frozenset,
                            q_sets: list[frozenset], ctx_sets: list[frozenset]) -> bool:
    """Strict gold dominance in both retrieval directions.

    Count dominance (a question shares strictly more tokens with its own
    context than with any other) plus normalized-overlap dominance, so gold
    pairs also win under cosine-style scoring where lengths divide the raw
    overlap. Checked symmetrically: accepting the new pair must not break
    any earlier pair's dominance either.
    """
    gold_new = np.sqrt(len(q_new) / len(c_new))
    for q_old, c_old in zip(q_sets, ctx_sets):
        gold_old = np.sqrt(len(q_old) / len(c_old))
        o_qc = _overlap(q_new, c_old)   # new question against an old context
        o_cq = _overlap(q_old, c_new)   # old question against the new context
        if o_qc >= len(q_new) or o_cq >= len(q_old):
            return False
        score_qc = o_qc / np.sqrt(len(q_new) * len(c_old))
        score_cq = o_cq / np.sqrt(len(q_old) * len(c_new))
        # each cross score must stay below both pairs' gold scores
        if score_qc >= gold_new or score_qc >= gold_old:
            return False
        if score_cq >= gold_new or score_cq >= gold_old:
            return False
    return True


def generate_corpus(config: CorpusConfig, vocab: Vocabulary | None = None,
                    bank: AcousticPrototypeBank | None = None) -> list[QAPair]:
    """Generate QA pairs with one-to-one question/context correspondence.

    Every question is a token subset of its own context, and shares strictly
    more content tokens with it than with any other context. Pairs are found
    by rejection sampling; a vocabulary too small to separate contexts raises
    a ConfigError once the retry budget is exhausted.
    """
    config.validate()
    if vocab is None:
        vocab = build_vocabulary(config.vocab_size, config.seed)
    if bank is None:
        bank = build_prototype_bank(vocab, config.feat_dim, config.seed, config.prototype_len)
    content = np.array(vocab.content_ids)
    clo, chi = config.context_len
    qlo, qhi = config.question_len
    rng = np.random.default_rng([config.seed, 13])

    contexts: list[list[int]] = []
    questions: list[list[int]] = []
    ctx_sets: list[frozenset] = []
    q_sets: list[frozenset] = []

    budget = 4000 * config.pairs
    while len(contexts) < config.pairs:
        if budget <= 0:
            raise ConfigError(
                "vocabulary too small to guarantee distinguishable contexts; "
                f"generated {len(contexts)} of {config.pairs} pairs")
        budget -= 1
        clen = int(rng.integers(clo, chi + 1))
        ctx = [int(t) for t in rng.choice(content, size=clen, replace=False)]
        ctx_set = frozenset(ctx)
        # earlier questions must keep strict dominance over the new context
        if any(_overlap(q_sets[j], ctx_set) >= len(q_sets[j]) for j in range(len(q_sets))):
            continue
        question = None
        for _ in range(30):
            qlen = int(rng.integers(qlo, min(qhi, clen) + 1))
            cand = [int(t) for t in rng.choice(np.array(ctx), size=qlen, replace=False)]
            if _identifiable_both_ways(frozenset(cand), ctx_set, q_sets, ctx_sets):
                question = cand
                break
        if question is None:
            continue
        contexts.append(ctx)
        questions.append(question)
        ctx_sets.append(ctx_set)
        q_sets.append(frozenset(question))

    pairs: list[QAPair] = []
    for pid, (q, c) in enumerate(zip(questions, contexts)):
        c_speech = render_speech(c, bank, config.noise_sigma, [config.seed, 17, pid, 0])
        q_speech = None
        if config.question_speech:
            q_speech = render_speech(q, bank, config.noise_sigma, [config.seed, 17, pid, 1])
        pairs.append(QAPair(pair_id=pid, question_tokens=q, context_tokens=c,
                            context_speech=c_speech, question_speech=q_speech))
    return pairs


def verify_dominance(pairs: list[QAPair]) -> bool:
    """Exhaustively confirm the gold-overlap dominance invariant."""
    ctx_sets = [frozenset(p.context_tokens) for p in pairs]
    for i, p in enumerate(pairs):
        q = frozenset(p.question_tokens)
        own = _overlap(q, ctx_sets[i])
        for j, other in enumerate(ctx_sets):
            if j != i and _overlap(q, other) >= own:
                return False
    return True


def compose_longform(pairs: list[QAPair], filler_segments: int, window_frames: int,
                     seed: int, bank: AcousticPrototypeBank | None = None,
                     vocab: Vocabulary | None = None,
                     noise_sigma: float = 0.5) -> list[LongFormDocument]:
    """Embed each pair's context among filler windows at a random position.

    Every document is ``filler_segments + 1`` regions of exactly
    ``window_frames`` frames; the gold region holds the context speech at a
    random offset, padded with filler material. With a prototype bank the
    filler is rendered distractor speech that avoids the pair's question
    tokens; without one it is Gaussian noise.
    """
    if window_frames <= 0:
        raise ConfigError("window_frames must be positive")
    if filler_segments < 0:
        raise ConfigError("filler_segments must be non-negative")
    rng = np.random.default_rng([seed, 23])
    docs: list[LongFormDocument] = []

    def filler_frames(n_frames: int, avoid: set[int], stream) -> np.ndarray:
        if n_frames == 0:
            dim = bank.feat_dim if bank is not None else pairs[0].context_speech.shape[1]
            return np.zeros((0, dim))
        if bank is None or vocab is None:
            dim = pairs[0].context_speech.shape[1]
            return stream.normal(0.0, 1.0, size=(n_frames, dim))
        allowed = [t for t in vocab.content_ids if t not in avoid]
        chunks, total = [], 0
        while total < n_frames:
            tid = int(stream.choice(allowed))
            proto = bank.prototypes[tid]
            chunks.append(proto)
            total += proto.shape[0]
        frames = np.concatenate(chunks, axis=0)[:n_frames]
        if noise_sigma > 0:
            frames = frames + stream.normal(0.0, noise_sigma, size=frames.shape)
        return frames

    for doc_id, pair in enumerate(pairs):
        ctx = pair.context_speech
        t_ctx = ctx.shape[0]
        if t_ctx > window_frames:
            raise ConfigError(
                f"context speech of pair {pair.pair_id} has {t_ctx} frames, "
                f"longer than the {window_frames}-frame window")
        n_regions = filler_segments + 1
        gold = int(rng.integers(0, n_regions))
        stream = np.random.default_rng([seed, 23, doc_id])
        avoid = set(pair.question_tokens)
        regions = []
        for r in range(n_regions):
            if r == gold:
                offset = int(stream.integers(0, window_frames - t_ctx + 1))
                head = filler_frames(offset, avoid, stream)
                tail = filler_frames(window_frames - t_ctx - offset, avoid, stream)
                regions.append(np.concatenate([head, ctx, tail], axis=0))
            else:
                regions.append(filler_frames(window_frames, avoid, stream))
        docs.append(LongFormDocument(
            doc_id=doc_id,
            speech=np.concatenate(regions, axis=0),
            gold_segment=gold,
            question_tokens=list(pair.question_tokens),
            window_frames=window_frames,
            source_pair_id=pair.pair_id,
        ))
    return docs


# -- file I/O -----------------------------------------------------------
#
# One JSON record per line; matrices carried as {"shape": [...], "data": [...]}
# with floats in shortest round-trip decimal form, so read(write(x)) is
# bit-exact. See docs/FORMATS.md.


def _matrix_to_json(arr: np.ndarray | None):
    if arr is None:
        return None
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _matrix_from_json(obj, line: int) -> np.ndarray | None:
    if obj is None:
        return None
    try:
        shape = tuple(int(s) for s in obj["shape"])
        data = np.array(obj["data"], dtype=np.float64)
        return data.reshape(shape)
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"bad matrix field: {e}", line=line)


def write_corpus(path, pairs: list[QAPair]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for p in pairs:
            rec = {
                "pair_id": p.pair_id,
                "question_tokens": list(map(int, p.question_tokens)),
                "context_tokens": list(map(int, p.context_tokens)),
                "context_speech": _matrix_to_json(p.context_speech),
                "question_speech": _matrix_to_json(p.question_speech),
            }
            fh.write(json.dumps(rec) + "\n")


def read_corpus(path) -> list[QAPair]:
    pairs: list[QAPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line=lineno)
            try:
                ctx_speech = _matrix_from_json(rec["context_speech"], lineno)
                pairs.append(QAPair(
                    pair_id=int(rec["pair_id"]),
                    question_tokens=[int(t) for t in rec["question_tokens"]],
                    context_tokens=[int(t) for t in rec["context_tokens"]],
                    context_speech=ctx_speech,
                    question_speech=_matrix_from_json(rec["question_speech"], lineno),
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"missing or malformed field: {e}", line=lineno)
    return pairs


def write_longform(path, docs: list[LongFormDocument]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            rec = {
                "doc_id": d.doc_id,
                "gold_segment": d.gold_segment,
                "question_tokens": list(map(int, d.question_tokens)),
                "window_frames": d.window_frames,
                "source_pair_id": d.source_pair_id,
                "speech": _matrix_to_json(d.speech),
            }
            fh.write(json.dumps(rec) + "\n")


def read_longform(path) -> list[LongFormDocument]:
    docs: list[LongFormDocument] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", line=lineno)
            try:
                docs.append(LongFormDocument(
                    doc_id=int(rec["doc_id"]),
                    speech=_matrix_from_json(rec["speech"], lineno),
                    gold_segment=int(rec["gold_segment"]),
                    question_tokens=[int(t) for t in rec["question_tokens"]],
                    window_frames=int(rec["window_frames"]),
                    source_pair_id=int(rec["source_pair_id"]),
                ))
            except (KeyError, TypeError, ValueError) as e:
                raise ParseError(f"missing or malformed field: {e}", line=lineno)
    return docs


def write_vocabulary(path, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"tokens": list(vocab.tokens), "pad": vocab.pad_id,
                   "unk": vocab.unk_id, "cls": vocab.cls_id}, fh)


def read_vocabulary(path) -> Vocabulary:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return Vocabulary(tokens=tuple(obj["tokens"]), pad_id=obj["pad"],
                      unk_id=obj["unk"], cls_id=obj["cls"])
