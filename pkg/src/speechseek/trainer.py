"""Staged training: ASR pretrain, text pretrain, joint, and post-train.

Stage freezes: joint training freezes the text-encoder group; post-training
freezes the whole ASR branch; each pretrain stage optimizes only its own
objective. The first transcription pass of the sampler runs outside gradient
recording and contributes nothing to the update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import asr as asr_ops
from .checkpoint import Checkpoint
from .cif import mae_length_loss
from .config import RunConfig, format_config
from .contrastive import nll_symmetric, similarity_matrix, total_loss
from .corpus import QAPair
from .errors import ConfigError, DataError, TrainingAbort
from .model import SpeechTextRetriever, build_model
from .tensor import Parameter, Tensor, no_grad

__all__ = ["Stage", "Adam", "train_stage", "model_from_checkpoint", "checkpoint_from_model"]


class Stage(Enum):
    PRETRAIN_ASR = "pretrain_asr"
    PRETRAIN_TEXT = "pretrain_text"
    JOINT = "joint"
    POST_TRAIN = "post_train"

    @classmethod
    def parse(cls, name: str) -> "Stage":
        try:
            return cls(name.lower())
        except ValueError:
            raise ConfigError(f"unknown stage {name!r}; expected one of "
                              f"{[s.value for s in cls]}")


_FROZEN: dict[Stage, tuple[str, ...]] = {
    Stage.PRETRAIN_ASR: ("text_encoder",),
    Stage.PRETRAIN_TEXT: SpeechTextRetriever.ASR_GROUPS,
    Stage.JOINT: ("text_encoder",),
    Stage.POST_TRAIN: SpeechTextRetriever.ASR_GROUPS,
}

_STAGE_INDEX = {s: i for i, s in enumerate(Stage)}


class Adam(object):
    def __init__(self, params: dict[str, Parameter], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        self.t += 1
        correct1 = 1.0 - self.b1 ** self.t
        correct2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * (g * g)
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class PairForward:
    """Per-pair training-time forward products of the speech branch."""

    logits: Tensor
    acoustic: Tensor
    alpha: Tensor
    ce: Tensor
    mwer: Tensor
    mae: Tensor


def speech_pair_forward(model: SpeechTextRetriever, pair: QAPair, cfg: RunConfig,
                        rng: np.random.Generator, yasr_override=None,
                        mwer_candidates=None) -> PairForward:
    """Run the two-pass speech branch on one pair and compute the ASR losses."""
    h = model.encode_speech(pair.context_speech)
    target = np.asarray(pair.context_tokens, dtype=np.intp)
    n = len(target)
    alpha, fired = model.acoustic_tokens(h, n_target=n)
    if fired.fired_count != n:
        raise TrainingAbort(
            f"scaled firing produced {fired.fired_count} tokens, expected {n}")
    ea = fired.embeddings
    if cfg.sampler:
        if yasr_override is not None:
            y_first = np.asarray(yasr_override)
        else:
            with no_grad():
                y_first = asr_ops.transcribe(model.decoder(h, ea))
        ec = asr_ops.token_embeddings_from_output_layer(target, model.decoder.out_w)
        mix = asr_ops.sampler_mix(ea, ec, y_first, target, cfg.sampler_lambda, rng)
        queries = mix.mixed
    else:
        queries = ea
    logits = model.decoder(h, queries)
    return PairForward(
        logits=logits,
        acoustic=ea,
        alpha=alpha,
        ce=asr_ops.ce_loss(logits, target, cfg.label_smoothing),
        mwer=asr_ops.mwer_loss(logits, target, cfg.n_mwer, rng, candidates=mwer_candidates),
        mae=mae_length_loss(alpha, n),
    )


def context_sentence_vector(model: SpeechTextRetriever, fwd: PairForward) -> Tensor:
    text_like = model.text_like(fwd.logits, acoustic=fwd.acoustic)
    return model.pool_sentence(model.text.encode(text_like))


def question_sentence_vector(model: SpeechTextRetriever, pair: QAPair) -> Tensor:
    return model.pool_sentence(model.text.encode(model.text.embed_tokens(pair.question_tokens)))


def _mean(scalars: list[Tensor], scale: float) -> Tensor:
    acc = scalars[0]
    for s in scalars[1:]:
        acc = acc + s
    return acc * scale


def batch_losses(model: SpeechTextRetriever, batch: list[QAPair], stage: Stage,
                 cfg: RunConfig, rng: np.random.Generator) -> tuple[Tensor, dict]:
    """Objective and logged components for one batch under the given stage."""
    components: dict[str, float | None] = {
        "loss_asr": None, "loss_ce": None, "loss_mwer": None,
        "loss_mae": None, "loss_nll": None, "r_at_1_batch": None,
    }

    def contrastive_part(q_vecs, c_vecs):
        sim = similarity_matrix(q_vecs, c_vecs, temperature=cfg.tau)
        nll = nll_symmetric(sim)
        hits = (sim.values.data.argmax(axis=1) == np.arange(len(batch))).mean()
        components["r_at_1_batch"] = float(hits)
        return nll

    if stage == Stage.PRETRAIN_TEXT:
        q_vecs, c_vecs = [], []
        for p in batch:
            q_tokens = p.question_tokens
            if cfg.text_augment and rng.random() < 0.5:
                # fresh subset query from the pair's own context: the same
                # corpus then supplies unbounded subset-matching supervision
                qlen = int(rng.integers(cfg.question_len_min,
                                        min(cfg.question_len_max, len(p.context_tokens)) + 1))
                q_tokens = [int(t) for t in rng.choice(np.array(p.context_tokens),
                                                       size=qlen, replace=False)]
            q_vecs.append(model.pool_sentence(model.text.encode(model.text.embed_tokens(q_tokens))))
            c_vecs.append(model.pool_sentence(model.text.encode(
                model.text.embed_tokens(p.context_tokens))))
        nll = contrastive_part(q_vecs, c_vecs)
        components["loss_nll"] = nll.item()
        return nll, components

    forwards = [speech_pair_forward(model, p, cfg, rng) for p in batch]
    scale = 1.0 / len(batch)
    ce = _mean([f.ce for f in forwards], scale)
    mwer = _mean([f.mwer for f in forwards], scale)
    mae = _mean([f.mae for f in forwards], scale)
    l_asr = ce * cfg.ce_weight + mwer
    components.update(loss_asr=l_asr.item(), loss_ce=ce.item(),
                      loss_mwer=mwer.item(), loss_mae=mae.item())

    if stage == Stage.PRETRAIN_ASR:
        return l_asr + mae, components

    q_vecs = [question_sentence_vector(model, p) for p in batch]
    c_vecs = [context_sentence_vector(model, f) for f in forwards]
    nll = contrastive_part(q_vecs, c_vecs)
    components["loss_nll"] = nll.item()
    if stage == Stage.JOINT:
        return total_loss(l_asr, mae, nll, cfg.loss_alpha, cfg.loss_beta), components
    # post-train: only the contrastive objective can move the live parameters
    return nll, components


def heldout_metrics(model: SpeechTextRetriever, pairs: list[QAPair],
                    text_only: bool = False) -> tuple[float | None, float]:
    """Held-out transcription WER and question->context R@1.

    ``text_only`` embeds contexts through the text branch instead of the
    speech branch and skips WER; it is the right probe for the text
    pretraining stage, where the speech branch may be untouched.
    """
    if not pairs:
        return float("nan"), float("nan")
    wers = []
    c_vecs = []
    for p in pairs:
        if text_only:
            c_vecs.append(model.embed_text(p.context_tokens))
        else:
            hyp = model.transcribe_features(p.context_speech)
            wers.append(asr_ops.wer(hyp, p.context_tokens))
            c_vecs.append(model.embed_speech(p.context_speech))
    q_vecs = [model.embed_text(p.question_tokens) for p in pairs]
    hits = 0
    for i, q in enumerate(q_vecs):
        scores = [(-np.inf if c is None else float(q @ c)) for c in c_vecs]
        if int(np.argmax(scores)) == i:
            hits += 1
    return (None if text_only else float(np.mean(wers))), hits / len(pairs)


def _epoch_record(stage: Stage, epoch: int, sums: dict, n_batches: int,
                  wer: float, r1: float, cfg: RunConfig) -> dict:
    rec = {"stage": stage.value, "epoch": epoch}
    means = {}
    for key, total in sums.items():
        means[key] = None if total is None else total / n_batches
    # the logged total is recomposed from the logged components so the
    # composition law is checkable bit-for-bit from the log alone
    if stage in (Stage.JOINT, Stage.POST_TRAIN):
        means["loss_total"] = ((1.0 - cfg.loss_alpha - cfg.loss_beta) * means["loss_asr"]
                               + cfg.loss_alpha * means["loss_mae"]
                               + cfg.loss_beta * means["loss_nll"])
    elif stage == Stage.PRETRAIN_ASR:
        means["loss_total"] = means["loss_asr"] + means["loss_mae"]
    else:
        means["loss_total"] = means["loss_nll"]
    rec.update(means)
    rec["wer"] = wer
    rec["r_at_1"] = r1
    return rec


def train_stage(cfg: RunConfig, train_pairs: list[QAPair], heldout_pairs: list[QAPair],
                init: Checkpoint | None = None) -> tuple[Checkpoint, list[dict]]:
    """Run one training stage and return the checkpoint plus per-epoch metrics.

    Early stopping on held-out R@1 (patience ``cfg.patience``) applies to the
    contrastive stages; the ASR pretrain runs its full epoch budget. The best
    parameters seen are restored before checkpointing.
    """
    if not train_pairs:
        raise DataError("training corpus is empty")
    stage = Stage.parse(cfg.stage)
    model = build_model(cfg.model_config(), seed=cfg.seed)
    opt = Adam(model.named_parameters(), lr=cfg.learning_rate)
    if init is not None:
        restore_model(model, init)
        restore_moments(opt, init)
    model.set_frozen_groups(_FROZEN[stage])
    frozen_params = {name: p for name, p in model.named_parameters().items()
                     if not p.requires_grad}
    frozen_before = {name: p.data.copy() for name, p in frozen_params.items()}

    sidx = _STAGE_INDEX[stage]
    rng_order = np.random.default_rng([cfg.seed, 101, sidx])
    rng_draw = np.random.default_rng([cfg.seed, 103, sidx])

    history: list[dict] = []
    early_stop = stage != Stage.PRETRAIN_ASR
    best_r1 = -1.0
    best_state: dict[str, np.ndarray] | None = None
    stale = 0
    step = 0

    for epoch in range(cfg.epochs):
        order = rng_order.permutation(len(train_pairs))
        sums: dict[str, float | None] = {
            "loss_asr": None, "loss_ce": None, "loss_mwer": None,
            "loss_mae": None, "loss_nll": None, "r_at_1_batch": None,
        }
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            batch = [train_pairs[i] for i in order[start:start + cfg.batch_size]]
            opt.zero_grad()
            loss, components = batch_losses(model, batch, stage, cfg, rng_draw)
            if not math.isfinite(loss.item()):
                raise TrainingAbort(
                    f"non-finite loss at stage={stage.value} epoch={epoch} step={step}: "
                    f"{components}")
            loss.backward()
            for name, p in frozen_params.items():
                if p.grad is not None:
                    raise AssertionError(f"frozen parameter {name} received gradient")
            opt.step()
            model.trained_steps += 1
            step += 1
            n_batches += 1
            for key, val in components.items():
                if val is not None:
                    sums[key] = val if sums[key] is None else sums[key] + val
        wer, r1 = heldout_metrics(model, heldout_pairs, text_only=stage == Stage.PRETRAIN_TEXT)
        history.append(_epoch_record(stage, epoch, sums, max(n_batches, 1), wer, r1, cfg))
        if early_stop and heldout_pairs:
            if r1 > best_r1:
                best_r1 = r1
                best_state = {n: p.data.copy() for n, p in model.named_parameters().items()}
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break

    if early_stop and best_state is not None:
        for name, p in model.named_parameters().items():
            p.data = best_state[name]

    for name, before in frozen_before.items():
        if not np.array_equal(frozen_params[name].data, before):
            raise AssertionError(f"frozen parameter {name} changed during {stage.value}")

    return checkpoint_from_model(model, opt, cfg), history


def checkpoint_from_model(model: SpeechTextRetriever, opt: Adam | None,
                          cfg: RunConfig) -> Checkpoint:
    params = {name: p.data.copy() for name, p in model.named_parameters().items()}
    ckpt = Checkpoint(params=params, step=model.trained_steps,
                      config_text=format_config(cfg))
    if opt is not None:
        ckpt.opt_m = {n: m.copy() for n, m in opt.m.items()}
        ckpt.opt_v = {n: v.copy() for n, v in opt.v.items()}
        ckpt.adam_t = opt.t
    return ckpt


def restore_model(model: SpeechTextRetriever, ckpt: Checkpoint) -> None:
    named = model.named_parameters()
    missing = set(named) - set(ckpt.params)
    extra = set(ckpt.params) - set(named)
    if missing or extra:
        raise DataError(f"checkpoint does not match model: missing={sorted(missing)}, "
                        f"unexpected={sorted(extra)}")
    for name, p in named.items():
        arr = ckpt.params[name]
        if arr.shape != p.data.shape:
            raise DataError(f"checkpoint shape mismatch for {name}: "
                            f"{arr.shape} vs {p.data.shape}")
        p.data = arr.astype(p.data.dtype, copy=True)
    model.trained_steps = ckpt.step


def restore_moments(opt: Adam, ckpt: Checkpoint) -> None:
    if not ckpt.opt_m:
        return
    for name in opt.params:
        if name in ckpt.opt_m:
            opt.m[name] = ckpt.opt_m[name].astype(opt.m[name].dtype, copy=True)
            opt.v[name] = ckpt.opt_v[name].astype(opt.v[name].dtype, copy=True)
    opt.t = ckpt.adam_t


def model_from_checkpoint(ckpt: Checkpoint, cfg: RunConfig | None = None) -> SpeechTextRetriever:
    from .config import parse_config

    run_cfg = cfg if cfg is not None else parse_config(ckpt.config_text)
    model = build_model(run_cfg.model_config(), seed=run_cfg.seed)
    restore_model(model, ckpt)
    return model
