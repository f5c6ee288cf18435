"""Flat key=value run configuration.

One ``key = value`` per line; blank lines and ``#`` comments are allowed;
unknown keys are rejected. The same file drives corpus synthesis, training,
evaluation, and retrieval, so a single hash pins a whole experiment.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields, replace

from .corpus import CorpusConfig
from .errors import ConfigError, ParseError
from .model import ModelConfig

__all__ = ["RunConfig", "parse_config", "format_config", "load_config", "save_config",
           "config_hash"]


@dataclass
class RunConfig:
    # corpus synthesis
    pairs: int = 500
    eval_pairs: int = 64
    context_len_min: int = 8
    context_len_max: int = 16
    question_len_min: int = 3
    question_len_max: int = 6
    vocab_size: int = 50
    feat_dim: int = 24
    noise_sigma: float = 0.5
    question_speech: bool = True
    longform_docs: int = 20
    longform_fillers: int = 4

    # model
    d_model: int = 64
    n_heads: int = 4
    ff_dim: int = 128
    speech_layers: int = 2
    text_layers: int = 2
    decoder_layers: int = 2
    fire_threshold: float = 1.0
    quant_gamma: float = 0.1
    pooling: str = "cls"
    use_vq: bool = True
    st_gradients: bool = True
    use_posenc: bool = True
    text_posenc: bool = True
    conv_branch: bool = False
    dtype: str = "float32"

    # training (shared defaults; per-stage keys below override when nonzero)
    stage: str = "joint"
    epochs: int = 30
    batch_size: int = 16
    learning_rate: float = 5e-5
    text_augment: bool = True

    # per-stage overrides; 0 means "inherit the shared value"
    pretrain_asr_epochs: int = 30
    pretrain_asr_batch_size: int = 8
    pretrain_asr_learning_rate: float = 3e-3
    pretrain_text_epochs: int = 50
    pretrain_text_batch_size: int = 64
    pretrain_text_learning_rate: float = 1e-3
    joint_epochs: int = 15
    joint_batch_size: int = 16
    joint_learning_rate: float = 1e-3
    post_train_epochs: int = 5
    post_train_batch_size: int = 16
    post_train_learning_rate: float = 1e-3
    seed: int = 13
    loss_alpha: float = 1.0 / 3.0
    loss_beta: float = 1.0 / 3.0
    sampler_lambda: float = 0.75
    sampler: bool = True
    tau: float = 0.05
    ce_weight: float = 1.0
    n_mwer: int = 4
    label_smoothing: float = 0.0
    patience: int = 5

    # paths (relative paths resolve against the config file's directory)
    corpus_dir: str = "corpus"
    run_dir: str = "runs"
    checkpoint: str = ""
    init_checkpoint: str = ""

    # retrieval
    window: int = 200
    hop: int = 200
    top_k: int = 1

    def for_stage(self, stage: str) -> "RunConfig":
        """Copy with this stage selected and its overrides applied."""
        cfg = replace(self, stage=stage)
        for field_name in ("epochs", "batch_size", "learning_rate"):
            override = getattr(self, f"{stage}_{field_name}", 0)
            if override:
                setattr(cfg, field_name, override)
        return cfg

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            pairs=self.pairs,
            context_len=(self.context_len_min, self.context_len_max),
            question_len=(self.question_len_min, self.question_len_max),
            vocab_size=self.vocab_size,
            feat_dim=self.feat_dim,
            noise_sigma=self.noise_sigma,
            seed=self.seed,
            question_speech=self.question_speech,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            vocab_size=self.vocab_size,
            feat_dim=self.feat_dim,
            d_model=self.d_model,
            n_heads=self.n_heads,
            ff_dim=self.ff_dim,
            speech_layers=self.speech_layers,
            text_layers=self.text_layers,
            decoder_layers=self.decoder_layers,
            fire_threshold=self.fire_threshold,
            quant_gamma=self.quant_gamma,
            pooling=self.pooling,
            use_vq=self.use_vq,
            st_gradients=self.st_gradients,
            use_posenc=self.use_posenc,
            text_posenc=self.text_posenc,
            conv_branch=self.conv_branch,
            dtype=self.dtype,
        )


_FIELDS = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str, line: int):
    kind = _FIELDS[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError as e:
        raise ParseError(f"bad value for {key}: {e}", line=line)


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {line!r}", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r} on line {lineno}")
        setattr(cfg, key, _parse_value(key, value, lineno))
    return cfg


def format_config(cfg: RunConfig) -> str:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, cfg: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_config(cfg))


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode()).hexdigest()[:12]
