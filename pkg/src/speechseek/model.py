"""The assembled speech/text retriever.

Speech branch: frame encoder -> per-frame weights -> integrate-and-fire ->
non-autoregressive decoder -> straight-through quantizer -> text embedding
table. Text branch: embedding table -> shared text encoder. Both branches
meet in the text encoder, whose pooled output is the sentence vector used
for retrieval.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

import numpy as np

from . import asr
from .adaptor import map_to_text_space, quantize_st
from .cif import FireResult, WeightPredictor, fire, scale_weights
from .encoder import TransformerEncoder, glorot, pool
from .errors import ConfigError
from .tensor import Module, Parameter, Tensor, concat, no_grad

__all__ = ["ModelConfig", "TextBranch", "SpeechTextRetriever", "build_model"]


@dataclass
class ModelConfig:
    vocab_size: int
    feat_dim: int = 24
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

    def np_dtype(self):
        return np.dtype(self.dtype)

    def validate(self) -> None:
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must be at least 2")
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")
        if self.pooling not in ("cls", "mean"):
            raise ConfigError(f"pooling must be cls or mean, got {self.pooling}")


class TextBranch(Module):
    """Embedding table, trainable sentence token, and the shared text encoder."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dtype = cfg.np_dtype()
        d = cfg.d_model
        self.embed = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d),
                                          size=(cfg.vocab_size, d)).astype(dtype))
        self.cls = Parameter(rng.normal(0.0, 0.02, size=(1, d)).astype(dtype))
        self.encoder = TransformerEncoder(
            in_dim=d, dim=d, n_layers=cfg.text_layers, n_heads=cfg.n_heads,
            ff_dim=cfg.ff_dim, rng=rng, dtype=dtype,
            use_posenc=cfg.use_posenc and cfg.text_posenc,
            conv_branch=cfg.conv_branch)

    def embed_tokens(self, ids) -> Tensor:
        return self.embed.take(np.asarray(ids, dtype=np.intp))

    def encode(self, embeddings: Tensor) -> Tensor:
        """Encode token embeddings with the sentence token prepended."""
        return self.encoder(concat([self.cls, embeddings], axis=0))


class SpeechTextRetriever(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        dtype = cfg.np_dtype()
        d = cfg.d_model
        self.speech_encoder = TransformerEncoder(
            in_dim=cfg.feat_dim, dim=d, n_layers=cfg.speech_layers, n_heads=cfg.n_heads,
            ff_dim=cfg.ff_dim, rng=np.random.default_rng([seed, 31]), dtype=dtype,
            use_posenc=cfg.use_posenc, conv_branch=cfg.conv_branch)
        self.weight_predictor = WeightPredictor(d, np.random.default_rng([seed, 37]), dtype)
        self.decoder = asr.Decoder(
            d, cfg.vocab_size, cfg.decoder_layers, cfg.n_heads, cfg.ff_dim,
            np.random.default_rng([seed, 41]), dtype, use_posenc=cfg.use_posenc)
        self.text = TextBranch(cfg, np.random.default_rng([seed, 43]))
        self.vq_bypass = None
        if not cfg.use_vq:
            self.vq_bypass = Parameter(glorot(np.random.default_rng([seed, 47]), d, d, dtype))
        self.trained_steps = 0

    # -- grouping for stage freezes --------------------------------------

    def param_groups(self) -> dict[str, dict[str, Parameter]]:
        groups = {
            "speech_encoder": self.speech_encoder.named_parameters("speech_encoder."),
            "cif": self.weight_predictor.named_parameters("weight_predictor."),
            "decoder": self.decoder.named_parameters("decoder."),
            "text_encoder": self.text.named_parameters("text."),
        }
        if self.vq_bypass is not None:
            groups["adaptor"] = {"vq_bypass": self.vq_bypass}
        return groups

    ASR_GROUPS = ("speech_encoder", "cif", "decoder", "adaptor")

    def set_frozen_groups(self, frozen: tuple[str, ...]) -> None:
        for name, params in self.param_groups().items():
            flag = name not in frozen
            for p in params.values():
                p.requires_grad = flag

    # -- forward pieces ----------------------------------------------------

    def frames_tensor(self, features: np.ndarray) -> Tensor:
        return Tensor(np.asarray(features, dtype=self.cfg.np_dtype()))

    def encode_speech(self, features) -> Tensor:
        x = features if isinstance(features, Tensor) else self.frames_tensor(features)
        return self.speech_encoder(x)

    def acoustic_tokens(self, h: Tensor, n_target: int | None = None,
                        tail: str = "round") -> tuple[Tensor, FireResult]:
        """Predict weights and fire; scaled to ``n_target`` tokens when given."""
        alpha = self.weight_predictor(h)
        fired_alpha = alpha if n_target is None else scale_weights(alpha, n_target)
        result = fire(h, fired_alpha, threshold=self.cfg.fire_threshold, tail=tail)
        return alpha, result

    def text_like(self, logits: Tensor, acoustic: Tensor | None = None) -> Tensor:
        """Map decoder logits (or, without the quantizer, acoustic embeddings)
        into the text embedding space."""
        if self.cfg.use_vq:
            q = quantize_st(logits, self.cfg.quant_gamma, self.cfg.st_gradients)
            return map_to_text_space(q, self.text.embed)
        if acoustic is None:
            raise ConfigError("bypass variant needs the acoustic embeddings")
        return acoustic @ self.vq_bypass

    def pool_sentence(self, reps: Tensor) -> Tensor:
        return pool(reps, self.cfg.pooling)

    # -- inference entry points ---------------------------------------------

    def transcribe_features(self, features) -> np.ndarray:
        """Raw-weight transcription of a feature sequence; may be empty."""
        with no_grad():
            h = self.encode_speech(features)
            _, fired = self.acoustic_tokens(h)
            if fired.fired_count == 0:
                return np.array([], dtype=np.intp)
            return asr.transcribe(self.decoder(h, fired.embeddings))

    def embed_speech(self, features) -> np.ndarray | None:
        """Unit sentence vector of a feature sequence; None when nothing fires."""
        with no_grad():
            h = self.encode_speech(features)
            _, fired = self.acoustic_tokens(h)
            if fired.fired_count == 0:
                return None
            logits = self.decoder(h, fired.embeddings)
            text_like = self.text_like(logits, acoustic=fired.embeddings)
            vec = self.pool_sentence(self.text.encode(text_like)).data
        return (vec / np.linalg.norm(vec)).astype(np.float64)

    def embed_text(self, token_ids) -> np.ndarray:
        with no_grad():
            vec = self.pool_sentence(self.text.encode(self.text.embed_tokens(token_ids))).data
        return (vec / np.linalg.norm(vec)).astype(np.float64)

    def params_hash(self) -> str:
        digest = hashlib.sha256()
        for name, p in sorted(self.named_parameters().items()):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(p.data).tobytes())
        return digest.hexdigest()


def build_model(cfg: ModelConfig, seed: int = 0) -> SpeechTextRetriever:
    return SpeechTextRetriever(cfg, seed=seed)


def model_config_from_mapping(mapping: dict) -> ModelConfig:
    names = {f.name for f in fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in mapping.items() if k in names})
