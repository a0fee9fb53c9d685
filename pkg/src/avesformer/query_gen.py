"""Prompt query generator.

The single-frame audio feature is prepended to a bank of learnable queries,
the whole sequence runs through pre-norm self-attention blocks, and the prompt
row is dropped at the output. The remaining ``num_queries`` rows are
audio-conditioned queries that give decoder cross-attention more than one key.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attention import (
    AttentionParams,
    MultiHeadConfig,
    cross_attention,
    dissipation_index,
    is_dissipated,
    multi_head_attention,
)
from .layers import FeedForwardParams, LayerNormParams
from .tensor import Rng, ShapeError, Tensor, add, as_tensor, load_named, matmul, save_named


@dataclass(frozen=True)
class PqgConfig:
    num_queries: int = 16
    embed_dim: int = 256
    num_layers: int = 3
    num_heads: int = 8

    def __post_init__(self):
        if self.num_queries < 1 or self.num_layers < 1:
            raise ValueError("num_queries and num_layers must be >= 1")
        # validates the head split
        self.attention_config()

    def attention_config(self) -> MultiHeadConfig:
        return MultiHeadConfig(self.embed_dim, self.num_heads, use_projections=True)


@dataclass
class PqgLayer:
    norm_attn: LayerNormParams
    attn: AttentionParams
    norm_ffn: LayerNormParams
    ffn: FeedForwardParams


@dataclass
class PqgState:
    config: PqgConfig
    q_learn: Tensor
    layers: list[PqgLayer] = field(default_factory=list)
    norm_out: LayerNormParams | None = None

    @classmethod
    def init(cls, cfg: PqgConfig, rng: Rng) -> "PqgState":
        d = cfg.embed_dim
        bound = 1.0 / math.sqrt(d)
        q_learn = rng.uniform((cfg.num_queries, d), -bound, bound)
        layers = [
            PqgLayer(
                LayerNormParams.identity(d),
                AttentionParams.init(d, rng),
                LayerNormParams.identity(d),
                FeedForwardParams.init(d, rng),
            )
            for _ in range(cfg.num_layers)
        ]
        return cls(cfg, q_learn, layers, LayerNormParams.identity(d))

    @classmethod
    def zeroed(cls, cfg: PqgConfig, q_learn) -> "PqgState":
        """All projections and FFNs zero, norms identity: only the residual path survives."""
        d = cfg.embed_dim
        layers = [
            PqgLayer(
                LayerNormParams.identity(d),
                AttentionParams.zeros(d),
                LayerNormParams.identity(d),
                FeedForwardParams.zeros(d),
            )
            for _ in range(cfg.num_layers)
        ]
        return cls(cfg, as_tensor(q_learn, 2), layers, LayerNormParams.identity(d))

    def tensors(self) -> dict[str, Tensor]:
        out = {"q_learn": self.q_learn}
        for i, layer in enumerate(self.layers):
            for part in ("norm_attn", "attn", "norm_ffn", "ffn"):
                for k, v in vars(getattr(layer, part)).items():
                    out[f"layers.{i}.{part}.{k}"] = v
        for k, v in vars(self.norm_out).items():
            out[f"norm_out.{k}"] = v
        return out


def pqg_forward(audio, state: PqgState) -> Tensor:
    """Expand a 1 x D audio feature into ``num_queries`` x D generated queries."""
    cfg = state.config
    audio = as_tensor(audio, 2, "audio")
    if audio.shape != (1, cfg.embed_dim):
        raise ShapeError(f"audio must be 1x{cfg.embed_dim}, got {audio.shape}")
    attn_cfg = cfg.attention_config()
    x = np.concatenate([audio, state.q_learn], axis=0)
    for layer in state.layers:
        h = layer.norm_attn(x)
        x = add(x, multi_head_attention(h, h, h, attn_cfg, layer.attn))
        x = add(x, layer.ffn(layer.norm_ffn(x)))
    x = state.norm_out(x)
    return x[1:]


def pqg_attention_logits(audio, q_learn) -> Tensor:
    """``Q' Q'^T`` for ``Q' = [audio ; q_learn]``, assembled from its four blocks.

    Layout: entry (0, 0) is audio . audio, row 0 tail is audio . q_learn^T,
    column 0 tail is q_learn . audio^T, the rest is q_learn . q_learn^T.
    """
    audio = as_tensor(audio, 2, "audio")
    q_learn = as_tensor(q_learn, 2, "q_learn")
    if audio.shape[0] != 1 or audio.shape[1] != q_learn.shape[1]:
        raise ShapeError(f"audio {audio.shape} incompatible with queries {q_learn.shape}")
    nq = q_learn.shape[0]
    out = np.empty((nq + 1, nq + 1))
    out[:1, :1] = matmul(audio, audio.T)
    out[:1, 1:] = matmul(audio, q_learn.T)
    out[1:, :1] = matmul(q_learn, audio.T)
    out[1:, 1:] = matmul(q_learn, q_learn.T)
    return out


@dataclass(frozen=True)
class DissipationReport:
    num_keys: int
    index: float
    dissipated: bool


def pqg_breaks_dissipation(audio, state: PqgState, visual, tol: float = 1e-9) -> DissipationReport:
    """Cross-attend visual patches to the generated queries and diagnose the result."""
    visual = as_tensor(visual, 2, "visual")
    if visual.shape[0] < 2:
        raise ValueError("need at least 2 visual patches")
    f_gen = pqg_forward(audio, state)
    res = cross_attention(visual, f_gen, f_gen, scaled=True)
    return DissipationReport(f_gen.shape[0], dissipation_index(res), is_dissipated(res, tol))


def bias_query_generator(audio, bias) -> Tensor:
    """Baseline expansion: the audio row replicated with a per-query bias added."""
    audio = as_tensor(audio, 2, "audio")
    bias = as_tensor(bias, 2, "bias")
    if audio.shape[0] != 1 or audio.shape[1] != bias.shape[1]:
        raise ShapeError(f"audio {audio.shape} incompatible with bias {bias.shape}")
    return add(bias, audio)


def save_state(path: str | Path, state: PqgState) -> None:
    cfg = state.config
    meta = np.array([cfg.num_queries, cfg.embed_dim, cfg.num_layers, cfg.num_heads], dtype=float)
    save_named(path, {"config": meta, **state.tensors()})


def load_state(path: str | Path) -> PqgState:
    t = load_named(path)
    nq, d, nl, nh = (int(v) for v in t.pop("config"))
    cfg = PqgConfig(nq, d, nl, nh)
    state = PqgState.zeroed(cfg, t.pop("q_learn"))
    for name, value in t.items():
        obj = state
        *path_parts, leaf = name.split(".")
        for part in path_parts:
            obj = obj[int(part)] if part.isdigit() else getattr(obj, part)
        if getattr(obj, leaf).shape != value.shape:
            raise ValueError(f"{name}: stored shape {value.shape} does not match config")
        setattr(obj, leaf, value)
    return state
