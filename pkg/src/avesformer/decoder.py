"""Early-focus decoder.

Stages run in layout order at the working resolution (stride 8). Conv stages
apply ``LN(F + RepBlock(F))`` on the spatial map; transformer stages flatten
the map into patches and apply ``LN(P + CA(P, F_gen, F_gen))`` followed by a
feed-forward sub-block with its own residual and norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionParams, AttentionResult, MultiHeadConfig, multi_head_attention
from .layers import FeedForwardParams, LayerNormParams
from .tensor import (
    Rng,
    ShapeError,
    Tensor,
    add,
    as_tensor,
    bilinear_resize,
    conv2d,
    logistic,
    patches_to_spatial,
    spatial_to_patches,
)

WORKING_STRIDE = 8
CONV = "C"
TRANSFORMER = "T"
ABLATION_LAYOUTS = ("T-T-T", "C-T-T", "T-C-T", "T-T-C")


@dataclass(frozen=True)
class DecoderLayout:
    stages: tuple[str, ...]

    def __post_init__(self):
        if not self.stages:
            raise ValueError("a layout needs at least one stage")
        bad = [s for s in self.stages if s not in (CONV, TRANSFORMER)]
        if bad:
            raise ValueError(f"unknown stage kind(s) {bad}; use 'C' or 'T'")

    @classmethod
    def parse(cls, text: str) -> "DecoderLayout":
        parts = tuple(p.strip().upper() for p in text.split("-"))
        if any(p not in (CONV, TRANSFORMER) for p in parts):
            raise ValueError(f"cannot parse layout {text!r}: stages must be C or T joined by '-'")
        return cls(parts)

    def __str__(self) -> str:
        return "-".join(self.stages)

    @property
    def num_conv(self) -> int:
        return self.stages.count(CONV)

    @property
    def num_transformer(self) -> int:
        return self.stages.count(TRANSFORMER)


# ---------------------------------------------------------------------------
# RepBlock
# ---------------------------------------------------------------------------


@dataclass
class RepBlockParams:
    """3x3 + 1x1 (+ identity) branches; ``fused`` holds the single-3x3 equivalent."""

    w3: Tensor  # C x C x 3 x 3
    b3: Tensor
    w1: Tensor | None = None  # C x C x 1 x 1
    b1: Tensor | None = None
    identity: bool = True
    fused_w: Tensor | None = None
    fused_b: Tensor | None = None

    @classmethod
    def init(cls, channels: int, rng: Rng, identity: bool = True) -> "RepBlockParams":
        b3 = 1.0 / math.sqrt(channels * 9)
        b1 = 1.0 / math.sqrt(channels)
        return cls(
            rng.uniform((channels, channels, 3, 3), -b3, b3),
            rng.uniform(channels, -b3, b3),
            rng.uniform((channels, channels, 1, 1), -b1, b1),
            rng.uniform(channels, -b1, b1),
            identity,
        )

    @classmethod
    def zeros(cls, channels: int, identity: bool = False) -> "RepBlockParams":
        return cls(
            np.zeros((channels, channels, 3, 3)),
            np.zeros(channels),
            np.zeros((channels, channels, 1, 1)),
            np.zeros(channels),
            identity,
        )

    @property
    def channels(self) -> int:
        return self.w3.shape[0]

    @property
    def is_fused(self) -> bool:
        return self.fused_w is not None


def repblock_branches(x, p: RepBlockParams) -> Tensor:
    """Training-form evaluation: sum of the separate branches."""
    out = conv2d(x, p.w3, p.b3, stride=1, pad=1)
    if p.w1 is not None:
        out = add(out, conv2d(x, p.w1, p.b1, stride=1, pad=0))
    if p.identity:
        out = add(out, x)
    return out


def fuse_repblock(p: RepBlockParams) -> RepBlockParams:
    """Fold every branch into one 3x3 kernel and bias; branches are kept."""
    c = p.channels
    w = p.w3.copy()
    b = p.b3.copy()
    if p.w1 is not None:
        w[:, :, 1, 1] += p.w1[:, :, 0, 0]
        b += p.b1
    if p.identity:
        w[np.arange(c), np.arange(c), 1, 1] += 1.0
    return RepBlockParams(p.w3, p.b3, p.w1, p.b1, p.identity, w, b)


def repblock(x, p: RepBlockParams) -> Tensor:
    if p.is_fused:
        return conv2d(x, p.fused_w, p.fused_b, stride=1, pad=1)
    return repblock_branches(x, p)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


@dataclass
class ConvStageParams:
    block: RepBlockParams
    norm: LayerNormParams


@dataclass
class AttnStageParams:
    attn: AttentionParams | None
    norm_attn: LayerNormParams
    ffn: FeedForwardParams
    norm_ffn: LayerNormParams


def conv_stage(x, params: ConvStageParams) -> Tensor:
    """``LN(x + RepBlock(x))`` with the norm taken over channels per pixel."""
    x = as_tensor(x, 3, "conv stage input")
    if x.shape[0] != params.block.channels:
        raise ShapeError(f"conv stage expects {params.block.channels} channels, got {x.shape[0]}")
    _, h, w = x.shape
    y = add(x, repblock(x, params.block))
    return patches_to_spatial(params.norm(spatial_to_patches(y)), h, w)


def attn_stage(p_visual, f_gen, cfg: MultiHeadConfig, params: AttnStageParams):
    """Patch rows attend to the generated queries; returns (N x D output, per-head results)."""
    p_visual = as_tensor(p_visual, 2, "visual patches")
    f_gen = as_tensor(f_gen, 2, "generated queries")
    if p_visual.shape[1] != cfg.embed_dim or f_gen.shape[1] != cfg.embed_dim:
        raise ShapeError(
            f"attention stage expects dim {cfg.embed_dim}, got {p_visual.shape[1]} / {f_gen.shape[1]}"
        )
    ca, heads = multi_head_attention(p_visual, f_gen, f_gen, cfg, params.attn, return_heads=True)
    p = params.norm_attn(add(p_visual, ca))
    p = params.norm_ffn(add(p, params.ffn(p)))
    return p, heads


# ---------------------------------------------------------------------------
# pyramid and full decoder
# ---------------------------------------------------------------------------


@dataclass
class FeaturePyramid:
    """Levels F1..F4 at strides 4, 8, 16, 32 of an H x W image."""

    levels: list[Tensor]
    height: int
    width: int

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ValueError(f"image extents {self.height}x{self.width} must be divisible by 32")
        if len(self.levels) != 4:
            raise ValueError("a feature pyramid has exactly four levels")
        for i, lvl in enumerate(self.levels, start=1):
            s = 2 ** (i + 1)
            want = (self.height // s, self.width // s)
            if lvl.ndim != 3 or lvl.shape[1:] != want:
                raise ShapeError(f"level {i} has shape {lvl.shape}, expected c x {want[0]} x {want[1]}")

    @property
    def channels(self) -> list[int]:
        return [lvl.shape[0] for lvl in self.levels]


@dataclass
class FusedOutput:
    fused: Tensor  # D x h x w
    f_elf: Tensor | None
    attention: list[list[AttentionResult]] = field(default_factory=list)
    layout: DecoderLayout | None = None


@dataclass
class DecoderParams:
    layout: DecoderLayout
    embed_dim: int
    num_heads: int
    proj_w: list[Tensor]  # D x c_i x 1 x 1
    proj_b: list[Tensor]
    stages: list[ConvStageParams | AttnStageParams]

    @classmethod
    def init(
        cls,
        layout: DecoderLayout,
        channels: Sequence[int],
        embed_dim: int,
        num_heads: int,
        rng: Rng,
        fused: bool = True,
    ) -> "DecoderParams":
        d = embed_dim
        MultiHeadConfig(d, num_heads)
        proj_w, proj_b = [], []
        for c in channels:
            bound = 1.0 / math.sqrt(c)
            proj_w.append(rng.uniform((d, c, 1, 1), -bound, bound))
            proj_b.append(rng.uniform(d, -bound, bound))
        stages: list[ConvStageParams | AttnStageParams] = []
        for kind in layout.stages:
            if kind == CONV:
                block = RepBlockParams.init(d, rng)
                stages.append(ConvStageParams(fuse_repblock(block) if fused else block, LayerNormParams.identity(d)))
            else:
                stages.append(
                    AttnStageParams(
                        AttentionParams.init(d, rng),
                        LayerNormParams.identity(d),
                        FeedForwardParams.init(d, rng),
                        LayerNormParams.identity(d),
                    )
                )
        return cls(layout, d, num_heads, proj_w, proj_b, stages)

    @property
    def attention_config(self) -> MultiHeadConfig:
        return MultiHeadConfig(self.embed_dim, self.num_heads, use_projections=True)


def working_extent(height: int, width: int) -> tuple[int, int]:
    return height // WORKING_STRIDE, width // WORKING_STRIDE


def merge_pyramid(pyramid: FeaturePyramid, params: DecoderParams) -> Tensor:
    """1x1-project every level to D, resize to stride 8, and sum."""
    h, w = working_extent(pyramid.height, pyramid.width)
    merged = None
    for lvl, pw, pb in zip(pyramid.levels, params.proj_w, params.proj_b):
        y = conv2d(lvl, pw, pb)
        if y.shape[1:] != (h, w):
            y = bilinear_resize(y, h, w)
        merged = y if merged is None else add(merged, y)
    return merged


def run_stage(kind: str, x: Tensor, f_gen, stage_params, cfg: MultiHeadConfig):
    """One stage on a D x h x w map; returns (map, per-head results or None)."""
    if kind == CONV:
        return conv_stage(x, stage_params), None
    _, h, w = x.shape
    p, heads = attn_stage(spatial_to_patches(x), f_gen, cfg, stage_params)
    return patches_to_spatial(p, h, w), heads


def decoder_forward(pyramid: FeaturePyramid, f_gen, params: DecoderParams) -> FusedOutput:
    layout = params.layout
    if len(layout.stages) != len(params.stages):
        raise ValueError("layout and stage parameters disagree in length")
    cfg = params.attention_config
    x = merge_pyramid(pyramid, params)
    f_elf = None
    attention = []
    for kind, sp in zip(layout.stages, params.stages):
        x, heads = run_stage(kind, x, f_gen, sp, cfg)
        if kind == CONV:
            f_elf = x
        else:
            attention.append(heads)
    return FusedOutput(x, f_elf, attention, layout)


@dataclass
class MaskHeadParams:
    w: Tensor  # 1 x D x 1 x 1
    b: Tensor  # (1,)

    @classmethod
    def init(cls, embed_dim: int, rng: Rng) -> "MaskHeadParams":
        bound = 1.0 / math.sqrt(embed_dim)
        return cls(rng.uniform((1, embed_dim, 1, 1), -bound, bound), rng.uniform(1, -bound, bound))

    @classmethod
    def zeros(cls, embed_dim: int) -> "MaskHeadParams":
        return cls(np.zeros((1, embed_dim, 1, 1)), np.zeros(1))


def mask_head(fused, height: int, width: int, params: MaskHeadParams) -> Tensor:
    """1x1 conv to one channel, bilinear upsample to H x W, logistic."""
    logits = conv2d(fused, params.w, params.b)
    return logistic(bilinear_resize(logits, height, width))
