"""Model assembly over synthetic backbone features, plus the config file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import profiler
from .attention import AttentionResult, is_dissipated
from .decoder import (
    CONV,
    DecoderLayout,
    DecoderParams,
    FeaturePyramid,
    FusedOutput,
    MaskHeadParams,
    decoder_forward,
    mask_head,
    merge_pyramid,
    run_stage,
    working_extent,
)
from .losses import LOSS_PROFILES, LossWeights
from .query_gen import PqgConfig, PqgState, pqg_forward
from .tensor import Rng, Tensor

DEFAULT_CHANNELS = (64, 128, 256, 512)


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 256
    num_queries: int = 16
    pqg_layers: int = 3
    num_heads: int = 8
    layout: str = "C-T-T"
    height: int = 224
    width: int = 224
    channels: tuple[int, ...] = DEFAULT_CHANNELS
    loss_profile: str = "S4MS3"
    seed: int = 0

    def __post_init__(self):
        for name in ("embed_dim", "num_queries", "pqg_layers", "num_heads", "height", "width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.height % 32 or self.width % 32:
            raise ValueError(f"image extents {self.height}x{self.width} must be divisible by 32")
        if len(self.channels) != 4 or min(self.channels) < 1:
            raise ValueError("channels must list four positive counts")
        if self.loss_profile not in LOSS_PROFILES:
            raise ValueError(f"loss_profile must be one of {sorted(LOSS_PROFILES)}")
        DecoderLayout.parse(self.layout)
        self.pqg_config()

    @property
    def decoder_layout(self) -> DecoderLayout:
        return DecoderLayout.parse(self.layout)

    @property
    def loss_weights(self) -> LossWeights:
        return LOSS_PROFILES[self.loss_profile]

    def pqg_config(self) -> PqgConfig:
        return PqgConfig(self.num_queries, self.embed_dim, self.pqg_layers, self.num_heads)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


class ConfigError(ValueError):
    pass


def _parse_value(key: str, raw: str, lineno: int):
    kind = {f.name: f.type for f in dataclasses.fields(ModelConfig)}[key]
    try:
        if key == "channels":
            return tuple(int(tok) for tok in raw.replace(",", " ").split())
        if kind == "int":
            return int(raw, 0)
        if key == "layout":
            DecoderLayout.parse(raw)
        return raw
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value {raw!r} for {key}") from None


def parse_config(text: str) -> ModelConfig:
    """``key = value`` lines; '#' starts a comment; unknown keys are errors."""
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key or not raw:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw, lineno)
    try:
        return ModelConfig(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path) -> ModelConfig:
    return parse_config(Path(path).read_text())


# ---------------------------------------------------------------------------
# synthetic inputs
# ---------------------------------------------------------------------------


def synth_pyramid(cfg: ModelConfig, rng: Rng) -> FeaturePyramid:
    levels = []
    for i, c in enumerate(cfg.channels, start=1):
        s = 2 ** (i + 1)
        levels.append(rng.normal((c, cfg.height // s, cfg.width // s)))
    return FeaturePyramid(levels, cfg.height, cfg.width)


def synth_mask(rng: Rng, height: int, width: int) -> Tensor:
    """A filled ellipse with random centre and radii."""
    cy, cx = rng.uniform(2, 0.3, 0.7) * np.array([height, width])
    ry, rx = rng.uniform(2, 0.1, 0.3) * np.array([height, width])
    yy, xx = np.mgrid[0:height, 0:width]
    inside = ((yy + 0.5 - cy) / ry) ** 2 + ((xx + 0.5 - cx) / rx) ** 2 <= 1.0
    return inside.astype(np.float64)


@dataclass
class SyntheticScene:
    pyramid: FeaturePyramid
    audio: Tensor  # 1 x D
    mask: Tensor  # H x W


def make_scene(cfg: ModelConfig, index: int = 0) -> SyntheticScene:
    rng = Rng(cfg.seed).spawn(1_000_003 + index)
    pyramid = synth_pyramid(cfg, rng)
    audio = rng.normal((1, cfg.embed_dim))
    return SyntheticScene(pyramid, audio, synth_mask(rng, cfg.height, cfg.width))


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


@dataclass
class ModelParams:
    pqg: PqgState
    decoder: DecoderParams
    head: MaskHeadParams

    @classmethod
    def init(cls, cfg: ModelConfig, fused: bool = True) -> "ModelParams":
        rng = Rng(cfg.seed)
        pqg = PqgState.init(cfg.pqg_config(), rng.spawn(1))
        decoder = DecoderParams.init(
            cfg.decoder_layout, cfg.channels, cfg.embed_dim, cfg.num_heads, rng.spawn(2), fused=fused
        )
        return cls(pqg, decoder, MaskHeadParams.init(cfg.embed_dim, rng.spawn(3)))


@dataclass
class ModelOutput:
    mask: Tensor  # 1 x H x W
    f_gen: Tensor
    decoder: FusedOutput
    dissipated: list[bool] = field(default_factory=list)

    @property
    def f_elf(self) -> Tensor | None:
        return self.decoder.f_elf

    @property
    def attention(self) -> list[list[AttentionResult]]:
        return self.decoder.attention


def stage_dissipated(heads: list[AttentionResult], tol: float = 1e-9) -> bool:
    """A transformer stage is dissipated when every one of its heads is."""
    return all(is_dissipated(h, tol) for h in heads)


def model_forward(scene: SyntheticScene, cfg: ModelConfig, params: ModelParams) -> ModelOutput:
    f_gen = pqg_forward(scene.audio, params.pqg)
    fused = decoder_forward(scene.pyramid, f_gen, params.decoder)
    mask = mask_head(fused.fused, cfg.height, cfg.width, params.head)
    flags = [stage_dissipated(heads) for heads in fused.attention]
    return ModelOutput(mask, f_gen, fused, flags)


# ---------------------------------------------------------------------------
# profiling views
# ---------------------------------------------------------------------------


def model_steps(cfg: ModelConfig, params: ModelParams, scene: SyntheticScene) -> list[profiler.Step]:
    """The forward pass as named components for :func:`profiler.runtime_breakdown`.

    State passed between steps is ``(f_gen, x)``.
    """
    d, nq, heads = cfg.embed_dim, cfg.num_queries, cfg.num_heads
    h, w = working_extent(cfg.height, cfg.width)
    layout = cfg.decoder_layout
    attn_cfg = params.decoder.attention_config
    fused = all(sp.block.is_fused for kind, sp in zip(layout.stages, params.decoder.stages) if kind == CONV)

    steps = [
        profiler.Step(
            "query_generator",
            lambda s: (pqg_forward(scene.audio, params.pqg), None),
            profiler.count_flops(profiler.pqg_graph(nq, d, cfg.pqg_layers, heads)),
            profiler.count_params(params.pqg),
        ),
        profiler.Step(
            "pyramid_projection",
            lambda s: (s[0], merge_pyramid(scene.pyramid, params.decoder)),
            profiler.count_flops(profiler.merge_graph(cfg.channels, cfg.height, cfg.width, d)),
            profiler.count_params([params.decoder.proj_w, params.decoder.proj_b]),
        ),
    ]
    for i, (kind, sp) in enumerate(zip(layout.stages, params.decoder.stages), start=1):
        if kind == CONV:
            graph = profiler.conv_stage_graph(d, h, w, fused)
        else:
            graph = profiler.attn_stage_graph(h * w, nq, d, heads)

        def fn(s, kind=kind, sp=sp):
            return s[0], run_stage(kind, s[1], s[0], sp, attn_cfg)[0]

        steps.append(
            profiler.Step(f"stage{i}_{'conv' if kind == CONV else 'transformer'}", fn, profiler.count_flops(graph), profiler.count_params(sp))
        )
    steps.append(
        profiler.Step(
            "mask_head",
            lambda s: mask_head(s[1], cfg.height, cfg.width, params.head),
            profiler.count_flops(profiler.mask_head_graph(d, h, w, cfg.height, cfg.width)),
            profiler.count_params(params.head),
        )
    )
    return steps


def model_graph(cfg: ModelConfig, fused: bool = True) -> list[profiler.OpCost]:
    d = cfg.embed_dim
    h, w = working_extent(cfg.height, cfg.width)
    return (
        profiler.pqg_graph(cfg.num_queries, d, cfg.pqg_layers, cfg.num_heads)
        + profiler.decoder_graph(
            cfg.decoder_layout, cfg.channels, cfg.height, cfg.width, d, cfg.num_queries, cfg.num_heads, fused
        )
        + profiler.mask_head_graph(d, h, w, cfg.height, cfg.width)
    )


def model_param_count(cfg: ModelConfig, fused: bool = True) -> int:
    """Closed-form parameter total for the query generator, decoder and mask head."""
    d = cfg.embed_dim
    total = profiler.pqg_param_count(cfg.num_queries, d, cfg.pqg_layers)
    total += profiler.merge_param_count(cfg.channels, d)
    for kind in cfg.decoder_layout.stages:
        total += profiler.conv_stage_param_count(d, fused) if kind == CONV else profiler.attn_stage_param_count(d)
    return total + profiler.mask_head_param_count(d)
