import csv

import numpy as np
import pytest

from avesformer.attention import AttentionParams, MultiHeadConfig
from avesformer.decoder import (
    AttnStageParams,
    ConvStageParams,
    DecoderLayout,
    DecoderParams,
    MaskHeadParams,
    RepBlockParams,
    attn_stage,
    conv_stage,
    decoder_forward,
    fuse_repblock,
    mask_head,
    merge_pyramid,
)
from avesformer.layers import FeedForwardParams, LayerNormParams
from avesformer.model import ModelConfig, ModelParams, make_scene, model_forward, model_graph, model_param_count, synth_pyramid
from avesformer.profiler import (
    OpCost,
    ProfileReport,
    Step,
    attn_stage_graph,
    attn_stage_param_count,
    bench_latency,
    conv_stage_graph,
    conv_stage_param_count,
    count_flops,
    count_params,
    decoder_graph,
    latency_stats,
    mask_head_graph,
    merge_graph,
    pqg_graph,
    pqg_param_count,
    runtime_breakdown,
)
from avesformer.query_gen import PqgConfig, PqgState, pqg_forward
from avesformer.tensor import Rng, count_ops


def instrumented(fn):
    with count_ops() as c:
        fn()
    return c.flops


def attn_stage_params(d, rng):
    return AttnStageParams(AttentionParams.init(d, rng), LayerNormParams.identity(d), FeedForwardParams.init(d, rng), LayerNormParams.identity(d))


class TestCountFlops:
    def test_matmul_hand_value(self):
        assert count_flops([OpCost("matmul", (4, 4, 4))]) == 128

    def test_conv_hand_value(self):
        assert count_flops([OpCost("conv2d", (3, 2, 3, 5, 5))]) == 2700

    def test_counter_agrees_on_hand_values(self, rng):
        from avesformer.tensor import conv2d, matmul

        assert instrumented(lambda: matmul(rng.normal((4, 4)), rng.normal((4, 4)))) == 128
        x, w = rng.normal((2, 5, 5)), rng.normal((3, 2, 3, 3))
        assert instrumented(lambda: conv2d(x, w, pad=1)) == 2700

    def test_unmodeled_op_rejected(self):
        with pytest.raises(ValueError, match="gelu"):
            count_flops([OpCost("gelu", (10,), "act")])

    def test_empty_graph(self):
        assert count_flops([]) == 0


class TestOracleEquivalence:
    def test_attn_stage(self, rng):
        d, h, w, nq, heads = 32, 6, 5, 4, 4
        params = attn_stage_params(d, rng)
        p, f_gen = rng.normal((h * w, d)), rng.normal((nq, d))
        got = instrumented(lambda: attn_stage(p, f_gen, MultiHeadConfig(d, heads), params))
        assert got == count_flops(attn_stage_graph(h * w, nq, d, heads))

    @pytest.mark.parametrize("fused", [True, False])
    def test_conv_stage(self, rng, fused):
        d, h, w = 8, 7, 6
        block = RepBlockParams.init(d, rng)
        if fused:
            block = fuse_repblock(block)
        x = rng.normal((d, h, w))
        got = instrumented(lambda: conv_stage(x, ConvStageParams(block, LayerNormParams.identity(d))))
        assert got == count_flops(conv_stage_graph(d, h, w, fused))

    def test_pqg(self, rng):
        cfg = PqgConfig(5, 16, 2, 4)
        state = PqgState.init(cfg, rng)
        got = instrumented(lambda: pqg_forward(rng.normal((1, 16)), state))
        assert got == count_flops(pqg_graph(5, 16, 2, 4))

    def test_mask_head_and_merge(self, rng):
        cfg = ModelConfig(embed_dim=16, num_heads=2, height=64, width=96, channels=(4, 8, 8, 16))
        pyramid = synth_pyramid(cfg, rng)
        params = DecoderParams.init(DecoderLayout.parse("T"), cfg.channels, 16, 2, rng)
        assert instrumented(lambda: merge_pyramid(pyramid, params)) == count_flops(merge_graph(cfg.channels, 64, 96, 16))
        head = MaskHeadParams.init(16, rng)
        x = rng.normal((16, 8, 12))
        assert instrumented(lambda: mask_head(x, 64, 96, head)) == count_flops(mask_head_graph(16, 8, 12, 64, 96))

    @pytest.mark.parametrize("layout", ["C-T-T", "T-T-T", "T-C-T", "T-T-C", "C-C-T"])
    def test_decoder_small(self, rng, layout):
        cfg = ModelConfig(embed_dim=16, num_heads=2, num_queries=3, height=64, width=64, channels=(4, 8, 8, 16))
        params = DecoderParams.init(DecoderLayout.parse(layout), cfg.channels, 16, 2, rng)
        pyramid = synth_pyramid(cfg, rng)
        f_gen = rng.normal((3, 16))
        got = instrumented(lambda: decoder_forward(pyramid, f_gen, params))
        assert got == count_flops(decoder_graph(DecoderLayout.parse(layout), cfg.channels, 64, 64, 16, 3, 2))

    def test_full_default_model(self):
        cfg = ModelConfig(seed=3)
        params = ModelParams.init(cfg)
        scene = make_scene(cfg)
        got = instrumented(lambda: model_forward(scene, cfg, params))
        assert got == count_flops(model_graph(cfg)) == 3_308_680_080

    def test_default_shape_ordering(self):
        d, n, nq = 256, 28 * 28, 16
        conv = count_flops(conv_stage_graph(d, 28, 28))
        attn = count_flops(attn_stage_graph(n, nq, d, 8))
        assert (conv, attn) == (926_650_368, 1_051_074_560)
        assert conv < attn
        ctt = count_flops(model_graph(ModelConfig(layout="C-T-T")))
        ttt = count_flops(model_graph(ModelConfig(layout="T-T-T")))
        assert ttt - ctt == attn - conv


class TestCountParams:
    def test_mask_head(self):
        assert count_params(MaskHeadParams.zeros(256)) == 257

    def test_layer_norm(self):
        assert count_params(LayerNormParams.identity(256)) == 512

    def test_default_pqg(self):
        state = PqgState.init(PqgConfig(), Rng(0))
        assert count_params(state) == pqg_param_count(16, 256, 3)

    def test_stages(self, rng):
        block = RepBlockParams.init(8, rng)
        ln = LayerNormParams.identity(8)
        assert count_params(ConvStageParams(block, ln)) == conv_stage_param_count(8, fused=False)
        assert count_params(ConvStageParams(fuse_repblock(block), ln)) == conv_stage_param_count(8, fused=True)
        assert count_params(attn_stage_params(8, rng)) == attn_stage_param_count(8)

    @pytest.mark.parametrize("layout", ["C-T-T", "T-T-T"])
    def test_model(self, layout):
        cfg = ModelConfig(layout=layout)
        assert count_params(ModelParams.init(cfg)) == model_param_count(cfg)

    def test_default_total(self):
        assert model_param_count(ModelConfig()) == 4_791_041


class TestLatency:
    def test_order_statistics(self):
        stats = bench_latency(lambda: 1 + 1, warmup=2, runs=5)
        assert 0 <= stats.p25 <= stats.median <= stats.p75
        assert stats.runs == 5 and len(stats.samples) == 5
        assert stats.inner > 1

    def test_result_consumed(self):
        calls = []
        bench_latency(lambda: calls.append(1), warmup=1, runs=3)
        assert len(calls) >= 1 + 1 + 3

    def test_runs_minimum(self):
        with pytest.raises(ValueError):
            bench_latency(lambda: None, runs=2)

    def test_latency_stats(self):
        s = latency_stats([4.0, 1.0, 3.0, 2.0, 5.0])
        assert (s.p25, s.median, s.p75) == (2.0, 3.0, 4.0)


class TestBreakdown:
    def test_single_component(self):
        report = runtime_breakdown([Step("only", lambda s: s + 1, 7, 3)], 0, runs=3, warmup=0)
        assert report.entries[0].percent == 100.0
        assert (report.total_flops, report.total_params) == (7, 3)

    def test_percentages_sum(self):
        steps = [Step(f"s{i}", lambda s, i=i: sum(range(200 * (i + 1)))) for i in range(4)]
        report = runtime_breakdown(steps, 0, runs=5, warmup=1)
        assert abs(sum(e.percent for e in report.entries) - 100.0) <= 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            runtime_breakdown([], None)

    def test_csv_and_text(self, tmp_path):
        report = runtime_breakdown([Step("a", lambda s: s, 10, 2), Step("b", lambda s: s, 5, 1)], 0, runs=3, warmup=0, title="demo")
        report.write_csv(tmp_path / "r.csv")
        rows = list(csv.reader(open(tmp_path / "r.csv")))
        assert rows[0] == list(ProfileReport.CSV_COLUMNS)
        assert [r[:3] for r in rows[1:]] == [["a", "10", "2"], ["b", "5", "1"]]
        text = report.to_text()
        assert text.splitlines()[0] == "demo"
        assert "total: 15 FLOPs, 3 params" in text
        assert report.entry("b").flops == 5
        with pytest.raises(KeyError):
            report.entry("c")

    @pytest.mark.slow
    def test_ttt_transformer_share(self):
        from avesformer.model import model_steps

        cfg = ModelConfig(layout="T-T-T", seed=1)
        params = ModelParams.init(cfg)
        report = runtime_breakdown(model_steps(cfg, params, make_scene(cfg)), None, runs=3, warmup=1)
        share = sum(e.percent for e in report.entries if e.component.endswith("transformer"))
        rest = sum(e.percent for e in report.entries if e.component.endswith("conv") or e.component == "mask_head")
        assert share > rest
        assert [e.component for e in report.entries] == [
            "query_generator", "pyramid_projection", "stage1_transformer", "stage2_transformer", "stage3_transformer", "mask_head"
        ]
