"""Command-line entry point: ``avesformer <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import profiler
from .attention import cross_attention, dissipation_index, write_pgm
from .decoder import ABLATION_LAYOUTS, decoder_forward
from .losses import binarize, f_score, gradcheck, jaccard, write_metrics_csv
from .model import ModelConfig, ModelParams, load_config, make_scene, model_forward, model_graph, model_steps
from .query_gen import PqgConfig, PqgState, pqg_breaks_dissipation, pqg_forward
from .tensor import Rng, load_tensor

log = logging.getLogger("avesformer")

GRADCHECK_TOL = 1e-5


def _config(args) -> ModelConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ModelConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _heads_for(dim: int) -> int:
    return next(h for h in (8, 4, 2, 1) if dim % h == 0)


def cmd_dissipation_demo(args) -> int:
    rng = Rng(args.seed)
    query = rng.normal((args.n, args.c))
    audio = rng.normal((1, args.c))
    res = cross_attention(query, audio, audio, scaled=False)
    np.set_printoptions(precision=6, suppress=True, linewidth=120)
    print(f"visual patches: {args.n}x{args.c}, audio tokens: 1x{args.c}")
    print("attention weights:")
    print(res.weights)
    index = dissipation_index(res)
    holds = bool(np.all(res.weights == 1.0) and np.all(res.output == audio) and index == 0.0)
    print(f"dissipation_index: {index:.6f}")
    print(f"every output row equals the audio feature: {bool(np.all(res.output == audio))}")

    pqg = PqgState.init(PqgConfig(args.queries, args.c, 3, _heads_for(args.c)), rng.spawn(1))
    report = pqg_breaks_dissipation(audio, pqg, query)
    print(f"with {report.num_keys} generated queries:")
    print(f"dissipation_index: {report.index:.6f}")
    print(f"is_dissipated: {report.dissipated}")
    print("theorem holds" if holds else "THEOREM VIOLATED")
    return 0 if holds else 1


def _write_report(report: profiler.ProfileReport, out: Path, figure: bool) -> None:
    out.parent.mkdir(parents=True, exist_ok=True)
    report.write_csv(out)
    if figure:
        from .plotting import plot_runtime_breakdown

        plot_runtime_breakdown(report, out.with_suffix(".png"))


def cmd_bench(args) -> int:
    cfg = _config(args)
    if args.layout:
        cfg = cfg.replace(layout=args.layout)
    log.info("bench config: %s", cfg)
    params = ModelParams.init(cfg)
    scene = make_scene(cfg)
    report = profiler.runtime_breakdown(
        model_steps(cfg, params, scene), None, runs=args.runs, warmup=args.warmup, title=f"layout {cfg.layout}"
    )
    _write_report(report, Path(args.out), not args.no_figure)
    print(report.to_text())
    return 0


def cmd_ablate_layouts(args) -> int:
    base = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = make_scene(base)
    rows = []
    for layout in ABLATION_LAYOUTS:
        cfg = base.replace(layout=layout)
        log.info("profiling layout %s", layout)
        params = ModelParams.init(cfg)
        report = profiler.runtime_breakdown(
            model_steps(cfg, params, scene), None, runs=args.runs, warmup=args.warmup, title=f"layout {layout}"
        )
        _write_report(report, out / f"{layout}.csv", not args.no_figure)
        f_gen = pqg_forward(scene.audio, params.pqg)
        lat = profiler.bench_latency(lambda: decoder_forward(scene.pyramid, f_gen, params.decoder), args.warmup, args.runs)
        rows.append((layout, profiler.count_flops(model_graph(cfg)), report.total_params, lat))
    ref = next(r[1] for r in rows if r[0] == "T-T-T")
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layout", "flops", "params", "decoder_ms_median", "decoder_ms_p25", "decoder_ms_p75", "flops_vs_TTT"])
        for layout, flops, params_, lat in rows:
            writer.writerow([layout, flops, params_, f"{lat.median:.4f}", f"{lat.p25:.4f}", f"{lat.p75:.4f}", f"{flops / ref:.6f}"])
    if not args.no_figure:
        from .plotting import plot_layout_comparison

        plot_layout_comparison([r[0] for r in rows], [r[1] / 1e9 for r in rows], [r[3].median for r in rows], out / "summary.png")
    print(f"{'layout':8} {'flops':>12} {'params':>9} {'decoder_ms':>11} {'vs T-T-T':>9}")
    for layout, flops, params_, lat in rows:
        print(f"{layout:8} {flops:12d} {params_:9d} {lat.median:11.3f} {flops / ref:9.4f}")
    return 0


def cmd_attn_maps(args) -> int:
    cfg = _config(args)
    if args.stage_count < 1:
        raise ValueError("--stage-count must be >= 1")
    cfg = cfg.replace(layout="-".join(["T"] * args.stage_count))
    if args.num_queries is not None:
        cfg = cfg.replace(num_queries=args.num_queries)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scene = make_scene(cfg)
    result = model_forward(scene, cfg, ModelParams.init(cfg))
    h, w = cfg.height // 8, cfg.width // 8
    for k, heads in enumerate(result.attention, start=1):
        weights = np.mean([hd.weights for hd in heads], axis=0)
        write_pgm(out_dir / f"stage{k}_weights.pgm", weights)
        m = weights.shape[1]
        tiles = weights.T.reshape(m, h, w)
        write_pgm(out_dir / f"stage{k}_maps.pgm", np.concatenate(list(tiles), axis=1))
        if not args.no_figure:
            from .plotting import plot_attention_maps

            plot_attention_maps(weights, h, w, out_dir / f"stage{k}_maps.png", title=f"stage {k}")
        index = float(np.mean([dissipation_index(hd) for hd in heads]))
        print(f"stage {k}: {weights.shape[0]}x{m} weights, mean head dissipation_index {index:.6f}, "
              f"dissipated {result.dissipated[k - 1]}")
    return 0


def cmd_gradcheck(args) -> int:
    res = gradcheck(args.cases, args.seed)
    ok = res.max_rel_error < GRADCHECK_TOL
    print(f"cases: {res.cases}")
    print(f"max relative error: {res.max_rel_error:.3e} ({res.worst_loss or 'n/a'})")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def _load_mask(path: Path) -> np.ndarray:
    t = load_tensor(path)
    if t.ndim == 3 and t.shape[0] == 1:
        t = t[0]
    if t.ndim != 2:
        raise ValueError(f"{path}: expected an HxW or 1xHxW mask, got shape {t.shape}")
    return t


def cmd_eval(args) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    for d in (pred_dir, gt_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"not a directory: {d}")
    gt_files = sorted(p for p in gt_dir.iterdir() if p.is_file())
    if not gt_files:
        raise ValueError(f"no mask files in {gt_dir}")
    rows = []
    for gt_path in gt_files:
        pred_path = pred_dir / gt_path.name
        if not pred_path.is_file():
            raise FileNotFoundError(f"missing prediction for {gt_path.name}")
        pred = binarize(_load_mask(pred_path), args.threshold)
        gt = _load_mask(gt_path)
        rows.append((gt_path.stem, jaccard(pred, gt), f_score(pred, gt)))
    write_metrics_csv(args.out, rows)
    print(f"samples: {len(rows)}  mean J: {np.mean([r[1] for r in rows]):.6f}  mean F: {np.mean([r[2] for r in rows]):.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avesformer", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("dissipation-demo", help="single-token cross-attention collapse and its repair")
    p.add_argument("--n", type=int, default=4, help="visual patches")
    p.add_argument("--c", type=int, default=8, help="feature width")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--queries", type=int, default=16, help="generated queries for the repaired run")
    p.set_defaults(func=cmd_dissipation_demo)

    def timing(p):
        p.add_argument("--config")
        p.add_argument("--runs", type=int, default=30)
        p.add_argument("--warmup", type=int, default=10)
        p.add_argument("--seed", type=int)
        p.add_argument("--no-figure", action="store_true", help="skip the PNG next to the CSV")

    p = sub.add_parser("bench", help="per-component FLOPs, params and latency")
    p.add_argument("--layout")
    timing(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate-layouts", help="compare T-T-T, C-T-T, T-C-T, T-T-C")
    timing(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_layouts)

    p = sub.add_parser("attn-maps", help="export per-stage attention maps as PGM")
    p.add_argument("--stage-count", type=int, default=3)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--num-queries", type=int)
    p.add_argument("--no-figure", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_attn_maps)

    p = sub.add_parser("gradcheck", help="analytic loss gradients vs central differences")
    p.add_argument("--cases", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("eval", help="J and F over matching mask files")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"avesformer {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
