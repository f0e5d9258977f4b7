"""Command-line entry point: ``mcblock train | bench | visualize``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import bench, config
from .image_core import Image, load_image, save_image
from .mctree import MCForest
from .mipfield import load_field, reconstruct, save_field

METRICS_FILE = "metrics.csv"
TIMING_FILE = "timing.csv"
SUMMARY_FILE = "summary.csv"
SUMMARY_HEADER = ("strategy", "iterations_to_target", "speedup", "final_psnr", "overhead")

# dark blue -> magenta -> orange -> pale yellow
_HEAT_STOPS = np.array([0.0, 0.35, 0.7, 1.0])
_HEAT_COLORS = np.array([[0.02, 0.02, 0.20], [0.55, 0.10, 0.50],
                         [0.95, 0.45, 0.10], [1.00, 0.98, 0.75]])


class CLIError(Exception):
    """A user-facing failure: bad config, unreadable or mismatched files."""


def load_image_spec(spec: str) -> Image:
    """``composite`` / ``composite:SIZE`` build the benchmark image; anything else is a path."""
    name, _, size = spec.partition(":")
    if name == config.COMPOSITE_PREFIX and not Path(spec).exists():
        try:
            n = int(size) if size else 512
        except ValueError:
            raise CLIError(f"bad composite size in {spec!r}") from None
        if n < 8:
            raise CLIError("composite size must be >= 8")
        return bench.composite_image(n)
    path = Path(spec)
    if not path.is_file():
        raise CLIError(f"image not found: {path}")
    try:
        return load_image(path)
    except OSError as exc:
        raise CLIError(str(exc)) from exc


# -- rendering helpers ----------------------------------------------------------

def edge_mask(rects: np.ndarray, height: int, width: int) -> np.ndarray:
    """Pixels on the border of any rect (first/last row and column of each)."""
    rects = np.asarray(rects, np.int64).reshape(-1, 4)
    x, y, w, h = rects.T
    horiz = np.zeros((height, width + 1), np.int64)
    for row in (y, y + h - 1):
        np.add.at(horiz, (row, x), 1)
        np.add.at(horiz, (row, x + w), -1)
    vert = np.zeros((height + 1, width), np.int64)
    for col in (x, x + w - 1):
        np.add.at(vert, (y, col), 1)
        np.add.at(vert, (y + h, col), -1)
    return (horiz.cumsum(axis=1)[:, :width] > 0) | (vert.cumsum(axis=0)[:height] > 0)


def partition_overlay(img: Image, rects, color=(1.0, 0.0, 0.0)) -> Image:
    out = img.data.copy()
    out[edge_mask(rects, img.height, img.width)] = color
    return Image(out)


def heatmap_image(counts: np.ndarray) -> Image:
    """Map per-pixel sample counts to colors on a log scale."""
    c = np.log1p(np.maximum(np.asarray(counts, np.float64), 0.0))
    top = c.max()
    t = c / top if top > 0 else c
    rgb = np.stack([np.interp(t, _HEAT_STOPS, _HEAT_COLORS[:, k]) for k in range(3)], axis=2)
    return Image(np.clip(rgb, 0.0, 1.0))


# -- commands -------------------------------------------------------------------

def _out_dir(cfg: config.Config) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create output directory {out}: {exc}") from exc
    return out


def cmd_train(cfg: config.Config) -> int:
    img = load_image_spec(cfg.image)
    strategy = replace(bench.parse_strategy(cfg.strategy), lam=cfg.lam)
    out = _out_dir(cfg)
    m = bench.run(strategy, img, cfg.train_config(), seed=cfg.seed)
    config.save(cfg, out / "config.txt")
    bench.write_csv(out / METRICS_FILE, bench.METRICS_HEADER, m.metric_rows())
    bench.write_csv(out / TIMING_FILE, bench.TIMING_HEADER, m.timing_rows())
    part = m.partition if m.partition is not None else "pixel"
    save_image(reconstruct(m.field, part), out / "reconstruction_block.png")
    save_image(reconstruct(m.field, "pixel"), out / "reconstruction_pixel.png")
    rects = m.partition if m.partition is not None else np.array([[0, 0, img.width, img.height]])
    save_image(partition_overlay(img, rects), out / "partition.png")
    save_image(heatmap_image(m.sample_counts), out / "heatmap.png")
    np.save(out / "sample_counts.npy", m.sample_counts)
    save_field(m.field, out / "field.mipf")
    if m.forest is not None:
        m.forest.save(out / "forest.json")
    r = m.final
    print(f"{m.strategy}: iteration {r.iteration}  psnr {r.psnr:.2f} dB  "
          f"leaves {r.leaf_count}  overhead {bench.measure_overhead(m):.3f}  -> {out}")
    return 0


def cmd_bench(cfg: config.Config) -> int:
    img = load_image_spec(cfg.image)
    out = _out_dir(cfg)
    tc = cfg.train_config()
    runs = []
    for spec in cfg.strategies:
        strategy = replace(bench.parse_strategy(spec), lam=cfg.lam)
        runs.append(bench.run(strategy, img, tc, seed=cfg.seed))
    config.save(cfg, out / "config.txt")
    bench.write_csv(out / METRICS_FILE, bench.METRICS_HEADER,
                    [row for m in runs for row in m.metric_rows()])
    bench.write_csv(out / TIMING_FILE, bench.TIMING_HEADER,
                    [row for m in runs for row in m.timing_rows()])
    summary = bench.summarize(runs, cfg.target_psnr)
    rows = [(s.strategy, "" if s.iterations_to_target is None else s.iterations_to_target,
             "" if s.speedup is None else f"{s.speedup:.4f}", f"{s.final_psnr:.4f}",
             f"{s.overhead:.4f}") for s in summary]
    bench.write_csv(out / SUMMARY_FILE, SUMMARY_HEADER, rows)
    print(f"target {cfg.target_psnr:g} dB, reference {summary[0].strategy}")
    print(f"{'strategy':<32}{'iters':>8}{'speedup':>10}{'psnr':>9}{'overhead':>10}")
    for s in summary:
        its = "-" if s.iterations_to_target is None else str(s.iterations_to_target)
        sp = "-" if s.speedup is None else f"{s.speedup:.2f}x"
        print(f"{s.strategy:<32}{its:>8}{sp:>10}{s.final_psnr:>9.2f}{s.overhead:>10.3f}")
    return 0


def cmd_visualize(args, cfg: config.Config) -> int:
    img = load_image_spec(cfg.image)
    try:
        forest = MCForest.load(args.forest)
    except (OSError, ValueError) as exc:
        raise CLIError(str(exc)) from exc
    if forest.n_trees != 1:
        raise CLIError(f"{args.forest}: expected one tree, found {forest.n_trees}")
    if forest.sizes[0] != (img.width, img.height):
        raise CLIError(f"{args.forest}: tree is {forest.sizes[0][0]}x{forest.sizes[0][1]}, "
                       f"image is {img.width}x{img.height}")
    rects = forest.rects(forest.leaf_indices())
    out = _out_dir(cfg)
    save_image(partition_overlay(img, rects), out / "partition.png")
    if args.counts:
        try:
            counts = np.load(args.counts)
        except (OSError, ValueError) as exc:
            raise CLIError(f"cannot read sample counts {args.counts}: {exc}") from exc
        if counts.shape != (img.height, img.width):
            raise CLIError(f"{args.counts}: counts shape {counts.shape} does not match image")
        save_image(heatmap_image(counts), out / "heatmap.png")
        print(f"heatmap total {counts.sum():.1f} samples")
    if args.field:
        try:
            field = load_field(args.field)
        except (OSError, ValueError) as exc:
            raise CLIError(str(exc)) from exc
        if (field.width, field.height) != (img.width, img.height):
            raise CLIError(f"{args.field}: field is {field.width}x{field.height}, "
                           f"image is {img.width}x{img.height}")
        save_image(reconstruct(field, rects), out / "reconstruction_block.png")
    print(f"{rects.shape[0]} leaves -> {out}")
    return 0


# -- argument parsing -----------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="key = value config file")
    g = p.add_argument_group("config overrides (take precedence over --config)")
    for f in fields(config.Config):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, metavar="V",
                       default=None, help=config.HELP[f.name])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mcblock",
        description="Monte-Carlo quadtree block sampling for image fitting.",
        epilog=f"Outputs go to --output-dir, ${config.OUTPUT_DIR_ENV}, or "
               f"'{config.DEFAULT_OUTPUT_DIR}' (in that order).")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", help="train one strategy and write metrics, images and checkpoints")
    _add_config_flags(t)
    b = sub.add_parser("bench", help="run several strategies and summarize iterations-to-target")
    _add_config_flags(b)
    v = sub.add_parser("visualize", help="draw a saved partition and sample heatmap")
    _add_config_flags(v)
    v.add_argument("--forest", required=True, metavar="FILE", help="forest JSON checkpoint")
    v.add_argument("--counts", metavar="FILE", help="per-pixel sample counts (.npy)")
    v.add_argument("--field", metavar="FILE", help="field checkpoint for a block reconstruction")
    return p


def resolve_config(args) -> config.Config:
    cfg = config.load(args.config) if args.config else config.Config()
    overrides = {f.name: getattr(args, f.name) for f in fields(config.Config)
                 if getattr(args, f.name, None) is not None}
    return cfg.with_overrides(overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "bench":
            return cmd_bench(cfg)
        return cmd_visualize(args, cfg)
    except (CLIError, ValueError, OSError) as exc:
        print(f"mcblock: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
