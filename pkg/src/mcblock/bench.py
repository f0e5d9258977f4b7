"""Training loop, baseline samplers, ablations and timing instrumentation."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import mctree
from .image_core import Image, IntegralTables, check_rects
from .mipfield import OPTIMIZERS, MipField, TrainState, mse, psnr, reconstruct, train_step

STRATEGIES = ("random", "active", "coarse_to_fine", "mcblock")
ABLATIONS = ("init", "partition", "selection", "block_rendering")

METRICS_HEADER = ("strategy", "seed", "iteration", "mse", "psnr", "leaf_count", "samples")
TIMING_HEADER = ("strategy", "seed", "iteration", "wall_ms", "sampler_ms", "model_ms")


@dataclass(frozen=True)
class Strategy:
    """A batch-formation strategy; the MCBlock flags switch individual parts off."""

    name: str = "mcblock"
    lam: float = 5000.0
    schedule: Tuple[int, ...] = (8, 4, 2, 1)
    init: bool = True
    partition: bool = True
    selection: bool = True
    block_rendering: bool = True

    def __post_init__(self):
        if self.name not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.name!r}; choose from {STRATEGIES}")
        sides = tuple(int(s) for s in self.schedule)
        if not sides or sides[-1] != 1 or any(a <= b for a, b in zip(sides, sides[1:])):
            raise ValueError("schedule block sides must strictly decrease and end at 1")
        object.__setattr__(self, "schedule", sides)

    @property
    def label(self) -> str:
        off = [a for a in ABLATIONS if not getattr(self, a)]
        if self.name != "mcblock" or not off:
            return self.name
        return "mcblock-wo_" + "-wo_".join(off)


def ablate(flags: Iterable[str] = (), base: Optional[Strategy] = None) -> Strategy:
    """MCBlock with the named parts disabled (any of ``ABLATIONS``)."""
    base = base or Strategy("mcblock")
    changes = {}
    for flag in flags:
        flag = flag.replace("wo_", "").replace("-", "_")
        if flag not in ABLATIONS:
            raise ValueError(f"unknown ablation {flag!r}; choose from {ABLATIONS}")
        changes[flag] = False
    return replace(base, **changes)


def parse_strategy(spec: str) -> Strategy:
    """``"mcblock"``, ``"random"``, ``"mcblock-wo_init-wo_selection"`` ..."""
    name, *rest = spec.strip().split("-wo_")
    if rest and name != "mcblock":
        raise ValueError(f"ablations only apply to mcblock, got {spec!r}")
    return ablate(rest) if rest else Strategy(name)


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 1024
    learning_rate: float = 1.0
    optimizer: str = "normalized"
    lam: float = 5000.0
    eps_init: float = 1e-3
    eps_L: float = 1e-2
    eps_C: float = 1e-4
    min_block_side: int = 1
    max_redraws: int = 8
    renormalize_log: float = 50.0
    recompute_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    checkpoint_every: int = 100

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size and checkpoint_every must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; choose from {OPTIMIZERS}")
        self.sampler_config()

    def sampler_config(self) -> mctree.SamplerConfig:
        return mctree.SamplerConfig(lam=self.lam, eps_init=self.eps_init, eps_L=self.eps_L,
                                    eps_C=self.eps_C, min_block_side=self.min_block_side,
                                    batch_size=self.batch_size, max_redraws=self.max_redraws,
                                    renormalize_log=self.renormalize_log,
                                    recompute_every=self.recompute_every)


@dataclass
class Checkpoint:
    iteration: int
    mse: float
    psnr: float
    leaf_count: int
    samples: int
    wall_ms: float
    sampler_ms: float
    model_ms: float


@dataclass
class RunMetrics:
    strategy: str
    seed: int
    records: List[Checkpoint] = field(default_factory=list)
    sample_counts: Optional[np.ndarray] = None
    partition: Optional[np.ndarray] = None
    field: Optional[MipField] = None
    forest: Optional[mctree.MCForest] = None

    @property
    def final(self) -> Checkpoint:
        return self.records[-1]

    def iterations_to(self, target_psnr: float) -> Optional[int]:
        for r in self.records:
            if r.psnr >= target_psnr:
                return r.iteration
        return None

    def psnr_at(self, iteration: int) -> float:
        for r in self.records:
            if r.iteration == iteration:
                return r.psnr
        raise KeyError(f"no checkpoint at iteration {iteration}")

    def mse_at(self, iteration: int) -> float:
        for r in self.records:
            if r.iteration == iteration:
                return r.mse
        raise KeyError(f"no checkpoint at iteration {iteration}")

    def metric_rows(self):
        for r in self.records:
            yield (self.strategy, self.seed, r.iteration, repr(r.mse), repr(r.psnr),
                   r.leaf_count, r.samples)

    def timing_rows(self):
        for r in self.records:
            yield (self.strategy, self.seed, r.iteration, f"{r.wall_ms:.3f}",
                   f"{r.sampler_ms:.3f}", f"{r.model_ms:.3f}")


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_metrics_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and tuple(rows[0].keys()) != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected metrics header {tuple(rows[0].keys())}")
    return rows


# -- samplers -------------------------------------------------------------------

def baseline_random(img: Image, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform i.i.d. single pixels."""
    n = int(batch_size)
    xs = rng.integers(0, img.width, n)
    ys = rng.integers(0, img.height, n)
    one = np.ones(n, np.int64)
    return np.stack([xs, ys, one, one], axis=1)


class ActiveState:
    """Per-pixel ``L * exp(O / lam)`` priorities, stored in a lazily scaled frame.

    Pixels never trained start with loss 1.0, so they are visited before
    already-fitted ones.
    """

    def __init__(self, img: Image, lam: float = 5000.0, initial_loss: float = 1.0):
        self.width, self.height = img.width, img.height
        self.lam = float(lam)
        self.weights = np.full(img.width * img.height, float(initial_loss))
        self.scale_log = 0.0
        self.iteration = 0
        self.last_trained = np.zeros(img.width * img.height, np.int64)

    def priority(self, px) -> np.ndarray:
        return self.weights[px] * math.exp(self.scale_log)

    def update(self, rects: np.ndarray, losses: np.ndarray) -> None:
        self.iteration += 1
        self.scale_log += 1.0 / self.lam
        if self.scale_log > 50.0:
            self.weights *= math.exp(self.scale_log)
            self.scale_log = 0.0
        px = rects[:, 1] * self.width + rects[:, 0]
        self.weights[px] = np.asarray(losses) * math.exp(-self.scale_log)
        self.last_trained[px] = self.iteration


def baseline_active(state: ActiveState, img: Image, batch_size: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Single pixels drawn with probability proportional to their priority."""
    cdf = np.cumsum(state.weights)
    total = cdf[-1]
    n = int(batch_size)
    if total > 0:
        px = np.searchsorted(cdf, rng.random(n) * total, side="right")
        px = np.minimum(px, cdf.size - 1)
    else:
        px = rng.integers(0, cdf.size, n)
    one = np.ones(n, np.int64)
    return np.stack([px % state.width, px // state.width, one, one], axis=1)


@dataclass(frozen=True)
class CoarseToFineSchedule:
    """Block sides per phase; each phase but the last lasts one epoch."""

    sides: Tuple[int, ...]
    phase_iters: Tuple[int, ...]

    @classmethod
    def for_image(cls, sides: Sequence[int], height: int, width: int,
                  batch_size: int) -> "CoarseToFineSchedule":
        iters = []
        for s in sides[:-1]:
            tiles = -(-height // s) * -(-width // s)
            iters.append(-(-tiles // batch_size))
        return cls(tuple(sides), tuple(iters))


def baseline_coarse_to_fine(schedule: CoarseToFineSchedule, iteration: int) -> int:
    """Block side used at 0-based ``iteration``."""
    start = 0
    for side, n in zip(schedule.sides, schedule.phase_iters):
        if iteration < start + n:
            return side
        start += n
    return schedule.sides[-1]


def coarse_to_fine_blocks(side: int, img: Image, batch_size: int,
                          rng: np.random.Generator) -> np.ndarray:
    """Uniform random tile-aligned blocks of the given side, clipped at the border."""
    tx = -(-img.width // side)
    ty = -(-img.height // side)
    n = int(batch_size)
    x = rng.integers(0, tx, n) * side
    y = rng.integers(0, ty, n) * side
    w = np.minimum(side, img.width - x)
    h = np.minimum(side, img.height - y)
    return np.stack([x, y, w, h], axis=1)


class _Sampler:
    leaf_count = 0

    def next_batch(self, rng): raise NotImplementedError

    def feedback(self, rects, losses): pass

    def partition(self):
        return "pixel"


class _RandomSampler(_Sampler):
    def __init__(self, img, cfg):
        self.img, self.batch = img, cfg.batch_size

    def next_batch(self, rng):
        return baseline_random(self.img, self.batch, rng)


class _ActiveSampler(_Sampler):
    def __init__(self, img, cfg, lam):
        self.img, self.batch = img, cfg.batch_size
        self.state = ActiveState(img, lam)

    def next_batch(self, rng):
        return baseline_active(self.state, self.img, self.batch, rng)

    def feedback(self, rects, losses):
        self.state.update(rects, losses)


class _CoarseToFineSampler(_Sampler):
    def __init__(self, img, cfg, sides):
        self.img, self.batch = img, cfg.batch_size
        self.schedule = CoarseToFineSchedule.for_image(sides, img.height, img.width, cfg.batch_size)
        self.it = 0

    def next_batch(self, rng):
        side = baseline_coarse_to_fine(self.schedule, self.it)
        self.it += 1
        return coarse_to_fine_blocks(side, self.img, self.batch, rng)


class _MCBlockSampler(_Sampler):
    def __init__(self, img, tables, cfg, strategy, rng):
        self.strategy = strategy
        self.batch = cfg.batch_size
        self.forest = mctree.MCForest(cfg.sampler_config())
        self.forest.add_image(img, tables, initialize=strategy.init)
        leaves = self.forest.leaf_indices()
        self.pending = leaves[rng.permutation(leaves.size)]
        self.members = None

    @property
    def leaf_count(self):
        return self.forest.n_leaves

    def next_batch(self, rng):
        if self.pending.size:
            self.members, self.pending = self.pending[:self.batch], self.pending[self.batch:]
        else:
            s = self.strategy
            self.members = self.forest.form_batch_indices(
                rng, self.batch, expand=s.partition, uniform=not s.selection)
        return self.forest.rects(self.members)

    def feedback(self, rects, losses):
        self.forest.backpropagate_indices(self.members, losses, prune=self.strategy.partition)

    def partition(self):
        if not self.strategy.block_rendering:
            return "pixel"
        return self.forest.rects(self.forest.leaf_indices())


def make_sampler(strategy: Strategy, img: Image, tables: IntegralTables,
                 cfg: TrainConfig, rng: np.random.Generator) -> _Sampler:
    if strategy.name == "random":
        return _RandomSampler(img, cfg)
    if strategy.name == "active":
        return _ActiveSampler(img, cfg, strategy.lam)
    if strategy.name == "coarse_to_fine":
        return _CoarseToFineSampler(img, cfg, strategy.schedule)
    return _MCBlockSampler(img, tables, cfg, strategy, rng)


def _accumulate_counts(diff: np.ndarray, rects: np.ndarray) -> None:
    """Spread one sample over each block's pixels (1/|B| each) via a 2D difference table."""
    x, y, w, h = (rects[:, k] for k in range(4))
    v = 1.0 / (w * h)
    stride = diff.shape[1]
    idx = np.concatenate([y * stride + x, y * stride + x + w,
                          (y + h) * stride + x, (y + h) * stride + x + w])
    vals = np.concatenate([v, -v, -v, v])
    np.add.at(diff.reshape(-1), idx, vals)


def counts_from_diff(diff: np.ndarray) -> np.ndarray:
    return diff.cumsum(axis=0).cumsum(axis=1)[:-1, :-1]


def run(strategy: Strategy, img: Image, cfg: TrainConfig, seed: int = 0,
        check_bounds: bool = False, stop_psnr: Optional[float] = None) -> RunMetrics:
    """Train a fresh field on ``img`` with ``strategy``; deterministic in ``seed``.

    With ``stop_psnr`` set, training ends at the first checkpoint whose PSNR
    reaches it.
    """
    rng = np.random.default_rng(seed)
    tables = IntegralTables.from_image(img)
    state = TrainState(MipField.for_image(img), learning_rate=cfg.learning_rate,
                       optimizer=cfg.optimizer, beta1=cfg.beta1, beta2=cfg.beta2,
                       adam_eps=cfg.adam_eps)
    t0 = time.perf_counter()
    sampler = make_sampler(strategy, img, tables, cfg, rng)
    sampler_s = time.perf_counter() - t0
    model_s = 0.0
    diff = np.zeros((img.height + 1, img.width + 1))
    metrics = RunMetrics(strategy.label, seed)
    samples = 0

    def checkpoint(it):
        recon = reconstruct(state.field, sampler.partition())
        m = mse(recon, img)
        metrics.records.append(Checkpoint(
            it, m, psnr(m), sampler.leaf_count, samples,
            1e3 * (sampler_s + model_s), 1e3 * sampler_s, 1e3 * model_s))

    checkpoint(0)
    for it in range(1, cfg.iterations + 1):
        t0 = time.perf_counter()
        rects = sampler.next_batch(rng)
        t1 = time.perf_counter()
        state, losses = train_step(state, img, tables, rects)
        t2 = time.perf_counter()
        sampler.feedback(rects, losses)
        t3 = time.perf_counter()
        sampler_s += (t1 - t0) + (t3 - t2)
        model_s += t2 - t1
        if check_bounds:
            check_rects(rects, img.width, img.height)
        _accumulate_counts(diff, rects)
        samples += rects.shape[0]
        if it % cfg.checkpoint_every == 0 or it == cfg.iterations:
            checkpoint(it)
            if stop_psnr is not None and metrics.final.psnr >= stop_psnr:
                break
    metrics.sample_counts = counts_from_diff(diff)
    metrics.field = state.field
    part = sampler.partition()
    metrics.partition = None if isinstance(part, str) else part
    metrics.forest = getattr(sampler, "forest", None)
    return metrics


def measure_overhead(metrics: RunMetrics) -> float:
    """Fraction of training time spent maintaining the sampler."""
    r = metrics.final
    total = r.sampler_ms + r.model_ms
    return r.sampler_ms / total if total > 0 else 0.0


# -- benchmark images --------------------------------------------------------------

COMPOSITE_BACKGROUND = (0.35, 0.55, 0.75)


def composite_patches(size: int):
    """Named patch boxes ``(x, y, w, h)`` of the composite image."""
    p = size // 4
    a, b = size // 8, size // 8 + size // 2
    return {"checker": (a, a, p, p), "gradient": (b, a, p, p),
            "noise": (a, b, p, p), "rings": (b, b, p, p)}


def composite_image(size: int = 512, seed: int = 0) -> Image:
    """Flat background (75% of the area) with four textured patches."""
    rng = np.random.default_rng(seed)
    data = np.empty((size, size, 3))
    data[:] = COMPOSITE_BACKGROUND
    boxes = composite_patches(size)
    p = size // 4
    yy, xx = np.mgrid[0:p, 0:p]
    sq = max(1, p // 8)
    checker = ((yy // sq + xx // sq) % 2).astype(float)
    x, y, w, h = boxes["checker"]
    data[y:y + h, x:x + w] = 0.15 + 0.7 * checker[:, :, None]
    x, y, w, h = boxes["gradient"]
    t = (xx + yy) / (2.0 * (p - 1))
    data[y:y + h, x:x + w] = np.stack([t, 1 - t, 0.5 * np.ones_like(t)], axis=2)
    x, y, w, h = boxes["noise"]
    data[y:y + h, x:x + w] = rng.random((p, p, 3))
    x, y, w, h = boxes["rings"]
    r = np.hypot(xx - p / 2, yy - p / 2)
    rings = 0.5 + 0.4 * np.sin(r / max(1.0, p / 24))
    data[y:y + h, x:x + w] = np.stack([rings, rings * 0.8, 1 - rings], axis=2)
    return Image(np.clip(data, 0.0, 1.0))


def background_mask(size: int) -> np.ndarray:
    mask = np.ones((size, size), bool)
    for x, y, w, h in composite_patches(size).values():
        mask[y:y + h, x:x + w] = False
    return mask


@dataclass
class BenchSummary:
    strategy: str
    iterations_to_target: Optional[int]
    speedup: Optional[float]
    final_psnr: float
    overhead: float


def summarize(runs: Sequence[RunMetrics], target_psnr: float) -> List[BenchSummary]:
    """Iterations-to-target per run and speedup relative to the first run."""
    ref = runs[0].iterations_to(target_psnr) if runs else None
    out = []
    for m in runs:
        its = m.iterations_to(target_psnr)
        speed = None
        if ref is not None and its is not None:
            speed = ref / its if its > 0 else (1.0 if ref == 0 else math.inf)
        out.append(BenchSummary(m.strategy, its, speed, m.final.psnr, measure_overhead(m)))
    return out
