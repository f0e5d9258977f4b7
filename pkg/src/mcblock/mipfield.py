"""Learnable mip-pyramid of color grids with block-size-selective rendering.

Level ``l`` of a pyramid for an H x W image has cells of side
``2 ** (lmax - l)`` pixels; level ``lmax`` is pixel resolution and level 0
has at most 2 x 2 cells. A block of longest side ``s`` is rendered from the
levels whose cell side is at least ``s`` (level 0 always contributes), by
bilinear interpolation of each such level at the block center, summed over
levels. Large blocks therefore only ever see, and only ever train, the
coarse levels.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from .image_core import BlockOutOfBounds, Image, IntegralTables, block_means, check_rects

CHECKPOINT_MAGIC = b"MIPF"
CHECKPOINT_VERSION = 1


def finest_level(height: int, width: int) -> int:
    return max(0, math.ceil(math.log2(max(height, width))) - 1)


class MipField:
    """Pyramid of (rows, cols, 3) float64 grids, coarse to fine."""

    def __init__(self, height: int, width: int, levels: Optional[Sequence[np.ndarray]] = None):
        if height < 1 or width < 1:
            raise ValueError("field extent must be at least 1x1")
        self.height = int(height)
        self.width = int(width)
        self.lmax = finest_level(height, width)
        self.sides = [2 ** (self.lmax - l) for l in range(self.lmax + 1)]
        shapes = [(-(-height // s), -(-width // s)) for s in self.sides]
        if levels is None:
            self.levels = [np.zeros((r, c, 3)) for r, c in shapes]
        else:
            if len(levels) != len(shapes):
                raise ValueError(f"expected {len(shapes)} levels, got {len(levels)}")
            self.levels = []
            for grid, (r, c) in zip(levels, shapes):
                grid = np.ascontiguousarray(grid, dtype=np.float64)
                if grid.shape != (r, c, 3):
                    raise ValueError(f"level shape {grid.shape}, expected {(r, c, 3)}")
                if not np.all(np.isfinite(grid)):
                    raise ValueError("field values must be finite")
                self.levels.append(grid.copy())

    @classmethod
    def for_image(cls, img: Image) -> "MipField":
        f = cls(img.height, img.width)
        f.levels[0][:] = img.data.reshape(-1, 3).mean(axis=0)
        return f

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def n_cells(self) -> int:
        return sum(g.shape[0] * g.shape[1] for g in self.levels)

    def copy(self) -> "MipField":
        return MipField(self.height, self.width, self.levels)

    def included_levels(self, block_side: int) -> List[int]:
        return [l for l, s in enumerate(self.sides) if l == 0 or s >= block_side]

    def level_counts(self, rects: np.ndarray) -> np.ndarray:
        """Number of included levels for each block of an (n, 4) array."""
        side = np.maximum(rects[:, 2], rects[:, 3])
        return 1 + (np.asarray(self.sides[1:])[None, :] >= side[:, None]).sum(axis=1)

    def stencils(self, rects: np.ndarray):
        """Yield ``(level, block_idx, cells, weights)`` for every included level.

        ``cells`` and ``weights`` are (m, 4): flat cell indices of the bilinear
        corners around each included block center and their weights.
        """
        x, y, w, h = (rects[:, k] for k in range(4))
        side = np.maximum(w, h)
        cx = x + 0.5 * w
        cy = y + 0.5 * h
        for l, (grid, cell) in enumerate(zip(self.levels, self.sides)):
            if l == 0:
                idx = np.arange(rects.shape[0])
            else:
                idx = np.flatnonzero(side <= cell)
                if idx.size == 0:
                    break
            gh, gw = grid.shape[:2]
            u = np.clip(cx[idx] / cell - 0.5, 0.0, gw - 1)
            v = np.clip(cy[idx] / cell - 0.5, 0.0, gh - 1)
            x0 = np.floor(u).astype(np.int64)
            y0 = np.floor(v).astype(np.int64)
            x1 = np.minimum(x0 + 1, gw - 1)
            y1 = np.minimum(y0 + 1, gh - 1)
            tx = u - x0
            ty = v - y0
            cells = np.stack([y0 * gw + x0, y0 * gw + x1, y1 * gw + x0, y1 * gw + x1], axis=1)
            weights = np.stack([(1 - tx) * (1 - ty), tx * (1 - ty),
                                (1 - tx) * ty, tx * ty], axis=1)
            yield l, idx, cells, weights

    def render(self, rects) -> np.ndarray:
        """Render an (n, 4) array of blocks to (n, 3) colors."""
        r = check_rects(rects, self.width, self.height)
        out = np.zeros((r.shape[0], 3))
        for l, idx, cells, weights in self.stencils(r):
            flat = self.levels[l].reshape(-1, 3)
            out[idx] += np.einsum("mk,mkc->mc", weights, flat[cells])
        return out


def render_block(field: MipField, b) -> np.ndarray:
    return field.render(np.asarray([tuple(b)], np.int64))[0]


def block_loss(field: MipField, img: Image, tables: IntegralTables, b) -> float:
    """Channel-mean squared error between the block's mean color and its render."""
    rect = np.asarray([tuple(b)], np.int64)
    diff = field.render(rect)[0] - block_means(tables, rect)[0]
    return float(np.mean(diff * diff))


def block_losses(field: MipField, tables: IntegralTables, rects) -> np.ndarray:
    diff = field.render(rects) - block_means(tables, rects)
    return np.mean(diff * diff, axis=1)


OPTIMIZERS = ("sgd", "normalized", "adam")


@dataclass
class TrainState:
    field: MipField
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    iteration: int = 0
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-15
    moments: List[np.ndarray] = dc_field(default_factory=list, repr=False)
    second: List[np.ndarray] = dc_field(default_factory=list, repr=False)
    steps: List[np.ndarray] = dc_field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.optimizer == "adam" and not self.moments:
            for g in self.field.levels:
                n = g.shape[0] * g.shape[1]
                self.moments.append(np.zeros((n, 3)))
                self.second.append(np.zeros((n, 3)))
                self.steps.append(np.zeros(n, np.int64))


def batch_gradients(field: MipField, tables: IntegralTables, rects, with_mass: bool = False,
                    block_scale: Optional[np.ndarray] = None):
    """Per-block losses and the sparse gradient of their mean w.r.t. the field.

    Returns ``(losses, grads)`` where ``grads`` is a list of
    ``(level, cell_indices, gradient_rows)`` covering exactly the cells that
    carry nonzero bilinear weight for some block. ``with_mass`` appends the
    summed bilinear weight per cell; ``block_scale`` multiplies each block's
    contribution (the plain gradient when omitted).
    """
    r = check_rects(rects, field.width, field.height)
    if r.shape[0] == 0:
        raise ValueError("empty batch")
    target = block_means(tables, r)
    stencils = list(field.stencils(r))
    pred = np.zeros_like(target)
    for l, idx, cells, weights in stencils:
        flat = field.levels[l].reshape(-1, 3)
        pred[idx] += np.einsum("mk,mkc->mc", weights, flat[cells])
    diff = pred - target
    losses = np.mean(diff * diff, axis=1)
    dpred = diff * (2.0 / (3.0 * r.shape[0]))
    if block_scale is not None:
        dpred = dpred * np.asarray(block_scale, np.float64)[:, None]
    grads = []
    for l, idx, cells, weights in stencils:
        nz = weights > 0
        c = cells[nz]
        contrib = weights[nz][:, None] * np.broadcast_to(dpred[idx][:, None, :], cells.shape + (3,))[nz]
        uniq, inv = np.unique(c, return_inverse=True)
        acc = np.zeros((uniq.size, 3))
        np.add.at(acc, inv, contrib)
        if with_mass:
            mass = np.bincount(inv, weights=weights[nz], minlength=uniq.size)
            grads.append((l, uniq, acc, mass))
        else:
            grads.append((l, uniq, acc))
    return losses, grads


def train_step(state: TrainState, img: Optional[Image], tables: IntegralTables, batch):
    """One first-order update on the mean block loss of ``batch``.

    Returns ``(state, per_block_losses)``; the losses are measured before the
    update, i.e. they are the losses of the rendered batch.
    """
    normalized = state.optimizer == "normalized"
    scale = None
    if normalized:
        # each block's residual is shared evenly among its included levels
        rects = check_rects(batch, state.field.width, state.field.height)
        scale = 1.0 / state.field.level_counts(rects)
    losses, grads = batch_gradients(state.field, tables, batch, with_mass=normalized,
                                    block_scale=scale)
    lr = state.learning_rate
    n = len(losses)
    for l, cells, g, *rest in grads:
        flat = state.field.levels[l].reshape(-1, 3)
        if state.optimizer == "sgd":
            flat[cells] -= lr * g
            continue
        if normalized:
            flat[cells] -= lr * g * (1.5 * n / rest[0])[:, None]
            continue
        b1, b2 = state.beta1, state.beta2
        t = state.steps[l][cells] + 1
        state.steps[l][cells] = t
        m = state.moments[l][cells] * b1 + (1 - b1) * g
        v = state.second[l][cells] * b2 + (1 - b2) * g * g
        state.moments[l][cells] = m
        state.second[l][cells] = v
        mhat = m / (1 - b1 ** t)[:, None]
        vhat = v / (1 - b2 ** t)[:, None]
        flat[cells] -= lr * mhat / (np.sqrt(vhat) + state.adam_eps)
    state.iteration += 1
    return state, losses


def _paint(out: np.ndarray, rects: np.ndarray, colors: np.ndarray) -> None:
    """Fill disjoint rects with colors, grouping rects of equal shape."""
    shapes, inv = np.unique(rects[:, 2:4], axis=0, return_inverse=True)
    inv = inv.ravel()
    for k, (w, h) in enumerate(shapes):
        sel = np.flatnonzero(inv == k)
        yy = rects[sel, 1][:, None, None] + np.arange(h)[None, :, None]
        xx = rects[sel, 0][:, None, None] + np.arange(w)[None, None, :]
        out[yy, xx] = colors[sel][:, None, None, :]


def coverage(rects: np.ndarray, height: int, width: int) -> np.ndarray:
    """Per-pixel count of rects covering each pixel (exact, integer)."""
    d = np.zeros((height + 1, width + 1), np.int64)
    x, y, w, h = (rects[:, k] for k in range(4))
    np.add.at(d, (y, x), 1)
    np.add.at(d, (y, x + w), -1)
    np.add.at(d, (y + h, x), -1)
    np.add.at(d, (y + h, x + w), 1)
    return d.cumsum(axis=0).cumsum(axis=1)[:height, :width]


def pixel_rects(height: int, width: int) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    n = height * width
    return np.stack([xx.ravel(), yy.ravel(), np.ones(n, np.int64), np.ones(n, np.int64)], axis=1)


def reconstruct_array(field: MipField, partition: Union[str, np.ndarray] = "pixel",
                      chunk: int = 1 << 16) -> np.ndarray:
    """Unclipped (H, W, 3) reconstruction in pixel mode or block mode."""
    h, w = field.height, field.width
    out = np.empty((h, w, 3))
    if isinstance(partition, str):
        if partition != "pixel":
            raise ValueError(f"unknown reconstruction mode {partition!r}")
        rects = pixel_rects(h, w)
        flat = out.reshape(-1, 3)
        for s in range(0, rects.shape[0], chunk):
            flat[s:s + chunk] = field.render(rects[s:s + chunk])
        return out
    rects = check_rects(partition, w, h)
    if not np.all(coverage(rects, h, w) == 1):
        raise BlockOutOfBounds("partition does not tile the image")
    colors = np.empty((rects.shape[0], 3))
    for s in range(0, rects.shape[0], chunk):
        colors[s:s + chunk] = field.render(rects[s:s + chunk])
    _paint(out, rects, colors)
    return out


def reconstruct(field: MipField, partition: Union[str, np.ndarray] = "pixel") -> Image:
    """Render the whole image, clipped to [0, 1].

    ``partition="pixel"`` renders every pixel as a 1x1 block; an (n, 4) array
    of tiling rects fills each block with its single rendered color.
    """
    return Image(np.clip(reconstruct_array(field, partition), 0.0, 1.0))


def mse(a: Image, b: Image) -> float:
    d = a.data - b.data
    return float(np.mean(d * d))


def psnr(mse_value: float) -> float:
    return math.inf if mse_value <= 0 else -10.0 * math.log10(mse_value)


def save_field(field: MipField, path) -> None:
    parts = [CHECKPOINT_MAGIC,
             struct.pack("<IIII", CHECKPOINT_VERSION, field.height, field.width, field.n_levels)]
    for g in field.levels:
        parts.append(struct.pack("<II", g.shape[0], g.shape[1]))
    for g in field.levels:
        parts.append(np.ascontiguousarray(g, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_field(path) -> MipField:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a field checkpoint")
    try:
        version, height, width, n = struct.unpack_from("<IIII", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 20
        shapes = []
        for _ in range(n):
            shapes.append(struct.unpack_from("<II", raw, pos))
            pos += 8
        levels = []
        for r, c in shapes:
            count = r * c * 3
            levels.append(np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(r, c, 3))
            pos += 8 * count
    except struct.error as exc:
        raise ValueError(f"{path}: truncated field checkpoint") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: trailing or missing bytes in field checkpoint")
    return MipField(height, width, levels)
