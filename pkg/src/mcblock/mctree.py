"""Monte-Carlo quadtree forest over training images.

Every training image owns one quadtree whose leaves tile the image. Leaves
carry a UCT priority ``U = L * exp(O / lam) * |B|`` where ``L`` is the block
loss, ``O`` the iterations since the block was last trained and ``|B|`` its
pixel count; internal nodes carry the sum of their children's ``U`` and the
mean of their children's ``L``. Selection walks root-to-leaf with
probabilities proportional to ``U``, expansion splits the reached leaf, and
backpropagation refreshes root paths and merges solved sibling groups.

Storage is array-backed (see :mod:`mcblock._kernels`); :class:`MCNode` is a
light handle into it. The global ``exp(1/lam)`` multiplier applied every
iteration is kept as a single log-scale accumulator instead of touching
every node: the true ``U`` of any node is ``stored_uct * exp(global_scale_log)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import _kernels as K
from .image_core import BlockRect, Image, IntegralTables, block_variances

FOREST_FORMAT = "mcblock-forest"
FOREST_VERSION = 1


class StaleHandleError(RuntimeError):
    """A node handle no longer refers to a current leaf (or node)."""


@dataclass
class SamplerConfig:
    lam: float = 5000.0
    eps_init: float = 1e-3
    eps_L: float = 1e-2
    eps_C: float = 1e-4
    min_block_side: int = 1
    batch_size: int = 1024
    max_redraws: int = 8
    renormalize_log: float = 50.0
    recompute_every: int = 1000

    def __post_init__(self):
        for name in ("lam", "eps_init", "eps_L", "eps_C", "renormalize_log"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("min_block_side", "batch_size", "max_redraws", "recompute_every"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")


class MCNode:
    """Handle to one node of an :class:`MCForest`.

    Handles carry the slot generation they were created with; once the node
    is pruned away any access raises :class:`StaleHandleError`.
    """

    __slots__ = ("forest", "index", "gen")

    def __init__(self, forest: "MCForest", index: int, gen: Optional[int] = None):
        self.forest = forest
        self.index = int(index)
        self.gen = int(forest.I[index, K.GEN]) if gen is None else int(gen)

    def _row(self):
        I = self.forest.I
        if not I[self.index, K.ALIVE] or I[self.index, K.GEN] != self.gen:
            raise StaleHandleError(f"node {self.index} was removed from the forest")
        return I[self.index]

    @property
    def valid(self) -> bool:
        I = self.forest.I
        return bool(I[self.index, K.ALIVE]) and I[self.index, K.GEN] == self.gen

    @property
    def rect(self) -> BlockRect:
        r = self._row()
        return BlockRect(int(r[K.X]), int(r[K.Y]), int(r[K.W]), int(r[K.H]))

    @property
    def area(self) -> int:
        r = self._row()
        return int(r[K.W] * r[K.H])

    @property
    def is_leaf(self) -> bool:
        return self._row()[K.NCHILD] == 0

    @property
    def tree_index(self) -> int:
        return int(self._row()[K.TREE])

    @property
    def loss(self) -> float:
        self._row()
        return float(self.forest.F[self.index, K.LOSS])

    @property
    def stored_uct(self) -> float:
        self._row()
        return float(self.forest.F[self.index, K.UCT])

    @property
    def uct(self) -> float:
        """True UCT value (stored value rescaled to the current frame)."""
        return self.stored_uct * math.exp(self.forest.global_scale_log)

    @property
    def last_trained_iter(self) -> int:
        return int(self._row()[K.LAST])

    @property
    def parent(self) -> Optional["MCNode"]:
        p = self._row()[K.PARENT]
        return None if p < 0 else MCNode(self.forest, p)

    @property
    def children(self) -> List["MCNode"]:
        r = self._row()
        s, n = r[K.CHILD], r[K.NCHILD]
        return [MCNode(self.forest, c) for c in range(s, s + n)]

    def __eq__(self, other):
        return (isinstance(other, MCNode) and other.forest is self.forest
                and other.index == self.index and other.gen == self.gen)

    def __hash__(self):
        return hash((id(self.forest), self.index, self.gen))

    def __repr__(self):
        if not self.valid:
            return f"<MCNode {self.index} (stale)>"
        kind = "leaf" if self.is_leaf else "internal"
        return f"<MCNode {self.index} {tuple(self.rect)} {kind}>"


class MCTree:
    """View of one image's quadtree inside a forest."""

    def __init__(self, forest: "MCForest", image_index: int):
        self.forest = forest
        self.image_index = image_index

    @property
    def root(self) -> MCNode:
        return MCNode(self.forest, self.forest.roots[self.image_index])

    def leaf_indices(self) -> np.ndarray:
        f = self.forest
        I = f.I[:f.meta[K.M_NALLOC]]
        mask = (I[:, K.ALIVE] == 1) & (I[:, K.NCHILD] == 0) & (I[:, K.TREE] == self.image_index)
        return np.flatnonzero(mask)

    def leaves(self) -> List[MCNode]:
        return [MCNode(self.forest, i) for i in self.leaf_indices()]

    def leaf_rects(self) -> np.ndarray:
        idx = self.leaf_indices()
        return self.forest.rects(idx)

    @property
    def n_leaves(self) -> int:
        return int(self.leaf_indices().size)

    def __repr__(self):
        return f"<MCTree image={self.image_index} leaves={self.n_leaves}>"


def _split_extent(e: np.ndarray, part: int, nparts: np.ndarray):
    """Offset and size of ``part`` (0/1) when an extent is halved floor/ceil."""
    first = np.where(nparts == 2, (e + 1) // 2, e)
    if part == 0:
        return np.zeros_like(e), first
    return first, e // 2


def quadtree_levels(width: int, height: int):
    """Enumerate the complete quadtree down to single pixels, level by level.

    Returns a list of dicts with arrays ``x, y, w, h, parent, rank, nchild``
    where ``parent`` indexes into the previous level and ``nchild`` is 0 for
    single pixels.
    """
    x = np.zeros(1, np.int64)
    y = np.zeros(1, np.int64)
    w = np.array([width], np.int64)
    h = np.array([height], np.int64)
    parent = np.full(1, -1, np.int64)
    rank = np.zeros(1, np.int64)
    levels = []
    while True:
        nx = np.where(w > 1, 2, 1)
        ny = np.where(h > 1, 2, 1)
        nchild = np.where(nx * ny > 1, nx * ny, 0)
        levels.append(dict(x=x, y=y, w=w, h=h, parent=parent, rank=rank, nchild=nchild))
        split = np.flatnonzero(nchild > 0)
        if split.size == 0:
            return levels
        cols = {k: [] for k in ("x", "y", "w", "h", "parent", "rank")}
        sx, sy, sw, sh = x[split], y[split], w[split], h[split]
        snx, sny = nx[split], ny[split]
        for dy in (0, 1):
            oy, ch = _split_extent(sh, dy, sny)
            for dx in (0, 1):
                ox, cw = _split_extent(sw, dx, snx)
                valid = (dy < sny) & (dx < snx)
                cols["x"].append(np.where(valid, sx + ox, -1))
                cols["y"].append(sy + oy)
                cols["w"].append(cw)
                cols["h"].append(ch)
                cols["parent"].append(split)
                cols["rank"].append(dy * snx + dx)
        stacked = {k: np.stack(v, axis=1).ravel() for k, v in cols.items()}
        keep = stacked["x"] >= 0
        x, y, w, h = (stacked[k][keep] for k in ("x", "y", "w", "h"))
        parent, rank = stacked["parent"][keep], stacked["rank"][keep]


class MCForest:
    """All quadtrees of a training set plus the shared sampler state."""

    def __init__(self, cfg: Optional[SamplerConfig] = None, capacity: int = 1024):
        self.cfg = cfg or SamplerConfig()
        capacity = max(4, -(-capacity // 4) * 4)
        self.I = np.zeros((capacity, K.N_ICOLS), np.int32, order="F")
        self.I[:, K.CHILD] = -1
        self.I[:, K.PARENT] = -1
        self.F = np.zeros((capacity, K.N_FCOLS), order="F")
        self.free = np.zeros(capacity // 4, np.int64)
        self.meta = np.zeros(3, np.int64)
        self.fmeta = np.zeros(1)
        self.roots = np.zeros(0, np.int64)
        self.sizes: List[Tuple[int, int]] = []
        self.images: List[Optional[Image]] = []
        self.tables: List[Optional[IntegralTables]] = []
        self._tsum = np.zeros(0)
        self._tsq = np.zeros(0)
        self._toff = np.zeros(0, np.int64)
        self._tw1 = np.zeros(0, np.int64)
        self.global_scale_log = 0.0
        self.current_iter = 0
        self._stamp = 0
        self.prune_count = 0

    # -- storage ---------------------------------------------------------
    # Node tables are column-major: tree walks touch only a few columns, and
    # keeping each column contiguous roughly halves their cache misses.
    def reserve(self, extra_slots: int) -> None:
        need = int(self.meta[K.M_NALLOC]) + extra_slots
        cap = self.I.shape[0]
        if need <= cap:
            return
        new_cap = max(need, 2 * cap)
        new_cap = -(-new_cap // 4) * 4
        I = np.zeros((new_cap, K.N_ICOLS), np.int32, order="F")
        I[:, K.CHILD] = -1
        I[:, K.PARENT] = -1
        I[:cap] = self.I
        F = np.zeros((new_cap, K.N_FCOLS), order="F")
        F[:cap] = self.F
        free = np.zeros(new_cap // 4, np.int64)
        free[:self.free.size] = self.free
        self.I, self.F, self.free = I, F, free

    @property
    def n_trees(self) -> int:
        return int(self.roots.size)

    @property
    def n_leaves(self) -> int:
        return int(self.meta[K.M_NLEAVES])

    @property
    def mean_leaf_loss(self) -> float:
        n = self.meta[K.M_NLEAVES]
        return float(self.fmeta[K.FM_SUMLOSS] / n) if n else 0.0

    def tree(self, image_index: int) -> MCTree:
        return MCTree(self, image_index)

    @property
    def trees(self) -> List[MCTree]:
        return [MCTree(self, t) for t in range(self.n_trees)]

    def alive_mask(self) -> np.ndarray:
        return self.I[:self.meta[K.M_NALLOC], K.ALIVE] == 1

    def leaf_indices(self) -> np.ndarray:
        I = self.I[:self.meta[K.M_NALLOC]]
        return np.flatnonzero((I[:, K.ALIVE] == 1) & (I[:, K.NCHILD] == 0))

    def rects(self, idx) -> np.ndarray:
        return K.gather_rects(self.I, np.ascontiguousarray(idx, np.int64))

    def true_uct(self, idx) -> np.ndarray:
        return self.F[np.asarray(idx, np.int64), K.UCT] * math.exp(self.global_scale_log)

    def recompute_mean_loss(self) -> None:
        leaves = self.leaf_indices()
        self.meta[K.M_NLEAVES] = leaves.size
        self.fmeta[K.FM_SUMLOSS] = float(self.F[leaves, K.LOSS].sum())

    # -- images ------------------------------------------------------------
    def _register_image(self, img: Optional[Image], tables: Optional[IntegralTables],
                        width: int, height: int) -> int:
        if img is not None and tables is None:
            tables = IntegralTables.from_image(img)
        t = len(self.sizes)
        self.sizes.append((width, height))
        self.images.append(img)
        self.tables.append(tables)
        off = self._tsum.size
        if tables is not None:
            self._tsum = np.concatenate([self._tsum, tables.sum.ravel()])
            self._tsq = np.concatenate([self._tsq, tables.sum_sq.ravel()])
        self._toff = np.append(self._toff, off)
        self._tw1 = np.append(self._tw1, width + 1)
        return t

    @property
    def has_tables(self) -> bool:
        return all(t is not None for t in self.tables)

    def attach_images(self, images: Sequence[Image]) -> None:
        """Provide pixel data for a forest loaded from a checkpoint."""
        if len(images) != self.n_trees:
            raise ValueError(f"forest has {self.n_trees} trees, got {len(images)} images")
        sizes, self.sizes = self.sizes, []
        self.images, self.tables = [], []
        self._tsum, self._tsq = np.zeros(0), np.zeros(0)
        self._toff, self._tw1 = np.zeros(0, np.int64), np.zeros(0, np.int64)
        for (w, h), img in zip(sizes, images):
            if (img.width, img.height) != (w, h):
                raise ValueError(f"image is {img.width}x{img.height}, tree expects {w}x{h}")
            self._register_image(img, None, w, h)

    def add_image(self, img: Image, tables: Optional[IntegralTables] = None,
                  initialize: bool = True) -> MCTree:
        """Add a tree for ``img``; ``initialize=False`` gives a root-only tree."""
        t = self._register_image(img, tables, img.width, img.height)
        tables = self.tables[t]
        levels = quadtree_levels(img.width, img.height)
        if initialize:
            leafable = _merge_bottom_up(levels, tables, self.cfg.eps_init)
        else:
            leafable = [np.ones_like(lv["x"], dtype=bool) for lv in levels]
        self._materialize(t, levels, leafable)
        return MCTree(self, t)

    def _materialize(self, t, levels, leafable) -> None:
        n_internal = [int(((lv["nchild"] > 0) & ~lf).sum()) for lv, lf in zip(levels, leafable)]
        self.reserve(4 + 4 * sum(n_internal))
        I, F = self.I, self.F
        root_slot = K.alloc_block(I, self.free, self.meta)
        self.roots = np.append(self.roots, root_slot)
        slots = np.array([root_slot], np.int64)
        kept = np.array([0], np.int64)
        new_leaves = 0
        for k, lv in enumerate(levels):
            for col, key in ((K.X, "x"), (K.Y, "y"), (K.W, "w"), (K.H, "h")):
                I[slots, col] = lv[key][kept]
            I[slots, K.TREE] = t
            I[slots, K.DEPTH] = k
            I[slots, K.LAST] = self.current_iter
            I[slots, K.GEN] += 1
            I[slots, K.MARK] = 0
            I[slots, K.ALIVE] = 1
            F[slots] = 0.0
            internal = (lv["nchild"][kept] > 0) & ~leafable[k][kept]
            I[slots, K.NCHILD] = np.where(internal, lv["nchild"][kept], 0)
            I[slots, K.CHILD] = -1
            new_leaves += int((~internal).sum())
            if not internal.any():
                break
            int_slots = slots[internal]
            base = self.meta[K.M_NALLOC]
            starts = base + 4 * np.arange(int_slots.size, dtype=np.int64)
            self.meta[K.M_NALLOC] = base + 4 * int_slots.size
            I[int_slots, K.CHILD] = starts
            # map each node of level k to the child block start of its slot (or -1)
            block_of = np.full(lv["x"].size, -1, np.int64)
            block_of[kept[internal]] = starts
            slot_of = np.full(lv["x"].size, -1, np.int64)
            slot_of[kept] = slots
            nxt = levels[k + 1]
            child_mask = block_of[nxt["parent"]] >= 0
            kept = np.flatnonzero(child_mask)
            slots = block_of[nxt["parent"][kept]] + nxt["rank"][kept]
            I[slots, K.PARENT] = slot_of[nxt["parent"][kept]]
        I[root_slot, K.PARENT] = -1
        self.meta[K.M_NLEAVES] += new_leaves

    def split_all(self, image_index: int, depth: int) -> None:
        """Force-expand every leaf of one tree ``depth`` times."""
        tree = MCTree(self, image_index)
        for _ in range(depth):
            leaves = tree.leaf_indices()
            self.reserve(4 * leaves.size)
            for j in leaves:
                K.expand(self.I, self.F, self.free, self.meta, self.fmeta, j,
                         self.cfg.min_block_side)

    # -- sampler operations (index level) -------------------------------
    def _check_leaves(self, idx: np.ndarray) -> None:
        if idx.size == 0:
            return
        k = K.first_non_leaf(self.I, self.meta[K.M_NALLOC], idx)
        if k >= 0:
            raise StaleHandleError(f"node {idx[k]} is not a current leaf")

    def _seed(self, rng: np.random.Generator) -> int:
        return int(rng.integers(0, 2**31 - 1))

    def _fallback_leaves(self, force: bool = False) -> np.ndarray:
        if force or not (self.F[self.roots, K.UCT] > 0).any():
            return self.leaf_indices()
        return np.zeros(1, np.int64)

    def select_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.n_trees == 0:
            raise ValueError("cannot select from an empty forest")
        return K.select_leaves(self.I, self.F, self.roots, int(n), self._seed(rng),
                               self._fallback_leaves())

    def form_batch_indices(self, rng: np.random.Generator, batch_size: Optional[int] = None,
                           expand: bool = True, uniform: bool = False) -> np.ndarray:
        if self.n_trees == 0:
            raise ValueError("cannot form a batch from an empty forest")
        n = self.cfg.batch_size if batch_size is None else int(batch_size)
        self.reserve(4 * n)
        self._stamp += 1
        mode = 2 if uniform else (0 if expand else 1)
        out, _ = K.form_batch(self.I, self.F, self.free, self.meta, self.fmeta, self.roots,
                              n, self._seed(rng), self.cfg.min_block_side, mode,
                              self._fallback_leaves(force=uniform), self._stamp,
                              self.cfg.max_redraws)
        return out

    def advance(self) -> None:
        """One iteration of staleness: every U is multiplied by exp(1/lam)."""
        self.current_iter += 1
        self.global_scale_log += 1.0 / self.cfg.lam
        if self.global_scale_log > self.cfg.renormalize_log:
            n = self.meta[K.M_NALLOC]
            self.F[:n, K.UCT] *= math.exp(self.global_scale_log)
            self.global_scale_log = 0.0

    def backpropagate_indices(self, idx, losses, prune: bool = True) -> int:
        idx = np.ascontiguousarray(idx, dtype=np.int64)
        losses = np.ascontiguousarray(losses, dtype=np.float64)
        if idx.shape != losses.shape:
            raise ValueError("one loss per trained node required")
        if losses.size and (not np.all(np.isfinite(losses)) or losses.min() < 0):
            raise ValueError("losses must be finite and >= 0")
        self._check_leaves(idx)
        if prune and not self.has_tables:
            raise RuntimeError("pruning needs image data; call attach_images() first")
        self.advance()
        self._stamp += 1
        pruned = K.backpropagate(
            self.I, self.F, self.free, self.meta, self.fmeta, idx, losses,
            self.current_iter, math.exp(-self.global_scale_log), prune,
            self.cfg.eps_L, self.cfg.eps_C, self._tsum, self._tsq, self._toff, self._tw1,
            self._stamp)
        self.prune_count += pruned
        if self.current_iter % self.cfg.recompute_every == 0:
            self.recompute_mean_loss()
        return pruned

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        n = self.meta[K.M_NALLOC]
        I, F = self.I[:n], self.F[:n]
        trees = []
        for t, root in enumerate(self.roots):
            slots = np.flatnonzero((I[:, K.ALIVE] == 1) & (I[:, K.TREE] == t))
            # root first, then ascending slot order
            slots = np.concatenate([[root], slots[slots != root]])
            local = np.full(n, -1, np.int64)
            local[slots] = np.arange(slots.size)
            records = []
            for s, row, frow in zip(slots.tolist(), I[slots].tolist(), F[slots].tolist()):
                kids = [] if row[K.NCHILD] == 0 else local[row[K.CHILD]:row[K.CHILD] + row[K.NCHILD]].tolist()
                records.append([row[K.X], row[K.Y], row[K.W], row[K.H],
                                frow[K.LOSS], frow[K.UCT], row[K.LAST], kids])
            w, h = self.sizes[t]
            trees.append({"image_index": t, "width": w, "height": h, "root": 0, "nodes": records})
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "config": asdict(self.cfg),
            "current_iter": self.current_iter,
            "global_scale_log": self.global_scale_log,
            "node_fields": ["x", "y", "w", "h", "loss", "stored_uct", "last_trained_iter", "children"],
            "trees": trees,
        }

    @classmethod
    def from_dict(cls, doc: dict, images: Optional[Sequence[Image]] = None) -> "MCForest":
        if doc.get("format") != FOREST_FORMAT:
            raise ValueError("not an mcblock forest file")
        if doc.get("version") != FOREST_VERSION:
            raise ValueError(f"unsupported forest version {doc.get('version')}")
        known = {f.name for f in fields(SamplerConfig)}
        cfg = SamplerConfig(**{k: v for k, v in doc["config"].items() if k in known})
        total = sum(len(t["nodes"]) for t in doc["trees"])
        forest = cls(cfg, capacity=4 * total + 4)
        forest.current_iter = int(doc["current_iter"])
        forest.global_scale_log = float(doc["global_scale_log"])
        for t, tree in enumerate(doc["trees"]):
            img = images[t] if images is not None else None
            if img is not None and (img.width, img.height) != (tree["width"], tree["height"]):
                raise ValueError(f"image {t} size does not match tree")
            forest._register_image(img, None, tree["width"], tree["height"])
            forest._load_tree(t, tree["nodes"])
        forest.recompute_mean_loss()
        return forest

    def _load_tree(self, t: int, records: list) -> None:
        I, F = self.I, self.F
        slot = np.full(len(records), -1, np.int64)
        slot[0] = K.alloc_block(I, self.free, self.meta)
        self.roots = np.append(self.roots, slot[0])
        I[slot[0], K.DEPTH] = 0
        order = [0]
        for pos in order:
            rec = records[pos]
            s = slot[pos]
            if len(rec) != 8:
                raise ValueError("malformed node record")
            x, y, w, h, loss, uct, last, kids = rec
            I[s, [K.X, K.Y, K.W, K.H, K.LAST]] = (x, y, w, h, last)
            I[s, K.TREE] = t
            I[s, K.ALIVE] = 1
            I[s, K.GEN] += 1
            F[s] = (loss, uct)
            if kids:
                if len(kids) not in (2, 4):
                    raise ValueError("nodes must have 0, 2 or 4 children")
                start = K.alloc_block(I, self.free, self.meta)
                I[s, K.CHILD] = start
                I[s, K.NCHILD] = len(kids)
                for r, kid in enumerate(kids):
                    if slot[kid] != -1:
                        raise ValueError("node listed as child twice")
                    slot[kid] = start + r
                    I[start + r, K.PARENT] = s
                    I[start + r, K.DEPTH] = I[s, K.DEPTH] + 1
                    order.append(kid)
        if len(order) != len(records):
            raise ValueError("unreachable node records in tree")
        I[slot[0], K.PARENT] = -1

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path, images: Optional[Sequence[Image]] = None) -> "MCForest":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ValueError(f"cannot read forest file {path}: {exc}") from exc
        try:
            return cls.from_dict(doc, images)
        except (KeyError, TypeError, IndexError) as exc:
            raise ValueError(f"corrupt forest file {path}: {exc}") from exc


def _merge_bottom_up(levels, tables: IntegralTables, eps_init: float) -> List[np.ndarray]:
    """Mark nodes that end up as leaves after the bottom-up variance merge.

    A pixel is always a leaf. A larger node becomes a leaf once all its
    children are leaves and its block variance is below ``eps_init``.
    """
    leafable: List[Optional[np.ndarray]] = [None] * len(levels)
    for k in range(len(levels) - 1, -1, -1):
        lv = levels[k]
        has_kids = lv["nchild"] > 0
        if k == len(levels) - 1:
            leafable[k] = ~has_kids
            continue
        nxt = levels[k + 1]
        ok_kids = np.bincount(nxt["parent"], weights=leafable[k + 1], minlength=lv["x"].size)
        rects = np.stack([lv["x"], lv["y"], lv["w"], lv["h"]], axis=1)
        low_var = block_variances(tables, rects) < eps_init
        leafable[k] = ~has_kids | ((ok_kids == lv["nchild"]) & low_var)
    return leafable


# -- operations ---------------------------------------------------------------

def init_from_image(img: Image, tables: Optional[IntegralTables] = None,
                    cfg: Optional[SamplerConfig] = None,
                    forest: Optional[MCForest] = None) -> MCTree:
    """Build the variance-merged quadtree for ``img`` (in ``forest`` or a new one)."""
    forest = forest if forest is not None else MCForest(cfg)
    return forest.add_image(img, tables, initialize=True)


def leaf_uct(node: MCNode, forest: Optional[MCForest] = None,
             cfg: Optional[SamplerConfig] = None) -> float:
    """``L * exp(O / lam) * |B|`` of a leaf, read through the lazy scale frame."""
    if not node.is_leaf:
        raise ValueError("leaf_uct called on an internal node")
    return node.uct


def backpropagate(forest: MCForest, trained: Iterable[Tuple[MCNode, float]],
                  prune: bool = True) -> int:
    """Apply one iteration of measured leaf losses; returns the number of prunes."""
    pairs = list(trained)
    for node, _ in pairs:
        if node.forest is not forest:
            raise ValueError("node belongs to another forest")
        if not node.valid or not node.is_leaf:
            raise StaleHandleError(f"node {node.index} is not a current leaf")
    idx = np.array([n.index for n, _ in pairs], np.int64)
    losses = np.array([l for _, l in pairs], np.float64)
    return forest.backpropagate_indices(idx, losses, prune=prune)


def try_prune(forest: MCForest, node: MCNode, tables=None, cfg=None) -> bool:
    """Merge ``node``'s children if all are leaves and loss/variance are small."""
    node._row()
    if node.is_leaf:
        raise ValueError("try_prune needs an internal node")
    if not forest.has_tables:
        raise RuntimeError("pruning needs image data; call attach_images() first")
    cfg = cfg or forest.cfg
    done = K.try_prune(forest.I, forest.F, forest.free, forest.meta, forest.fmeta, node.index,
                       cfg.eps_L, cfg.eps_C, forest._tsum, forest._tsq, forest._toff, forest._tw1)
    forest.prune_count += int(done)
    return bool(done)


def select_leaves(forest: MCForest, n: int, rng: np.random.Generator) -> List[MCNode]:
    """``n`` independent UCT-weighted root-to-leaf walks, with replacement."""
    return [MCNode(forest, i) for i in forest.select_indices(n, rng)]


def expand(forest: MCForest, leaf: MCNode, cfg: Optional[SamplerConfig] = None,
           rng: Optional[np.random.Generator] = None) -> MCNode:
    """Split ``leaf`` into children and return one of them uniformly at random.

    A leaf at the minimum block side is returned unchanged.
    """
    if leaf.forest is not forest:
        raise ValueError("node belongs to another forest")
    if not leaf.valid or not leaf.is_leaf:
        raise StaleHandleError(f"node {leaf.index} is not a current leaf")
    cfg = cfg or forest.cfg
    rng = rng if rng is not None else np.random.default_rng()
    forest.reserve(4)
    k = K.expand(forest.I, forest.F, forest.free, forest.meta, forest.fmeta, leaf.index,
                 cfg.min_block_side)
    if k == 0:
        return leaf
    return MCNode(forest, forest.I[leaf.index, K.CHILD] + int(rng.integers(k)))


def form_batch(forest: MCForest, cfg: Optional[SamplerConfig] = None,
               rng: Optional[np.random.Generator] = None) -> List[MCNode]:
    """Select + expand ``batch_size`` times; members are current leaves."""
    cfg = cfg or forest.cfg
    rng = rng if rng is not None else np.random.default_rng()
    idx = forest.form_batch_indices(rng, cfg.batch_size)
    return [MCNode(forest, i) for i in idx]
