"""Images, block rectangles and O(1) block statistics via summed-area tables."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Union

import numpy as np
from PIL import Image as PILImage

PathLike = Union[str, Path]


class BlockOutOfBounds(ValueError):
    """A block rectangle does not lie inside its image."""


class BlockRect(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def inside(self, width: int, height: int) -> bool:
        return (self.w >= 1 and self.h >= 1 and self.x >= 0 and self.y >= 0
                and self.x + self.w <= width and self.y + self.h <= height)


@dataclass(frozen=True, eq=False)
class Image:
    """RGB image with channel values in [0, 1], stored as an (H, W, 3) float64 array."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = np.repeat(data[:, :, None], 3, axis=2)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) array, got shape {data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        if not np.all(np.isfinite(data)) or data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("channel values must be finite and in [0, 1]")
        data = np.ascontiguousarray(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def full_rect(self) -> BlockRect:
        return BlockRect(0, 0, self.width, self.height)


@dataclass(frozen=True, eq=False)
class IntegralTables:
    """Per-channel summed-area tables of values and squared values.

    Values are shifted by the per-channel image mean before accumulation,
    which keeps the E[x^2] - E[x]^2 cancellation small.
    """

    sum: np.ndarray
    sum_sq: np.ndarray
    shift: np.ndarray

    @classmethod
    def from_image(cls, img: Image) -> "IntegralTables":
        shift = img.data.reshape(-1, 3).mean(axis=0)
        centered = img.data - shift
        h, w = img.height, img.width
        s = np.zeros((h + 1, w + 1, 3))
        sq = np.zeros((h + 1, w + 1, 3))
        s[1:, 1:] = centered.cumsum(axis=0).cumsum(axis=1)
        sq[1:, 1:] = (centered * centered).cumsum(axis=0).cumsum(axis=1)
        for arr in (s, sq, shift):
            arr.setflags(write=False)
        return cls(s, sq, shift)

    @property
    def height(self) -> int:
        return self.sum.shape[0] - 1

    @property
    def width(self) -> int:
        return self.sum.shape[1] - 1


def _box(table: np.ndarray, x, y, w, h):
    return (table[y + h, x + w] - table[y, x + w]
            - table[y + h, x] + table[y, x])


def _check_rect(tables: IntegralTables, b) -> BlockRect:
    b = BlockRect(*(int(v) for v in b))
    if not b.inside(tables.width, tables.height):
        raise BlockOutOfBounds(
            f"block {tuple(b)} outside {tables.width}x{tables.height} image")
    return b


def check_rects(rects, width: int, height: int) -> np.ndarray:
    """Validate an (n, 4) array of x, y, w, h rows against an image extent."""
    r = np.asarray(rects, dtype=np.int64)
    if r.ndim != 2 or r.shape[1] != 4:
        raise ValueError(f"expected an (n, 4) array of rects, got shape {r.shape}")
    x, y, w, h = r.T
    ok = (w >= 1) & (h >= 1) & (x >= 0) & (y >= 0) & (x + w <= width) & (y + h <= height)
    if not ok.all():
        bad = r[np.argmin(ok)]
        raise BlockOutOfBounds(f"block {tuple(bad)} outside {width}x{height} image")
    return r


def block_means(tables: IntegralTables, rects) -> np.ndarray:
    """Vectorized block means; ``rects`` is (n, 4). Returns (n, 3)."""
    r = check_rects(rects, tables.width, tables.height)
    x, y, w, h = r.T
    area = (w * h).astype(np.float64)[:, None]
    return _box(tables.sum, x, y, w, h) / area + tables.shift


def block_variances(tables: IntegralTables, rects) -> np.ndarray:
    """Vectorized scalar block variances (channel mean of population variances)."""
    r = check_rects(rects, tables.width, tables.height)
    x, y, w, h = r.T
    area = (w * h).astype(np.float64)[:, None]
    m = _box(tables.sum, x, y, w, h) / area
    var = _box(tables.sum_sq, x, y, w, h) / area - m * m
    return np.maximum(var, 0.0).mean(axis=1)


def block_mean(img: Image, tables: IntegralTables, b) -> np.ndarray:
    """Per-channel mean color of the pixels in ``b``."""
    b = _check_rect(tables, b)
    return _box(tables.sum, *b) / b.area + tables.shift


def block_variance(img: Image, tables: IntegralTables, b) -> float:
    """Mean over channels of the per-channel population variance inside ``b``."""
    b = _check_rect(tables, b)
    m = _box(tables.sum, *b) / b.area
    var = _box(tables.sum_sq, *b) / b.area - m * m
    return float(np.maximum(var, 0.0).mean())


def _read_ppm(path: Path) -> np.ndarray:
    raw = path.read_bytes()
    if not raw.startswith(b"P6"):
        raise ValueError("not a binary PPM (P6) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(int(raw[pos:end]))
        pos = end
    pos += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only 8-bit PPM supported (maxval {maxval})")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return pixels.reshape(h, w, 3)


def _write_ppm(path: Path, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def to_uint8(img: Image) -> np.ndarray:
    return np.round(img.data * 255.0).astype(np.uint8)


def load_image(path: PathLike) -> Image:
    """Read an 8-bit PNG (or binary PPM) into an :class:`Image`."""
    path = Path(path)
    try:
        if path.suffix.lower() in (".ppm", ".pnm"):
            pixels = _read_ppm(path)
        else:
            with PILImage.open(path) as im:
                if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
                    raise ValueError(f"unsupported image mode {im.mode}")
                pixels = np.asarray(im.convert("RGB"))
    except (OSError, ValueError, IndexError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return Image(pixels.astype(np.float64) / 255.0)


def save_image(img: Image, path: PathLike) -> None:
    """Write ``img`` as 8-bit RGB; ``.ppm`` paths use binary PPM, anything else PNG."""
    path = Path(path)
    pixels = to_uint8(img)
    try:
        if path.suffix.lower() in (".ppm", ".pnm"):
            _write_ppm(path, pixels)
        else:
            PILImage.fromarray(pixels).save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write image {path}: {exc}") from exc
