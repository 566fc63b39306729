"""Raster container, ``.rsr``/PNG file I/O, cubic resampling and patch tiling.

A :class:`RasterImage` is a planar ``(n_ch, h, w)`` float32 array. The
``.rsr`` container is a 16-byte header (``RSR1`` magic followed by
little-endian ``u32`` n_ch, h, w) and the raw little-endian float32 samples,
channel-major then row-major.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

MAGIC = b"RSR1"
_HEADER = struct.Struct("<4s3I")
# refuse headers that would allocate more than 4 GiB of samples
MAX_SAMPLES = 1 << 30


class RasterIOError(ValueError):
    """Raised when a raster file cannot be decoded or encoded."""


@dataclass(frozen=True)
class RasterImage:
    """Immutable planar multi-channel image.

    ``data`` is coerced to a C-contiguous float32 array of shape
    ``(n_ch, h, w)``; a 2-D array is promoted to a single channel.
    """

    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError(f"raster data must be (n_ch, h, w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"raster dimensions must be positive, got {arr.shape}")
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise ValueError("raster contains non-finite samples")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def n_ch(self) -> int:
        return self.data.shape[0]

    @property
    def h(self) -> int:
        return self.data.shape[1]

    @property
    def w(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.data
        return self.data.astype(dtype)

    def __eq__(self, other):
        if not isinstance(other, RasterImage):
            return NotImplemented
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def encode_rsr(image: RasterImage) -> bytes:
    header = _HEADER.pack(MAGIC, image.n_ch, image.h, image.w)
    return header + image.data.astype("<f4", copy=False).tobytes()


def decode_rsr(buf: bytes) -> RasterImage:
    if len(buf) < _HEADER.size:
        raise RasterIOError("truncated header")
    magic, n_ch, h, w = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise RasterIOError("bad magic")
    if n_ch == 0 or h == 0 or w == 0:
        raise RasterIOError(f"zero dimension in header ({n_ch}, {h}, {w})")
    n = n_ch * h * w
    if n > MAX_SAMPLES:
        raise RasterIOError(f"dimension overflow ({n_ch} x {h} x {w})")
    expected = _HEADER.size + 4 * n
    if len(buf) < expected:
        raise RasterIOError(f"truncated payload: expected {expected} bytes, got {len(buf)}")
    if len(buf) > expected:
        raise RasterIOError(f"trailing bytes: expected {expected} bytes, got {len(buf)}")
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(n_ch, h, w)
    try:
        return RasterImage(data.astype(np.float32))
    except ValueError as exc:
        raise RasterIOError(str(exc)) from exc


def read_rsr(path) -> RasterImage:
    path = Path(path)
    if not path.exists():
        raise RasterIOError(f"no such file: {path}")
    return decode_rsr(path.read_bytes())


def write_rsr(path, image: RasterImage) -> None:
    Path(path).write_bytes(encode_rsr(image))


def to_uint8(image: RasterImage) -> np.ndarray:
    """Map [-1, 1] linearly to 0..255 with round-half-up; returns (h, w[, 3])."""
    if image.n_ch not in (1, 3):
        raise RasterIOError(f"PNG export needs 1 or 3 channels, got {image.n_ch}")
    scaled = (image.data.astype(np.float64) + 1.0) * 127.5
    out = np.floor(np.clip(scaled, 0.0, 255.0) + 0.5).astype(np.uint8)
    return out[0] if image.n_ch == 1 else np.moveaxis(out, 0, -1)


def write_png(path, image: RasterImage) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def read_png(path) -> RasterImage:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float64)
    arr = arr[None] if arr.ndim == 2 else np.moveaxis(arr, -1, 0)
    return RasterImage(arr / 127.5 - 1.0)


def read_raster(path) -> RasterImage:
    """Dispatch on suffix: ``.png`` or ``.rsr``."""
    if str(path).lower().endswith(".png"):
        return read_png(path)
    return read_rsr(path)


def write_raster(path, image: RasterImage) -> None:
    if str(path).lower().endswith(".png"):
        write_png(path, image)
    else:
        write_rsr(path, image)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def reflect_index(idx, n: int) -> np.ndarray:
    """Mirror indices into ``[0, n)`` without repeating the edge sample."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m > n - 1, period - m, m)


def catmull_rom(x, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel; ``a = -0.5`` is Catmull-Rom."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    near = ((a + 2) * x - (a + 3)) * x * x + 1
    far = ((a * x - 5 * a) * x + 8 * a) * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """Dense ``(n_out, n_in)`` interpolation matrix (corner-aligned grid)."""
    if n_out == 1:
        src = np.array([(n_in - 1) / 2.0])
    else:
        src = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    base = np.floor(src).astype(np.int64)
    frac = src - base
    weights = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in (-1, 0, 1, 2):
        wk = catmull_rom(frac - k)
        np.add.at(weights, (rows, reflect_index(base + k, n_in)), wk)
    return weights


def bicubic_resize(image, out_h: int, out_w: int):
    """Separable Catmull-Rom resampling with mirrored borders.

    Accepts a :class:`RasterImage` or an ``(n_ch, h, w)`` array and returns
    the same kind.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got ({out_h}, {out_w})")
    data = np.asarray(image, dtype=np.float64)
    _, h, w = data.shape
    if (h, w) == (out_h, out_w):
        out = data
    else:
        wh = resize_weights(h, out_h)
        ww = resize_weights(w, out_w)
        out = np.matmul(np.matmul(wh, data), ww.T)
    out = out.astype(np.float32)
    return RasterImage(out) if isinstance(image, RasterImage) else out


# ---------------------------------------------------------------------------
# tiling
# ---------------------------------------------------------------------------

# Offset of the 2h x 2w context window relative to the local patch origin, in
# units of the patch size, for each position the local patch may occupy.
QUADRANT_OFFSETS = {"nw": (0, 0), "ne": (0, -1), "sw": (-1, 0), "se": (-1, -1)}


@dataclass(frozen=True)
class PatchGrid:
    patch: tuple[int, int]
    stride: tuple[int, int]
    origins: tuple[tuple[int, int], ...]
    pad_mode: str = "reflect"


@dataclass(frozen=True)
class PatchPair:
    local: RasterImage
    global_: RasterImage
    origin: tuple[int, int]

    def condition(self) -> np.ndarray:
        return np.concatenate([self.local.data, self.global_.data], axis=0)


def patch_grid(h: int, w: int, patch: int = 128, stride: int | None = None) -> PatchGrid:
    stride = patch if stride is None else stride
    if h < patch or w < patch:
        raise ValueError(f"raster {h}x{w} is smaller than patch {patch}")
    origins = tuple(
        (r, c) for r in range(0, h - patch + 1, stride) for c in range(0, w - patch + 1, stride)
    )
    return PatchGrid((patch, patch), (stride, stride), origins)


def context_window(data: np.ndarray, origin, patch: int, quadrant: str = "nw") -> np.ndarray:
    """The ``2 patch x 2 patch`` neighbourhood of a patch, mirror-padded."""
    dr, dc = QUADRANT_OFFSETS[quadrant]
    r0 = origin[0] + dr * patch
    c0 = origin[1] + dc * patch
    _, h, w = data.shape
    rows = reflect_index(np.arange(r0, r0 + 2 * patch), h)
    cols = reflect_index(np.arange(c0, c0 + 2 * patch), w)
    return data[:, rows[:, None], cols[None, :]]


def extract_patch_pairs(
    lr: RasterImage,
    hr: RasterImage | None = None,
    patch: int = 128,
    quadrant: str = "nw",
) -> list[tuple[PatchPair, RasterImage | None]]:
    """Cut ``lr`` into non-overlapping patches with their downsampled context.

    ``lr`` must already live on the ``hr`` pixel grid. Each entry is a
    ``(PatchPair, hr_patch)`` tuple; ``hr_patch`` is None when ``hr`` is not
    given.
    """
    if hr is not None and hr.shape[1:] != lr.shape[1:]:
        raise ValueError(f"lr {lr.shape} and hr {hr.shape} must share pixel dims")
    grid = patch_grid(lr.h, lr.w, patch)
    out = []
    for r, c in grid.origins:
        local = lr.data[:, r : r + patch, c : c + patch]
        context = context_window(lr.data, (r, c), patch, quadrant)
        glob = bicubic_resize(context, patch, patch)
        pair = PatchPair(RasterImage(local), RasterImage(glob), (r, c))
        hr_patch = None if hr is None else RasterImage(hr.data[:, r : r + patch, c : c + patch])
        out.append((pair, hr_patch))
    return out


def assemble_mosaic(patches: Iterable[tuple[RasterImage, Sequence[int]]], h: int, w: int) -> RasterImage:
    """Place tiles into an ``h x w`` frame; every pixel must be covered once."""
    patches = list(patches)
    if not patches:
        raise ValueError("no tiles given")
    n_ch = patches[0][0].n_ch
    out = np.zeros((n_ch, h, w), dtype=np.float32)
    count = np.zeros((h, w), dtype=np.int32)
    for tile, (r, c) in patches:
        if tile.n_ch != n_ch:
            raise ValueError("tiles disagree on channel count")
        if r < 0 or c < 0 or r + tile.h > h or c + tile.w > w:
            raise ValueError(f"tile at {(r, c)} falls outside the {h}x{w} frame")
        out[:, r : r + tile.h, c : c + tile.w] = tile.data
        count[r : r + tile.h, c : c + tile.w] += 1
    if np.any(count > 1):
        rr, cc = np.argwhere(count > 1)[0]
        raise ValueError(f"overlapping tiles at pixel ({rr}, {cc})")
    if np.any(count == 0):
        rr, cc = np.argwhere(count == 0)[0]
        raise ValueError(f"uncovered origin ({rr}, {cc})")
    return RasterImage(out)


def pad_to_multiple(image: RasterImage, multiple: int) -> RasterImage:
    """Mirror-pad bottom/right so both dims are multiples of ``multiple``."""
    ph = (-image.h) % multiple
    pw = (-image.w) % multiple
    if ph == 0 and pw == 0:
        return image
    rows = reflect_index(np.arange(image.h + ph), image.h)
    cols = reflect_index(np.arange(image.w + pw), image.w)
    return RasterImage(image.data[:, rows[:, None], cols[None, :]])
