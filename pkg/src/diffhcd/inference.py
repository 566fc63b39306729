"""Patch translation with PSNR-voted starting noise, and whole-raster tiling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .color import ColorStats, colorize, whiten
from .diffusion import GuidanceConfig, cosine_schedule, ddim_sample
from .raster import PatchPair, RasterImage, assemble_mosaic, extract_patch_pairs, pad_to_multiple


@dataclass(frozen=True)
class InferenceConfig:
    n_ddim: int = 64
    d: int = 8
    n_noisy: int = 8
    omega_uncond: float = 1.0
    color_source: str = "input"  # or "external"
    seed: int = 0
    T: int = 1024
    null_value: float = -2.0

    def __post_init__(self):
        if self.n_ddim // self.d < 1:
            raise ValueError(f"n_ddim // d must be >= 1 (n_ddim={self.n_ddim}, d={self.d})")
        if self.n_noisy < 1:
            raise ValueError("n_noisy must be >= 1")
        if self.n_ddim > self.T:
            raise ValueError("n_ddim cannot exceed T")
        if self.color_source not in ("input", "external"):
            raise ValueError(f"color_source must be 'input' or 'external', got {self.color_source!r}")

    @property
    def n_coarse(self) -> int:
        return self.n_ddim // self.d

    @property
    def guidance(self) -> GuidanceConfig:
        return GuidanceConfig(self.omega_uncond, self.null_value)


@dataclass
class VoteRecord:
    """What happened while translating one patch."""

    scores: list[float] = field(default_factory=list)
    selected: int = -1
    n_coarse_runs: int = 0
    n_full_runs: int = 0
    y0_hat: np.ndarray | None = None


def psnr(a, b, peak: float = 2.0) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mean_psnr(pairs, peak: float = 2.0) -> float:
    return float(np.mean([psnr(a, b, peak) for a, b in pairs]))


def _check_model(model):
    params = getattr(model, "params", None)
    if params is not None and not all(np.all(np.isfinite(p)) for p in params.values()):
        raise ValueError("denoiser parameters contain NaN or Inf")


def voted_translate_patch(
    model,
    pair: PatchPair,
    cfg: InferenceConfig = InferenceConfig(),
    external_stats: ColorStats | None = None,
    rng: np.random.Generator | None = None,
    record: VoteRecord | None = None,
) -> np.ndarray:
    """Translate one patch; returns the colorized ``(n_ch, h, w)`` array.

    ``n_noisy`` short DDIM runs (``n_ddim // d`` steps) score their starting
    noise by PSNR against the whitened local input; the best one (lowest
    index on ties) is rerun with ``n_ddim`` steps.
    """
    _check_model(model)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    x_local, stats = whiten(pair.local)
    x_global, _ = whiten(pair.global_)
    if external_stats is not None:
        stats = external_stats
    x = np.concatenate([x_local, x_global])
    schedule = cosine_schedule(cfg.T)
    noise = rng.standard_normal((cfg.n_noisy,) + x_local.shape).astype(np.float32)

    if cfg.n_noisy == 1:
        best, scores = 0, [float("nan")]
    else:
        coarse = ddim_sample(model, noise, x, cfg.n_coarse, cfg.guidance, schedule)
        scores = [psnr(x_local, c) for c in coarse]
        best = int(np.argmax(scores))
    y0_hat = ddim_sample(model, noise[best], x, cfg.n_ddim, cfg.guidance, schedule)
    if not np.all(np.isfinite(y0_hat)):
        raise FloatingPointError("sampler produced non-finite values")
    if record is not None:
        record.scores = scores
        record.selected = best
        record.n_coarse_runs = cfg.n_noisy if cfg.n_noisy > 1 else 0
        record.n_full_runs = 1
        record.y0_hat = y0_hat
    return colorize(y0_hat, stats)


def patch_rng(seed: int, origin) -> np.random.Generator:
    return np.random.default_rng([seed, int(origin[0]), int(origin[1])])


def translate_raster(
    model,
    lr_raster: RasterImage,
    cfg: InferenceConfig = InferenceConfig(),
    external_color_raster: RasterImage | None = None,
    patch: int = 128,
    quadrant: str = "nw",
    records: dict | None = None,
) -> RasterImage:
    """Tile, translate every patch independently, and stitch back.

    Each patch draws its noise from ``(seed, row, col)``, so the result does
    not depend on processing order.
    """
    if cfg.color_source == "external" and external_color_raster is None:
        raise ValueError("color_source='external' needs an external color raster")
    padded = pad_to_multiple(lr_raster, patch)
    ext = None
    if external_color_raster is not None:
        if external_color_raster.shape[1:] != lr_raster.shape[1:]:
            raise ValueError("external color raster must match the input's pixel dims")
        ext = pad_to_multiple(external_color_raster, patch)
    tiles = []
    for pair, _ in extract_patch_pairs(padded, None, patch, quadrant):
        r, c = pair.origin
        stats = None
        if ext is not None:
            _, stats = whiten(ext.data[:, r : r + patch, c : c + patch])
        rec = VoteRecord() if records is not None else None
        out = voted_translate_patch(model, pair, cfg, stats, patch_rng(cfg.seed, pair.origin), rec)
        if records is not None:
            records[pair.origin] = rec
        tiles.append((RasterImage(out), pair.origin))
    mosaic = assemble_mosaic(tiles, padded.h, padded.w)
    return RasterImage(mosaic.data[:, : lr_raster.h, : lr_raster.w])
