"""Color standardization: strip and restore overall tonality of a patch.

``whiten`` removes each channel's mean, then maps the whole tensor into
[-1, 1] with a single global offset/scale. ``colorize`` undoes it, and can
equally attach the statistics of a *different* image.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ColorStats:
    m1: np.ndarray  # per-channel means
    m2: float  # global minimum after mean removal
    m3: float  # global range after the m2 shift

    def __post_init__(self):
        m1 = np.asarray(self.m1, dtype=np.float32).reshape(-1)
        object.__setattr__(self, "m1", m1)
        object.__setattr__(self, "m2", float(np.float32(self.m2)))
        object.__setattr__(self, "m3", float(np.float32(self.m3)))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.m1)) and np.isfinite(self.m2) and np.isfinite(self.m3))


def center_channels(image) -> tuple[np.ndarray, np.ndarray]:
    """First whitening stage: subtract per-channel means (f64)."""
    data = np.asarray(image, dtype=np.float64)
    m1 = data.mean(axis=(1, 2))
    return data - m1[:, None, None], m1


def whiten(image) -> tuple[np.ndarray, ColorStats]:
    """Return the whitened ``(n_ch, h, w)`` float32 array and its stats.

    A fully constant-per-channel input has no range to normalize; it maps to
    zeros with ``m2 = m3 = 0``.
    """
    centered, m1 = center_channels(image)
    m2 = centered.min()
    shifted = centered - m2
    m3 = shifted.max()
    if not m3 > 0:
        return np.zeros(centered.shape, dtype=np.float32), ColorStats(m1, 0.0, 0.0)
    out = 2.0 * (shifted / m3 - 0.5)
    return out.astype(np.float32), ColorStats(m1, m2, m3)


def colorize(whitened, stats: ColorStats) -> np.ndarray:
    """Stretch ``whitened`` onto ``[m2, m2 + m3]`` and add back channel means."""
    if not stats.is_finite():
        raise ValueError("color statistics contain NaN or Inf")
    data = np.asarray(whitened, dtype=np.float64)
    if data.shape[0] != stats.m1.shape[0]:
        raise ValueError(f"{data.shape[0]} channels but {stats.m1.shape[0]} channel means")
    lo, hi = data.min(), data.max()
    if hi > lo:
        unit = (data - lo) / (hi - lo)
    else:
        unit = np.zeros_like(data)
    out = unit * stats.m3 + stats.m2 + stats.m1.astype(np.float64)[:, None, None]
    return out.astype(np.float32)
