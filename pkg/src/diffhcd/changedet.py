"""Targetless change detection between two co-registered rasters.

Pipeline: outlier clipping, [0, 1] scaling and Gaussian smoothing of each
image, standardization, squared difference averaged over channels, a global
threshold ``omega``, sliding-window Otsu binarization and DBSCAN cleanup of
isolated detections. Also DR/FAR scoring and the omega sweep.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .raster import reflect_index

OTSU_BINS = 256
# relative slack when picking the first maximizer of the Otsu criterion
OTSU_TIE_RTOL = 1e-12


@dataclass(frozen=True)
class ChangeDetConfig:
    omega: float = 0.1
    w_gauss: int = 11
    w_otsu: int = 1023
    e_max: float = 5.0
    n_min: int = 48
    otsu_bins: int = OTSU_BINS

    def __post_init__(self):
        if self.w_gauss % 2 == 0 or self.w_gauss < 1:
            raise ValueError(f"w_gauss must be odd, got {self.w_gauss}")
        if self.w_otsu % 2 == 0 or self.w_otsu < 1:
            raise ValueError(f"w_otsu must be odd, got {self.w_otsu}")
        if self.e_max <= 0:
            raise ValueError("e_max must be > 0")
        if self.n_min < 1:
            raise ValueError("n_min must be >= 1")
        if not 0.0 <= self.omega <= 1.0:
            raise ValueError(f"omega must be in [0, 1], got {self.omega}")


@dataclass
class ChangeMap:
    mask: np.ndarray  # bool (h, w)
    labels: np.ndarray  # int (h, w), -1 = noise or background
    diff: np.ndarray  # difference image before the global threshold
    n_clusters: int = 0


# ---------------------------------------------------------------------------
# difference image
# ---------------------------------------------------------------------------


def gaussian_sigma(window: int) -> float:
    return 0.3 * ((window - 1) / 2 - 1) + 0.8


def gaussian_kernel(window: int) -> np.ndarray:
    if window % 2 == 0 or window < 1:
        raise ValueError(f"Gaussian window must be odd, got {window}")
    x = np.arange(window) - window // 2
    k = np.exp(-(x**2) / (2 * gaussian_sigma(window) ** 2))
    return k / k.sum()


def gaussian_blur(image, window: int = 11) -> np.ndarray:
    """Separable Gaussian over the last two axes, mirrored borders."""
    k = gaussian_kernel(window)
    out = np.asarray(image, dtype=np.float64)
    out = ndimage.correlate1d(out, k, axis=-1, mode="mirror")
    return ndimage.correlate1d(out, k, axis=-2, mode="mirror")


def _minmax(a):
    lo, hi = a.min(), a.max()
    return (a - lo) / (hi - lo) if hi > lo else np.zeros_like(a)


def clip_outliers(image, n_sigma: float = 6.0) -> np.ndarray:
    a = np.asarray(image, dtype=np.float64)
    return np.minimum(a, a.mean() + n_sigma * a.std())


def _prepare(image, w_gauss):
    a = gaussian_blur(_minmax(clip_outliers(image)), w_gauss)
    sd = a.std()
    return (a - a.mean()) / (sd if sd > 0 else 1.0)


def difference_image(pre, post, cfg: ChangeDetConfig = ChangeDetConfig()) -> np.ndarray:
    """Single-channel change magnitude in [0, 1]."""
    pre = np.asarray(pre, dtype=np.float64)
    post = np.asarray(post, dtype=np.float64)
    if pre.shape != post.shape:
        raise ValueError(f"shape mismatch {pre.shape} vs {post.shape}")
    if pre.ndim == 2:
        pre, post = pre[None], post[None]
    d = (_prepare(post, cfg.w_gauss) - _prepare(pre, cfg.w_gauss)) ** 2
    return _minmax(d.mean(axis=0))


def global_threshold(diff, omega: float) -> np.ndarray:
    diff = np.asarray(diff, dtype=np.float64)
    return np.where(diff >= omega, diff, 0.0)


# ---------------------------------------------------------------------------
# sliding-window Otsu
# ---------------------------------------------------------------------------


def quantize(values, bins: int = OTSU_BINS) -> np.ndarray:
    """Histogram bin of each value on [0, 1]."""
    v = np.asarray(values, dtype=np.float64)
    return np.clip(np.floor(v * bins), 0, bins - 1).astype(np.int64)


@numba.njit(cache=True)
def _otsu_bin(hist, total, rtol):
    """Index k of the best split (class 0 = bins <= k), or -1 if none."""
    nb = hist.shape[0]
    s_all = 0
    for k in range(nb):
        s_all += k * hist[k]
    crit = np.empty(nb - 1)
    best = 0.0
    n0 = 0
    s0 = 0
    for k in range(nb - 1):
        n0 += hist[k]
        s0 += k * hist[k]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            crit[k] = -1.0
            continue
        d = float(total * s0 - n0 * s_all)
        c = d * d / (float(n0) * float(n1))
        crit[k] = c
        if c > best:
            best = c
    if best <= 0.0:
        return -1
    floor = best * (1.0 - rtol)
    for k in range(nb - 1):
        if crit[k] >= floor:
            return k
    return -1


@numba.njit(cache=True)
def _windowed_otsu_kernel(padded, h, w, win, nb, rtol):
    wp = padded.shape[1]
    out = np.zeros((h, w), dtype=np.bool_)
    colhist = np.zeros((wp, nb), dtype=np.int64)
    for r in range(win):
        for c in range(wp):
            colhist[c, padded[r, c]] += 1
    hist = np.zeros(nb, dtype=np.int64)
    half = win // 2
    total = win * win
    for i in range(h):
        if i > 0:
            for c in range(wp):
                colhist[c, padded[i - 1, c]] -= 1
                colhist[c, padded[i - 1 + win, c]] += 1
        hist[:] = 0
        for c in range(win):
            for b in range(nb):
                hist[b] += colhist[c, b]
        for j in range(w):
            if j > 0:
                for b in range(nb):
                    hist[b] += colhist[j - 1 + win, b] - colhist[j - 1, b]
            center = padded[i + half, j + half]
            # bin 0 can never lie above a split
            if center == 0:
                continue
            k = _otsu_bin(hist, total, rtol)
            if k >= 0 and center > k:
                out[i, j] = True
    return out


def windowed_otsu(diff, w_otsu: int = 1023, bins: int = OTSU_BINS) -> np.ndarray:
    """Per-pixel Otsu over the mirrored ``w_otsu`` window centred on it.

    A pixel is positive when its histogram bin lies above the window's
    optimal split; windows with a single occupied bin yield negatives.
    """
    if w_otsu % 2 == 0 or w_otsu < 1:
        raise ValueError(f"w_otsu must be odd, got {w_otsu}")
    q = quantize(diff, bins)
    h, w = q.shape
    half = w_otsu // 2
    rows = reflect_index(np.arange(-half, h + half), h)
    cols = reflect_index(np.arange(-half, w + half), w)
    padded = np.ascontiguousarray(q[rows[:, None], cols[None, :]])
    return _windowed_otsu_kernel(padded, h, w, w_otsu, bins, OTSU_TIE_RTOL)


# ---------------------------------------------------------------------------
# DBSCAN over positive pixels
# ---------------------------------------------------------------------------


def dbscan_labels(points, eps: float, min_pts: int) -> np.ndarray:
    """DBSCAN labels (-1 = noise) for an ``(n, d)`` point array.

    Neighbourhoods are closed balls and include the point itself. Clusters
    are numbered in order of their first core point; a border point joins
    the lowest-numbered cluster with a core point in reach, which is what a
    scan-order expansion produces.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    pairs = cKDTree(pts).query_pairs(eps, output_type="ndarray")
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.empty(0, int), np.empty(0, int))
    counts = 1 + np.bincount(i, minlength=n) + np.bincount(j, minlength=n)
    core = counts >= min_pts
    cc = core[i] & core[j]
    graph = coo_matrix((np.ones(cc.sum()), (i[cc], j[cc])), shape=(n, n))
    _, comp = connected_components(graph, directed=False)
    core_idx = np.flatnonzero(core)
    # rename components by first (scan-order) core point
    first_seen = {}
    for idx in core_idx:
        first_seen.setdefault(comp[idx], len(first_seen))
    for idx in core_idx:
        labels[idx] = first_seen[comp[idx]]
    # border points: non-core with a core neighbour
    src = np.concatenate([i, j])
    dst = np.concatenate([j, i])
    sel = ~core[src] & core[dst]
    if sel.any():
        cand = labels[dst[sel]]
        border = src[sel]
        order = np.lexsort((cand, border))
        border, cand = border[order], cand[order]
        first = np.ones(len(border), dtype=bool)
        first[1:] = border[1:] != border[:-1]
        labels[border[first]] = cand[first]
    return labels


def dbscan_filter(binary, e_max: float = 5.0, n_min: int = 48, diff=None) -> ChangeMap:
    binary = np.asarray(binary, dtype=bool)
    pts = np.argwhere(binary)
    lab = dbscan_labels(pts, e_max, n_min)
    labels = np.full(binary.shape, -1, dtype=np.int64)
    labels[pts[:, 0], pts[:, 1]] = lab
    mask = labels >= 0
    n_clusters = int(lab.max() + 1) if len(lab) else 0
    return ChangeMap(mask, labels, np.zeros(binary.shape) if diff is None else diff, n_clusters)


# ---------------------------------------------------------------------------
# pipeline and evaluation
# ---------------------------------------------------------------------------


def detect_from_difference(diff, cfg: ChangeDetConfig) -> ChangeMap:
    binary = windowed_otsu(global_threshold(diff, cfg.omega), cfg.w_otsu, cfg.otsu_bins)
    return dbscan_filter(binary, cfg.e_max, cfg.n_min, diff=diff)


def detect_changes(pre, post, cfg: ChangeDetConfig = ChangeDetConfig()) -> ChangeMap:
    return detect_from_difference(difference_image(pre, post, cfg), cfg)


@dataclass(frozen=True)
class DetectionScores:
    dr: float
    far: float
    dr_defined: bool = True


def evaluate_dr_far(mask, truth) -> DetectionScores:
    mask = np.asarray(getattr(mask, "mask", mask), dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    if mask.shape != truth.shape:
        raise ValueError(f"shape mismatch {mask.shape} vs {truth.shape}")
    tp = int(np.sum(mask & truth))
    fp = int(np.sum(mask & ~truth))
    pos = int(truth.sum())
    neg = truth.size - pos
    far = fp / neg if neg else 0.0
    if pos == 0:
        return DetectionScores(float("nan"), far, dr_defined=False)
    return DetectionScores(tp / pos, far)


ROC_HEADER = ("omega", "dr", "far", "neg_log10_far")


def roc_sweep(pre, post, truth, cfg: ChangeDetConfig = ChangeDetConfig(), n_points: int = 101, on_map=None):
    """DR/FAR over omega = 0, 0.01, ..., 1. Returns ``(omega, dr, far)`` rows."""
    diff = difference_image(pre, post, cfg)
    rows = []
    for k in range(n_points):
        omega = round(k / (n_points - 1), 10)
        cm = detect_from_difference(diff, _with_omega(cfg, omega))
        s = evaluate_dr_far(cm.mask, truth)
        rows.append((omega, s.dr, s.far))
        if on_map is not None:
            on_map(omega, cm)
    return rows


def _with_omega(cfg, omega):
    return ChangeDetConfig(omega, cfg.w_gauss, cfg.w_otsu, cfg.e_max, cfg.n_min, cfg.otsu_bins)


def neg_log10(far: float) -> float:
    return math.inf if far == 0 else -math.log10(far)


def write_roc_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROC_HEADER)
        for omega, dr, far in rows:
            w.writerow([f"{omega:.2f}", f"{dr:.9g}", f"{far:.9g}", f"{neg_log10(far):.9g}"])


def overlay(mask, truth) -> np.ndarray:
    """RGB uint8 (h, w, 3): green TP, red FP, blue FN, black TN."""
    mask = np.asarray(mask, dtype=bool)
    truth = np.asarray(truth, dtype=bool)
    rgb = np.zeros(mask.shape + (3,), dtype=np.uint8)
    rgb[mask & truth] = (0, 255, 0)
    rgb[mask & ~truth] = (255, 0, 0)
    rgb[~mask & truth] = (0, 0, 255)
    return rgb
