"""Procedural paired scenes: a sharp "high resolution" render, a degraded
"low resolution" counterpart on the same pixel grid, and change events with
exact ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .raster import RasterImage, bicubic_resize, write_rsr


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    size: int = 96
    n_buildings: int = 6
    n_roads: int = 2
    n_vegetation: int = 4
    octaves: int = 3
    texture: float = 0.08  # amplitude of the ground value noise
    color_shift: float = 0.3
    gain_jitter: float = 0.15
    factor: int = 3
    noise_std: float = 0.01
    # change event: random buildings added/removed, plus explicit rectangles
    n_added: int = 0
    n_removed: int = 0
    add_rects: tuple[tuple[int, int, int, int], ...] = ()
    add_color: tuple[float, float, float] | None = None


@dataclass
class Scene:
    spec: SceneSpec
    objects: list[dict] = field(default_factory=list)
    background: np.ndarray | None = None


_BUILDING_COLORS = np.array([[0.85, 0.80, 0.75], [0.75, 0.35, 0.30], [0.55, 0.60, 0.70], [0.95, 0.95, 0.90]])


def _value_noise(rng, size, octaves):
    field_ = np.zeros((size, size))
    amp = 1.0
    for o in range(octaves):
        cells = 2 ** (o + 2)
        grid = rng.standard_normal((1, cells, cells))
        field_ += amp * bicubic_resize(grid, size, size)[0]
        amp *= 0.5
    return field_


def _object_mask(obj, size):
    rr, cc = np.mgrid[0:size, 0:size]
    kind = obj["kind"]
    if kind == "rect":
        r, c, h, w = obj["geom"]
        return (rr >= r) & (rr < r + h) & (cc >= c) & (cc < c + w)
    if kind == "ellipse":
        r, c, a, b = obj["geom"]
        return ((rr - r) / a) ** 2 + ((cc - c) / b) ** 2 <= 1.0
    if kind == "road":
        r0, c0, r1, c1, width = obj["geom"]
        d = np.array([r1 - r0, c1 - c0], dtype=float)
        length = np.hypot(*d)
        d /= length
        pr, pc = rr - r0, cc - c0
        along = pr * d[0] + pc * d[1]
        across = np.abs(-pr * d[1] + pc * d[0])
        return (across <= width / 2) & (along >= 0) & (along <= length)
    raise ValueError(f"unknown object kind {kind!r}")


def _random_building(rng, size, ident):
    h, w = rng.integers(size // 12 + 3, size // 5 + 4, size=2)
    r = int(rng.integers(0, size - h))
    c = int(rng.integers(0, size - w))
    color = _BUILDING_COLORS[rng.integers(len(_BUILDING_COLORS))] + rng.uniform(-0.05, 0.05, 3)
    return {"id": ident, "kind": "rect", "geom": (r, c, int(h), int(w)), "color": color}


def build_scene(spec: SceneSpec) -> Scene:
    rng = np.random.default_rng([spec.seed, 0])
    n = spec.size
    tint = np.array([0.45, 0.42, 0.30]) + rng.uniform(-0.05, 0.05, 3)
    noise = _value_noise(rng, n, spec.octaves)
    background = tint[:, None, None] + spec.texture * noise[None] * np.array([1.0, 0.9, 0.7])[:, None, None]
    objects = []
    ident = 0
    for _ in range(spec.n_vegetation):
        geom = (rng.uniform(0, n), rng.uniform(0, n), rng.uniform(n / 16, n / 6), rng.uniform(n / 16, n / 6))
        color = np.array([0.20, 0.45, 0.18]) + rng.uniform(-0.05, 0.05, 3)
        objects.append({"id": ident, "kind": "ellipse", "geom": geom, "color": color})
        ident += 1
    for _ in range(spec.n_roads):
        r0, c0, r1, c1 = rng.uniform(0, n, 4)
        if np.hypot(r1 - r0, c1 - c0) < n / 4:
            r1, c1 = n - r0, n - c0
        width = rng.uniform(2.0, 4.0)
        color = np.array([0.30, 0.30, 0.32]) + rng.uniform(-0.03, 0.03, 3)
        objects.append({"id": ident, "kind": "road", "geom": (r0, c0, r1, c1, width), "color": color})
        ident += 1
    for _ in range(spec.n_buildings):
        objects.append(_random_building(rng, n, ident))
        ident += 1
    return Scene(spec, objects, background)


def render(scene: Scene) -> tuple[np.ndarray, np.ndarray]:
    """Returns the (3, n, n) image and the top-most object id per pixel (-1 = ground)."""
    n = scene.spec.size
    img = scene.background.copy()
    labels = np.full((n, n), -1, dtype=np.int64)
    for obj in scene.objects:
        m = _object_mask(obj, n)
        img[:, m] = obj["color"][:, None]
        labels[m] = obj["id"]
    return img, labels


def degrade(hr: np.ndarray, spec: SceneSpec) -> np.ndarray:
    """blur -> downsample -> per-channel affine color shift -> noise -> upsample."""
    rng = np.random.default_rng([spec.seed, 1])
    n = hr.shape[-1]
    f = spec.factor
    blurred = ndimage.gaussian_filter(hr, sigma=(0, 0.5 * f, 0.5 * f), mode="mirror")
    small = bicubic_resize(blurred, max(n // f, 2), max(n // f, 2)).astype(np.float64)
    gain = 1.0 + rng.uniform(-spec.gain_jitter, spec.gain_jitter, hr.shape[0])
    offset = rng.uniform(-spec.color_shift, spec.color_shift, hr.shape[0])
    small = small * gain[:, None, None] + offset[:, None, None]
    small = small + spec.noise_std * rng.standard_normal(small.shape)
    return bicubic_resize(small, n, n)


def generate_pair(spec: SceneSpec) -> tuple[RasterImage, RasterImage]:
    """``(hr, lr)`` with identical pixel dimensions."""
    hr, _ = render(build_scene(spec))
    return RasterImage(hr), RasterImage(degrade(hr, spec))


def apply_changes(hr: RasterImage | None, spec: SceneSpec) -> tuple[RasterImage, np.ndarray]:
    """Post-event render of the scene and the exact changed-pixel mask.

    Removed buildings are taken from the scene's own buildings; added ones
    are drawn on top. A pixel is changed when its top-most object differs.
    """
    scene = build_scene(spec)
    pre_img, pre_labels = render(scene)
    if hr is not None and not np.allclose(np.asarray(hr, dtype=np.float64), pre_img, atol=1e-6):
        raise ValueError("hr does not match the scene described by spec")
    rng = np.random.default_rng([spec.seed, 2])
    buildings = [o for o in scene.objects if o["kind"] == "rect"]
    n_remove = min(spec.n_removed, len(buildings))
    removed = {buildings[i]["id"] for i in rng.choice(len(buildings), n_remove, replace=False)} if n_remove else set()
    post_objects = [o for o in scene.objects if o["id"] not in removed]
    ident = max((o["id"] for o in scene.objects), default=-1) + 1
    for _ in range(spec.n_added):
        post_objects.append(_random_building(rng, spec.size, ident))
        ident += 1
    for r, c, h, w in spec.add_rects:
        color = _BUILDING_COLORS[ident % len(_BUILDING_COLORS)] if spec.add_color is None else np.array(spec.add_color)
        post_objects.append({"id": ident, "kind": "rect", "geom": (r, c, h, w), "color": color})
        ident += 1
    post_img, post_labels = render(replace_objects(scene, post_objects))
    return RasterImage(post_img), pre_labels != post_labels


def plant_rects(spec: SceneSpec, n: int = 4, side: int = 96, margin: int = 24, gap: int = 16,
                color=(0.95, 0.95, 0.9)) -> SceneSpec:
    """Spec with up to ``n`` same-colour squares placed on bare ground.

    Squares keep ``margin`` pixels from the border and ``gap`` pixels from
    each other, which gives a clean, high-contrast change event.
    """
    _, labels = render(build_scene(spec))
    free = labels == -1
    taken = np.zeros_like(free)
    rng = np.random.default_rng([spec.seed, 3])
    rects = []
    hi = spec.size - side - margin
    if hi <= margin:
        raise ValueError(f"side {side} with margin {margin} does not fit in size {spec.size}")
    for _ in range(5000):
        if len(rects) == n:
            break
        r, c = (int(v) for v in rng.integers(margin, hi, 2))
        if free[r - 4 : r + side + 4, c - 4 : c + side + 4].all() and not taken[
            max(r - gap, 0) : r + side + gap, max(c - gap, 0) : c + side + gap
        ].any():
            rects.append((r, c, side, side))
            taken[r : r + side, c : c + side] = True
    return replace(spec, add_rects=spec.add_rects + tuple(rects), add_color=tuple(color))


def replace_objects(scene: Scene, objects: list[dict]) -> Scene:
    return Scene(scene.spec, objects, scene.background)


def scene_specs(seed: int, count: int, size: int = 96, **overrides) -> list[SceneSpec]:
    """Independent per-scene specs keyed from one seed."""
    seeds = np.random.default_rng(seed).integers(0, 2**31 - 1, count)
    return [replace(SceneSpec(seed=int(s), size=size), **overrides) for s in seeds]


def write_dataset(out_dir, seed: int, count: int, size: int = 96, n_changes: int = 0, val_frac=0.1, test_frac=0.1):
    """Write ``count`` scenes as ``.rsr`` files plus ``manifest.txt``.

    Manifest lines: ``role seed hr_path lr_path [post_path mask_path]``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    specs = scene_specs(seed, count, size, n_added=n_changes, n_removed=n_changes)
    n_test = int(round(count * test_frac))
    n_val = int(round(count * val_frac))
    lines = []
    for i, spec in enumerate(specs):
        role = "test" if i < n_test else "val" if i < n_test + n_val else "train"
        hr, lr = generate_pair(spec)
        stem = f"scene_{i:04d}"
        write_rsr(out / f"{stem}_hr.rsr", hr)
        write_rsr(out / f"{stem}_lr.rsr", lr)
        row = [role, str(spec.seed), f"{stem}_hr.rsr", f"{stem}_lr.rsr"]
        if n_changes:
            post, mask = apply_changes(hr, spec)
            write_rsr(out / f"{stem}_post.rsr", post)
            write_rsr(out / f"{stem}_mask.rsr", RasterImage(mask.astype(np.float32)))
            row += [f"{stem}_post.rsr", f"{stem}_mask.rsr"]
        lines.append(" ".join(row))
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    return out / "manifest.txt"


def read_manifest(path) -> list[dict]:
    path = Path(path)
    rows = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        row = {"role": parts[0], "seed": int(parts[1]), "hr": path.parent / parts[2], "lr": path.parent / parts[3]}
        if len(parts) >= 6:
            row["post"] = path.parent / parts[4]
            row["mask"] = path.parent / parts[5]
        rows.append(row)
    return rows
