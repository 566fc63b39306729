"""Command-line entry point: synth-gen, train, translate, change-detect, roc, metrics.

Every option can also come from a ``key = value`` config file passed with
``--config``. Flags beat file values, which beat the defaults. The effective
configuration is written next to the primary output as ``<output>.cfg`` and
can be fed back through ``--config`` to reproduce the run.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .changedet import ChangeDetConfig, detect_changes, evaluate_dr_far, overlay, roc_sweep, write_roc_csv
from .denoiser import load_checkpoint, save_checkpoint
from .inference import InferenceConfig, mean_psnr, psnr, translate_raster
from .raster import RasterImage, extract_patch_pairs, pad_to_multiple, read_raster, write_raster
from .synthetic import SceneSpec, read_manifest, write_dataset
from .training import TrainingConfig, prepare_example, train, write_loss_csv

log = logging.getLogger("diffhcd")

COMMANDS = ("synth-gen", "train", "translate", "change-detect", "roc", "metrics")


class ConfigError(ValueError):
    """Bad or conflicting configuration; reported as a usage error."""


@dataclass(frozen=True)
class RunConfig:
    """Flat merged view of every tunable; each command reads what it needs."""

    command: str
    seed: int = 0
    # synth-gen
    count: int = 20
    size: int = 96
    changes: int = 0
    out_dir: str = ""
    # train
    data: str = ""
    epochs: int = 31
    batch: int = 4
    lr: float = 1e-4
    lambda_consist: float = 0.1
    swa_start: int = 10
    p_uncond: float = 0.1
    T: int = 1024
    patch: int = 128
    max_steps: int = 0  # 0 = no limit
    out_checkpoint: str = ""
    # translate
    checkpoint: str = ""
    input: str = ""
    out: str = ""
    n_noisy: int = 8
    n_ddim: int = 64
    d: int = 8
    omega_uncond: float = 1.0
    color_source: str = "input"
    external: str = ""
    # change-detect / roc
    pre: str = ""
    post: str = ""
    truth: str = ""
    omega: float = 0.1
    w_gauss: int = 11
    w_otsu: int = 1023
    e_max: float = 5.0
    n_min: int = 48
    out_map: str = ""
    out_overlay: str = ""
    out_csv: str = ""
    overlay_dir: str = ""
    # metrics
    a: str = ""
    b: str = ""

    def training(self) -> TrainingConfig:
        return TrainingConfig(
            p_uncond=self.p_uncond,
            lambda_consist=self.lambda_consist,
            lr=self.lr,
            batch_size=self.batch,
            epochs=self.epochs,
            swa_start=self.swa_start,
            seed=self.seed,
            T=self.T,
        )

    def inference(self) -> InferenceConfig:
        return InferenceConfig(
            n_ddim=self.n_ddim,
            d=self.d,
            n_noisy=self.n_noisy,
            omega_uncond=self.omega_uncond,
            color_source=self.color_source,
            seed=self.seed,
            T=self.T,
        )

    def changedet(self) -> ChangeDetConfig:
        return ChangeDetConfig(self.omega, self.w_gauss, self.w_otsu, self.e_max, self.n_min)

    def scene(self) -> SceneSpec:
        return SceneSpec(seed=self.seed, size=self.size)


_FIELDS = {f.name: f for f in fields(RunConfig) if f.name != "command"}

# options each subcommand exposes as flags (all keys are accepted from a file)
_FLAGS = {
    "synth-gen": ("seed", "count", "size", "changes", "out_dir"),
    "train": ("seed", "data", "epochs", "batch", "lr", "lambda_consist", "swa_start", "p_uncond", "T", "patch",
              "max_steps", "out_checkpoint"),
    "translate": ("seed", "checkpoint", "input", "out", "n_noisy", "n_ddim", "d", "omega_uncond", "color_source",
                  "external", "patch", "T"),
    "change-detect": ("pre", "post", "omega", "truth", "out_map", "out_overlay", "w_gauss", "w_otsu", "e_max",
                      "n_min"),
    "roc": ("pre", "post", "truth", "out_csv", "overlay_dir", "w_gauss", "w_otsu", "e_max", "n_min"),
    "metrics": ("a", "b", "patch"),
}

_REQUIRED = {
    "synth-gen": ("out_dir",),
    "train": ("data", "out_checkpoint"),
    "translate": ("checkpoint", "input", "out"),
    "change-detect": ("pre", "post", "out_map"),
    "roc": ("pre", "post", "truth", "out_csv"),
    "metrics": ("a", "b"),
}


def _convert(key: str, raw: str):
    kind = _FIELDS[key].type
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def read_config_file(path) -> dict:
    values = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"{path}:{n}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return values


def format_config(cfg: RunConfig) -> str:
    lines = [f"# diffhcd {cfg.command}"]
    for key in _FIELDS:
        v = getattr(cfg, key)
        lines.append(f"{key} = {v!r}" if isinstance(v, float) else f"{key} = {v}")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffhcd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="key = value file; flags override it")
        for key in _FLAGS[cmd]:
            flag = "--" + key.replace("_", "-")
            extra = {"choices": ("input", "external")} if key == "color_source" else {}
            p.add_argument(flag, dest=key, default=None, type=str, **extra)
    return parser


def validate(cfg: RunConfig) -> None:
    """Check every module invariant before any work starts."""
    checks = (
        ("training", cfg.training),
        ("inference", cfg.inference),
        ("change detection", cfg.changedet),
        ("scene", cfg.scene),
    )
    for name, make in checks:
        try:
            make()
        except ValueError as exc:
            raise ConfigError(f"{name} config: {exc}") from None
    for key in ("count", "size", "patch"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key}: must be >= 1")
    if cfg.changes < 0 or cfg.max_steps < 0:
        raise ConfigError("changes and max_steps must be >= 0")
    if cfg.command == "translate" and cfg.color_source == "external" and not cfg.external:
        raise ConfigError("external: required when color_source = external")


def parse_config(argv, config_file=None) -> RunConfig:
    """argv (without program name) -> validated RunConfig."""
    args = build_parser().parse_args(argv)
    values = {}
    path = config_file or args.config
    if path:
        values.update(read_config_file(path))
    for key in _FIELDS:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            values[key] = _convert(key, flag_value)
    cfg = RunConfig(command=args.command, **values)
    validate(cfg)
    return cfg


def write_sidecar(cfg: RunConfig, primary) -> Path:
    path = Path(str(primary) + ".cfg")
    path.write_text(format_config(cfg))
    return path


# -- commands ----------------------------------------------------------------


def _synth_gen(cfg: RunConfig) -> None:
    manifest = write_dataset(cfg.out_dir, cfg.seed, cfg.count, cfg.size, cfg.changes)
    write_sidecar(cfg, manifest)
    print(f"wrote {cfg.count} scenes, manifest {manifest}")


def _examples(rows, patch):
    out = []
    for row in rows:
        hr, lr = read_raster(row["hr"]), read_raster(row["lr"])
        hr, lr = pad_to_multiple(hr, patch), pad_to_multiple(lr, patch)
        out += [prepare_example(pair, hp) for pair, hp in extract_patch_pairs(lr, hr, patch)]
    return out


def _train(cfg: RunConfig) -> None:
    rows = read_manifest(cfg.data)
    train_rows = [r for r in rows if r["role"] == "train"]
    val_rows = [r for r in rows if r["role"] == "val"]
    examples = _examples(train_rows, cfg.patch)
    val = _examples(val_rows, cfg.patch)
    log.info("%d training and %d validation patches", len(examples), len(val))
    res = train(examples, cfg.training(), val or None, max_steps=cfg.max_steps or None)
    out = Path(cfg.out_checkpoint)
    save_checkpoint(out, res.model)
    write_loss_csv(str(out) + ".loss.csv", res.curve)
    write_sidecar(cfg, out)
    if res.val_curve:
        print(f"validation loss {res.val_curve[0][1]:.6g} -> {res.val_curve[-1][1]:.6g}")
    print(f"wrote {out} after {len(res.curve)} steps ({res.swa_count} SWA snapshots)")


def _translate(cfg: RunConfig) -> None:
    model = load_checkpoint(cfg.checkpoint)
    lr = read_raster(cfg.input)
    ext = read_raster(cfg.external) if cfg.color_source == "external" else None
    out = translate_raster(model, lr, cfg.inference(), ext, patch=cfg.patch)
    write_raster(cfg.out, out)
    write_sidecar(cfg, cfg.out)
    print(f"wrote {cfg.out}")


def _mask_raster(mask) -> RasterImage:
    return RasterImage(np.asarray(mask, dtype=np.float32)[None])


def _truth(path) -> np.ndarray:
    return read_raster(path).data[0] > 0


def _change_detect(cfg: RunConfig) -> None:
    cm = detect_changes(read_raster(cfg.pre), read_raster(cfg.post), cfg.changedet())
    write_raster(cfg.out_map, _mask_raster(cm.mask))
    write_sidecar(cfg, cfg.out_map)
    msg = f"{int(cm.mask.sum())} changed pixels in {cm.n_clusters} clusters"
    if cfg.truth:
        truth = _truth(cfg.truth)
        s = evaluate_dr_far(cm.mask, truth)
        msg += f", DR {s.dr:.4f} FAR {s.far:.6f}"
        if cfg.out_overlay:
            Image.fromarray(overlay(cm.mask, truth)).save(cfg.out_overlay, format="PNG")
    elif cfg.out_overlay:
        Image.fromarray(cm.mask.astype(np.uint8) * 255).save(cfg.out_overlay, format="PNG")
    print(msg)


def _roc(cfg: RunConfig) -> None:
    truth = _truth(cfg.truth)
    on_map = None
    if cfg.overlay_dir:
        out_dir = Path(cfg.overlay_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

        def on_map(omega, cm):
            Image.fromarray(overlay(cm.mask, truth)).save(out_dir / f"overlay_{omega:.2f}.png", format="PNG")

    rows = roc_sweep(read_raster(cfg.pre), read_raster(cfg.post), truth, cfg.changedet(), on_map=on_map)
    write_roc_csv(cfg.out_csv, rows)
    write_sidecar(cfg, cfg.out_csv)
    best = max(rows, key=lambda r: (np.nan_to_num(r[1]) - r[2], -r[0]))
    print(f"wrote {len(rows)} rows to {cfg.out_csv}; best omega {best[0]:.2f}: DR {best[1]:.4f} FAR {best[2]:.6f}")


def _metrics(cfg: RunConfig) -> None:
    a, b = read_raster(cfg.a), read_raster(cfg.b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    print(f"psnr {psnr(a.data, b.data):.4f} dB")
    if a.h >= cfg.patch and a.w >= cfg.patch:
        p = cfg.patch
        tiles = [
            (a.data[:, r : r + p, c : c + p], b.data[:, r : r + p, c : c + p])
            for r in range(0, a.h - p + 1, p)
            for c in range(0, a.w - p + 1, p)
        ]
        print(f"mpsnr {mean_psnr(tiles):.4f} dB over {len(tiles)} patches of {p}x{p}")


_DISPATCH = {
    "synth-gen": _synth_gen,
    "train": _train,
    "translate": _translate,
    "change-detect": _change_detect,
    "roc": _roc,
    "metrics": _metrics,
}


def check_required(cfg: RunConfig) -> None:
    for key in _REQUIRED[cfg.command]:
        if not getattr(cfg, key):
            raise ConfigError(f"{key}: required for {cfg.command}")


def dispatch(cfg: RunConfig) -> int:
    if cfg.command not in _DISPATCH:
        raise ConfigError(f"unknown command {cfg.command!r}")
    _DISPATCH[cfg.command](cfg)
    return 0


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    logging.basicConfig(level=logging.INFO if "-v" in argv or "--verbose" in argv else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(argv)
        check_required(cfg)
    except (ConfigError, OSError) as exc:
        print(f"diffhcd: usage error: {exc}", file=sys.stderr)
        return 2
    try:
        return dispatch(cfg)
    except (ValueError, OSError, FloatingPointError) as exc:
        print(f"diffhcd: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
