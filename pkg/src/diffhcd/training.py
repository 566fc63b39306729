"""Conditional diffusion training: losses, the per-batch step and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .color import whiten
from .denoiser import SWA, ConvDenoiser, RAdam
from .diffusion import NoiseSchedule, cosine_schedule, forward_diffuse, null_condition
from .raster import PatchPair, RasterImage

log = logging.getLogger(__name__)

LOSS_CSV_HEADER = ("step", "epoch", "loss", "loss_ddpm", "loss_consist")


@dataclass
class TrainingConfig:
    p_uncond: float = 0.1
    huber_delta: float = 0.5
    lambda_consist: float = 0.1
    eps_consist: int = 10
    n_consist: int = 1
    gamma_snr: float = 5.0
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 31
    swa_start: int = 10
    seed: int = 0
    T: int = 1024
    widths: tuple[int, int] = (32, 64)
    null_value: float = -2.0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ValueError(f"p_uncond must be in [0, 1], got {self.p_uncond}")
        if self.gamma_snr <= 0:
            raise ValueError(f"gamma_snr must be > 0, got {self.gamma_snr}")
        if self.eps_consist < 0:
            raise ValueError(f"eps_consist must be >= 0, got {self.eps_consist}")
        if self.huber_delta <= 0:
            raise ValueError(f"huber_delta must be > 0, got {self.huber_delta}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1 or self.epochs < 1 or self.n_consist < 0 or self.swa_start < 0:
            raise ValueError("batch_size, epochs must be >= 1; n_consist, swa_start >= 0")
        if self.lambda_consist < 0:
            raise ValueError(f"lambda_consist must be >= 0, got {self.lambda_consist}")
        if -1.0 <= self.null_value <= 1.0:
            raise ValueError("null_value must lie outside [-1, 1]")


@dataclass(frozen=True)
class TrainingExample:
    """Whitened condition ``x`` (2 n_ch, h, w) and target ``y0`` (n_ch, h, w)."""

    x: np.ndarray
    y0: np.ndarray


def prepare_example(pair: PatchPair, hr_patch: RasterImage) -> TrainingExample:
    # local and global are whitened separately, as at inference time
    x_local, _ = whiten(pair.local)
    x_global, _ = whiten(pair.global_)
    y0, _ = whiten(hr_patch)
    return TrainingExample(np.concatenate([x_local, x_global]), y0)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _huber_terms(e, delta):
    a = np.abs(e)
    quad = a <= delta
    val = np.where(quad, 0.5 * e * e, delta * (a - 0.5 * delta))
    grad = np.where(quad, e, delta * np.sign(e))
    return val, grad


def huber_loss(pred, target, delta: float = 0.5) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    val, _ = _huber_terms(pred - target, delta)
    return float(val.mean())


def min_snr_weight(gamma_t, gamma_snr: float = 5.0):
    g = np.asarray(gamma_t, dtype=np.float64)
    if np.any(g <= 0) or np.any(g >= 1):
        raise ValueError("gamma_t must lie in (0, 1)")
    snr = g / (1.0 - g)
    w = np.minimum(snr, gamma_snr) / snr
    return float(w) if w.ndim == 0 else w


def x0_estimate(y_t, eps_hat, gamma):
    """Clean-image estimate implied by a noise prediction, clamped to [-1, 1]."""
    g = np.asarray(gamma, dtype=np.float64).reshape((-1,) + (1,) * (np.ndim(y_t) - 1))
    raw = (y_t - np.sqrt(1.0 - g) * eps_hat) / np.sqrt(g)
    return np.clip(raw, -1.0, 1.0), (raw >= -1.0) & (raw <= 1.0)


def sample_consistency_timestep(rng, t: int, eps_consist: int, T: int) -> int:
    lo = max(0, t - eps_consist)
    hi = min(T - 1, t + eps_consist)
    return int(rng.integers(lo, hi + 1))


def consistency_loss(
    denoiser,
    y0,
    eps,
    x,
    t: int,
    schedule: NoiseSchedule,
    cfg: TrainingConfig,
    rng: np.random.Generator | None = None,
    t_prime: int | None = None,
) -> float:
    """Mean squared gap between the clean estimates at ``t`` and a nearby
    ``t'`` built from the same ``(y0, eps)``, averaged over ``n_consist``
    draws of ``t'`` (or at the given ``t_prime``)."""
    rng = rng or np.random.default_rng(0)
    y0 = np.asarray(y0, dtype=np.float32)[None]
    eps = np.asarray(eps, dtype=np.float32)[None]
    x = np.asarray(x, dtype=np.float32)[None]
    g_t = schedule.gamma[t]
    y_t = forward_diffuse(y0, eps, g_t)
    x0_t, _ = x0_estimate(y_t, denoiser(y_t, x, np.array([g_t])), g_t)
    draws = [t_prime] if t_prime is not None else [
        sample_consistency_timestep(rng, t, cfg.eps_consist, schedule.T) for _ in range(max(cfg.n_consist, 1))
    ]
    total = 0.0
    for tp in draws:
        g_p = schedule.gamma[tp]
        y_p = forward_diffuse(y0, eps, g_p)
        x0_p, _ = x0_estimate(y_p, denoiser(y_p, x, np.array([g_p])), g_p)
        total += float(np.mean((x0_t.astype(np.float64) - x0_p) ** 2))
    return total / len(draws)


# ---------------------------------------------------------------------------
# training step
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    loss: float
    loss_ddpm: float
    loss_consist: float
    n_uncond: int = 0


def _draw(rng, ex: TrainingExample, cfg: TrainingConfig, T: int):
    uncond = bool(rng.random() < cfg.p_uncond)
    eps = rng.standard_normal(ex.y0.shape).astype(np.float32)
    t = int(rng.integers(0, T))
    t_primes = [sample_consistency_timestep(rng, t, cfg.eps_consist, T) for _ in range(cfg.n_consist)]
    return uncond, eps, t, t_primes


def batch_loss_and_grads(
    model: ConvDenoiser,
    batch: Sequence[TrainingExample],
    cfg: TrainingConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[StepResult, dict[str, np.ndarray], dict]:
    """Forward + backward for one batch; gradients of the batch-mean loss."""
    draws = [_draw(rng, ex, cfg, schedule.T) for ex in batch]
    b = len(batch)
    xs = np.stack([
        null_condition(ex.x.shape, cfg.null_value) if d[0] else ex.x for ex, d in zip(batch, draws)
    ])
    y0 = np.stack([ex.y0 for ex in batch])
    eps = np.stack([d[1] for d in draws])
    ts = np.array([d[2] for d in draws])
    gam = schedule.gamma[ts]
    y_t = forward_diffuse(y0, eps, gam)

    eps_hat, cache = model.forward(y_t, xs, gam, keep_cache=True)
    eps_hat64 = eps_hat.astype(np.float64)
    n_el = eps_hat[0].size

    weight = min_snr_weight(gam, cfg.gamma_snr).reshape(b, 1, 1, 1)
    hub, hub_grad = _huber_terms(eps_hat64 - eps, cfg.huber_delta)
    per_sample_ddpm = (weight * hub).reshape(b, -1).mean(axis=1)
    d_eps = weight * hub_grad / n_el

    per_sample_cons = np.zeros(b)
    if cfg.lambda_consist > 0 and cfg.n_consist > 0:
        x0_t, live = x0_estimate(y_t, eps_hat64, gam)
        coef = -np.sqrt(1.0 - gam) / np.sqrt(gam)
        for j in range(cfg.n_consist):
            tp = np.array([d[3][j] for d in draws])
            gp = schedule.gamma[tp]
            y_p = forward_diffuse(y0, eps, gp)
            # the t' branch is a fixed target: no gradient flows through it
            x0_p, _ = x0_estimate(y_p, model.forward(y_p, xs, gp).astype(np.float64), gp)
            diff = x0_t - x0_p
            per_sample_cons += (diff**2).reshape(b, -1).mean(axis=1) / cfg.n_consist
            d_eps += (
                cfg.lambda_consist * 2.0 * diff * live * coef.reshape(b, 1, 1, 1) / (n_el * cfg.n_consist)
            )

    per_sample = per_sample_ddpm + cfg.lambda_consist * per_sample_cons
    loss = float(per_sample.mean())
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss at timesteps {ts.tolist()}")
    grads = model.backward(cache, d_eps / b)
    result = StepResult(loss, float(per_sample_ddpm.mean()), float(per_sample_cons.mean()),
                        sum(d[0] for d in draws))
    return result, grads, {"timesteps": ts, "conditions": xs}


def training_step(
    model: ConvDenoiser,
    optimizer: RAdam,
    batch: Sequence[TrainingExample | tuple[PatchPair, RasterImage]],
    cfg: TrainingConfig,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> StepResult:
    """One optimizer step on a batch; updates ``model.params`` in place."""
    batch = [ex if isinstance(ex, TrainingExample) else prepare_example(*ex) for ex in batch]
    result, grads, _ = batch_loss_and_grads(model, batch, cfg, schedule, rng)
    optimizer.step(model.params, grads)
    return result


# ---------------------------------------------------------------------------
# epoch loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: ConvDenoiser  # SWA average when any snapshot was taken
    last: ConvDenoiser
    curve: list[tuple[int, int, float, float, float]] = field(default_factory=list)
    val_curve: list[tuple[int, float]] = field(default_factory=list)
    swa_count: int = 0


def validation_loss(
    model,
    examples: Sequence[TrainingExample],
    schedule: NoiseSchedule,
    cfg: TrainingConfig,
    draws: int = 4,
    seed: int = 12345,
) -> float:
    """Min-SNR weighted Huber loss on fixed (timestep, noise) draws."""
    rng = np.random.default_rng(seed)
    total, n = 0.0, 0
    for ex in examples:
        y0 = np.repeat(ex.y0[None], draws, axis=0)
        x = np.repeat(ex.x[None], draws, axis=0)
        eps = rng.standard_normal(y0.shape).astype(np.float32)
        gam = schedule.gamma[rng.integers(0, schedule.T, draws)]
        eps_hat = model.forward(forward_diffuse(y0, eps, gam), x, gam).astype(np.float64)
        hub, _ = _huber_terms(eps_hat - eps, cfg.huber_delta)
        w = min_snr_weight(gam, cfg.gamma_snr).reshape(-1, 1, 1, 1)
        total += float((w * hub).reshape(draws, -1).mean(axis=1).sum())
        n += draws
    return total / n


def train(
    examples: Sequence[TrainingExample],
    cfg: TrainingConfig,
    val_examples: Sequence[TrainingExample] | None = None,
    model: ConvDenoiser | None = None,
    max_steps: int | None = None,
    val_every: int | None = None,
    on_step: Callable[[int, StepResult], None] | None = None,
) -> TrainResult:
    if not examples:
        raise ValueError("training set is empty")
    examples = list(examples)
    schedule = cosine_schedule(cfg.T)
    n_ch = examples[0].y0.shape[0]
    model = model or ConvDenoiser(n_ch, cfg.widths, seed=cfg.seed)
    opt = RAdam(model.params, lr=cfg.lr)
    swa = SWA(cfg.swa_start)
    result = TrainResult(model, model)
    step = 0
    if val_examples:
        result.val_curve.append((0, validation_loss(model, val_examples, schedule, cfg)))
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(examples))
        for start in range(0, len(order), cfg.batch_size):
            if max_steps is not None and step >= max_steps:
                break
            batch = [examples[i] for i in order[start : start + cfg.batch_size]]
            rng = np.random.default_rng([cfg.seed, 1, step])
            res = training_step(model, opt, batch, cfg, schedule, rng)
            step += 1
            result.curve.append((step, epoch, res.loss, res.loss_ddpm, res.loss_consist))
            if on_step:
                on_step(step, res)
            if val_examples and val_every and step % val_every == 0:
                result.val_curve.append((step, validation_loss(model, val_examples, schedule, cfg)))
        swa.update(model.params, epoch)
        log.info("epoch %d: last loss %.4f", epoch, result.curve[-1][2] if result.curve else float("nan"))
        if max_steps is not None and step >= max_steps:
            break
    result.last = model
    result.swa_count = swa.count
    mean = swa.mean()
    result.model = ConvDenoiser(n_ch, model.widths, params=mean) if mean is not None else model
    if val_examples:
        result.val_curve.append((step, validation_loss(result.model, val_examples, schedule, cfg)))
    return result


def write_loss_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_CSV_HEADER)
        for step, epoch, loss, ddpm, cons in curve:
            w.writerow([step, epoch, f"{loss:.9g}", f"{ddpm:.9g}", f"{cons:.9g}"])


def config_fields() -> list[str]:
    return [f.name for f in fields(TrainingConfig)]
