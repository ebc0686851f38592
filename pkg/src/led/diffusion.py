"""Training and inference for conditional denoising enhancement.

Training teaches the network to predict the noise inside a noised clean
image while it sees the degraded counterpart as the condition. Inference
then noises a degraded (or coarsely enhanced) input partway to depth
``t_m`` and runs the reverse chain conditioned on that same input, which
pulls the result toward the clean manifold the model was trained on.
The refinement pass is the identical mechanism applied to the output of
any other enhancer, at a shallower noise depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .degrade import DegradationSpec, degrade
from .nn import Adam, Denoiser, cosine_lr
from .schedule import NoiseSchedule

ENHANCE_DEPTH_FRACTION = 0.8
REFINE_DEPTH_FRACTION = 0.2
SAMPLE_SEED_BOUND = 2 ** 31


@dataclass(frozen=True)
class SamplerConfig:
    """How to run the reverse chain: depth, sampler family, stride, clamp."""

    t_m: int
    kind: str = "ddim"
    stride: int = 1
    clip: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        if self.kind not in ("ddpm", "ddim"):
            raise ValueError(f"sampler kind must be ddpm or ddim, "
                             f"got {self.kind!r}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.clip[0] >= self.clip[1]:
            raise ValueError(f"bad clip range {self.clip}")

    def validate(self, steps: int) -> None:
        if not 0 <= self.t_m <= steps:
            raise ValueError(f"t_m {self.t_m} outside [0, {steps}]")
        if self.kind == "ddim" and self.t_m % self.stride:
            raise ValueError(f"stride {self.stride} must divide "
                             f"t_m {self.t_m}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    schedule_kind: str = "linear"
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("epochs, batch_size, and lr must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


def default_tm(steps: int, refine: bool = False) -> int:
    """Default noise depth: 0.8 T for enhancement, 0.2 T for refinement."""
    fraction = REFINE_DEPTH_FRACTION if refine else ENHANCE_DEPTH_FRACTION
    return max(1, round(fraction * steps))


def noise_prediction_loss(model: Denoiser, schedule: NoiseSchedule,
                          target: np.ndarray, cond: np.ndarray,
                          t: np.ndarray, eps: np.ndarray) -> T.Tensor:
    """Mean squared error between eps and the model's prediction of it.

    The model sees q_sample(target, t, eps) with ``cond`` as the
    conditioning image; the mean runs over every element, so a model that
    always answers zero scores E||eps||^2 = 1 per element.
    """
    x_t = schedule.q_sample(target, t, eps)
    pred = model.forward(T.Tensor(x_t), t, T.Tensor(cond))
    diff = pred - T.Tensor(eps)
    return T.reduce_mean(diff * diff)


def train_step(model: Denoiser, optimizer: Adam, schedule: NoiseSchedule,
               y: np.ndarray, spec: DegradationSpec | None,
               rng: np.random.Generator,
               noise_target: str = "clean",
               degraded: np.ndarray | None = None) -> float:
    """One optimizer step on a clean batch ``y`` [N,C,H,W]; returns the loss.

    Draws the degraded twin x = d(y), a uniform step t per sample, and unit
    Gaussian noise. A pre-degraded batch bypasses the synthesis (``spec``
    is then unused). By default the clean image is noised and the degraded
    one conditions the prediction; ``noise_target="degraded"`` swaps the
    two roles (kept for comparison, not used by the defaults).
    """
    if y.ndim != 4:
        raise ValueError(f"expected a [N,C,H,W] batch, got shape {y.shape}")
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    if noise_target not in ("clean", "degraded"):
        raise ValueError(f"noise_target must be clean or degraded, "
                         f"got {noise_target!r}")
    n = y.shape[0]
    if degraded is None:
        if spec is None:
            raise ValueError("need a degradation spec or a degraded batch")
        degraded = np.stack([
            degrade(spec, y[i], int(rng.integers(SAMPLE_SEED_BOUND)))
            for i in range(n)])
    elif degraded.shape != y.shape:
        raise ValueError(f"degraded batch shape {degraded.shape} does not "
                         f"match clean batch shape {y.shape}")
    t = rng.integers(1, schedule.steps + 1, size=n)
    eps = rng.standard_normal(y.shape).astype(np.float32)
    target, cond = (y, degraded) if noise_target == "clean" else (degraded, y)
    with T.Tape():
        loss = noise_prediction_loss(model, schedule, target, cond, t, eps)
        T.backward(loss)
    optimizer.step()
    return loss.item()


def train(model: Denoiser, optimizer: Adam, schedule: NoiseSchedule,
          images: np.ndarray, spec: DegradationSpec | None, cfg: TrainConfig,
          on_step=None, on_epoch_end=None, start_epoch: int = 0,
          end_epoch: int | None = None,
          degraded: np.ndarray | None = None) -> list[float]:
    """Epoch loop over ``images`` [M,C,H,W]; returns per-epoch mean losses.

    Pairs are synthesized from ``spec`` unless a fixed ``degraded`` array
    accompanies ``images``. Epoch ``e`` draws everything from
    ``default_rng([seed, 2, e])``, so a resumed run (``start_epoch > 0``)
    replays the exact stream an uninterrupted run would have used. The
    learning rate follows a half-cosine over the full ``cfg.epochs``
    horizon regardless of the window actually executed.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("need a non-empty [M,C,H,W] training array")
    if degraded is not None and degraded.shape != images.shape:
        raise ValueError(f"degraded array shape {degraded.shape} does not "
                         f"match clean array shape {images.shape}")
    if end_epoch is None:
        end_epoch = cfg.epochs
    if not 0 <= start_epoch <= end_epoch <= cfg.epochs:
        raise ValueError(f"bad epoch window [{start_epoch}, {end_epoch}] "
                         f"for a {cfg.epochs}-epoch run")
    epoch_means = []
    step = start_epoch * _steps_per_epoch(images.shape[0], cfg.batch_size)
    for epoch in range(start_epoch, end_epoch):
        optimizer.lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        rng = np.random.default_rng([cfg.seed, 2, epoch])
        perm = rng.permutation(images.shape[0])
        losses = []
        for lo in range(0, images.shape[0], cfg.batch_size):
            pick = perm[lo:lo + cfg.batch_size]
            loss = train_step(model, optimizer, schedule, images[pick], spec,
                              rng, degraded=None if degraded is None
                              else degraded[pick])
            losses.append(loss)
            step += 1
            if on_step is not None:
                on_step(epoch, step, loss, optimizer.lr)
        epoch_means.append(float(np.mean(losses)))
        if on_epoch_end is not None:
            on_epoch_end(epoch, epoch_means[-1])
    return epoch_means


def _steps_per_epoch(count: int, batch_size: int) -> int:
    return -(-count // batch_size)


def _predict(model, x_t: np.ndarray, t: int, cond: np.ndarray) -> np.ndarray:
    steps = np.full(x_t.shape[0], t, dtype=np.int64)
    return model.forward(T.Tensor(x_t), steps, T.Tensor(cond)).data


def reverse_step_ddpm(model: Denoiser, schedule: NoiseSchedule,
                      x_t: np.ndarray, t: int, cond: np.ndarray,
                      rng: np.random.Generator | None,
                      clip: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """One ancestral step t -> t-1; adds sigma_t z above t=1, none at t=1.

    Passing ``rng=None`` forces z = 0 at every step (a deterministic
    mean-only trajectory).
    """
    if not 1 <= t <= schedule.steps:
        raise ValueError(f"step {t} outside [1, {schedule.steps}]")
    eps_hat = _predict(model, x_t, t, cond)
    beta = schedule.beta[t - 1]
    alpha = schedule.alpha[t - 1]
    mean = (x_t - beta / np.sqrt(1.0 - alpha) * eps_hat) / np.sqrt(1.0 - beta)
    if t > 1 and rng is not None:
        mean = mean + schedule.sigma[t - 1] * rng.standard_normal(x_t.shape)
    return np.clip(mean, *clip).astype(np.float32)


def reverse_step_ddim(model: Denoiser, schedule: NoiseSchedule,
                      x_t: np.ndarray, t: int, t_prev: int, cond: np.ndarray,
                      clip: tuple[float, float] = (-1.0, 1.0)) -> np.ndarray:
    """Deterministic step t -> t_prev via the clean-image estimate.

    The intermediate estimate x0 = (x_t - sqrt(1-a_t) eps) / sqrt(a_t) is
    clamped before recombination; t_prev = 0 returns it directly.
    """
    if t_prev >= t:
        raise ValueError(f"t_prev {t_prev} must be below t {t}")
    if not 1 <= t <= schedule.steps or t_prev < 0:
        raise ValueError(f"bad step pair ({t}, {t_prev})")
    eps_hat = _predict(model, x_t, t, cond)
    a_t = schedule.alpha_at(t)
    a_p = schedule.alpha_at(t_prev)
    x0 = (x_t - np.sqrt(1.0 - a_t) * eps_hat) / np.sqrt(a_t)
    x0 = np.clip(x0, *clip)
    return (np.sqrt(a_p) * x0
            + np.sqrt(1.0 - a_p) * eps_hat).astype(np.float32)


def enhance(model: Denoiser, schedule: NoiseSchedule, x: np.ndarray,
            cfg: SamplerConfig, rng: np.random.Generator) -> np.ndarray:
    """Partially noise ``x`` [N,C,H,W] to depth t_m, then denoise it back
    conditioned on ``x`` itself; returns the clamped reconstruction."""
    if x.ndim != 4:
        raise ValueError(f"expected [N,C,H,W] input, got shape {x.shape}")
    cfg.validate(schedule.steps)
    if cfg.t_m == 0:
        return x.copy()
    eps = rng.standard_normal(x.shape).astype(np.float32)
    x_t = schedule.q_sample(x, cfg.t_m, eps)
    if cfg.kind == "ddpm":
        for t in range(cfg.t_m, 0, -1):
            x_t = reverse_step_ddpm(model, schedule, x_t, t, x, rng, cfg.clip)
    else:
        for t in range(cfg.t_m, 0, -cfg.stride):
            x_t = reverse_step_ddim(model, schedule, x_t, t, t - cfg.stride,
                                    x, cfg.clip)
    return np.clip(x_t, *cfg.clip).astype(np.float32)


def refine(model: Denoiser, schedule: NoiseSchedule, coarse: np.ndarray,
           cfg: SamplerConfig | None = None,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Polish an externally enhanced image with a shallow reverse chain.

    Identical mechanics to :func:`enhance`, conditioned on the coarse
    input; with no explicit config it runs the default shallow depth.
    """
    if cfg is None:
        cfg = SamplerConfig(t_m=default_tm(schedule.steps, refine=True))
    if rng is None:
        rng = np.random.default_rng(0)
    return enhance(model, schedule, coarse, cfg, rng)
