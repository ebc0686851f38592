"""Diffusion noise schedules and the forward (noising) process.

All schedule arrays are float64 and 0-indexed: entry ``i`` belongs to step
``t = i + 1``. ``alpha`` holds the cumulative product of ``1 - beta`` up to
each step; the convention ``alpha_0 = 1`` is supplied by :meth:`alpha_at`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

COSINE_OFFSET = 0.008
COSINE_BETA_MAX = 0.999

# reference rates are calibrated for 1000 steps and rescale with 1/T
REF_STEPS = 1000
REF_BETA_START = 1e-4
REF_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step rates of one fixed-length diffusion.

    beta[i]     step-(i+1) noise variance
    alpha[i]    prod_{s<=i} (1 - beta[s])
    posterior[i]  variance of the reverse-process posterior at step i+1
    sigma[i]    reverse sampling noise scale, sqrt(posterior)
    """

    kind: str
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    posterior: np.ndarray
    sigma: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)

    def alpha_at(self, t: int) -> float:
        """Cumulative alpha at 1-based step ``t``; ``alpha_at(0) == 1``."""
        if not 0 <= t <= self.steps:
            raise ValueError(f"step {t} outside [0, {self.steps}]")
        return 1.0 if t == 0 else float(self.alpha[t - 1])

    def _gather(self, values: np.ndarray, t, ndim: int) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.steps):
            raise ValueError(f"step {t} outside [1, {self.steps}]")
        picked = values[t - 1]
        if t.ndim == 0:
            return picked
        if t.ndim != 1:
            raise ValueError("t must be a scalar or a 1-D batch of steps")
        return picked.reshape(t.shape + (1,) * (ndim - 1))

    def q_sample(self, x0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
        """Jump straight to step ``t``: sqrt(a_t) x0 + sqrt(1 - a_t) eps.

        ``t`` is a 1-based scalar or a length-N vector for batched ``x0``.
        """
        if eps.shape != x0.shape:
            raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
        ab = self._gather(self.alpha, t, x0.ndim)
        out = np.sqrt(ab) * x0.astype(np.float64) + np.sqrt(1.0 - ab) * eps
        return out.astype(np.float32)

    def iterate_forward(self, x0: np.ndarray, t: int,
                        rng: np.random.Generator) -> np.ndarray:
        """Reach step ``t`` by applying the single-step transition t times.

        Same marginal distribution as :meth:`q_sample`; kept as the slow
        reference route for cross-checking.
        """
        if not 1 <= t <= self.steps:
            raise ValueError(f"step {t} outside [1, {self.steps}]")
        x = x0.astype(np.float64)
        for i in range(t):
            eps = rng.standard_normal(x.shape)
            x = np.sqrt(1.0 - self.beta[i]) * x + np.sqrt(self.beta[i]) * eps
        return x.astype(np.float32)


def _linear_betas(steps: int, beta_start: float | None,
                  beta_end: float | None) -> tuple[np.ndarray, float, float]:
    if beta_start is None:
        beta_start = REF_BETA_START * REF_STEPS / steps
    if beta_end is None:
        beta_end = REF_BETA_END * REF_STEPS / steps
    return np.linspace(beta_start, beta_end, steps), beta_start, beta_end


def _cosine_betas(steps: int) -> np.ndarray:
    # squared-cosine cumulative alpha; betas derived from its ratios
    t = np.arange(steps + 1, dtype=np.float64) / steps
    f = np.cos((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * np.pi / 2.0) ** 2
    alpha = f / f[0]
    return np.minimum(1.0 - alpha[1:] / alpha[:-1], COSINE_BETA_MAX)


def make_schedule(steps: int, kind: str = "linear",
                  beta_start: float | None = None,
                  beta_end: float | None = None) -> NoiseSchedule:
    """Build a schedule of ``steps`` diffusion steps.

    ``linear`` interpolates beta from ``beta_start`` to ``beta_end``;
    omitted endpoints default to the 1000-step reference rates scaled by
    1000/steps, which keeps the total noise injected roughly constant.
    ``cosine`` ignores the endpoints and uses the squared-cosine profile.
    """
    if steps < 1:
        raise ValueError(f"need at least one step, got {steps}")
    if kind == "linear":
        beta, beta_start, beta_end = _linear_betas(steps, beta_start, beta_end)
    elif kind == "cosine":
        if beta_start is not None or beta_end is not None:
            raise ValueError("cosine schedule does not take beta endpoints")
        beta, beta_start, beta_end = _cosine_betas(steps), 0.0, 0.0
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    if np.any(beta <= 0.0) or np.any(beta >= 1.0):
        raise ValueError(
            f"betas must lie in (0, 1); got [{beta.min():g}, {beta.max():g}] "
            f"for {steps} steps (pass explicit endpoints for very short runs)")
    alpha = np.cumprod(1.0 - beta)
    alpha_prev = np.concatenate(([1.0], alpha[:-1]))
    posterior = (1.0 - alpha_prev) / (1.0 - alpha) * beta
    return NoiseSchedule(kind=kind, beta_start=float(beta_start),
                         beta_end=float(beta_end), beta=beta, alpha=alpha,
                         posterior=posterior, sigma=np.sqrt(posterior))
