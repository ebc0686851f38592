"""Seeded parametric image degradation.

A :class:`DegradationSpec` is an ordered list of stages plus a master seed.
Applying it to an image draws the per-sample stage parameters (blur width,
spot positions, field coefficients) from ``default_rng([spec.seed,
sample_seed])``, so (spec, sample seed, input) -> output is bitwise pure.

Stages with identity parameters (zero strength, zero blur, zero spots)
return their input unchanged. Intensity-space stages map the [-1, 1]
convention to [0, 1], operate there, and map back; every stage output is
clamped to [-1, 1].
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Protocol

import numpy as np
from scipy.ndimage import gaussian_filter, uniform_filter


class Stage(Protocol):
    def apply(self, img: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...


def _to01(img: np.ndarray) -> np.ndarray:
    return (img.astype(np.float64) + 1.0) / 2.0


def _from01(y: np.ndarray) -> np.ndarray:
    return (y * 2.0 - 1.0).astype(np.float32)


def _poly_field(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Random low-order polynomial surface, normalized to peak magnitude 1."""
    u = np.linspace(-1.0, 1.0, w)[None, :]
    v = np.linspace(-1.0, 1.0, h)[:, None]
    basis = (u + 0 * v, v + 0 * u, u * v, u * u + 0 * v, v * v + 0 * u)
    coeffs = rng.uniform(-1.0, 1.0, len(basis))
    field = sum(c * b for c, b in zip(coeffs, basis))
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


@dataclass(frozen=True)
class IlluminationField:
    """Smooth multiplicative gain and additive bias across the image."""

    gain: float = 0.35
    bias: float = 0.15

    def apply(self, img, rng):
        if self.gain == 0.0 and self.bias == 0.0:
            return img
        h, w = img.shape[1:]
        gain_field = 1.0 + self.gain * _poly_field(h, w, rng)
        bias_field = self.bias * _poly_field(h, w, rng)
        return _from01(_to01(img) * gain_field[None] + bias_field[None])


@dataclass(frozen=True)
class GaussianBlur:
    """Isotropic blur with the width drawn from [sigma_low, sigma_high]."""

    sigma_low: float = 0.5
    sigma_high: float = 1.5

    def __post_init__(self):
        if not 0.0 <= self.sigma_low <= self.sigma_high:
            raise ValueError(f"bad sigma range [{self.sigma_low}, "
                             f"{self.sigma_high}]")

    def apply(self, img, rng):
        sigma = rng.uniform(self.sigma_low, self.sigma_high)
        if sigma == 0.0:
            return img
        return gaussian_filter(img, (0.0, sigma, sigma),
                               mode="reflect").astype(np.float32)


@dataclass(frozen=True)
class HaloSpots:
    """Soft bright blobs, count drawn from [count_low, count_high].

    Radii are fractions of the smaller image extent.
    """

    count_low: int = 1
    count_high: int = 3
    radius_low: float = 0.06
    radius_high: float = 0.18
    intensity_low: float = 0.2
    intensity_high: float = 0.5

    def __post_init__(self):
        if not 0 <= self.count_low <= self.count_high:
            raise ValueError("bad spot count range")

    def apply(self, img, rng):
        count = int(rng.integers(self.count_low, self.count_high + 1))
        if count == 0:
            return img
        h, w = img.shape[1:]
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        field = np.zeros((h, w))
        for _ in range(count):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            radius = rng.uniform(self.radius_low, self.radius_high) * min(h, w)
            amp = rng.uniform(self.intensity_low, self.intensity_high)
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            field += amp * np.exp(-d2 / (2.0 * (radius / 2.0) ** 2))
        return _from01(_to01(img) + field[None])


@dataclass(frozen=True)
class QuantizeBlocks:
    """Blocky intensity quantization, a stand-in for compression loss."""

    block: int = 8
    levels: int = 8

    def __post_init__(self):
        if self.block < 1 or self.levels < 2:
            raise ValueError("block must be >= 1 and levels >= 2")

    def apply(self, img, rng):
        b = self.block
        c, h, w = img.shape
        hp, wp = -(-h // b) * b, -(-w // b) * b
        y = np.pad(_to01(img), ((0, 0), (0, hp - h), (0, wp - w)), mode="edge")
        means = y.reshape(c, hp // b, b, wp // b, b).mean(axis=(2, 4))
        q = np.round(np.clip(means, 0.0, 1.0) * (self.levels - 1))
        q = q / (self.levels - 1)
        full = np.repeat(np.repeat(q, b, axis=1), b, axis=2)
        return _from01(full[:, :h, :w])


@dataclass(frozen=True)
class MeanFilter:
    window: int = 3

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")

    def apply(self, img, rng):
        if self.window == 1:
            return img
        return uniform_filter(img, (1, self.window, self.window),
                              mode="reflect").astype(np.float32)


@dataclass(frozen=True)
class DegradationSpec:
    stages: tuple
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.seed < 0:
            raise ValueError("spec seed must be non-negative")


def degrade(spec: DegradationSpec, y: np.ndarray, sample_seed: int) -> np.ndarray:
    """Apply every stage in order; pure in (spec, sample_seed, y)."""
    if y.ndim != 3:
        raise ValueError(f"expected a [C,H,W] image, got shape {y.shape}")
    if y.min() < -1.0 or y.max() > 1.0:
        raise ValueError("input image outside [-1, 1]")
    if sample_seed < 0:
        raise ValueError("sample seed must be non-negative")
    rng = np.random.default_rng([spec.seed, sample_seed])
    x = y.astype(np.float32, copy=True)
    for stage in spec.stages:
        x = np.clip(stage.apply(x, rng), -1.0, 1.0).astype(np.float32)
    return x


STAGE_KINDS = {
    "illumination": IlluminationField,
    "gaussian_blur": GaussianBlur,
    "halo_spots": HaloSpots,
    "quantize_blocks": QuantizeBlocks,
    "mean_filter": MeanFilter,
}
_KIND_OF = {cls: kind for kind, cls in STAGE_KINDS.items()}


def spec_to_config(spec: DegradationSpec) -> dict:
    stages = []
    for stage in spec.stages:
        entry = {"kind": _KIND_OF[type(stage)]}
        entry.update({f.name: getattr(stage, f.name) for f in fields(stage)})
        stages.append(entry)
    return {"seed": spec.seed, "stages": stages}


def spec_from_config(cfg: dict) -> DegradationSpec:
    stages = []
    for entry in cfg.get("stages", []):
        entry = dict(entry)
        kind = entry.pop("kind", None)
        if kind not in STAGE_KINDS:
            raise ValueError(f"unknown degradation stage kind {kind!r}")
        try:
            stages.append(STAGE_KINDS[kind](**entry))
        except TypeError as exc:
            raise ValueError(f"bad fields for stage {kind!r}: {exc}") from None
    return DegradationSpec(stages=tuple(stages), seed=int(cfg.get("seed", 0)))


PRESETS = {
    "mild": (IlluminationField(gain=0.15, bias=0.05),
             GaussianBlur(sigma_low=0.3, sigma_high=0.8)),
    "default": (IlluminationField(gain=0.35, bias=0.15),
                GaussianBlur(sigma_low=0.5, sigma_high=1.5),
                HaloSpots(count_low=1, count_high=3)),
    "harsh": (IlluminationField(gain=0.5, bias=0.25),
              GaussianBlur(sigma_low=1.0, sigma_high=2.2),
              HaloSpots(count_low=2, count_high=4, radius_high=0.25,
                        intensity_low=0.35, intensity_high=0.7),
              QuantizeBlocks(block=8, levels=6)),
}


def make_training_spec(preset: str = "default", seed: int = 0) -> DegradationSpec:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; "
                         f"choose from {sorted(PRESETS)}")
    return DegradationSpec(stages=PRESETS[preset], seed=seed)
