"""Synthetic fundus-like phantoms with ground-truth masks.

Each phantom is a circular field of view on a dark surround, holding a
smooth background gradient, one bright disc, and a dark vessel tree grown
by branching random walks out of the disc. All structure masks are exact
by construction, which is what makes the contrast metrics testable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

FOV_RADIUS = 0.47      # of image size
DISC_RADIUS = 0.12
BACKGROUND = 0.45      # [0,1] intensity units
DISC_LIFT = 0.35
VESSEL_DROP = 0.5
VESSEL_FRACTION_STOP = 0.13   # stop growing here; invariant ceiling is 0.15
VESSEL_FRACTION_FLOOR = 0.02  # grow extra branches below this
CHANNEL_TINTS = (1.0, 0.82, 0.62)


@dataclass(frozen=True)
class Phantom:
    image: np.ndarray        # [C,H,W] float32 in [-1,1]
    vessel_mask: np.ndarray  # [H,W] bool
    disc_mask: np.ndarray    # [H,W] bool
    fov_mask: np.ndarray     # [H,W] bool
    seed: tuple


class _VesselGrower:
    """Branching random walks; stamps width-1 or width-2 vessel pixels."""

    def __init__(self, fov: np.ndarray, rng: np.random.Generator):
        self.fov = fov
        self.rng = rng
        self.mask = np.zeros_like(fov)
        self.count = 0
        self.fov_area = int(fov.sum())

    @property
    def fraction(self) -> float:
        return self.count / self.fov_area

    def _stamp(self, y: float, x: float, width: int) -> None:
        iy, ix = int(round(y)), int(round(x))
        span = range(width)
        for dy in span:
            for dx in span:
                py, px = iy + dy, ix + dx
                if (0 <= py < self.fov.shape[0] and 0 <= px < self.fov.shape[1]
                        and self.fov[py, px] and not self.mask[py, px]):
                    self.mask[py, px] = True
                    self.count += 1

    def walk(self, start, angle: float, width: int, center, r_fov: float,
             max_steps: int, branch_prob: float) -> None:
        pending = [(start[0], start[1], angle, width)]
        while pending:
            y, x, ang, w = pending.pop(0)
            for _ in range(max_steps):
                if self.fraction >= VESSEL_FRACTION_STOP:
                    return
                ang += self.rng.normal(0.0, 0.3)
                y += np.sin(ang)
                x += np.cos(ang)
                if np.hypot(y - center[0], x - center[1]) > r_fov - 1.0:
                    break
                self._stamp(y, x, w)
                if self.rng.uniform() < branch_prob and len(pending) < 8:
                    side = 1.0 if self.rng.uniform() < 0.5 else -1.0
                    pending.append((y, x, ang + side * self.rng.uniform(0.5, 1.0), 1))


def generate(size: int, seed, channels: int = 1) -> Phantom:
    """Deterministically draw one phantom of extent ``size`` x ``size``.

    ``seed`` is anything ``np.random.default_rng`` accepts; the phantom
    records it. ``size`` must be at least 16 and divisible by 4 so the
    default-depth model can consume the image directly.
    """
    if size < 16:
        raise ValueError(f"size {size} too small to host disc and vessels")
    if size % 4:
        raise ValueError(f"size {size} must be divisible by 4")
    if channels not in (1, 3):
        raise ValueError(f"channels must be 1 or 3, got {channels}")
    rng = np.random.default_rng(seed)
    center = ((size - 1) / 2.0, (size - 1) / 2.0)
    r_fov = FOV_RADIUS * size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dist = np.hypot(yy - center[0], xx - center[1])
    fov = dist <= r_fov

    u = (xx - center[1]) / center[1]
    v = (yy - center[0]) / center[0]
    slope = rng.uniform(-1.0, 1.0, 2)
    img01 = BACKGROUND + 0.10 * (slope[0] * u + slope[1] * v)

    r_disc = DISC_RADIUS * size
    ang = rng.uniform(0.0, 2.0 * np.pi)
    rad = rng.uniform(0.25, 0.55) * r_fov
    dc = (center[0] + rad * np.sin(ang), center[1] + rad * np.cos(ang))
    disc_dist = np.hypot(yy - dc[0], xx - dc[1])
    disc = (disc_dist <= r_disc) & fov
    img01 = img01 + DISC_LIFT / (1.0 + np.exp((disc_dist - r_disc) / 0.8))

    grower = _VesselGrower(fov, rng)
    n_branches = int(rng.integers(2, 5))
    base = rng.uniform(0.0, 2.0 * np.pi)
    for k in range(n_branches):
        angle = base + 2.0 * np.pi * k / n_branches + rng.normal(0.0, 0.2)
        width = int(rng.integers(1, 3))
        grower.walk(dc, angle, width, center, r_fov,
                    max_steps=6 * size, branch_prob=0.02)
    tries = 0
    while grower.fraction < VESSEL_FRACTION_FLOOR and tries < 32:
        grower.walk(dc, rng.uniform(0.0, 2.0 * np.pi), 1, center, r_fov,
                    max_steps=6 * size, branch_prob=0.0)
        tries += 1
    vessel = grower.mask
    if not 0.01 <= grower.fraction <= 0.15:
        raise RuntimeError(f"vessel fraction {grower.fraction:.3f} "
                           "escaped its invariant range")

    img01 = np.where(vessel, img01 - VESSEL_DROP, img01)
    img01 = gaussian_filter(img01, 0.5)

    planes = []
    for tint in CHANNEL_TINTS[:channels]:
        plane = np.clip(img01 * tint, 0.0, 1.0) * 2.0 - 1.0
        plane[~fov] = -1.0
        planes.append(plane.astype(np.float32))
    image = np.stack(planes)
    return Phantom(image=image, vessel_mask=vessel, disc_mask=disc,
                   fov_mask=fov, seed=_as_seed_tuple(seed))


def _as_seed_tuple(seed) -> tuple:
    if isinstance(seed, (list, tuple, np.ndarray)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def make_dataset(count: int, size: int, seed: int,
                 channels: int = 1) -> tuple[list[Phantom], list[Phantom]]:
    """Generate ``count`` phantoms and split them 90/10 by index.

    Item ``i`` is seeded by ``[seed, i]``, so the dataset is reproducible
    and no two items share a seed. The validation slice is the final
    ``max(1, count // 10)`` items.
    """
    if count < 2:
        raise ValueError(f"need at least 2 phantoms, got {count}")
    items = [generate(size, [seed, i], channels) for i in range(count)]
    n_val = max(1, count // 10)
    return items[:count - n_val], items[count - n_val:]
