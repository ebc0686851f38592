"""Conditional U-Net noise predictor, Adam, and binary checkpoints.

The network takes a noisy image, the 1-based diffusion step, and a
conditioning image of the same shape; the two images enter concatenated on
the channel axis. Step information is injected as a learned per-channel
offset after each block's first normalization (adding it before would be
cancelled, since the per-channel norm removes constant offsets).
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .schedule import NoiseSchedule, make_schedule

KERNEL_SIZE = 3


class CheckpointError(ValueError):
    """Raised for unreadable, corrupt, or mismatched checkpoint files."""


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Map integer steps ``t`` (shape [N]) to [N, dim] sin/cos features.

    Entry ``i < dim/2`` is sin(t / 10000^(i / (dim/2))), the rest are the
    matching cosines.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if t.ndim != 1:
        raise ValueError("t must be a 1-D batch of steps")
    half = dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)],
                          axis=1).astype(np.float32)


def _uniform_init(rng, shape, fan_in: int) -> np.ndarray:
    if rng is None:
        return np.zeros(shape, dtype=np.float32)
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


class Linear:
    def __init__(self, n_in: int, n_out: int, rng):
        self.weight = T.Tensor(_uniform_init(rng, (n_in, n_out), n_in),
                               requires_grad=True)
        self.bias = T.Tensor(np.zeros(n_out, dtype=np.float32),
                             requires_grad=True)

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.add_bias(T.matmul(x, self.weight), self.bias, axis=1)

    def parameters(self) -> dict[str, T.Tensor]:
        return {"weight": self.weight, "bias": self.bias}


class Conv:
    """3x3 same-padding convolution with bias."""

    def __init__(self, c_in: int, c_out: int, rng, zero_init: bool = False):
        shape = (c_out, c_in, KERNEL_SIZE, KERNEL_SIZE)
        fan_in = c_in * KERNEL_SIZE * KERNEL_SIZE
        data = (np.zeros(shape, dtype=np.float32) if zero_init
                else _uniform_init(rng, shape, fan_in))
        self.kernel = T.Tensor(data, requires_grad=True)
        self.bias = T.Tensor(np.zeros(c_out, dtype=np.float32),
                             requires_grad=True)

    def forward(self, x: T.Tensor) -> T.Tensor:
        out = T.conv2d(x, self.kernel, stride=1, padding=KERNEL_SIZE // 2)
        return T.add_bias(out, self.bias, axis=1)

    def parameters(self) -> dict[str, T.Tensor]:
        return {"kernel": self.kernel, "bias": self.bias}


class Affine:
    """Learned per-channel scale and shift after a normalization."""

    def __init__(self, channels: int):
        self.gain = T.Tensor(np.ones(channels, dtype=np.float32),
                             requires_grad=True)
        self.bias = T.Tensor(np.zeros(channels, dtype=np.float32),
                             requires_grad=True)

    def forward(self, x: T.Tensor) -> T.Tensor:
        return T.add_bias(T.mul_bias(x, self.gain, axis=1), self.bias, axis=1)

    def parameters(self) -> dict[str, T.Tensor]:
        return {"gain": self.gain, "bias": self.bias}


class Block:
    """conv -> norm -> step offset -> silu -> conv -> norm -> silu."""

    def __init__(self, c_in: int, c_out: int, time_dim: int, rng):
        self.conv1 = Conv(c_in, c_out, rng)
        self.norm1 = Affine(c_out)
        self.tproj = Linear(time_dim, c_out, rng)
        self.conv2 = Conv(c_out, c_out, rng)
        self.norm2 = Affine(c_out)

    def forward(self, x: T.Tensor, temb: T.Tensor) -> T.Tensor:
        h = self.norm1.forward(T.channel_norm(self.conv1.forward(x)))
        h = T.silu(T.add_channel_map(h, self.tproj.forward(temb)))
        h = self.norm2.forward(T.channel_norm(self.conv2.forward(h)))
        return T.silu(h)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        for prefix, mod in (("conv1", self.conv1), ("norm1", self.norm1),
                            ("tproj", self.tproj), ("conv2", self.conv2),
                            ("norm2", self.norm2)):
            for k, v in mod.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out


class Denoiser:
    """U-Net predicting the noise content of a conditioned noisy image.

    ``depth`` is the number of 2x downsamplings, so spatial extents must be
    divisible by 2**depth. Channel widths double per level from
    ``base_channels``. The output head starts at zero so the untrained
    model predicts zero noise.
    """

    def __init__(self, image_channels: int = 1, base_channels: int = 16,
                 depth: int = 2, time_dim: int = 32, rng=None):
        if depth < 1:
            raise ValueError(f"depth must be >= 1, got {depth}")
        self.image_channels = image_channels
        self.base_channels = base_channels
        self.depth = depth
        self.time_dim = time_dim
        self.time = Linear(time_dim, time_dim, rng)
        widths = [base_channels * 2 ** i for i in range(depth + 1)]
        self.encs = []
        c_in = 2 * image_channels
        for w in widths[:-1]:
            self.encs.append(Block(c_in, w, time_dim, rng))
            c_in = w
        self.mid = Block(widths[-2], widths[-1], time_dim, rng)
        self.decs = []
        for level in reversed(range(depth)):
            skip, below = widths[level], widths[level + 1]
            self.decs.append(Block(skip + below, skip, time_dim, rng))
        self.out = Conv(base_channels, image_channels, rng, zero_init=True)

    def forward(self, x: T.Tensor, t, cond: T.Tensor) -> T.Tensor:
        if x.shape != cond.shape:
            raise ValueError(f"shape mismatch: noisy {x.shape}, "
                             f"condition {cond.shape}")
        n, c, h, w = x.shape
        if c != self.image_channels:
            raise ValueError(f"expected {self.image_channels} channels, got {c}")
        div = 2 ** self.depth
        if h % div or w % div:
            raise ValueError(f"spatial extents {h}x{w} must divide by {div}")
        t = np.asarray(t)
        if t.shape != (n,):
            raise ValueError(f"t must have shape ({n},), got {t.shape}")
        temb = T.silu(self.time.forward(T.Tensor(
            sinusoidal_embedding(t, self.time_dim))))
        cur = T.concat([x, cond], axis=1)
        skips = []
        for blk in self.encs:
            cur = blk.forward(cur, temb)
            skips.append(cur)
            cur = T.avg_pool2d(cur)
        cur = self.mid.forward(cur, temb)
        for blk, skip in zip(self.decs, reversed(skips)):
            cur = T.concat([skip, T.upsample_nearest(cur)], axis=1)
            cur = blk.forward(cur, temb)
        return self.out.forward(cur)

    def parameters(self) -> dict[str, T.Tensor]:
        out = {}
        groups = [("time", self.time)]
        groups += [(f"enc{i}", b) for i, b in enumerate(self.encs)]
        groups.append(("mid", self.mid))
        groups += [(f"dec{self.depth - 1 - i}", b)
                   for i, b in enumerate(self.decs)]
        groups.append(("out", self.out))
        for prefix, mod in groups:
            for k, v in mod.parameters().items():
                out[f"{prefix}.{k}"] = v
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters().values())


class Adam:
    """Adam with bias correction; ``step`` consumes and clears gradients."""

    def __init__(self, params: dict[str, T.Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape, np.float32) for k, p in params.items()}
        self.v = {k: np.zeros(p.shape, np.float32) for k, p in params.items()}

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.clear_grad()

    def state(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state: dict) -> None:
        if set(state["m"]) != set(self.params):
            raise CheckpointError("optimizer state does not match parameters")
        self.step_count = int(state["step"])
        for name, p in self.params.items():
            for field, src in (("m", state["m"]), ("v", state["v"])):
                if src[name].shape != p.shape:
                    raise CheckpointError(
                        f"optimizer moment shape mismatch for {name}")
            self.m[name] = state["m"][name].astype(np.float32)
            self.v[name] = state["v"][name].astype(np.float32)


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Half-cosine decay from ``base_lr`` at epoch 0 toward 0."""
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


# ---------------------------------------------------------------------------
# Checkpoints
#
# Layout (all little-endian):
#   magic "LEDCKPT1" | version u32 | entry count u32
#   per entry: name len u16 | name utf-8 | rank u8 | extents u32 x rank
#              | float32 payload
#   optimizer flag u8; if 1: step u32, then per entry in the same order the
#              first and second moments as float32 payloads
#   schedule: steps u32 | beta_start f64 | beta_end f64
#              | kind len u16 | kind utf-8
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"LEDCKPT1"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Denoiser, schedule: NoiseSchedule,
                    optimizer: Adam | None = None) -> None:
    params = model.parameters()
    buf = bytearray(CHECKPOINT_MAGIC)
    buf += struct.pack("<II", CHECKPOINT_VERSION, len(params))
    for name, p in params.items():
        raw = name.encode("utf-8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack(f"<B{p.ndim}I", p.ndim, *p.shape)
        buf += p.data.astype("<f4", copy=False).tobytes()
    if optimizer is None:
        buf += struct.pack("<B", 0)
    else:
        buf += struct.pack("<BI", 1, optimizer.step_count)
        for name in params:
            buf += optimizer.m[name].astype("<f4", copy=False).tobytes()
            buf += optimizer.v[name].astype("<f4", copy=False).tobytes()
    kind = schedule.kind.encode("utf-8")
    buf += struct.pack("<Idd", schedule.steps, schedule.beta_start,
                       schedule.beta_end)
    buf += struct.pack("<H", len(kind)) + kind
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _rebuild_model(arrays: dict[str, np.ndarray]) -> Denoiser:
    """Recover constructor arguments from parameter names and shapes."""
    try:
        time_dim = arrays["time.weight"].shape[0]
        first = arrays["enc0.conv1.kernel"]
        base, c_in = first.shape[0], first.shape[1]
        depth = len({n.split(".")[0] for n in arrays if n.startswith("enc")})
    except KeyError as exc:
        raise CheckpointError(f"missing parameter {exc}") from None
    if c_in % 2:
        raise CheckpointError("first layer input channels must be even")
    model = Denoiser(image_channels=c_in // 2, base_channels=base,
                     depth=depth, time_dim=time_dim, rng=None)
    params = model.parameters()
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))
        raise CheckpointError(f"parameter set mismatch: {missing[:4]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file has {arrays[name].shape}, "
                f"model wants {p.shape}")
        p.data = arrays[name]
    return model


def load_checkpoint(path) -> tuple[Denoiser, dict | None, NoiseSchedule]:
    """Read a checkpoint; returns (model, optimizer state or None, schedule)."""
    r = _Reader(Path(path).read_bytes())
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint file")
    version, count = r.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        shape = r.unpack(f"<{rank}I") if rank else ()
        n_items = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(4 * n_items), dtype="<f4")
        if name in arrays:
            raise CheckpointError(f"duplicate parameter {name}")
        arrays[name] = data.reshape(shape).astype(np.float32)
    (opt_flag,) = r.unpack("<B")
    opt_state = None
    if opt_flag == 1:
        (step,) = r.unpack("<I")
        m, v = {}, {}
        for name, arr in arrays.items():
            m[name] = np.frombuffer(r.take(4 * arr.size),
                                    dtype="<f4").reshape(arr.shape).copy()
            v[name] = np.frombuffer(r.take(4 * arr.size),
                                    dtype="<f4").reshape(arr.shape).copy()
        opt_state = {"step": step, "m": m, "v": v}
    elif opt_flag != 0:
        raise CheckpointError(f"bad optimizer flag {opt_flag}")
    steps, beta_start, beta_end = r.unpack("<Idd")
    (kind_len,) = r.unpack("<H")
    kind = r.take(kind_len).decode("utf-8")
    if r.pos != len(r.blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    if kind == "cosine":
        schedule = make_schedule(steps, kind=kind)
    else:
        schedule = make_schedule(steps, kind=kind, beta_start=beta_start,
                                 beta_end=beta_end)
    return _rebuild_model(arrays), opt_state, schedule
