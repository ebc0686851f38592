"""Command-line shell: ``led <mode> --config <path> [flags]``.

Modes
  train     fit the denoiser on clean images (degraded on the fly from a
            degradation section, or read from a paired ``degraded`` dir)
  degrade   apply a degradation spec to a directory of images
  enhance   partially noise degraded images and denoise them back
  refine    polish externally enhanced images at a shallow noise depth
  eval      score candidate images against references (FCNR/PSNR/SSIM CSV)
  phantom   generate a synthetic dataset (``clean/`` + ``masks/``)

Config is a single JSON object with a mandatory ``version: 1``. Sections
(all optional unless a mode needs them): ``seed``, ``out``, ``model``
{image_channels, base_channels, depth, time_dim}, ``schedule`` {steps,
kind, beta_start, beta_end}, ``sampler`` {t_m, kind, stride, clip},
``train`` {epochs, batch_size, lr}, ``degradation`` {preset | stages,
seed}, ``data`` {input, degraded, coarse, checkpoint, reference,
candidate, masks}, ``phantom`` {count, size, channels}. Flags
(--seed/--out/--tm/--sampler/--stride) override file values; the fully
resolved config is written to ``<out>/config.json`` so any run can be
reproduced from its own output directory.

Exit codes: 0 success, 1 usage, 2 data or config error, 3 numeric abort.
``LED_THREADS`` caps BLAS parallelism (it must be applied before numpy
loads, hence the early hook below).
"""

from __future__ import annotations

import os


def _cap_threads() -> None:
    value = os.environ.get("LED_THREADS", "").strip()
    if value.isdigit() and int(value) > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, value)


_cap_threads()  # before the numpy import pulls in the BLAS pool

import argparse
import sys
from pathlib import Path

import numpy as np

from . import tensor as T
from .degrade import degrade, make_training_spec, spec_from_config
from .diffusion import SamplerConfig, TrainConfig, default_tm, enhance, train
from .fileio import (DataError, LossLog, list_images, read_image, read_json,
                     read_mask, write_image, write_json, write_mask,
                     write_metrics_csv)
from .metrics import fcnr, psnr, ssim
from .nn import (Adam, CheckpointError, Denoiser, load_checkpoint,
                 save_checkpoint)
from .phantom import generate
from .schedule import make_schedule

CONFIG_VERSION = 1
MODES = ("train", "degrade", "enhance", "refine", "eval", "phantom")

_TOP_KEYS = {"version", "mode", "seed", "out", "model", "schedule",
             "sampler", "train", "degradation", "data", "phantom"}
_MODEL_DEFAULTS = {"image_channels": None, "base_channels": 16, "depth": 2,
                   "time_dim": 32}
_SCHEDULE_DEFAULTS = {"steps": 200, "kind": "linear", "beta_start": None,
                      "beta_end": None}
_SAMPLER_DEFAULTS = {"t_m": None, "kind": "ddim", "stride": 1,
                     "clip": [-1.0, 1.0]}
_TRAIN_DEFAULTS = {"epochs": None, "batch_size": 4, "lr": 1e-4}
_DATA_KEYS = ("input", "degraded", "coarse", "checkpoint", "reference",
              "candidate", "masks")


# ------------------------------------------------------- config handling

def _as_int(value, what: str, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise DataError(f"{what} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise DataError(f"{what} must be >= {minimum}, got {value}")
    return value


def _as_float(value, what: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise DataError(f"{what} must be a number, got {value!r}")
    return float(value)


def _merge_section(config: dict, name: str, defaults: dict) -> dict:
    section = config.get(name, {})
    if not isinstance(section, dict):
        raise DataError(f"config section {name!r} must be an object")
    unknown = set(section) - set(defaults)
    if unknown:
        raise DataError(f"unknown keys in config {name!r}: {sorted(unknown)}")
    merged = dict(defaults)
    merged.update(section)
    return merged


def _resolve(mode: str, config: dict, args) -> dict:
    """Merge file values, defaults, and flag overrides into one run dict."""
    if config.get("version") != CONFIG_VERSION:
        raise DataError(f"config version must be {CONFIG_VERSION}")
    unknown = set(config) - _TOP_KEYS
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    if "mode" in config and config["mode"] != mode:
        raise DataError(f"config is for mode {config['mode']!r}, "
                        f"but the command is {mode!r}")
    seed = args.seed if args.seed is not None else config.get("seed", 0)
    out = args.out if args.out is not None else config.get("out")
    if not out or not isinstance(out, (str, os.PathLike)):
        raise DataError("an output directory is required "
                        "(config key `out` or --out)")

    sampler = _merge_section(config, "sampler", _SAMPLER_DEFAULTS)
    if args.tm is not None:
        sampler["t_m"] = args.tm
    if args.sampler is not None:
        sampler["kind"] = args.sampler
    if args.stride is not None:
        sampler["stride"] = args.stride

    degradation = config.get("degradation")
    if degradation is not None:
        if not isinstance(degradation, dict):
            raise DataError("config section 'degradation' must be an object")
        unknown = set(degradation) - {"preset", "stages", "seed"}
        if unknown:
            raise DataError(f"unknown keys in config 'degradation': "
                            f"{sorted(unknown)}")

    phantom = config.get("phantom")
    if phantom is not None:
        phantom = _merge_section(config, "phantom",
                                 {"count": None, "size": None, "channels": 1})

    data = _merge_section(config, "data", dict.fromkeys(_DATA_KEYS))
    return {
        "version": CONFIG_VERSION,
        "mode": mode,
        "seed": _as_int(seed, "seed", minimum=0),
        "out": str(out),
        "model": _merge_section(config, "model", _MODEL_DEFAULTS),
        "schedule": _merge_section(config, "schedule", _SCHEDULE_DEFAULTS),
        "sampler": sampler,
        "train": _merge_section(config, "train", _TRAIN_DEFAULTS),
        "degradation": degradation,
        "data": {k: None if v is None else str(v) for k, v in data.items()},
        "phantom": phantom,
    }


def _degradation_spec(cfg: dict):
    section = cfg["degradation"]
    if section is None:
        raise DataError("this command needs a 'degradation' config section")
    seed = _as_int(section.get("seed", cfg["seed"]), "degradation.seed",
                   minimum=0)
    if "preset" in section and "stages" in section:
        raise DataError("degradation 'preset' and 'stages' are exclusive")
    if "preset" in section:
        return make_training_spec(section["preset"], seed=seed)
    if "stages" in section:
        return spec_from_config({"stages": section["stages"], "seed": seed})
    raise DataError("degradation section needs 'preset' or 'stages'")


def _require(cfg: dict, key: str) -> str:
    value = cfg["data"].get(key)
    if not value:
        raise DataError(f"this command needs config data.{key}")
    return value


# ------------------------------------------------------------- commands

def _load_model(cfg: dict):
    path = Path(_require(cfg, "checkpoint"))
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    model, _, schedule = load_checkpoint(path)
    return model, schedule


def _sampler_config(cfg: dict, steps: int, refine_mode: bool) -> SamplerConfig:
    s = cfg["sampler"]
    t_m = s["t_m"]
    if t_m is None:
        t_m = default_tm(steps, refine=refine_mode)
    clip = s["clip"]
    if (not isinstance(clip, (list, tuple)) or len(clip) != 2
            or not all(isinstance(v, (int, float)) for v in clip)):
        raise DataError(f"sampler.clip must be two numbers, got {clip!r}")
    sampler = SamplerConfig(t_m=_as_int(t_m, "sampler.t_m", minimum=0),
                            kind=s["kind"],
                            stride=_as_int(s["stride"], "sampler.stride",
                                           minimum=1),
                            clip=(float(clip[0]), float(clip[1])))
    sampler.validate(steps)
    return sampler


def _check_extents(model: Denoiser, img: np.ndarray, name: str) -> None:
    c, h, w = img.shape
    div = 2 ** model.depth
    if c != model.image_channels or h % div or w % div:
        raise DataError(
            f"{name}: shape {c}x{h}x{w} incompatible with the model "
            f"({model.image_channels} channel(s), extents divisible by {div})")


def cmd_phantom(cfg: dict) -> int:
    section = cfg["phantom"]
    if section is None:
        raise DataError("phantom mode needs a 'phantom' config section")
    count = _as_int(section["count"], "phantom.count", minimum=1)
    size = _as_int(section["size"], "phantom.size", minimum=16)
    channels = _as_int(section["channels"], "phantom.channels", minimum=1)
    out = Path(cfg["out"])
    for i in range(count):
        ph = generate(size, [cfg["seed"], i], channels)
        name = f"phantom_{i:04d}.png"
        write_image(out / "clean" / name, ph.image)
        write_mask(out / "masks" / name, ph.vessel_mask)
    print(f"wrote {count} phantoms under {out}")
    return 0


def cmd_degrade(cfg: dict) -> int:
    spec = _degradation_spec(cfg)
    paths = list_images(_require(cfg, "input"))
    out = Path(cfg["out"])
    for i, path in enumerate(paths):
        write_image(out / path.name,
                    degrade(spec, read_image(path), cfg["seed"] + i))
    if not paths:
        print(f"warning: no PNG images under {cfg['data']['input']}",
              file=sys.stderr)
    print(f"degraded {len(paths)} image(s) into {out}")
    return 0


def cmd_enhance(cfg: dict, refine_mode: bool = False) -> int:
    model, schedule = _load_model(cfg)
    sampler = _sampler_config(cfg, schedule.steps, refine_mode)
    input_dir = Path(_require(cfg, "input"))
    coarse_dir = Path(_require(cfg, "coarse")) if refine_mode else None
    out = Path(cfg["out"])
    paths = list_images(input_dir)
    entries = []
    for i, path in enumerate(paths):
        src = path
        if refine_mode:
            src = coarse_dir / path.name
            if not src.is_file():
                raise DataError(f"no coarse image for {path.name} "
                                f"under {coarse_dir}")
        img = read_image(src)
        _check_extents(model, img, src.name)
        rng = np.random.default_rng([cfg["seed"], 3, i])
        result = enhance(model, schedule, img[None], sampler, rng)[0]
        write_image(out / path.name, result)
        entries.append({"input": str(src), "output": str(out / path.name)})
    if not paths:
        print(f"warning: no PNG images under {input_dir}", file=sys.stderr)
    manifest = {
        "input": str(input_dir),
        "output": str(out),
        "t_m": sampler.t_m,
        "sampler": sampler.kind,
        "stride": sampler.stride,
        "seed": cfg["seed"],
        "checkpoint": cfg["data"]["checkpoint"],
        "images": entries,
    }
    if refine_mode:
        manifest["coarse"] = str(coarse_dir)
    write_json(out / "manifest.json", manifest)
    print(f"wrote {len(paths)} image(s) into {out}")
    return 0


def cmd_refine(cfg: dict) -> int:
    return cmd_enhance(cfg, refine_mode=True)


def cmd_eval(cfg: dict) -> int:
    ref_dir = Path(_require(cfg, "reference"))
    mask_dir = cfg["data"].get("masks")
    mask_dir = Path(mask_dir) if mask_dir else None
    paths = list_images(_require(cfg, "candidate"))
    rows = []
    for path in paths:
        ref_path = ref_dir / path.name
        if not ref_path.is_file():
            raise DataError(f"no reference image for {path.name} "
                            f"under {ref_dir}")
        candidate = read_image(path)
        reference = read_image(ref_path)
        if candidate.shape != reference.shape:
            raise DataError(f"{path.name}: candidate shape {candidate.shape} "
                            f"!= reference shape {reference.shape}")
        value = None
        mask_path = mask_dir / path.name if mask_dir else None
        if mask_path is not None and mask_path.is_file():
            mask = read_mask(mask_path)
            if mask.shape != candidate.shape[-2:]:
                raise DataError(f"{path.name}: mask shape {mask.shape} does "
                                f"not match the image")
            try:
                value = fcnr(candidate, mask)
            except ValueError as exc:  # degenerate mask or contrast
                print(f"warning: fcnr skipped for {path.name}: {exc}",
                      file=sys.stderr)
        else:
            print(f"warning: no vessel mask for {path.name}; "
                  f"fcnr left blank", file=sys.stderr)
        rows.append({"image_id": path.stem, "fcnr": value,
                     "psnr": psnr(reference, candidate),
                     "ssim": ssim(reference, candidate)})
    if not paths:
        print(f"warning: no PNG images under {cfg['data']['candidate']}",
              file=sys.stderr)
    write_metrics_csv(Path(cfg["out"]) / "metrics.csv", rows)
    return 0


def _stack_images(arrays: list[np.ndarray], paths) -> np.ndarray:
    first = arrays[0].shape
    for arr, path in zip(arrays, paths):
        if arr.shape != first:
            raise DataError(f"{path.name}: shape {arr.shape} differs from "
                            f"{paths[0].name} shape {first}")
    return np.stack(arrays)


def _training_arrays(cfg: dict):
    """Returns (clean [M,C,H,W], degraded or None) from phantoms or dirs."""
    data = cfg["data"]
    section = cfg["phantom"]
    if section is not None and data["input"]:
        raise DataError("give either a phantom section or data.input, "
                        "not both")
    if section is not None:
        count = _as_int(section["count"], "phantom.count", minimum=1)
        size = _as_int(section["size"], "phantom.size", minimum=16)
        channels = _as_int(section["channels"], "phantom.channels", minimum=1)
        clean = np.stack([generate(size, [cfg["seed"], i], channels).image
                          for i in range(count)])
        return clean, None
    if not data["input"]:
        raise DataError("training needs data.input or a phantom section")
    paths = list_images(data["input"])
    if not paths:
        raise DataError(f"no PNG images under {data['input']}")
    clean = _stack_images([read_image(p) for p in paths], paths)
    if not data["degraded"]:
        return clean, None
    pair_dir = Path(data["degraded"])
    pairs = []
    for path in paths:
        twin = pair_dir / path.name
        if not twin.is_file():
            raise DataError(f"no degraded image for {path.name} "
                            f"under {pair_dir}")
        pairs.append(read_image(twin))
    return clean, _stack_images(pairs, paths)


def cmd_train(cfg: dict) -> int:
    out = Path(cfg["out"])
    clean, degraded = _training_arrays(cfg)
    if degraded is not None and cfg["degradation"] is not None:
        raise DataError("paired data.degraded and a degradation section "
                        "are exclusive")
    spec = None if degraded is not None else _degradation_spec(cfg)

    sched_cfg = cfg["schedule"]
    steps = _as_int(sched_cfg["steps"], "schedule.steps", minimum=1)
    section = cfg["train"]
    if section["epochs"] is None:
        raise DataError("config train.epochs is required")
    tcfg = TrainConfig(
        epochs=_as_int(section["epochs"], "train.epochs", minimum=1),
        batch_size=_as_int(section["batch_size"], "train.batch_size",
                           minimum=1),
        lr=_as_float(section["lr"], "train.lr"),
        schedule_kind=sched_cfg["kind"], seed=cfg["seed"])

    checkpoints = sorted(out.glob("epoch_*.ckpt"))
    if checkpoints:
        # resume: the checkpoint is authoritative for weights and schedule
        model, opt_state, schedule = load_checkpoint(checkpoints[-1])
        if schedule.steps != steps or schedule.kind != sched_cfg["kind"]:
            raise DataError(
                f"checkpoint schedule ({schedule.kind}, {schedule.steps} "
                f"steps) does not match the config ({sched_cfg['kind']}, "
                f"{steps} steps)")
        start_epoch = int(checkpoints[-1].stem.split("_")[1])
        optimizer = Adam(model.parameters(), lr=tcfg.lr)
        if opt_state is not None:
            optimizer.load_state(opt_state)
        print(f"resuming after epoch {start_epoch} "
              f"from {checkpoints[-1].name}")
    else:
        schedule = make_schedule(steps, sched_cfg["kind"],
                                 sched_cfg["beta_start"],
                                 sched_cfg["beta_end"])
        m = cfg["model"]
        channels = m["image_channels"]
        if channels is None:
            channels = int(clean.shape[1])  # inferred from the data
        model = Denoiser(
            image_channels=_as_int(channels, "model.image_channels",
                                   minimum=1),
            base_channels=_as_int(m["base_channels"], "model.base_channels",
                                  minimum=1),
            depth=_as_int(m["depth"], "model.depth", minimum=1),
            time_dim=_as_int(m["time_dim"], "model.time_dim", minimum=2),
            rng=np.random.default_rng([cfg["seed"], 1, 0]))
        optimizer = Adam(model.parameters(), lr=tcfg.lr)
        start_epoch = 0

    if model.image_channels != clean.shape[1]:
        raise DataError(f"model expects {model.image_channels} channel(s) "
                        f"but the data has {clean.shape[1]}")
    div = 2 ** model.depth
    if clean.shape[2] % div or clean.shape[3] % div:
        raise DataError(f"training extents {clean.shape[2]}x{clean.shape[3]} "
                        f"must divide by {div}")
    if start_epoch >= tcfg.epochs:
        print(f"nothing to do: {start_epoch} of {tcfg.epochs} epochs "
              f"already trained")
        return 0

    log = LossLog(out / "loss_log.csv")

    def on_epoch_end(epoch: int, mean: float) -> None:
        save_checkpoint(out / f"epoch_{epoch + 1:03d}.ckpt", model, schedule,
                        optimizer)
        print(f"epoch {epoch + 1}/{tcfg.epochs}: mean loss {mean:.6f}")

    train(model, optimizer, schedule, clean, spec, tcfg,
          on_step=log.append, on_epoch_end=on_epoch_end,
          start_epoch=start_epoch, degraded=degraded)
    return 0


_COMMANDS = {"train": cmd_train, "degrade": cmd_degrade,
             "enhance": cmd_enhance, "refine": cmd_refine,
             "eval": cmd_eval, "phantom": cmd_phantom}


# ----------------------------------------------------------- entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _nonnegative_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer")
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive_int(text: str) -> int:
    value = _nonnegative_int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="led", description=__doc__.splitlines()[0])
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, metavar="PATH",
                        help="JSON run configuration")
    parser.add_argument("--seed", type=_nonnegative_int,
                        help="override the config seed")
    parser.add_argument("--out", metavar="DIR",
                        help="override the output directory")
    parser.add_argument("--tm", type=_nonnegative_int,
                        help="override the sampler noise depth")
    parser.add_argument("--sampler", choices=("ddpm", "ddim"),
                        help="override the sampler kind")
    parser.add_argument("--stride", type=_positive_int,
                        help="override the DDIM stride")
    return parser


def main(argv=None) -> int:
    raw = os.environ.get("LED_THREADS")
    if raw is not None and not (raw.strip().isdigit() and int(raw) > 0):
        print(f"led: error: LED_THREADS must be a positive integer, "
              f"got {raw!r}", file=sys.stderr)
        return 1
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve(args.mode, read_json(args.config), args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", cfg)
        return _COMMANDS[args.mode](cfg)
    except T.NumericError as exc:
        print(f"led: numeric abort: {exc}", file=sys.stderr)
        return 3
    except (DataError, CheckpointError, ValueError) as exc:
        print(f"led: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"led: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
