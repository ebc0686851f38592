"""PNG, mask, config, manifest, loss-log, and CSV file handling.

All images cross the file boundary as 8-bit PNG mapped linearly to the
internal [-1,1] float convention; masks are 0/255 single-channel PNG.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np
from PIL import Image

from .imageops import to_float, to_uint8


class DataError(Exception):
    """Unreadable, missing, or structurally invalid input data."""


def read_image(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "RGB"):
                im = im.convert("RGB" if im.mode in ("RGBA", "P") else "L")
            raw = np.asarray(im, dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"image not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from None
    return to_float(raw)


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def read_mask(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            raw = np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise DataError(f"mask not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from None
    return raw > 127


def write_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    raw = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(raw, mode="L").save(path, format="PNG")


def read_json(path) -> dict:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"invalid JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise DataError(f"{path} must hold a JSON object")
    return data


def write_json(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


class LossLog:
    """Append-only training log: one ``epoch,step,loss,lr`` row per step."""

    HEADER = "epoch,step,loss,lr\n"

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            self.path.write_text(self.HEADER, encoding="utf-8")

    def append(self, epoch: int, step: int, loss: float, lr: float) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{epoch},{step},{loss!r},{lr!r}\n")


def read_loss_log(path) -> list[tuple[int, int, float, float]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["epoch", "step", "loss", "lr"]:
            raise DataError(f"{path} is not a loss log")
        for row in reader:
            rows.append((int(row[0]), int(row[1]), float(row[2]),
                         float(row[3])))
    return rows


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"not a directory: {directory}")
    return sorted(p for p in directory.iterdir()
                  if p.suffix.lower() == ".png")


def _format_metric(value) -> str:
    if value is None:
        return ""
    if math.isinf(value):
        return "inf"
    return f"{value:.6f}"


def write_metrics_csv(path, rows: list[dict]) -> None:
    """Rows of {image_id, fcnr, psnr, ssim}; appends a mean summary row.

    Absent metrics (None) stay blank and are skipped by the means.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = ["image_id", "fcnr", "psnr", "ssim"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names)
        for row in rows:
            writer.writerow([row["image_id"]]
                            + [_format_metric(row[k]) for k in names[1:]])
        if rows:
            means = []
            for key in names[1:]:
                vals = [r[key] for r in rows if r[key] is not None]
                means.append(_format_metric(
                    sum(vals) / len(vals) if vals else None))
            writer.writerow(["mean"] + means)
