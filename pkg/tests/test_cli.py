"""End-to-end command runs, exercised in-process via ``led.cli.main``.

A module-scoped workspace holds one tiny phantom dataset, its degraded
twin, a two-epoch training run, and one enhancement pass; the tests then
probe artifacts, reruns, resumes, overrides, and failure exit codes.
"""

import json
import shutil
import subprocess

import numpy as np
import pytest

from led.cli import main
from led.fileio import (list_images, read_image, read_json, read_loss_log,
                        read_mask, write_image)
from led.metrics import psnr
from led.nn import cosine_lr


def write_cfg(path, **payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    clean, masks = root / "data" / "clean", root / "data" / "masks"
    degraded = root / "data" / "degraded"
    cfg = write_cfg(root / "phantom.json", version=1, seed=5,
                    out=str(root / "data"),
                    phantom={"count": 6, "size": 16, "channels": 1})
    assert main(["phantom", "--config", cfg]) == 0
    cfg = write_cfg(root / "degrade.json", version=1, seed=2,
                    out=str(degraded),
                    degradation={"preset": "mild", "seed": 3},
                    data={"input": str(clean)})
    assert main(["degrade", "--config", cfg]) == 0
    train_cfg = dict(version=1, mode="train", seed=0, out=str(root / "run"),
                     model={"base_channels": 4, "depth": 2, "time_dim": 8},
                     schedule={"steps": 10, "beta_start": 0.001,
                               "beta_end": 0.05},
                     train={"epochs": 2, "batch_size": 3, "lr": 1e-3},
                     degradation={"preset": "mild", "seed": 3},
                     data={"input": str(clean)})
    assert main(["train", "--config",
                 write_cfg(root / "train.json", **train_cfg)]) == 0
    cfg = write_cfg(root / "enhance.json", version=1, seed=1,
                    out=str(root / "enhanced"),
                    sampler={"t_m": 8, "kind": "ddim", "stride": 2},
                    data={"input": str(degraded),
                          "checkpoint": str(root / "run" / "epoch_002.ckpt")})
    assert main(["enhance", "--config", cfg]) == 0
    return {"root": root, "clean": clean, "masks": masks,
            "degraded": degraded, "run": root / "run",
            "enhanced": root / "enhanced", "train_cfg": train_cfg,
            "ckpt": root / "run" / "epoch_002.ckpt"}


def _images_equal(dir_a, dir_b):
    names = [p.name for p in list_images(dir_a)]
    assert names == [p.name for p in list_images(dir_b)]
    return all(np.array_equal(read_image(dir_a / n), read_image(dir_b / n))
               for n in names)


# ------------------------------------------------------------- artifacts

def test_phantom_writes_paired_clean_and_masks(ws, tmp_path):
    names = [p.name for p in list_images(ws["clean"])]
    assert names == [f"phantom_{i:04d}.png" for i in range(6)]
    assert [p.name for p in list_images(ws["masks"])] == names
    img = read_image(ws["clean"] / names[0])
    assert img.shape == (1, 16, 16)
    mask = read_mask(ws["masks"] / names[0])
    assert mask.dtype == bool and mask.any()
    cfg = write_cfg(tmp_path / "p.json", version=1, seed=5,
                    out=str(tmp_path / "again"),
                    phantom={"count": 6, "size": 16, "channels": 1})
    assert main(["phantom", "--config", cfg]) == 0
    assert _images_equal(ws["clean"], tmp_path / "again" / "clean")


def test_degrade_mirrors_basenames_and_tracks_the_seed(ws, tmp_path):
    names = [p.name for p in list_images(ws["degraded"])]
    assert names == [p.name for p in list_images(ws["clean"])]
    base = dict(version=1, degradation={"preset": "mild", "seed": 3},
                data={"input": str(ws["clean"])})
    cfg = write_cfg(tmp_path / "d.json", seed=2, out=str(tmp_path / "same"),
                    **base)
    assert main(["degrade", "--config", cfg]) == 0
    assert _images_equal(ws["degraded"], tmp_path / "same")
    cfg = write_cfg(tmp_path / "d2.json", seed=2, out=str(tmp_path / "other"),
                    **base)
    assert main(["degrade", "--config", cfg, "--seed", "99"]) == 0
    assert not _images_equal(ws["degraded"], tmp_path / "other")


def test_train_writes_per_epoch_checkpoints_and_loss_log(ws):
    run = ws["run"]
    assert (run / "epoch_001.ckpt").is_file()
    assert (run / "epoch_002.ckpt").is_file()
    rows = read_loss_log(run / "loss_log.csv")
    assert [(e, s) for e, s, _, _ in rows] == [(0, 1), (0, 2), (1, 3), (1, 4)]
    assert all(np.isfinite(loss) for _, _, loss, _ in rows)
    assert rows[0][3] == cosine_lr(1e-3, 0, 2)
    assert rows[2][3] == cosine_lr(1e-3, 1, 2)
    saved = read_json(run / "config.json")
    assert saved["version"] == 1 and saved["mode"] == "train"
    assert saved["train"]["epochs"] == 2


def test_train_rerun_from_saved_config_is_bitwise(ws, tmp_path):
    out = tmp_path / "rerun"
    assert main(["train", "--config", str(ws["run"] / "config.json"),
                 "--out", str(out)]) == 0
    original = (ws["run"] / "loss_log.csv").read_bytes()
    assert (out / "loss_log.csv").read_bytes() == original
    assert ((out / "epoch_002.ckpt").read_bytes()
            == ws["ckpt"].read_bytes())


def test_train_resume_continues_epoch_and_step_numbering(ws, tmp_path):
    run = tmp_path / "run"
    shutil.copytree(ws["run"], run)
    cfg = dict(ws["train_cfg"], out=str(run))
    cfg["train"] = dict(cfg["train"], epochs=3)
    assert main(["train", "--config",
                 write_cfg(tmp_path / "more.json", **cfg)]) == 0
    assert (run / "epoch_003.ckpt").is_file()
    rows = read_loss_log(run / "loss_log.csv")
    assert [(e, s) for e, s, _, _ in rows[4:]] == [(2, 5), (2, 6)]
    # nothing left to do on a second invocation, and no new artifacts
    before = sorted(p.name for p in run.iterdir())
    assert main(["train", "--config",
                 write_cfg(tmp_path / "again.json", **cfg)]) == 0
    assert sorted(p.name for p in run.iterdir()) == before


def test_train_accepts_paired_directories(ws, tmp_path):
    cfg = dict(version=1, seed=0, out=str(tmp_path / "run"),
               model={"base_channels": 4, "depth": 2, "time_dim": 8},
               schedule={"steps": 10, "beta_start": 0.001, "beta_end": 0.05},
               train={"epochs": 1, "batch_size": 3, "lr": 1e-3},
               data={"input": str(ws["clean"]),
                     "degraded": str(ws["degraded"])})
    assert main(["train", "--config",
                 write_cfg(tmp_path / "t.json", **cfg)]) == 0
    assert (tmp_path / "run" / "epoch_001.ckpt").is_file()
    cfg["degradation"] = {"preset": "mild"}  # ambiguous pair source
    assert main(["train", "--config",
                 write_cfg(tmp_path / "t2.json", **cfg)]) == 2


def test_train_aborts_with_numeric_exit_code(ws, tmp_path, capsys):
    cfg = dict(ws["train_cfg"], out=str(tmp_path / "boom"))
    cfg["train"] = dict(cfg["train"], lr=1e22)
    with np.errstate(over="ignore", invalid="ignore"):
        code = main(["train", "--config",
                     write_cfg(tmp_path / "boom.json", **cfg)])
    assert code == 3
    assert "numeric abort" in capsys.readouterr().err


# ------------------------------------------------------------- inference

def test_enhance_writes_outputs_and_manifest(ws, tmp_path):
    names = [p.name for p in list_images(ws["enhanced"])]
    assert names == [p.name for p in list_images(ws["degraded"])]
    manifest = read_json(ws["enhanced"] / "manifest.json")
    assert manifest["t_m"] == 8
    assert manifest["sampler"] == "ddim" and manifest["stride"] == 2
    assert manifest["seed"] == 1
    assert manifest["input"] == str(ws["degraded"])
    assert manifest["output"] == str(ws["enhanced"])
    assert [e["output"] for e in manifest["images"]] \
        == [str(ws["enhanced"] / n) for n in names]
    # a rerun from the emitted config is bitwise identical
    out = tmp_path / "again"
    assert main(["enhance", "--config",
                 str(ws["enhanced"] / "config.json"), "--out",
                 str(out)]) == 0
    assert _images_equal(ws["enhanced"], out)


def test_enhance_zero_depth_copies_the_input(ws, tmp_path):
    out = tmp_path / "copy"
    assert main(["enhance", "--config",
                 str(ws["enhanced"] / "config.json"),
                 "--out", str(out), "--tm", "0"]) == 0
    assert _images_equal(ws["degraded"], out)


def test_enhance_keeps_clean_images_nearly_fixed_at_shallow_depth(ws,
                                                                  tmp_path):
    cfg = write_cfg(tmp_path / "fp.json", version=1, seed=9,
                    out=str(tmp_path / "fp"),
                    sampler={"t_m": 1, "kind": "ddim", "stride": 1},
                    data={"input": str(ws["clean"]),
                          "checkpoint": str(ws["ckpt"])})
    assert main(["enhance", "--config", cfg]) == 0
    for path in list_images(ws["clean"]):
        before = read_image(path)
        after = read_image(tmp_path / "fp" / path.name)
        assert psnr(before, after) >= 30.0


def test_enhance_rejects_incompatible_inputs(ws, tmp_path, capsys):
    bad_dir = tmp_path / "bad"
    write_image(bad_dir / "odd.png", np.zeros((1, 18, 18), np.float32))
    cfg = write_cfg(tmp_path / "e.json", version=1, out=str(tmp_path / "o"),
                    data={"input": str(bad_dir),
                          "checkpoint": str(ws["ckpt"])})
    assert main(["enhance", "--config", cfg]) == 2
    assert "odd.png" in capsys.readouterr().err
    rgb_dir = tmp_path / "rgb"
    write_image(rgb_dir / "c.png", np.zeros((3, 16, 16), np.float32))
    cfg = write_cfg(tmp_path / "e2.json", version=1, out=str(tmp_path / "o2"),
                    data={"input": str(rgb_dir),
                          "checkpoint": str(ws["ckpt"])})
    assert main(["enhance", "--config", cfg]) == 2


def test_refine_consumes_coarse_twins_at_shallow_default_depth(ws, tmp_path):
    out = tmp_path / "refined"
    cfg = write_cfg(tmp_path / "r.json", version=1, seed=4, out=str(out),
                    data={"input": str(ws["degraded"]),
                          "coarse": str(ws["enhanced"]),
                          "checkpoint": str(ws["ckpt"])})
    assert main(["refine", "--config", cfg]) == 0
    manifest = read_json(out / "manifest.json")
    assert manifest["t_m"] == 2  # 0.2 of the 10-step schedule
    assert manifest["coarse"] == str(ws["enhanced"])
    assert [p.name for p in list_images(out)] \
        == [p.name for p in list_images(ws["degraded"])]


def test_refine_names_the_missing_coarse_file(ws, tmp_path, capsys):
    coarse = tmp_path / "coarse"
    coarse.mkdir()
    for path in list(list_images(ws["enhanced"]))[:-1]:
        shutil.copy(path, coarse / path.name)
    cfg = write_cfg(tmp_path / "r.json", version=1, out=str(tmp_path / "o"),
                    data={"input": str(ws["degraded"]),
                          "coarse": str(coarse),
                          "checkpoint": str(ws["ckpt"])})
    assert main(["refine", "--config", cfg]) == 2
    assert "phantom_0005.png" in capsys.readouterr().err


# ------------------------------------------------------------ evaluation

def test_eval_full_report_and_self_comparison(ws, tmp_path):
    out = tmp_path / "report"
    cfg = write_cfg(tmp_path / "e.json", version=1, out=str(out),
                    data={"reference": str(ws["clean"]),
                          "candidate": str(ws["clean"]),
                          "masks": str(ws["masks"])})
    assert main(["eval", "--config", cfg]) == 0
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[0] == "image_id,fcnr,psnr,ssim"
    assert len(lines) == 8  # 6 rows + mean
    for line in lines[1:7]:
        _, fcnr_v, psnr_v, ssim_v = line.split(",")
        assert fcnr_v != ""
        assert psnr_v == "inf" and ssim_v == "1.000000"
    assert lines[7].startswith("mean,")


def test_eval_blanks_fcnr_when_masks_are_missing(ws, tmp_path, capsys):
    masks = tmp_path / "masks"
    masks.mkdir()
    names = [p.name for p in list_images(ws["masks"])]
    for name in names[:-1]:
        shutil.copy(ws["masks"] / name, masks / name)
    out = tmp_path / "report"
    cfg = write_cfg(tmp_path / "e.json", version=1, out=str(out),
                    data={"reference": str(ws["clean"]),
                          "candidate": str(ws["enhanced"]),
                          "masks": str(masks)})
    assert main(["eval", "--config", cfg]) == 0
    assert names[-1] in capsys.readouterr().err
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[6].split(",")[1] == ""  # the uncovered row stays blank
    assert all(line.split(",")[1] != "" for line in lines[1:6])


def test_eval_empty_candidate_dir_warns_with_header_only(ws, tmp_path,
                                                         capsys):
    empty = tmp_path / "none"
    empty.mkdir()
    out = tmp_path / "report"
    cfg = write_cfg(tmp_path / "e.json", version=1, out=str(out),
                    data={"reference": str(ws["clean"]),
                          "candidate": str(empty)})
    assert main(["eval", "--config", cfg]) == 0
    assert "warning" in capsys.readouterr().err
    assert (out / "metrics.csv").read_text().strip() \
        == "image_id,fcnr,psnr,ssim"


def test_eval_requires_reference_twins(ws, tmp_path):
    ref = tmp_path / "ref"
    ref.mkdir()
    cfg = write_cfg(tmp_path / "e.json", version=1, out=str(tmp_path / "o"),
                    data={"reference": str(ref),
                          "candidate": str(ws["clean"])})
    assert main(["eval", "--config", cfg]) == 2


def test_eval_warns_on_degenerate_contrast(ws, tmp_path, capsys):
    flat_dir = tmp_path / "flat"
    write_image(flat_dir / "phantom_0000.png",
                np.zeros((1, 16, 16), np.float32))
    masks = tmp_path / "masks"
    shutil.copytree(ws["masks"], masks, dirs_exist_ok=True)
    out = tmp_path / "report"
    cfg = write_cfg(tmp_path / "e.json", version=1, out=str(out),
                    data={"reference": str(flat_dir),
                          "candidate": str(flat_dir),
                          "masks": str(masks)})
    assert main(["eval", "--config", cfg]) == 0
    assert "fcnr skipped" in capsys.readouterr().err
    lines = (out / "metrics.csv").read_text().strip().splitlines()
    assert lines[1].split(",")[1] == ""


# ------------------------------------------------------- usage and errors

def test_usage_errors_exit_one(tmp_path):
    for argv in ([], ["transmogrify", "--config", "x.json"],
                 ["train"], ["train", "--config", "x.json", "--stride", "0"],
                 ["train", "--config", "x.json", "--seed", "-3"],
                 ["train", "--config", "x.json", "--sampler", "euler"]):
        with pytest.raises(SystemExit) as info:
            main(argv)
        assert info.value.code == 1


@pytest.mark.parametrize("mutate", [
    lambda c: c.pop("version"),
    lambda c: c.update(version=7),
    lambda c: c.update(mode="eval"),
    lambda c: c.update(typo_section={}),
    lambda c: c.pop("out"),
    lambda c: c.update(seed=-1),
    lambda c: c.update(seed="zero"),
])
def test_config_problems_exit_two(ws, tmp_path, mutate):
    cfg = dict(version=1, seed=0, out=str(tmp_path / "o"),
               mode="phantom", phantom={"count": 1, "size": 16,
                                        "channels": 1})
    mutate(cfg)
    assert main(["phantom", "--config",
                 write_cfg(tmp_path / "c.json", **cfg)]) == 2


def test_missing_or_malformed_config_file_exits_two(tmp_path):
    assert main(["train", "--config", str(tmp_path / "absent.json")]) == 2
    broken = tmp_path / "broken.json"
    broken.write_text("{")
    assert main(["train", "--config", str(broken)]) == 2


def test_bad_checkpoint_exits_two(ws, tmp_path):
    fake = tmp_path / "fake.ckpt"
    fake.write_bytes(b"not a checkpoint at all")
    cfg = write_cfg(tmp_path / "e.json", version=1, out=str(tmp_path / "o"),
                    data={"input": str(ws["degraded"]),
                          "checkpoint": str(fake)})
    assert main(["enhance", "--config", cfg]) == 2
    cfg = write_cfg(tmp_path / "e2.json", version=1, out=str(tmp_path / "o"),
                    data={"input": str(ws["degraded"]),
                          "checkpoint": str(tmp_path / "absent.ckpt")})
    assert main(["enhance", "--config", cfg]) == 2


def test_invalid_thread_cap_exits_one(ws, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("LED_THREADS", "lots")
    assert main(["phantom", "--config", str(tmp_path / "x.json")]) == 1
    assert "LED_THREADS" in capsys.readouterr().err


def test_console_script_is_wired():
    if shutil.which("led") is None:
        pytest.skip("console script not on PATH")
    result = subprocess.run(["led", "--help"], capture_output=True, text=True)
    assert result.returncode == 0
    assert "train" in result.stdout and "--config" in result.stdout
