"""Denoiser network, optimizer, and checkpoint format tests."""

import struct

import numpy as np
import pytest

from led import nn
from led import tensor as T
from led.schedule import make_schedule


def randomize(model, rng, scale=0.3):
    # nonzero head so gradients reach every layer; gains stay near 1
    for name, p in model.parameters().items():
        p.data = rng.uniform(-scale, scale, p.shape).astype(np.float32)
        if name.endswith(".gain"):
            p.data += 1.0


def small_model(rng=None, **kw):
    kw.setdefault("image_channels", 1)
    kw.setdefault("base_channels", 4)
    kw.setdefault("depth", 2)
    kw.setdefault("time_dim", 8)
    return nn.Denoiser(rng=rng, **kw)


def test_sinusoidal_embedding_fixtures():
    emb = nn.sinusoidal_embedding([0], 4)
    assert np.allclose(emb, [[0.0, 0.0, 1.0, 1.0]])
    emb = nn.sinusoidal_embedding([1], 4)
    expected = [np.sin(1.0), np.sin(0.01), np.cos(1.0), np.cos(0.01)]
    assert np.allclose(emb[0], expected, atol=1e-6)
    assert emb.shape == (1, 4)
    with pytest.raises(ValueError):
        nn.sinusoidal_embedding([1], 5)


def test_untrained_model_predicts_zero():
    model = small_model(np.random.default_rng(0))
    x = T.Tensor(np.random.default_rng(1).uniform(-1, 1, (2, 1, 8, 8)))
    out = model.forward(x, np.array([1, 5]), x)
    assert out.shape == (2, 1, 8, 8)
    assert np.all(out.data == 0.0)


def test_forward_is_pure_and_deterministic():
    rng = np.random.default_rng(2)
    model = small_model(np.random.default_rng(0))
    randomize(model, rng)
    x = T.Tensor(rng.uniform(-1, 1, (2, 1, 8, 8)).astype(np.float32))
    c = T.Tensor(rng.uniform(-1, 1, (2, 1, 8, 8)).astype(np.float32))
    t = np.array([3, 7])
    a = model.forward(x, t, c)
    b = model.forward(x, t, c)
    assert np.array_equal(a.data, b.data)
    assert a._node_id is None
    assert all(p.grad is None for p in model.parameters().values())


def test_batch_permutation_equivariance():
    rng = np.random.default_rng(3)
    model = small_model(np.random.default_rng(0))
    randomize(model, rng)
    x = rng.uniform(-1, 1, (4, 1, 8, 8)).astype(np.float32)
    c = rng.uniform(-1, 1, (4, 1, 8, 8)).astype(np.float32)
    t = np.array([1, 4, 9, 2])
    perm = np.array([2, 0, 3, 1])
    out = model.forward(T.Tensor(x), t, T.Tensor(c)).data
    out_perm = model.forward(T.Tensor(x[perm]), t[perm], T.Tensor(c[perm])).data
    assert np.array_equal(out_perm, out[perm])


def test_output_depends_on_step_and_condition():
    rng = np.random.default_rng(4)
    model = small_model(np.random.default_rng(0))
    randomize(model, rng)
    x = T.Tensor(rng.uniform(-1, 1, (1, 1, 8, 8)).astype(np.float32))
    c1 = T.Tensor(rng.uniform(-1, 1, (1, 1, 8, 8)).astype(np.float32))
    c2 = T.Tensor(rng.uniform(-1, 1, (1, 1, 8, 8)).astype(np.float32))
    base = model.forward(x, np.array([2]), c1).data
    assert not np.array_equal(model.forward(x, np.array([9]), c1).data, base)
    assert not np.array_equal(model.forward(x, np.array([2]), c2).data, base)


def test_forward_shape_validation():
    model = small_model(np.random.default_rng(0))
    x = T.Tensor(np.zeros((1, 1, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError):
        model.forward(x, np.array([1]), T.Tensor(np.zeros((1, 1, 4, 4))))
    with pytest.raises(ValueError):
        model.forward(T.Tensor(np.zeros((1, 1, 6, 6))), np.array([1]),
                      T.Tensor(np.zeros((1, 1, 6, 6))))
    with pytest.raises(ValueError):
        model.forward(x, np.array([1, 2]), x)
    with pytest.raises(ValueError):
        model.forward(T.Tensor(np.zeros((1, 2, 8, 8))), np.array([1]),
                      T.Tensor(np.zeros((1, 2, 8, 8))))


def test_full_model_gradients_match_finite_differences():
    rng = np.random.default_rng(5)
    model = small_model(np.random.default_rng(0))
    randomize(model, rng)
    xd = rng.uniform(-1, 1, (2, 1, 8, 8)).astype(np.float32)
    cd = rng.uniform(-1, 1, (2, 1, 8, 8)).astype(np.float32)
    td = rng.standard_normal((2, 1, 8, 8)).astype(np.float32)
    t = np.array([3, 7])

    def loss_value():
        diff = model.forward(T.Tensor(xd), t, T.Tensor(cd)) - T.Tensor(td)
        return T.reduce_mean(diff * diff)

    params = model.parameters()
    with T.Tape():
        T.backward(loss_value())
    names = rng.choice(sorted(params), size=6, replace=False)
    h = 1e-3
    for name in names:
        p = params[name]
        idx = tuple(rng.integers(0, d) for d in p.shape)
        analytic = float(p.grad[idx])
        orig = p.data[idx].copy()
        p.data[idx] = orig + h
        hi, fp = float(p.data[idx]), loss_value().item()
        p.data[idx] = orig - h
        lo, fm = float(p.data[idx]), loss_value().item()
        p.data[idx] = orig
        numeric = (fp - fm) / (hi - lo)
        assert abs(analytic - numeric) <= 1e-3 * max(1.0, abs(analytic),
                                                     abs(numeric)), \
            f"{name}{idx}: analytic {analytic}, numeric {numeric}"
    for p in params.values():
        p.clear_grad()


def test_parameter_names_and_count():
    model = nn.Denoiser(rng=np.random.default_rng(0))
    params = model.parameters()
    assert "time.weight" in params
    assert "enc0.conv1.kernel" in params
    assert "dec1.tproj.bias" in params
    assert "out.kernel" in params
    assert params["enc0.conv1.kernel"].shape == (16, 2, 3, 3)
    assert 1e5 < model.param_count() < 2e5


def test_adam_first_steps_move_by_lr():
    p = T.Tensor(np.array([1.0, -2.0], dtype=np.float32), requires_grad=True)
    opt = nn.Adam({"p": p}, lr=0.1)
    for k in range(1, 4):
        p.grad = np.array([1.0, -1.0], dtype=np.float32)
        opt.step()
        # constant gradient: bias-corrected moments give a step of exactly
        # lr * sign(g), up to the eps in the denominator
        assert np.allclose(p.data, [1.0 - 0.1 * k, -2.0 + 0.1 * k], atol=1e-6)
        assert p.grad is None
    assert opt.step_count == 3


def test_adam_skips_parameters_without_gradient():
    a = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    b = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = nn.Adam({"a": a, "b": b}, lr=0.5)
    a.grad = np.ones(2, dtype=np.float32)
    opt.step()
    assert not np.array_equal(a.data, np.ones(2))
    assert np.array_equal(b.data, np.ones(2))


def test_cosine_lr_profile():
    assert nn.cosine_lr(2e-4, 0, 30) == pytest.approx(2e-4)
    assert nn.cosine_lr(2e-4, 15, 30) == pytest.approx(1e-4)
    assert nn.cosine_lr(2e-4, 30, 30) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        nn.cosine_lr(2e-4, 31, 30)


def test_checkpoint_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(6)
    model = small_model(np.random.default_rng(1))
    randomize(model, rng)
    sched = make_schedule(20, beta_start=0.01, beta_end=0.1)
    path = tmp_path / "model.ckpt"
    nn.save_checkpoint(path, model, sched)
    loaded, opt_state, sched2 = nn.load_checkpoint(path)
    assert opt_state is None
    assert (loaded.image_channels, loaded.base_channels,
            loaded.depth, loaded.time_dim) == (1, 4, 2, 8)
    for name, p in model.parameters().items():
        assert np.array_equal(loaded.parameters()[name].data, p.data)
    assert sched2.kind == "linear" and sched2.steps == 20
    assert np.array_equal(sched2.beta, sched.beta)
    path2 = tmp_path / "resaved.ckpt"
    nn.save_checkpoint(path2, loaded, sched2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_optimizer_state_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    model = small_model(np.random.default_rng(1))
    randomize(model, rng)
    params = model.parameters()
    opt = nn.Adam(params, lr=1e-3)
    for p in params.values():
        p.grad = rng.standard_normal(p.shape).astype(np.float32)
    opt.step()
    sched = make_schedule(20, beta_start=0.01, beta_end=0.1)
    path = tmp_path / "with_opt.ckpt"
    nn.save_checkpoint(path, model, sched, optimizer=opt)
    loaded, state, _ = nn.load_checkpoint(path)
    assert state["step"] == 1
    opt2 = nn.Adam(loaded.parameters(), lr=1e-3)
    opt2.load_state(state)
    for name in params:
        assert np.array_equal(opt2.m[name], opt.m[name])
        assert np.array_equal(opt2.v[name], opt.v[name])


def test_checkpoint_byte_layout(tmp_path):
    model = small_model(np.random.default_rng(1), depth=1)
    sched = make_schedule(10, beta_start=0.1, beta_end=0.2)
    path = tmp_path / "layout.ckpt"
    nn.save_checkpoint(path, model, sched)
    blob = path.read_bytes()
    params = model.parameters()

    assert blob[:8] == b"LEDCKPT1"
    version, count = struct.unpack_from("<II", blob, 8)
    assert version == 1 and count == len(params)
    pos = 16
    for name, p in params.items():
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        assert blob[pos:pos + name_len].decode() == name
        pos += name_len
        (rank,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", blob, pos)
        pos += 4 * rank
        assert shape == p.shape
        payload = np.frombuffer(blob, dtype="<f4", count=p.size, offset=pos)
        assert np.array_equal(payload.reshape(p.shape), p.data)
        pos += 4 * p.size
    (opt_flag,) = struct.unpack_from("<B", blob, pos)
    pos += 1
    assert opt_flag == 0
    steps, bstart, bend = struct.unpack_from("<Idd", blob, pos)
    pos += 20
    assert (steps, bstart, bend) == (10, 0.1, 0.2)
    (kind_len,) = struct.unpack_from("<H", blob, pos)
    pos += 2
    assert blob[pos:pos + kind_len] == b"linear"
    assert pos + kind_len == len(blob)


def test_checkpoint_error_cases(tmp_path):
    model = small_model(np.random.default_rng(1), depth=1)
    sched = make_schedule(10, beta_start=0.1, beta_end=0.2)
    path = tmp_path / "good.ckpt"
    nn.save_checkpoint(path, model, sched)
    blob = path.read_bytes()

    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + blob[8:])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(bad)
    bad.write_bytes(blob[:len(blob) // 2])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(bad)
    bad.write_bytes(blob + b"\x00")
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(bad)
    bad.write_bytes(blob[:8] + struct.pack("<I", 9) + blob[12:])
    with pytest.raises(nn.CheckpointError):
        nn.load_checkpoint(bad)
