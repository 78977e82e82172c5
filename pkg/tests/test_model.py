import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from univip.model import (
    ArchConfig,
    CheckpointError,
    ModelState,
    ema_update,
    is_shared,
    load_checkpoint,
    momentum_schedule,
    save_checkpoint,
)

SMALL = ArchConfig(channels=(4, 8), proj_hidden=8, proj_dim=6, pred_hidden=8, K=3)


def state(seed=0, dtype=np.float32, arch=SMALL):
    return ModelState.create(arch, np.random.default_rng(seed), dtype)


def images(n=3, size=16, seed=1):
    return np.random.default_rng(seed).random((n, 3, size, size))


# -- construction and forward shapes ---------------------------------------------


def test_target_starts_as_copy_without_predictor_or_fusion():
    s = state()
    assert set(s.target) == {k for k in s.online if is_shared(k)}
    assert not any(k.startswith(("pred.", "fuse.")) for k in s.target)
    for k, v in s.target.items():
        np.testing.assert_array_equal(v.data, s.online[k].data)
        assert v.data is not s.online[k].data


def test_forward_shapes():
    s = state()
    x = images()
    assert s.forward_online_scene(x).shape == (3, 6)
    assert s.forward_target_scene(x).shape == (3, 6)
    assert s.encode_frozen(x).shape == (3, 8)


def test_target_output_is_detached():
    assert not state().forward_target_scene(images()).requires_grad


def test_bad_input_shape():
    with pytest.raises(ValueError):
        state().forward_online_scene(np.zeros((2, 1, 16, 16)))


def test_fuse_shapes_and_initial_block_average():
    s = state()
    O = np.random.default_rng(2).normal(size=(3, 6)).astype(np.float32)
    out = s.fuse_instances(s.as_input(O))
    assert out.shape == (6,)
    np.testing.assert_allclose(out.data, O.mean(axis=0), atol=0.1)
    assert s.fuse_instances(s.as_input(np.stack([O, O]))).shape == (2, 6)
    with pytest.raises(ValueError):
        s.fuse_instances(s.as_input(O[:2]))


# -- EMA ---------------------------------------------------------------------------


def test_ema_closed_form_100_steps():
    s = state(dtype=np.float64)
    xi0 = {k: v.data.copy() for k, v in s.target.items()}
    theta = {k: np.random.default_rng(3).normal(size=v.shape) for k, v in s.target.items()}
    for k, v in theta.items():
        s.online[k].data = v
    m, n = 0.99, 100
    for _ in range(n):
        ema_update(s, m)
    worst = max(np.abs(s.target[k].data - (m**n * xi0[k] + (1 - m**n) * theta[k])).max() for k in theta)
    assert worst < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0))
def test_ema_single_step_is_convex_combination(m):
    s = state(dtype=np.float64)
    for v in s.online.values():
        v.data = v.data + 1.0
    before = {k: v.data.copy() for k, v in s.target.items()}
    ema_update(s, m)
    for k, v in s.target.items():
        np.testing.assert_allclose(v.data, m * before[k] + (1 - m) * s.online[k].data, atol=1e-14)


def test_ema_m1_freezes_and_m0_copies():
    s = state(dtype=np.float64)
    for v in s.online.values():
        v.data = v.data * 2 + 1
    before = {k: v.data.copy() for k, v in s.target.items()}
    ema_update(s, 1.0)
    for k, v in s.target.items():
        np.testing.assert_array_equal(v.data, before[k])
    ema_update(s, 0.0)
    for k, v in s.target.items():
        np.testing.assert_array_equal(v.data, s.online[k].data)


def test_ema_mismatched_parameter_sets():
    s = state()
    del s.target["proj.fc1.b"]
    with pytest.raises(ValueError):
        ema_update(s)


# -- momentum schedule ---------------------------------------------------------------


def test_momentum_endpoints():
    assert momentum_schedule(0, 100, 0.99) == pytest.approx(0.99)
    assert momentum_schedule(100, 100, 0.99) == 1.0
    assert momentum_schedule(50, 100, 0.99) == pytest.approx(0.995)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 500), st.floats(0.0, 0.999))
def test_momentum_monotone(total, m0):
    ms = [momentum_schedule(t, total, m0) for t in range(total + 1)]
    assert all(b >= a - 1e-15 for a, b in zip(ms, ms[1:]))
    assert m0 - 1e-12 <= min(ms) and max(ms) <= 1.0


def test_momentum_errors():
    with pytest.raises(ValueError):
        momentum_schedule(11, 10)
    with pytest.raises(ValueError):
        momentum_schedule(0, 10, 1.0)


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    s = state(5)
    s.step, s.momentum = 17, 0.9931
    ema_update(s, 0.5)
    path = tmp_path / "m.uvip"
    save_checkpoint(path, s)
    r = load_checkpoint(path)
    assert (r.step, r.momentum, r.arch) == (17, 0.9931, SMALL)
    x = images(seed=9)
    for fwd in ("forward_online_scene", "forward_target_scene"):
        a, b = getattr(s, fwd)(x).data, getattr(r, fwd)(x).data
        assert a.tobytes() == b.tobytes()


def test_checkpoint_file_starts_with_magic(tmp_path):
    path = tmp_path / "m.uvip"
    save_checkpoint(path, state())
    assert path.read_bytes()[:4] == b"UVIP"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.uvip"
    path.write_bytes(b"NOPE" + bytes(40))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.uvip"
    save_checkpoint(path, state())
    data = path.read_bytes()
    (tmp_path / "cut.uvip").write_bytes(data[:-10])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "cut.uvip")
    (tmp_path / "head.uvip").write_bytes(data[:30])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "head.uvip")


def test_checkpoint_wrong_version(tmp_path):
    path = tmp_path / "m.uvip"
    save_checkpoint(path, state())
    data = bytearray(path.read_bytes())
    data[4] = 99
    path.write_bytes(bytes(data))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
