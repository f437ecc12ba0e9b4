import numpy as np
import pytest

from msda.checkpoint import (
    CheckpointError,
    TrainState,
    checkpoint_name,
    load_params,
    load_state,
    read_arrays,
    save_params,
    save_state,
    write_arrays,
)
from msda.optim import AdamState

from helpers import tiny_params


def _state():
    params = tiny_params(seed=3)
    opt = AdamState.zeros_like(params.arrays())
    rng = np.random.default_rng(0)
    for k in opt.m:
        opt.m[k] = rng.normal(size=opt.m[k].shape)
        opt.v[k] = rng.random(size=opt.v[k].shape)
    opt.t, opt.skipped = 17, 2
    return TrainState("student", "stage2", params, opt, step=17, epoch=2, seed=5, best_dev_wer=0.25,
                      best_step=12, extra={"gumbel_offset": 40, "guard_recent": [1.0, 2.0]})


def test_state_round_trip_is_exact(tmp_path):
    state = _state()
    path = save_state(tmp_path / checkpoint_name("student", "stage2", 17), state, {"method": "MSDA"})
    back, meta = load_state(path)
    assert meta["method"] == "MSDA" and meta["role"] == "student"
    assert (back.role, back.stage, back.step, back.epoch, back.seed) == ("student", "stage2", 17, 2, 5)
    assert back.best_dev_wer == 0.25 and back.best_step == 12 and back.extra == state.extra
    assert back.optim.t == 17 and back.optim.skipped == 2
    for k, v in state.params.arrays().items():
        assert np.array_equal(back.params.arrays()[k], v)
        assert np.array_equal(back.optim.m[k], state.optim.m[k])
        assert np.array_equal(back.optim.v[k], state.optim.v[k])
    assert back.params.config == state.params.config


def test_unset_best_survives_round_trip(tmp_path):
    state = _state()
    state.best_dev_wer, state.best_step = float("inf"), -1
    back, _ = load_state(save_state(tmp_path / "x.ckpt", state))
    assert back.best_dev_wer == float("inf") and back.best_step == -1


def test_params_only_checkpoint(tmp_path):
    params = tiny_params(seed=1)
    path = save_params(tmp_path / "p.ckpt", params, {"role": "model"})
    back, meta = load_params(path)
    assert meta["role"] == "model"
    for k, v in params.arrays().items():
        assert np.array_equal(back.arrays()[k], v)
    with pytest.raises(CheckpointError, match="training state"):
        load_state(path)


def test_name_format():
    assert checkpoint_name("teacher", "stage2", 120) == "teacher-stage2-120.ckpt"


def test_corrupt_files_raise_checkpoint_error(tmp_path):
    path = tmp_path / "a.ckpt"
    write_arrays(path, {"x": np.arange(6.0).reshape(2, 3)}, {"k": 1})
    arrays, meta = read_arrays(path)
    assert meta == {"k": 1} and arrays["x"].shape == (2, 3)
    raw = path.read_bytes()

    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError, match="past end"):
        read_arrays(path)
    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        read_arrays(path)
    path.write_bytes(raw[:5])
    with pytest.raises(CheckpointError, match="truncated"):
        read_arrays(path)
    bad_header = bytearray(raw)
    bad_header[17] = 0xFF
    path.write_bytes(bytes(bad_header))
    with pytest.raises(CheckpointError, match="header"):
        read_arrays(path)
    with pytest.raises(CheckpointError, match="model_config"):
        write_arrays(path, {"params/x": np.zeros(1)}, {})
        load_params(path)


def test_write_is_atomic_and_leaves_no_temp_file(tmp_path):
    path = tmp_path / "b.ckpt"
    write_arrays(path, {"x": np.zeros(3)}, {})
    write_arrays(path, {"x": np.ones(3)}, {})
    assert np.array_equal(read_arrays(path)[0]["x"], np.ones(3))
    assert [p.name for p in tmp_path.iterdir()] == ["b.ckpt"]
