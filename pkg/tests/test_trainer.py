import csv
import math

import numpy as np
import pytest

from gabic import checkpoint
from gabic import tensor as T
from gabic.data import synthetic_dataset
from gabic.network import GabicModel, ModelConfig
from gabic.trainer import (AdamState, PlateauSchedule, TrainConfig, adam_step, clip_grad_norm, evaluate_loss,
                           plateau_schedule, train)

SMALL = ModelConfig(channels=8, latent_channels=8, hyper_channels=8, num_slices=2, slice_hidden=8)


def test_first_adam_step_has_magnitude_lr(f64):
    p = {"w": T.parameter(np.array([1.0, -2.0, 3.0, 0.5]))}
    grads = {"w": np.array([0.3, -1e-3, 5.0, -0.02])}
    before = p["w"].data.copy()
    adam_step(p, grads, AdamState(), lr=1e-2, clip_norm=None)
    step = before - p["w"].data
    np.testing.assert_allclose(step, 1e-2 * np.sign(grads["w"]), rtol=1e-4)


def test_adam_matches_reference_recurrence(f64):
    rng = np.random.default_rng(0)
    w = T.parameter(rng.normal(size=5))
    ref = w.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = AdamState()
    for t in range(1, 8):
        g = rng.normal(size=5)
        adam_step({"w": w}, {"w": g}, state, 0.1, clip_norm=None)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref -= 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(w.data, ref, rtol=1e-12)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    clipped, norm = clip_grad_norm(grads, 1.0)
    assert norm == pytest.approx(5.0)
    assert math.sqrt(sum(float(np.sum(g ** 2)) for g in clipped.values())) == pytest.approx(1.0)
    same, _ = clip_grad_norm(grads, 10.0)
    assert same is grads


def test_plateau_cuts_after_patience_is_exceeded():
    sched = PlateauSchedule(lr=1.0, factor=0.3, patience=2)
    lrs = [sched.step(v) for v in [5.0, 4.0, 4.0, 4.0, 4.0, 3.0, 3.0, 3.0, 3.0]]
    assert lrs == pytest.approx([1.0, 1.0, 1.0, 1.0, 0.3, 0.3, 0.3, 0.3, 0.09])


def test_plateau_threshold_and_floor():
    sched = PlateauSchedule(lr=1e-6, factor=0.1, patience=0, threshold=0.01, min_lr=1e-7)
    sched.step(1.0)
    assert sched.step(0.995) == pytest.approx(1e-7)
    assert sched.step(0.995) == pytest.approx(1e-7)
    assert plateau_schedule([1.0, 1.0, 1.0], PlateauSchedule(lr=1.0, patience=1)) == pytest.approx(0.3)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(lam=0.0)
    with pytest.raises(ValueError):
        TrainConfig(plateau_factor=1.5)
    assert TrainConfig(attention="dense", k=[3, 5]).model_config().k == (3, 5)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(8, 64, seed=3), synthetic_dataset(2, 64, seed=4)


def _run(tmp_path, tiny_data, **kw):
    images, val = tiny_data
    config = TrainConfig(lam=0.025, crop=64, batch=2, lr0=1e-3, seed=7, max_steps=kw.pop("steps"))
    return train(config, model=GabicModel(SMALL, seed=7), images=images, val_images=val, **kw)


def test_training_log_and_checkpoint(tmp_path, tiny_data):
    out, log = tmp_path / "m.ckpt", tmp_path / "log.csv"
    result = _run(tmp_path, tiny_data, steps=5, out=str(out), log_csv=str(log))
    with open(log) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["step", "loss", "bpp_est", "mse", "psnr", "lr"]
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4, 5]
    assert len(result.val_history) == 1
    model, meta, _ = checkpoint.load(out)
    assert meta["lambda"] == 0.025 and meta["step"] == 4
    assert all(np.isfinite(float(r["loss"])) for r in rows)


def test_resume_continues_exactly(tmp_path, tiny_data):
    with T.precision(64):
        straight = _run(tmp_path, tiny_data, steps=7)
        state = tmp_path / "state.ckpt"
        _run(tmp_path, tiny_data, steps=4, state_out=str(state))
        images, val = tiny_data
        config = TrainConfig(lam=0.025, crop=64, batch=2, lr0=1e-3, seed=7, max_steps=7)
        resumed = train(config, images=images, val_images=val, resume=str(state))
    assert [r["step"] for r in resumed.log] == [5, 6, 7]
    np.testing.assert_array_equal([r["loss"] for r in resumed.log], [r["loss"] for r in straight.log[4:]])
    for k, p in straight.model.params.items():
        np.testing.assert_array_equal(resumed.model.params[k].data, p.data)


def test_training_is_reproducible(tmp_path, tiny_data):
    a = _run(tmp_path, tiny_data, steps=3)
    b = _run(tmp_path, tiny_data, steps=3)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    assert a.model.fingerprint() == b.model.fingerprint()


def test_evaluate_loss_uses_rounding(tiny_data):
    model = GabicModel(SMALL)
    a = evaluate_loss(model, tiny_data[1], 0.025)
    b = evaluate_loss(model, tiny_data[1], 0.025)
    assert a == b
    assert a["loss"] == pytest.approx(a["bpp"] + 0.025 * 255 ** 2 * a["mse"], rel=1e-5)
