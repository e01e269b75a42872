import csv
import math
import struct

import numpy as np
import pytest

from memseg import scenes as sc
from memseg.diffnum import NonFiniteError
from memseg.training import (
    SGD,
    TrainConfig,
    TrainingDiverged,
    augment,
    build_model,
    fit,
    hflip,
    poly_lr,
    read_checkpoint,
    restore,
    save_checkpoint,
    sgd_update,
    transform,
)

TINY = dict(widths=(4, 8), output_stride=4, K=4, batch_size=4, epochs=4, checkpoint_every=2)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    return sc.make_split(d, counts=(12, 8), seed=0, params=sc.SceneParams(height=32, width=32))


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- schedule ----------------------------------------------------------------


def test_poly_lr_examples():
    assert poly_lr(0, 100) == 0.01
    assert poly_lr(100, 100) == 0.0
    assert poly_lr(50, 100) == pytest.approx(0.0053589, abs=5e-8)
    assert poly_lr(50, 100) == 0.01 * 0.5**0.9


def test_poly_lr_monotone_and_bounded():
    lrs = [poly_lr(i, 37) for i in range(38)]
    assert all(b < a for a, b in zip(lrs, lrs[1:]))
    with pytest.raises(ValueError):
        poly_lr(38, 37)


# -- optimizer ---------------------------------------------------------------


def test_sgd_plain_step():
    w, v = np.array([1.0, -2.0]), np.zeros(2)
    sgd_update(w, np.array([0.5, 0.5]), v, lr=0.1, momentum=0.0)
    np.testing.assert_allclose(w, [0.95, -2.05], rtol=1e-15)


def test_sgd_velocity_decays_geometrically_without_gradient():
    w, v = np.zeros(1), np.array([1.0])
    for k in range(1, 6):
        sgd_update(w, np.zeros(1), v, lr=0.0, momentum=0.9)
        assert v[0] == pytest.approx(0.9**k, rel=1e-14)


def test_sgd_two_steps_by_hand():
    # f = w^2 so grad = 2w; lr 0.1, momentum 0.9, decay 0.01
    w, v = np.array([1.0]), np.zeros(1)
    sgd_update(w, 2 * w, v, 0.1, 0.9, 0.01)
    assert (v[0], w[0]) == pytest.approx((2.01, 0.799), rel=1e-14)
    sgd_update(w, 2 * w, v, 0.1, 0.9, 0.01)
    v2 = 0.9 * 2.01 + 2 * 0.799 + 0.01 * 0.799
    assert (v[0], w[0]) == pytest.approx((v2, 0.799 - 0.1 * v2), rel=1e-14)


def test_sgd_rejects_nan_gradient_by_name():
    with pytest.raises(NonFiniteError, match="enc0.w"):
        sgd_update(np.zeros(2), np.array([0.0, np.nan]), np.zeros(2), 0.1, name="enc0.w")


def test_weight_decay_skips_memory_items():
    model = build_model(TrainConfig(item_grad=True, **TINY))
    params = model.trainable()
    assert "memory.items" in params
    for t in params.values():
        t.grad = np.zeros_like(t.data)
    before = {k: t.data.copy() for k, t in params.items()}
    SGD(0.9, 0.1).step(params, lr=1.0)
    np.testing.assert_array_equal(params["memory.items"].data, before["memory.items"])
    w = "enc0.w"
    np.testing.assert_allclose(params[w].data, before[w] * 0.9, rtol=1e-14)


# -- augmentation ------------------------------------------------------------


def _sample(seed=0, H=16, W=20):
    rng = np.random.default_rng(seed)
    return rng.uniform(size=(3, H, W)), rng.integers(0, 6, (H, W)).astype(np.uint8)


def test_double_flip_is_identity():
    x, y = _sample()
    x2, y2 = hflip(*hflip(x, y))
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(y2, y)


def test_identity_transform():
    x, y = _sample(1)
    x2, y2 = transform(x, y)
    np.testing.assert_array_equal(x2, x)
    np.testing.assert_array_equal(y2, y)


def test_flip_mirrors_columns():
    x, y = _sample(2)
    x2, y2 = transform(x, y, flip=True)
    np.testing.assert_array_equal(x2[:, :, 0], x[:, :, -1])
    np.testing.assert_array_equal(y2[:, 3], y[:, -4])


@pytest.mark.parametrize("seed", range(8))
def test_augment_keeps_shape_and_label_ids(seed):
    x, y = _sample(seed)
    x2, y2 = augment(x, y, seed)
    assert x2.shape == x.shape and y2.shape == y.shape
    assert set(np.unique(y2)) <= set(np.unique(y))
    assert x2.min() >= x.min() - 1e-12 and x2.max() <= x.max() + 1e-12


def test_augment_is_seeded():
    x, y = _sample(3)
    a, b = augment(x, y, 42), augment(x, y, 42)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])


def test_augment_switched_off_is_identity():
    x, y = _sample(4)
    cfg = TrainConfig(augment_flip=False, augment_scale=False, augment_rotate=False)
    for s in range(5):
        x2, y2 = augment(x, y, s, cfg)
        np.testing.assert_array_equal(x2, x)
        np.testing.assert_array_equal(y2, y)


# -- config and checkpoints --------------------------------------------------


def test_config_text_round_trip(tmp_path):
    cfg = TrainConfig(lr0=0.003, widths=(4, 8, 8), use_memory=False, scale_range=(0.75, 1.5), seed=9)
    cfg.save(tmp_path / "c.cfg")
    assert TrainConfig.load(tmp_path / "c.cfg") == cfg
    assert TrainConfig.from_text("# only a comment\nK = 7  # trailing\n") == TrainConfig(K=7)


def test_config_rejects_unknown_and_malformed_keys():
    with pytest.raises(ValueError, match="unknown key 'lr'"):
        TrainConfig.from_text("lr = 0.1\n")
    with pytest.raises(ValueError, match="line 2"):
        TrainConfig.from_text("K = 3\nbeta 0.1\n")
    with pytest.raises(ValueError, match="cannot parse"):
        TrainConfig.from_text("use_memory = maybe\n")


def test_checkpoint_round_trip(tmp_path):
    cfg = TrainConfig(**TINY)
    model = build_model(cfg)
    model.bank.gamma.data[...] = 0.37
    opt = SGD()
    opt.velocity = {k: np.full_like(t.data, 0.5) for k, t in model.trainable().items()}
    path = tmp_path / "m.msck"
    save_checkpoint(path, cfg, model, opt, {"epoch": 3})
    raw = path.read_bytes()
    assert raw[:4] == b"MSCK" and struct.unpack_from("<H", raw, 4) == (1,)
    ck = read_checkpoint(path)
    assert ck.config == cfg and ck.state == {"epoch": 3} and ck.gamma == 0.37
    m2, o2 = restore(ck)
    for k, t in model.params.items():
        np.testing.assert_array_equal(m2.params[k].data, t.data)
    np.testing.assert_array_equal(m2.bank.items.data, model.bank.items.data)
    assert o2.velocity.keys() == opt.velocity.keys()
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_without_bank(tmp_path):
    cfg = TrainConfig(use_memory=False, **TINY)
    save_checkpoint(tmp_path / "b.msck", cfg, build_model(cfg))
    ck = read_checkpoint(tmp_path / "b.msck")
    assert ck.bank_items is None and ck.gamma is None
    assert restore(ck)[0].bank is None


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x").write_bytes(b"SGPK" + bytes(32))
    with pytest.raises(ValueError, match="not a checkpoint"):
        read_checkpoint(tmp_path / "x")


def test_memory_and_baseline_share_initial_weights():
    a = build_model(TrainConfig(**TINY))
    b = build_model(TrainConfig(use_memory=False, **TINY))
    for k, t in b.params.items():
        np.testing.assert_array_equal(a.params[k].data, t.data)


# -- training loop -----------------------------------------------------------


def test_fit_logs_and_schedule(tiny_data, tmp_path):
    train, _ = tiny_data
    cfg = TrainConfig(**TINY)
    res = fit(cfg, train, tmp_path)
    steps = rows(res.steps_log)
    assert len(steps) == 4 * 3 and res.epochs_done == 4
    total = len(steps)
    for r in steps:
        it = int(r["iteration"])
        assert abs(float(r["lr"]) - 0.01 * (1 - it / total) ** 0.9) <= 1e-12
        assert float(r["loss"]) == pytest.approx(float(r["l_ce"]) + 0.05 * float(r["l_trip"]), abs=1e-12)
    assert [int(r["epoch"]) for r in rows(res.metrics_log)] == [0, 1, 2, 3]
    assert read_checkpoint(res.checkpoint).state["epoch"] == 4


def test_fit_is_deterministic(tiny_data, tmp_path):
    train, _ = tiny_data
    cfg = TrainConfig(**TINY)
    a = fit(cfg, train, tmp_path / "a")
    b = fit(cfg, train, tmp_path / "b")
    assert a.steps_log.read_bytes() == b.steps_log.read_bytes()
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


def test_resume_matches_uninterrupted_run(tiny_data, tmp_path):
    train, _ = tiny_data
    cfg = TrainConfig(**TINY)
    full = fit(cfg, train, tmp_path / "full")
    part = fit(cfg, train, tmp_path / "part", stop_after_epoch=2)
    assert part.epochs_done == 2
    resumed = fit(cfg, train, tmp_path / "part", resume_from=part.checkpoint)
    assert resumed.steps_log.read_bytes() == full.steps_log.read_bytes()
    assert resumed.metrics_log.read_bytes() == full.metrics_log.read_bytes()
    assert resumed.checkpoint.read_bytes() == full.checkpoint.read_bytes()


def test_resume_rejects_changed_config(tiny_data, tmp_path):
    train, _ = tiny_data
    part = fit(TrainConfig(**TINY), train, tmp_path, stop_after_epoch=2)
    with pytest.raises(ValueError, match="config differs"):
        fit(TrainConfig(beta=0.1, **TINY), train, tmp_path, resume_from=part.checkpoint)


def test_divergence_keeps_last_checkpoint(tiny_data, tmp_path):
    train, _ = tiny_data
    cfg = TrainConfig(lr0=1e8, **TINY)
    with pytest.raises(TrainingDiverged, match="non-finite"):
        fit(cfg, train, tmp_path)
    ck = read_checkpoint(tmp_path / "checkpoint.msck")
    assert ck.state["epoch"] == 0
    assert all(np.all(np.isfinite(a)) for a in ck.params.values())


def test_fit_rejects_class_count_mismatch(tiny_data, tmp_path):
    with pytest.raises(ValueError, match="classes"):
        fit(TrainConfig(n_classes=5, **TINY), tiny_data[0], tmp_path)


def test_unit_norm_items_after_training(tiny_data, tmp_path):
    res = fit(TrainConfig(**TINY), tiny_data[0], tmp_path)
    n = np.linalg.norm(res.model.bank.items.data, axis=1)
    assert np.all(np.abs(n - 1) <= 1e-9)
    assert not math.isnan(float(res.model.bank.gamma.data))
