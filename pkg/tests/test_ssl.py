import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csvt import tensor as T
from csvt.model import CsvtConfig, CsvtModel
from csvt.ssl import (LAMBDA_START, ProjectionHead, SslConfig, augment, center_update,
                      distill_loss, ema_update, entropy, init_state, lambda_schedule, make_views,
                      multi_crop, multi_view_loss, pretrain, smoothed, solarize,
                      ssl_checkpoint_tensors, teacher_probs, write_loss_log)
from csvt.tensor import Tensor
from csvt.tensor.checkpoint import load

from oracles import mp_cross_entropy, mp_softmax

TINY = CsvtConfig(image_size=16, patch_size=4, embed_dim=8, num_layers=2, num_heads=2)


def tiny_ssl(**kw):
    base = dict(epochs=2, batch_size=4, warmup_epochs=1, global_size=16, local_size=8,
                local_views=2, head_hidden=16, head_bottleneck=8, head_out=12)
    base.update(kw)
    return SslConfig(**base)


# -- schedules and EMA ----------------------------------------------------


def test_lambda_endpoints():
    assert lambda_schedule(0, 100) == LAMBDA_START == 0.996
    assert lambda_schedule(100, 100) == 1.0
    assert lambda_schedule(50, 100) == pytest.approx(0.998)
    with pytest.raises(ValueError):
        lambda_schedule(101, 100)


def test_lambda_monotone():
    vals = [lambda_schedule(s, 37) for s in range(38)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_ema_endpoints():
    rng = np.random.default_rng(0)
    s = {"w": Tensor(rng.standard_normal((3, 2)))}
    t0 = {"w": Tensor(rng.standard_normal((3, 2)))}
    before = t0["w"].data.copy()
    ema_update(t0, s, 1.0)
    np.testing.assert_array_equal(t0["w"].data, before)
    ema_update(t0, s, 0.0)
    np.testing.assert_array_equal(t0["w"].data, s["w"].data)


def test_ema_midpoint_and_errors():
    t, s = {"w": Tensor([0.0, 2.0])}, {"w": Tensor([4.0, 4.0])}
    ema_update(t, s, 0.75)
    np.testing.assert_allclose(t["w"].data, [1.0, 2.5])
    with pytest.raises(ValueError):
        ema_update({"w": Tensor([0.0])}, {"v": Tensor([0.0])}, 0.5)
    with pytest.raises(ValueError):
        ema_update({"w": Tensor([0.0])}, {"w": Tensor([0.0, 1.0])}, 0.5)


def test_center_update():
    c = center_update(np.zeros(3), np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]]), 0.9)
    np.testing.assert_allclose(c, [0.2, 0.2, 0.2])
    with pytest.raises(ValueError):
        center_update(np.zeros(3), np.zeros((0, 3)), 0.9)


# -- loss -----------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_distill_loss_matches_high_precision(seed):
    rng = np.random.default_rng(seed)
    t, s, c = rng.standard_normal((3, 6)), rng.standard_normal((3, 6)), rng.standard_normal(6)
    with T.precision("f64"):
        got = float(distill_loss(t, Tensor(s), c, 0.04, 0.1).data)
    ref = np.mean([mp_cross_entropy(mp_softmax((t[i] - c) / 0.04), s[i] / 0.1) for i in range(3)])
    assert got == pytest.approx(ref, rel=1e-12)


def test_teacher_probs_sharpen():
    z = np.array([[0.0, 1.0]])
    hot = teacher_probs(z, np.zeros(2), 0.04)
    warm = teacher_probs(z, np.zeros(2), 1.0)
    assert hot[0, 1] > warm[0, 1]
    np.testing.assert_allclose(hot.sum(), 1.0)


def test_multi_view_loss_skips_same_view():
    rng = np.random.default_rng(0)
    t = [rng.standard_normal((2, 5)) for _ in range(2)]
    c = np.zeros(5)
    with T.precision("f64"):
        s = [Tensor(rng.standard_normal((2, 5))) for _ in range(4)]
        got = float(multi_view_loss(t, s, c, 0.04, 0.1).data)
        pairs = [float(distill_loss(t[i], s[v], c, 0.04, 0.1).data)
                 for i in range(2) for v in range(4) if v != i]
    assert len(pairs) == 6
    assert got == pytest.approx(np.mean(pairs), rel=1e-12)
    with pytest.raises(ValueError):
        multi_view_loss(t[:1], s[:1], c, 0.04, 0.1)


def test_teacher_gets_no_gradient():
    rng = np.random.default_rng(0)
    t = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    s = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    T.reset_tape()
    T.backward(distill_loss(t, s, np.zeros(4), 0.04, 0.1))
    assert t.grad is None
    assert s.grad is not None and np.abs(s.grad).sum() > 0


def test_entropy_bounds():
    assert entropy(np.full(8, 1 / 8)) == pytest.approx(math.log(8))
    assert entropy(np.eye(4)[0]) == 0.0


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 2, 3, 4], 2), [1.5, 2.5, 3.5])
    np.testing.assert_allclose(smoothed([5.0], 10), [5.0])


def test_projection_head_outputs_cosines():
    head = ProjectionHead(8, 16, 4, 10, seed=0)
    out = head(Tensor(np.random.default_rng(0).standard_normal((5, 8)) * 100)).data
    assert out.shape == (5, 10)
    assert np.abs(out).max() <= 1 + 1e-5


# -- multi-crop -----------------------------------------------------------


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(24, 64))
def test_multi_crop_area_bounds(seed, side):
    img = np.random.default_rng(seed).uniform(0, 1, (side, side + 3, 3)).astype(np.float32)
    crops = multi_crop(img, np.random.default_rng(seed), m=4, global_size=24, local_size=12)
    area = side * (side + 3)
    assert len(crops.globals) == 2 and len(crops.locals) == 4
    for i, (_, _, h, w) in enumerate(crops.rects):
        frac = h * w / area
        if i < 2:
            assert 0.5 <= frac <= 1.0
        else:
            assert 0.05 <= frac < 0.5
    assert all(v.shape == (24, 24, 3) for v in crops.globals)
    assert all(v.shape == (12, 12, 3) for v in crops.locals)


def test_multi_crop_rejects_small_source():
    with pytest.raises(ValueError):
        multi_crop(np.zeros((20, 20, 3)), np.random.default_rng(0), global_size=24)


def test_views_deterministic_and_in_range():
    img = np.random.default_rng(0).uniform(0, 1, (32, 32, 3)).astype(np.float32)
    cfg = tiny_ssl(global_size=32, local_size=16)
    a = make_views(img, np.random.default_rng(5), cfg)
    b = make_views(img, np.random.default_rng(5), cfg)
    assert len(a) == 2 + cfg.local_views
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()
        assert x.dtype == np.float32 and x.min() >= 0 and x.max() <= 1


def test_solarize_and_augment():
    img = np.array([[[0.2, 0.5, 0.9]]], dtype=np.float32)
    np.testing.assert_allclose(solarize(img), [[[0.2, 0.5, 0.1]]], atol=1e-7)
    out = augment(np.full((8, 8, 3), 0.5, dtype=np.float32), np.random.default_rng(0))
    assert out.shape == (8, 8, 3) and out.dtype == np.float32


# -- training loop --------------------------------------------------------


def test_short_pretrain_runs_and_logs(tmp_path):
    imgs = np.random.default_rng(0).uniform(0, 1, (8, 16, 16, 3)).astype(np.float32)
    cfg = tiny_ssl()
    state = pretrain(imgs, TINY, cfg, ckpt_path=tmp_path / "s.ckpt", log_path=tmp_path / "l.csv")
    assert state.step == state.total_steps == 4
    lams = [r[4] for r in state.log]
    assert lams[0] == LAMBDA_START
    assert all(math.isfinite(r[5]) for r in state.log)
    assert all(0 <= r[6] <= math.log(cfg.head_out) + 1e-9 for r in state.log)
    header = (tmp_path / "l.csv").read_text().splitlines()[0]
    assert header == "step,epoch,lr,wd,lambda,loss,teacher_entropy"
    ckpt = load(tmp_path / "s.ckpt")
    assert "ssl.center" in ckpt and "head.weight" not in ckpt
    model = CsvtModel(TINY)
    assert model.load_state_dict(ckpt, strict=False, skip_prefixes=("ssl.", "head.")) == []


def test_pretrain_is_deterministic():
    imgs = np.random.default_rng(0).uniform(0, 1, (8, 16, 16, 3)).astype(np.float32)
    a = pretrain(imgs, TINY, tiny_ssl(epochs=1))
    b = pretrain(imgs, TINY, tiny_ssl(epochs=1))
    assert a.log == b.log
    ta, tb = ssl_checkpoint_tensors(a), ssl_checkpoint_tensors(b)
    assert all(ta[k].tobytes() == tb[k].tobytes() for k in ta)


def test_teacher_is_ema_of_student():
    imgs = np.random.default_rng(1).uniform(0, 1, (4, 16, 16, 3)).astype(np.float32)
    cfg = tiny_ssl(epochs=1)
    state = init_state(TINY, cfg)
    t0 = {k: v.data.copy() for k, v in state.teacher.params.items()}
    pretrain(imgs, TINY, cfg, state=state)
    lam = LAMBDA_START  # one step, taken at step 0
    for k, v in state.teacher.params.items():
        np.testing.assert_allclose(v.data, lam * t0[k] + (1 - lam) * state.student.params[k].data,
                                   rtol=1e-5, atol=1e-7)


def test_center_fixed_without_centering():
    imgs = np.random.default_rng(1).uniform(0, 1, (4, 16, 16, 3)).astype(np.float32)
    state = pretrain(imgs, TINY, tiny_ssl(epochs=2, centering=False))
    np.testing.assert_array_equal(state.center, 0.0)


def test_pool_option():
    with pytest.raises(ValueError):
        SslConfig(pool="max")
    imgs = np.random.default_rng(1).uniform(0, 1, (2, 16, 16, 3)).astype(np.float32)
    for pool in ("mean", "cls"):
        state = init_state(TINY, tiny_ssl(pool=pool))
        assert state.student.features(imgs).shape == (2, 8)


def test_loss_log_writer(tmp_path):
    write_loss_log(tmp_path / "x.csv", [(0, 0, 0.1, 0.04, 0.996, 5.0, 2.0)])
    assert (tmp_path / "x.csv").read_text().splitlines()[1] == "0,0,0.1,0.04,0.996,5.0,2.0"
