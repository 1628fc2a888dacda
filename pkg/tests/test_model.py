import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csvt import tensor as T
from csvt.model import (DESK_CONFIG, FULL_CONFIG, CsvtConfig, CsvtModel, analytic_param_count,
                        cba_forward, channel_attention, model_forward, patchify, sib_forward)
from csvt.tensor import DimensionError, Tensor

from oracles import naive_cba, naive_sib

SMALL = CsvtConfig(image_size=16, patch_size=4, embed_dim=8, num_layers=2, num_heads=2)


def block_params(cfg, seed, jitter=0.3):
    """Block 0 of a fresh model with every tensor perturbed away from its init."""
    rng = np.random.default_rng(seed)
    m = CsvtModel(cfg, seed=seed)
    p = m.block(0)
    for k, v in p.items():
        if isinstance(v, Tensor):
            v.data = v.data + rng.normal(0, jitter, v.shape).astype(v.dtype)
    p["sib.bn.running_mean"][:] = rng.normal(0, 0.5, cfg.embed_dim)
    p["sib.bn.running_var"][:] = rng.uniform(0.5, 2.0, cfg.embed_dim)
    return p


def as_arrays(p):
    return {k: (v.data if isinstance(v, Tensor) else v) for k, v in p.items()}


# -- oracles --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(5))
def test_cba_matches_loop_oracle(seed):
    with T.precision("f64"):
        p = block_params(SMALL, seed)
        x = np.random.default_rng(seed + 100).standard_normal((7, SMALL.embed_dim))
        out = cba_forward(Tensor(x), p).data
    np.testing.assert_allclose(out, naive_cba(x, as_arrays(p)), atol=1e-10)


@pytest.mark.parametrize("seed", range(5))
def test_sib_matches_loop_oracle(seed):
    with T.precision("f64"):
        p = block_params(SMALL, seed)
        x = np.random.default_rng(seed + 200).standard_normal((12, SMALL.embed_dim))
        out = sib_forward(Tensor(x), (3, 4), p, training=False).data
    np.testing.assert_allclose(out, naive_sib(x, (3, 4), as_arrays(p)), atol=1e-10)


def test_sib_passes_class_token_through():
    with T.precision("f64"):
        p = block_params(SMALL, 0)
        x = np.random.default_rng(1).standard_normal((1 + 6, SMALL.embed_dim))
        out = sib_forward(Tensor(x), (2, 3), p, has_class_token=True).data
    np.testing.assert_array_equal(out[0], x[0])
    np.testing.assert_allclose(out[1:], naive_sib(x[1:], (2, 3), as_arrays(p)), atol=1e-10)


def test_sib_rejects_wrong_grid():
    p = block_params(SMALL, 0)
    with pytest.raises(DimensionError):
        sib_forward(Tensor(np.zeros((5, SMALL.embed_dim))), (2, 3), p)


# -- invariants -----------------------------------------------------------


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(2, 12))
def test_cba_permutation_equivariant(seed, n):
    rng = np.random.default_rng(seed)
    with T.precision("f64"):
        p = block_params(SMALL, seed % 7)
        x = rng.standard_normal((n, SMALL.embed_dim))
        perm = rng.permutation(n)
        a = cba_forward(Tensor(x), p).data
        b = cba_forward(Tensor(x[perm]), p).data
    # equal up to the order of the token sums inside K^T Q and the norms
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 10), st.floats(0.1, 100))
def test_normalised_cross_covariance_is_bounded(seed, n, spread):
    rng = np.random.default_rng(seed)
    p = block_params(SMALL, seed % 5, jitter=1.0)
    x = Tensor(rng.standard_normal((1, n, SMALL.embed_dim)) * spread)
    q = T.linear(x, p["wq"], p["bq"]).data.reshape(1, n, 2, 4).transpose(0, 2, 1, 3)
    k = T.linear(x, p["wk"], p["bk"]).data.reshape(1, n, 2, 4).transpose(0, 2, 1, 3)
    qh = T.l2_normalize_cols(Tensor(q)).data
    kh = T.l2_normalize_cols(Tensor(k)).data
    c = np.swapaxes(kh, -1, -2) @ qh
    assert c.shape == (1, 2, 4, 4)
    assert np.all(np.abs(c) <= 1 + 1e-6)
    _, attn = channel_attention(x, p, return_attention=True)
    np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-5)


def test_attention_logits_within_inverse_temperature():
    rng = np.random.default_rng(3)
    p = block_params(SMALL, 3, jitter=1.0)
    with T.precision("f64"):
        x = Tensor(rng.standard_normal((9, SMALL.embed_dim)) * 5)
        _, attn = channel_attention(x, p, return_attention=True)
    tau = np.exp(p["log_tau"].data)
    a = attn.data[0]
    # row max / row min ratio of a softmax over logits in [-1/tau, 1/tau]
    for hd in range(SMALL.num_heads):
        ratio = a[hd].max(axis=-1) / a[hd].min(axis=-1)
        assert np.all(ratio <= np.exp(2 / tau[hd]) * (1 + 1e-9))


def test_variable_input_size_shares_weights():
    cfg = DESK_CONFIG.with_(image_size=224, patch_size=8)
    m = CsvtModel(cfg.with_(embed_dim=16, num_layers=2, num_heads=2), seed=0)
    rng = np.random.default_rng(0)
    big = rng.uniform(0, 1, (224, 224, 3))
    small = rng.uniform(0, 1, (96, 96, 3))
    with T.no_grad():
        tb = m.forward_tokens(big)
        ts = m.forward_tokens(small)
        lb, ls = m.forward(big), m.forward(small)
    assert tb.shape == (1, 1 + 784, 16)
    assert ts.shape == (1, 1 + 144, 16)
    assert lb.shape == ls.shape == (4,)
    assert np.isfinite(lb.data).all() and np.isfinite(ls.data).all()


def test_image_not_divisible_by_patch():
    m = CsvtModel(SMALL, seed=0)
    with pytest.raises(DimensionError):
        m.forward(np.zeros((18, 16, 3)))


def test_config_validation():
    with pytest.raises(ValueError):
        CsvtConfig(image_size=30, patch_size=8)
    with pytest.raises(ValueError):
        CsvtConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ValueError):
        CsvtConfig(num_layers=0)


def test_class_token_enters_only_last_block():
    m = CsvtModel(SMALL, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (2, 16, 16, 3))
    with T.no_grad(), T.trace() as ops:
        m.forward_tokens(x)
    concats = [o for o in ops if o.name == "concat"]
    # one to prepend the token before the last block, one to re-attach it after SIB
    assert len(concats) == 2
    assert concats[0].out_shape == (2, 17, 8)


def test_class_token_from_the_start_when_disabled():
    m = CsvtModel(SMALL.with_(use_class_token_in_last_block=False), seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (1, 16, 16, 3))
    with T.no_grad():
        assert m.forward_tokens(x).shape == (1, 17, 8)


def test_patchify_order():
    img = np.arange(4 * 4 * 1, dtype=float).reshape(1, 4, 4, 1)
    out = patchify(img, 2)
    assert out.shape == (1, 4, 4)
    np.testing.assert_array_equal(out[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(out[0, 1], [2, 3, 6, 7])
    np.testing.assert_array_equal(out[0, 3], [10, 11, 14, 15])


def test_batch_and_single_agree():
    m = CsvtModel(SMALL, seed=0)
    x = np.random.default_rng(0).uniform(0, 1, (3, 16, 16, 3))
    with T.no_grad(), T.precision("f64"):
        m.astype(np.float64)
        batch = m.forward(x).data
        single = np.stack([m.forward(im).data for im in x])
    np.testing.assert_allclose(batch, single, atol=1e-12)


def test_model_forward_checks_config():
    m = CsvtModel(SMALL, seed=0)
    with pytest.raises(ValueError):
        model_forward(np.zeros((16, 16, 3)), SMALL.with_(num_layers=3), m)


def test_same_seed_same_weights():
    a, b = CsvtModel(SMALL, seed=4), CsvtModel(SMALL, seed=4)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()


# -- parameter counts -----------------------------------------------------


def test_desk_parameter_count_by_hand():
    # d=64, h=2, hidden 256, patch dim 192:
    # per block 4*(64*64+64) + 2 + 6*64 + 2*(9*64+64) + 2*64 + (64*256+256) + (256*64+64)
    per_block = 16640 + 2 + 384 + 1280 + 128 + 16640 + 16448
    total = 192 * 64 + 64 + 4 * per_block + 64 + 64 * 4 + 4
    assert total == 218764
    assert CsvtModel(DESK_CONFIG).num_parameters() == total
    assert analytic_param_count(DESK_CONFIG) == total


@pytest.mark.parametrize("cfg", [SMALL, DESK_CONFIG, SMALL.with_(num_heads=4, mlp_ratio=2)])
def test_analytic_count_matches_model(cfg):
    assert analytic_param_count(cfg) == CsvtModel(cfg).num_parameters()


def test_full_config_count():
    assert analytic_param_count(FULL_CONFIG) == CsvtModel(FULL_CONFIG).num_parameters()


# -- checkpoints ----------------------------------------------------------


def test_load_state_dict_reports_every_shape_difference():
    a = CsvtModel(SMALL, seed=0)
    b = CsvtModel(SMALL.with_(embed_dim=12, num_heads=2), seed=0)
    with pytest.raises(ValueError) as err:
        a.load_state_dict(b.state_dict())
    msg = str(err.value)
    assert "patch_embed.weight: checkpoint (48, 12) vs model (48, 8)" in msg
    assert msg.count(" vs model ") == sum(
        1 for k, v in a.state_dict().items() if v.shape != b.state_dict()[k].shape)


def test_load_state_dict_roundtrip():
    a, b = CsvtModel(SMALL, seed=0), CsvtModel(SMALL, seed=1)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(0).uniform(0, 1, (2, 16, 16, 3))
    with T.no_grad():
        assert a.forward(x).data.tobytes() == b.forward(x).data.tobytes()


def test_load_state_dict_strict_missing():
    a = CsvtModel(SMALL, seed=0)
    state = a.state_dict()
    del state["head.bias"]
    with pytest.raises(ValueError, match="head.bias: missing"):
        CsvtModel(SMALL).load_state_dict(state)
    assert CsvtModel(SMALL).load_state_dict(state, strict=False) == ["head.bias"]
