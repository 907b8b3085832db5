import numpy as np
import pytest

from asgmamba import tensor as T
from asgmamba.patching import unfold_array
from asgmamba.model import (VARIANTS, ASGMamba, ModelConfig, ablate, channel_independent, channel_merge,
                            count_parameters, fuse_scales, init_params, revin_denormalize, revin_normalize)

TINY = ModelConfig(look_back=32, horizon=8, n_vars=2, d_model=8, patch_sizes=(8, 16), d_state=4, dropout=0.0)


def expected_count(L, T_, M, D, Ps, d_state=16, d_conv=4, expand=2, k=3):
    d_inner = expand * D
    hidden = D // 4
    total = 2 * M + M * D + (len(Ps) if len(Ps) > 1 else 0)
    for P in Ps:
        n = (L - P) // (P // 2) + 1
        total += D * P + D + n * D
        total += hidden * k + hidden + D * hidden + D
        total += 2 * D
        total += 2 * d_inner * D + d_conv * d_inner + d_inner
        total += d_inner * d_inner + d_inner + 2 * d_state * d_inner
        total += d_inner * d_state + d_inner + D * d_inner
        total += T_ * n * D + T_
    return total


def test_default_parameter_count():
    cfg = ModelConfig()
    n = count_parameters(init_params(cfg))
    assert n == expected_count(96, 96, 7, 128, (8, 16, 32))
    # 913 shared + branches 469344 (P=8) + 321376 (P=16) + 248928 (P=32)
    assert n == 1040561


def test_tiny_parameter_count():
    assert count_parameters(init_params(TINY)) == expected_count(32, 8, 2, 8, (8, 16), d_state=4)


def test_init_is_seeded():
    a, b = init_params(TINY, 3), init_params(TINY, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_params(TINY, 4)
    assert not np.array_equal(a["branch8.W_emb"], c["branch8.W_emb"])


def test_forward_shape_and_errors():
    model = ASGMamba(TINY)
    x = np.random.default_rng(0).standard_normal((3, 32, 2))
    assert model(x).shape == (3, 8, 2)
    with pytest.raises(T.ShapeError):
        model(x[:, :30])
    with pytest.raises(ValueError, match="P=32"):
        ModelConfig(look_back=16)


def test_revin_round_trip():
    rng = np.random.default_rng(1)
    x = T.tensor(rng.standard_normal((4, 32, 3)) * 50 + 7)
    gamma, beta = T.tensor(rng.uniform(0.5, 2, 3)), T.tensor(rng.standard_normal(3))
    xn, st = revin_normalize(x, gamma, beta)
    assert np.max(np.abs(revin_denormalize(xn, st).data - x.data)) <= 1e-6
    xn, st = revin_normalize(x)
    np.testing.assert_allclose(xn.data.mean(axis=1), 0.0, atol=1e-12)
    assert np.max(np.abs(revin_denormalize(xn, st).data - x.data)) <= 1e-6


def test_revin_constant_input_and_zero_gamma():
    x = T.tensor(np.full((1, 10, 2), 4.0))
    xn, st = revin_normalize(x)
    np.testing.assert_array_equal(xn.data, 0.0)
    _, st = revin_normalize(x, T.tensor(np.array([1.0, 0.0])), T.tensor(np.zeros(2)))
    with pytest.raises(ValueError, match="zero"):
        revin_denormalize(T.tensor(np.zeros((1, 3, 2))), st)


def test_channel_reshape_round_trip():
    x = np.random.default_rng(2).standard_normal((3, 5, 4))
    seqs, variates = channel_independent(T.tensor(x))
    assert seqs.shape == (12, 5)
    np.testing.assert_array_equal(seqs.data[1 * 4 + 2], x[1, :, 2])
    np.testing.assert_array_equal(variates, [0, 1, 2, 3] * 3)
    np.testing.assert_array_equal(channel_merge(seqs, 3, 4).data, x)


def test_fusion():
    ys = [T.tensor(np.full((2, 3), float(i))) for i in range(3)]
    np.testing.assert_allclose(fuse_scales(ys, T.tensor(np.zeros(3))).data, 1.0, atol=1e-15)
    big = fuse_scales(ys, T.tensor(np.array([0.0, 0.0, 800.0])))
    np.testing.assert_allclose(big.data, 2.0)
    assert fuse_scales(ys[:1], None) is ys[0]
    with pytest.raises(T.ShapeError):
        fuse_scales(ys, T.tensor(np.zeros(2)))


def test_zero_parameter_model_outputs_window_mean():
    # every learned map zeroed: the normalised forecast is 0, so the output is the per-variate mean
    params = {k: np.zeros_like(v) for k, v in init_params(TINY).items()}
    params["revin.gamma"] = np.ones(2)
    x = np.random.default_rng(3).standard_normal((2, 32, 2)) + 5
    y = ASGMamba(TINY, params)(x).data
    np.testing.assert_allclose(y, np.broadcast_to(x.mean(axis=1, keepdims=True), y.shape), atol=1e-12)


def test_batch_equivariance():
    model = ASGMamba(TINY, seed=1)
    x = np.random.default_rng(4).standard_normal((5, 32, 2))
    full = model(x).data
    perm = [3, 0, 4, 1, 2]
    np.testing.assert_allclose(model(x[perm]).data, full[perm], atol=1e-13)
    np.testing.assert_allclose(model(x[2:3]).data, full[2:3], atol=1e-13)


def test_dropout_only_in_training():
    cfg = TINY.replace(dropout=0.5)
    model = ASGMamba(cfg, seed=0)
    x = np.random.default_rng(5).standard_normal((2, 32, 2))
    np.testing.assert_array_equal(model(x).data, model(x).data)
    a = model(x, training=True, rng=np.random.default_rng(1)).data
    b = model(x, training=True, rng=np.random.default_rng(2)).data
    assert not np.array_equal(a, b)


def test_gates_recorded_per_branch():
    model = ASGMamba(TINY)
    model(np.random.default_rng(6).standard_normal((3, 32, 2)))
    assert model.last_gates[8].shape == (6, 7) and model.last_gates[16].shape == (6, 3)
    assert np.all((model.last_gates[8] > 0) & (model.last_gates[8] < 1))


def test_ablation_variants():
    base = ModelConfig()
    assert ablate(base, "full") == base
    assert ablate(base, "single_scale").patch_sizes == (16,)
    assert ablate(base, "no_overlap").n_patches(16) == 6
    keys = init_params(ablate(TINY, "no_spectral_gating"))
    assert not any(".gate" in k for k in keys)
    assert "fusion.w_scale" not in init_params(ablate(TINY, "single_scale"))
    assert len(VARIANTS) == 5
    with pytest.raises(ValueError, match="valid"):
        ablate(base, "bogus")


def test_plain_gating_ignores_spectrum():
    cfg = ablate(TINY, "plain_gating")
    model = ASGMamba(cfg, seed=0)
    rng = np.random.default_rng(7)
    model(rng.standard_normal((2, 32, 2)))
    g1 = model.last_gates[8].copy()
    model(np.cumsum(rng.standard_normal((2, 32, 2)), axis=1))
    np.testing.assert_array_equal(model.last_gates[8], g1)


def test_gated_residual_switch_changes_output():
    x = np.random.default_rng(8).standard_normal((2, 32, 2))
    a = ASGMamba(TINY, seed=0)(x).data
    b = ASGMamba(TINY.replace(residual="gated"), seed=0)(x).data
    assert not np.allclose(a, b)
    with pytest.raises(ValueError):
        TINY.replace(residual="other")


def test_depth_two_adds_layers():
    keys = init_params(TINY.replace(depth=2))
    assert "branch8.mamba1.W_in" in keys and "branch8.gate1.W_g1" in keys
    y = ASGMamba(TINY.replace(depth=2))(np.zeros((1, 32, 2)) + np.arange(32)[None, :, None])
    assert y.shape == (1, 8, 2)


def test_state_dict_round_trip():
    a, b = ASGMamba(TINY, seed=0), ASGMamba(TINY, seed=1)
    b.load_state_dict(a.state_dict())
    x = np.random.default_rng(9).standard_normal((2, 32, 2))
    np.testing.assert_array_equal(a(x).data, b(x).data)
    with pytest.raises(KeyError):
        b.load_state_dict({})


def test_float32_mode():
    model = ASGMamba(TINY.replace(dtype="float32"))
    y = model(np.random.default_rng(10).standard_normal((2, 32, 2)))
    assert y.dtype == np.float32


def test_revin_hand_example():
    x = T.tensor(np.array([1.0, 2.0, 3.0])[None, :, None])
    xn, st = revin_normalize(x)
    np.testing.assert_allclose(xn.data.ravel(), [-1.2247, 0.0, 1.2247], atol=1e-4)
    c = T.tensor(np.full((1, 5, 1), -3.0))
    cn, st = revin_normalize(c)
    np.testing.assert_allclose(revin_denormalize(cn, st).data, -3.0, atol=1e-12)


def test_channel_layout_index():
    _, variates = channel_independent(T.tensor(np.zeros((3, 4, 7))))
    assert len(variates) == 21 and variates[9] == 2
    _, variates = channel_independent(T.tensor(np.zeros((1, 4, 2))))
    assert variates.tolist() == [0, 1]


def test_fusion_saturation():
    ys = [T.tensor(np.full(4, v)) for v in (1.0, 5.0, 9.0)]
    out = fuse_scales(ys, T.tensor(np.array([100.0, -100.0, -100.0])))
    np.testing.assert_allclose(out.data, 1.0, atol=1e-80)


def test_zero_branch_outputs_head_bias():
    params = {k: np.zeros_like(v) for k, v in init_params(TINY).items()}
    model = ASGMamba(TINY, params)
    seqs, variates = channel_independent(T.tensor(np.random.default_rng(0).standard_normal((2, 32, 2))))
    raw = unfold_array(seqs.data, 8, 4)
    out = model._branch(8, seqs, raw, variates, False, None, None)
    np.testing.assert_array_equal(out.data, 0.0)
