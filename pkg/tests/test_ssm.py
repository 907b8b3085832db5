import numpy as np
import pytest

from asgmamba import ssm
from asgmamba import tensor as T
from oracles import central_difference, max_rel_error, selective_scan_unroll


def random_instance(rng, lead=(), steps=None, d_inner=None, d_state=None):
    steps = steps or int(rng.integers(1, 9))
    d_inner = d_inner or int(rng.integers(1, 5))
    d_state = d_state or int(rng.integers(1, 5))
    return dict(
        x=rng.standard_normal(lead + (steps, d_inner)),
        dt=rng.uniform(0.01, 1.0, lead + (steps, d_inner)),
        A=-np.exp(rng.standard_normal((d_inner, d_state))),
        B=rng.standard_normal(lead + (steps, d_state)),
        C=rng.standard_normal(lead + (steps, d_state)),
        D=rng.standard_normal(d_inner),
    )


def run(fn, inst, **kw):
    args = [T.tensor(inst[k]) for k in ("x", "dt", "A", "B", "C", "D")]
    return fn(*args, **kw).data


def test_scan_matches_unroll():
    rng = np.random.default_rng(0)
    for _ in range(100):
        inst = random_instance(rng)
        ref = selective_scan_unroll(inst["x"], inst["dt"], inst["A"], inst["B"], inst["C"], inst["D"])
        np.testing.assert_allclose(run(ssm.selective_scan, inst), ref, atol=1e-12, rtol=0)


def test_fused_equals_composed_and_chunked():
    rng = np.random.default_rng(1)
    inst = random_instance(rng, lead=(3,), steps=11, d_inner=4, d_state=3)
    fused = run(ssm.selective_scan, inst)
    np.testing.assert_allclose(run(ssm.selective_scan_reference, inst), fused, atol=1e-13)
    for c in (1, 4, 11, 64):
        np.testing.assert_array_equal(run(ssm.selective_scan, inst, chunk_size=c), fused)


def test_scan_degenerate_cases():
    rng = np.random.default_rng(2)
    inst = random_instance(rng, steps=5, d_inner=3, d_state=2)
    inst["B"][:] = 0
    np.testing.assert_array_equal(run(ssm.selective_scan, inst), inst["D"] * inst["x"])
    inst = random_instance(rng, steps=5, d_inner=3, d_state=2)
    inst["x"][:] = 0
    np.testing.assert_array_equal(run(ssm.selective_scan, inst), 0.0)


def test_scan_is_causal():
    rng = np.random.default_rng(3)
    inst = random_instance(rng, steps=8, d_inner=3, d_state=2)
    base = run(ssm.selective_scan, inst)
    inst["x"][5] += 1.0
    inst["B"][5] += 1.0
    out = run(ssm.selective_scan, inst)
    np.testing.assert_array_equal(out[:5], base[:5])


def test_scan_shape_errors():
    rng = np.random.default_rng(4)
    inst = random_instance(rng, steps=4, d_inner=3, d_state=2)
    inst["A"] = inst["A"][:, :1]
    with pytest.raises(T.ShapeError):
        run(ssm.selective_scan, inst)


def test_discretize_limits():
    dt = T.tensor(np.zeros((4, 3)))
    A = T.tensor(-np.ones((3, 2)))
    B = T.tensor(np.ones((4, 2)))
    a_bar, bx = ssm.discretize(dt, A, B, T.tensor(np.ones((4, 3))))
    np.testing.assert_array_equal(a_bar.data, 1.0)
    np.testing.assert_array_equal(bx.data, 0.0)
    a_bar, _ = ssm.discretize(T.tensor(np.full((4, 3), 50.0)), T.tensor(-np.full((3, 2), 10.0)), B,
                              T.tensor(np.ones((4, 3))))
    assert np.all(a_bar.data < 1e-200)


def test_state_matrix_is_stable():
    A = ssm.state_matrix(T.tensor(np.random.default_rng(5).standard_normal((4, 3)))).data
    assert np.all(A < 0)


@pytest.mark.parametrize("fn", [ssm.selective_scan, ssm.selective_scan_reference])
def test_scan_gradients(fn):
    rng = np.random.default_rng(6)
    inst = random_instance(rng, lead=(2,), steps=5, d_inner=3, d_state=2)
    keys = ("x", "dt", "A", "B", "C", "D")
    w = rng.standard_normal(inst["x"].shape)
    arrays = [inst[k] for k in keys]
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    T.sum(fn(*leaves) * T.tensor(w)).backward()

    def f():
        with T.no_grad():
            return float(np.sum(fn(*[T.tensor(a) for a in arrays]).data * w))

    numeric = central_difference(f, arrays, h=1e-6)
    for leaf, n in zip(leaves, numeric):
        assert max_rel_error(leaf.grad, n) <= 1e-5


def test_mamba_block_zero_weights():
    p = {k: T.tensor(np.zeros_like(v)) for k, v in ssm.init_mamba(np.random.default_rng(0), 8, 4).items()}
    out = ssm.mamba_block(T.tensor(np.random.default_rng(1).standard_normal((2, 5, 8))), p)
    np.testing.assert_array_equal(out.data, 0.0)


def test_mamba_block_fused_matches_composed():
    rng = np.random.default_rng(7)
    p = {k: T.tensor(v) for k, v in ssm.init_mamba(rng, 8, 4).items()}
    u = T.tensor(rng.standard_normal((3, 6, 8)))
    np.testing.assert_allclose(ssm.mamba_block(u, p).data, ssm.mamba_block(u, p, fused=False).data, atol=1e-13)


def test_init_shapes_and_dt_range():
    p = ssm.init_mamba(np.random.default_rng(0), 16, d_state=8, d_conv=4, expand=2)
    assert p["W_in"].shape == (64, 16) and p["conv_w"].shape == (4, 32)
    assert p["A_log"].shape == (32, 8) and p["W_out"].shape == (16, 32)
    dt = np.log1p(np.exp(p["b_dt"]))
    assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 1e-1 + 1e-12))
    np.testing.assert_allclose(-np.exp(p["A_log"][0]), -np.arange(1, 9))
