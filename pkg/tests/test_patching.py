import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from asgmamba import patching as Pt
from asgmamba import tensor as T
from oracles import enumerate_windows


def test_patch_counts_default_scales():
    assert [Pt.num_patches(96, p, p // 2) for p in (8, 16, 32)] == [23, 11, 5]
    assert Pt.num_patches(96, 16, 16) == 6
    assert Pt.ScalePatchConfig.for_branch(16, 96, overlap=False).num_patches == 6


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 300), st.integers(1, 64), st.integers(1, 64))
def test_patch_count_matches_enumeration(L, P, S):
    if L < P:
        with pytest.raises(ValueError):
            Pt.num_patches(L, P, S)
    else:
        assert Pt.num_patches(L, P, S) == len(enumerate_windows(L, P, S))


def test_patch_contents():
    x = np.arange(96.0)
    patches = Pt.overlapping_patch(T.tensor(x[None]), 16, 8).data[0]
    assert patches.shape == (11, 16)
    np.testing.assert_array_equal(patches[0], x[0:16])
    np.testing.assert_array_equal(patches[-1], x[80:96])
    assert all(patches[i, 0] == 8 * i for i in range(11))


def test_patch_backward_counts_coverage():
    x = T.Tensor(np.zeros((2, 32)), requires_grad=True)
    T.sum(Pt.overlapping_patch(x, 8, 4)).backward()
    cover = np.zeros(32)
    for s in enumerate_windows(32, 8, 4):
        cover[s:s + 8] += 1
    np.testing.assert_array_equal(x.grad, np.tile(cover, (2, 1)))


def test_short_lookback_rejected():
    with pytest.raises(ValueError, match="P=32"):
        Pt.overlapping_patch(T.tensor(np.zeros((1, 16))), 32, 16)


def test_embed_shapes():
    W = T.tensor(np.ones((5, 8)))
    out = Pt.embed_patches(T.tensor(np.ones((3, 4, 8))), W, T.tensor(np.zeros(5)))
    assert out.shape == (3, 4, 5)
    np.testing.assert_array_equal(out.data, 8.0)
    with pytest.raises(T.ShapeError):
        Pt.embed_patches(T.tensor(np.ones((3, 4, 7))), W, T.tensor(np.zeros(5)))


def test_add_context_zero_is_identity_and_node_lookup():
    rng = np.random.default_rng(0)
    z = T.tensor(rng.standard_normal((4, 3, 5)))
    out = Pt.add_context(z, T.tensor(np.zeros((3, 5))), T.tensor(np.zeros((2, 5))), [0, 1, 0, 1])
    np.testing.assert_array_equal(out.data, z.data)
    node = rng.standard_normal((2, 5))
    out = Pt.add_context(z, T.tensor(np.zeros((3, 5))), T.tensor(node), [0, 1, 0, 1])
    np.testing.assert_allclose(out.data[1] - z.data[1], np.tile(node[1], (3, 1)), atol=1e-15)


def test_add_context_errors():
    z = T.tensor(np.zeros((2, 3, 5)))
    with pytest.raises(ValueError):
        Pt.add_context(z, T.tensor(np.zeros((3, 5))), T.tensor(np.zeros((2, 5))), [0, 2])
    with pytest.raises(T.ShapeError):
        Pt.add_context(z, T.tensor(np.zeros((4, 5))), T.tensor(np.zeros((2, 5))), [0, 1])
