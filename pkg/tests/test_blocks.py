import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ammfm import tensor as T
from ammfm.blocks import (
    AttentionBlockParams,
    BabParams,
    ConcatFusion,
    Projection,
    aab_forward,
    aab_param_formula,
    bab_forward,
    bab_param_formula,
    block_param_count,
    cat_fuse,
)
from ammfm.errors import DimensionError
from oracles import numeric_grad, rel_error


def _params(c, seed=0, **kw):
    return AttentionBlockParams.init(c, np.random.default_rng(seed), **kw)


def _ones_params(c):
    def proj():
        return Projection(T.Tensor(np.ones((c, c)), requires_grad=True), T.Tensor(np.zeros(c), requires_grad=True))

    return AttentionBlockParams(proj(), proj(), proj(), c)


def test_hand_computed_example():
    # two positions, one channel: M = softmax of zeros = all 0.5, attended = (2, 2)
    clin = np.zeros((2, 1, 1))
    derm = np.array([[[1.0]], [[3.0]]])
    refined, state = aab_forward(clin, derm, _ones_params(1))
    assert refined.data.reshape(-1).tolist() == [3.0, 5.0]
    assert state.attention.tolist() == [[0.5, 0.5], [0.5, 0.5]]


def test_single_position_reduces_to_value_projection():
    rng = np.random.default_rng(1)
    p = _params(4, seed=2)
    clin = rng.normal(size=(1, 1, 4))
    derm = rng.normal(size=(1, 1, 4))
    refined, state = aab_forward(clin, derm, p)
    assert state.attention.tolist() == [[1.0]]
    expected = T.conv1x1(derm, p.proj_v.weight, p.proj_v.bias).data + derm
    np.testing.assert_allclose(refined.data, expected, rtol=0, atol=1e-14)


def test_zero_value_projection_is_exact_identity():
    rng = np.random.default_rng(3)
    clin = rng.normal(size=(2, 4, 4, 6))
    derm = rng.normal(size=(2, 4, 4, 6))
    refined, _ = aab_forward(clin, derm, _params(6, zero_value=True))
    assert np.array_equal(refined.data, derm)


def test_bab_zero_values_return_inputs():
    rng = np.random.default_rng(4)
    clin = rng.normal(size=(3, 3, 5))
    derm = rng.normal(size=(3, 3, 5))
    p = BabParams.init(5, np.random.default_rng(0), zero_value=True)
    rc, rd, _ = bab_forward(clin, derm, p)
    assert np.array_equal(rc.data, clin)
    assert np.array_equal(rd.data, derm)


def test_bab_reduces_to_aab_when_reverse_values_vanish():
    rng = np.random.default_rng(5)
    clin = rng.normal(size=(4, 2, 3))
    derm = rng.normal(size=(4, 2, 3))
    fwd = _params(3, seed=6)
    rev = _params(3, seed=7, zero_value=True)
    rc, rd, _ = bab_forward(clin, derm, BabParams(fwd, rev))
    ref, _ = aab_forward(clin, derm, fwd)
    assert np.array_equal(rd.data, ref.data)
    assert np.array_equal(rc.data, clin)


def test_shape_mismatch_names_axis():
    with pytest.raises(DimensionError, match="axis 1"):
        aab_forward(np.zeros((2, 3, 4)), np.zeros((2, 2, 4)), _params(4))


@settings(max_examples=60, deadline=None)
@given(h=st.integers(1, 5), w=st.integers(1, 5), c=st.integers(1, 8), seed=st.integers(0, 10_000))
def test_output_shape_and_row_stochastic_map(h, w, c, seed):
    rng = np.random.default_rng(seed)
    clin = rng.normal(size=(h, w, c))
    derm = rng.normal(size=(h, w, c))
    refined, state = aab_forward(clin, derm, _params(c, seed))
    assert refined.shape == derm.shape
    assert np.all(np.abs(state.attention.sum(axis=-1) - 1.0) <= 1e-9)
    assert np.all((state.attention > 0) & (state.attention <= 1))


@pytest.mark.parametrize("c", [1, 2, 4, 8, 16, 32])
def test_param_counts(c):
    aab = _params(c)
    bab = BabParams.init(c, np.random.default_rng(0))
    assert block_param_count(aab) == aab_param_formula(c) == 3 * (c * c + c)
    assert block_param_count(bab) == bab_param_formula(c) == 2 * block_param_count(aab)


def test_param_counts_c8():
    assert block_param_count(_params(8)) == 216
    assert block_param_count(BabParams.init(8, np.random.default_rng(0))) == 432
    assert block_param_count(ConcatFusion()) == 0


def test_cat_fuse():
    assert cat_fuse(np.array([1.0, 2.0]), np.array([3.0])).data.tolist() == [1.0, 2.0, 3.0]
    d = np.array([4.0, 5.0])
    assert cat_fuse(np.zeros(0), d) is d
    assert cat_fuse(np.ones(128), np.ones(128)).shape == (256,)


def test_aab_gradients_match_finite_differences():
    worst = 0.0
    for trial in range(10):
        rng = np.random.default_rng([11, trial])
        h, w, c = (int(v) for v in rng.integers(1, 4, size=3))
        p = _params(c, seed=trial, scaled=bool(trial % 2))
        clin = T.Tensor(rng.normal(size=(h, w, c)), requires_grad=True)
        derm = T.Tensor(rng.normal(size=(h, w, c)), requires_grad=True)
        leaves = {"clin": clin, "derm": derm, **p.tensors()}
        for t in leaves.values():
            t.zero_grad()
        T.tsum(aab_forward(clin, derm, p)[0]).backward()

        def f():
            return float(aab_forward(clin.data, derm.data, p)[0].data.sum())

        for t in leaves.values():
            worst = max(worst, rel_error(t.grad, numeric_grad(f, t.data)))
    assert worst < 1e-6
