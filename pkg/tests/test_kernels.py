import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ifnas import kernels

from oracles import naive_depthwise3x3

needs_numba = pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")

shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 6), st.integers(1, 6))


@settings(max_examples=50, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**32 - 1))
def test_numpy_forward_matches_naive_loops(shape, seed):
    r = np.random.default_rng(seed)
    x, w = r.normal(size=shape), r.normal(size=(shape[1], 3, 3))
    assert np.max(np.abs(kernels.depthwise3x3_numpy(x, w) - naive_depthwise3x3(x, w))) <= 1e-12


@needs_numba
@settings(max_examples=50, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**32 - 1))
def test_backends_agree(shape, seed):
    r = np.random.default_rng(seed)
    x, g, w = r.normal(size=shape), r.normal(size=shape), r.normal(size=(shape[1], 3, 3))
    pairs = [
        (kernels.depthwise3x3_numpy(x, w), kernels.depthwise3x3_numba(x, w)),
        (kernels.depthwise3x3_grad_input_numpy(g, w), kernels.depthwise3x3_grad_input_numba(g, w)),
        (kernels.depthwise3x3_grad_weight_numpy(x, g), kernels.depthwise3x3_grad_weight_numba(x, g)),
    ]
    for a, b in pairs:
        assert np.max(np.abs(a - b)) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(shape=shapes, seed=st.integers(0, 2**32 - 1))
def test_gradients_are_adjoint(shape, seed):
    # <conv(x), g> == <x, grad_input(g)> == <w, grad_weight(x, g)>
    r = np.random.default_rng(seed)
    x, g, w = r.normal(size=shape), r.normal(size=shape), r.normal(size=(shape[1], 3, 3))
    lhs = np.sum(kernels.depthwise3x3(x, w) * g)
    assert np.isclose(lhs, np.sum(x * kernels.depthwise3x3_grad_input(g, w)), rtol=1e-10, atol=1e-10)
    assert np.isclose(lhs, np.sum(w * kernels.depthwise3x3_grad_weight(x, g)), rtol=1e-10, atol=1e-10)


def test_backend_flag(monkeypatch):
    import importlib

    monkeypatch.setenv("IFNAS_NUMBA", "0")
    k = importlib.reload(kernels)
    try:
        assert k.BACKEND == "numpy" and k.depthwise3x3 is k.depthwise3x3_numpy
    finally:
        monkeypatch.delenv("IFNAS_NUMBA")
        importlib.reload(kernels)
