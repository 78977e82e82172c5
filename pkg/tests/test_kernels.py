import numpy as np
import pytest

from univip import kernels

needs_numba = pytest.mark.skipif(not kernels._HAVE_NUMBA, reason="numba unavailable")


@needs_numba
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_im2col_backends_agree(stride, pad):
    x = np.random.default_rng(stride + pad).normal(size=(2, 3, 9, 7))
    a = kernels._im2col_numpy(x, 3, 3, stride, pad)
    b = kernels._im2col_numba(x, 3, 3, stride, pad)
    np.testing.assert_array_equal(a, b)


@needs_numba
@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (3, 2)])
def test_col2im_backends_agree(stride, pad):
    shape = (2, 3, 9, 7)
    oh = kernels.conv_out_size(9, 3, stride, pad)
    ow = kernels.conv_out_size(7, 3, stride, pad)
    cols = np.random.default_rng(5).normal(size=(2 * oh * ow, 27))
    a = kernels._col2im_numpy(cols, shape, 3, 3, stride, pad)
    b = kernels._col2im_numba(cols, shape, 3, 3, stride, pad)
    np.testing.assert_allclose(a, b, atol=1e-12)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1)])
def test_col2im_is_adjoint_of_im2col(stride, pad):
    r = np.random.default_rng(0)
    x = r.normal(size=(2, 3, 8, 8))
    cols = kernels.im2col(x, 3, 3, stride, pad)
    y = r.normal(size=cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * kernels.col2im(y, x.shape, 3, 3, stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def _grid_edges(h, w, seed):
    r = np.random.default_rng(seed)
    idx = np.arange(h * w).reshape(h, w)
    ea = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    eb = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    ew = r.random(len(ea))
    order = np.argsort(ew, kind="stable")
    return ea[order], eb[order], ew[order]


@needs_numba
@pytest.mark.parametrize("seed", range(5))
def test_segment_backends_agree(seed):
    ea, eb, ew = _grid_edges(12, 10, seed)
    a = kernels._segment_python(120, ea, eb, ew, 0.5, 4)
    b = kernels._segment_loops(120, ea, eb, ew, 0.5, 4)
    np.testing.assert_array_equal(a, b)


def test_segment_no_edges_keeps_singletons():
    e = np.zeros(0, dtype=np.int64)
    out = kernels.segment_edges(4, e, e, np.zeros(0), 1.0, 1)
    assert len(np.unique(out)) == 4


def test_backend_name():
    assert kernels.backend() in ("numba", "numpy")
