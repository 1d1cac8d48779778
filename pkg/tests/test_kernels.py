import numpy as np
import pytest

from scamnet import kernels
from scamnet.kernels import _npkernels


def cases():
    rng = np.random.default_rng(0)
    for C, H, W, k, stride, pad in [
        (1, 4, 4, 3, 1, 0),
        (2, 5, 5, 3, 1, 1),
        (3, 8, 8, 3, 2, 1),
        (2, 6, 7, 1, 1, 0),
        (4, 9, 9, 5, 2, 2),
    ]:
        yield rng.normal(size=(C, H, W)), k, stride, pad


class TestBackendSelection:
    def test_backend_reported(self):
        assert kernels.BACKEND in ("cython", "numpy")

    def test_same_signatures(self):
        x = np.zeros((1, 4, 4))
        a = kernels.im2col(x, 3, 1, 0)
        b = _npkernels.im2col(x, 3, 1, 0)
        assert a.shape == b.shape


class TestParity:
    def test_im2col_matches_fallback_exactly(self):
        for x, k, stride, pad in cases():
            a = np.asarray(kernels.im2col(x, k, stride, pad))
            b = _npkernels.im2col(x, k, stride, pad)
            np.testing.assert_array_equal(a, b)

    def test_col2im_matches_fallback(self):
        rng = np.random.default_rng(1)
        for x, k, stride, pad in cases():
            C, H, W = x.shape
            cols = rng.normal(size=_npkernels.im2col(x, k, stride, pad).shape)
            a = np.asarray(kernels.col2im(cols, C, H, W, k, stride, pad))
            b = _npkernels.col2im(cols, C, H, W, k, stride, pad)
            np.testing.assert_allclose(a, b, atol=1e-12)


class TestSemantics:
    def test_im2col_1x1_is_flatten(self):
        x = np.random.default_rng(2).normal(size=(3, 4, 5))
        np.testing.assert_array_equal(_npkernels.im2col(x, 1, 1, 0), x.reshape(3, 20))

    def test_col2im_adjoint_of_im2col(self):
        # <im2col(x), c> == <x, col2im(c)> defines the scatter as the adjoint
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 6, 6))
        cols = rng.normal(size=_npkernels.im2col(x, 3, 2, 1).shape)
        lhs = float((_npkernels.im2col(x, 3, 2, 1) * cols).sum())
        rhs = float((x * _npkernels.col2im(cols, 2, 6, 6, 3, 2, 1)).sum())
        assert lhs == pytest.approx(rhs, rel=1e-12)
