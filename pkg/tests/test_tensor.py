"""Kernel contracts: oracle exactness, purity, determinism, overflow guards."""

import numpy as np
import pytest

from fiqnn.errors import AccumulatorOverflowError, DimensionError, NumericError
from fiqnn.tensor import (
    IntTensor,
    conv2d,
    int_conv2d,
    int_matmul,
    matmul,
    maxpool2d,
    maxpool2d_backward,
)


def naive_matmul(a, b):
    """Scalar reference: left-to-right accumulation over the inner axis."""
    m, k = a.shape
    n = b.shape[1]
    out = np.empty((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for kk in range(k):
                acc = acc + a[i, kk] * b[kk, j]
            out[i, j] = acc
    return out


def naive_conv2d(x, kern, stride, padding):
    """Scalar reference: zero-pad, then sum channel, kernel row, kernel col."""
    n, c, h, w = x.shape
    co, ci, kh, kw = kern.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + h, padding : padding + w] = x
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    out = np.empty((n, co, oh, ow))
    for nn in range(n):
        for o in range(co):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for cc in range(ci):
                        for a in range(kh):
                            for b in range(kw):
                                acc = acc + xp[nn, cc, i * stride + a, j * stride + b] \
                                    * kern[o, cc, a, b]
                    out[nn, o, i, j] = acc
    return out


class TestMatmul:
    def test_identity(self):
        got = matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]])
        assert np.array_equal(got, [[3, 4], [5, 6]])

    def test_dot(self):
        assert np.array_equal(matmul([[1, 2]], [[3], [4]]), [[11]])

    def test_matches_naive_oracle_exactly(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((5, 7))
        b = rng.standard_normal((7, 3))
        assert np.array_equal(matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            matmul(np.ones((2, 3)), np.ones((4, 2)))

    def test_rejects_non_finite(self):
        with pytest.raises(NumericError):
            matmul(np.array([[np.nan]]), np.ones((1, 1)))

    def test_pure_and_deterministic(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((4, 6))
        b = rng.standard_normal((6, 5))
        a0, b0 = a.copy(), b.copy()
        r1 = matmul(a, b)
        r2 = matmul(a, b)
        assert np.array_equal(a, a0) and np.array_equal(b, b0)
        assert r1 is not r2 and np.array_equal(r1, r2)


class TestConv2d:
    def test_all_ones(self):
        x = np.ones((1, 1, 3, 3))
        k = np.ones((1, 1, 3, 3))
        assert conv2d(x, k).reshape(-1).tolist() == [9.0]

    def test_identity_kernel(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((2, 3, 5, 5))
        k = np.zeros((3, 3, 1, 1))
        for c in range(3):
            k[c, c, 0, 0] = 1.0
        assert np.array_equal(conv2d(x, k), x)

    def test_matches_naive_oracle_exactly(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((2, 3, 8, 8))
        k = rng.standard_normal((4, 3, 3, 3))
        assert np.array_equal(conv2d(x, k, 2, 1), naive_conv2d(x, k, 2, 1))

    def test_kernel_too_large(self):
        with pytest.raises(DimensionError):
            conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 5, 5)))

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 2, 2)))


class TestIntKernels:
    def test_identity(self):
        eye = IntTensor(np.eye(3, dtype=np.int64), bits=8)
        b = IntTensor(np.arange(9).reshape(3, 3), bits=8)
        assert np.array_equal(int_matmul(eye, b).data, b.data)

    def test_zero_kernel(self):
        x = IntTensor(np.arange(16).reshape(1, 1, 4, 4) % 13, bits=8)
        k = IntTensor(np.zeros((2, 1, 3, 3), dtype=np.int64), bits=8)
        assert not int_conv2d(x, k).data.any()

    def test_matches_real_kernels_exactly(self):
        rng = np.random.default_rng(4)
        a = rng.integers(0, 16, (6, 9))
        b = rng.integers(-15, 16, (9, 4))
        ints = int_matmul(IntTensor(a, 4), IntTensor(b, 4, "weight")).data
        reals = matmul(a.astype(float), b.astype(float))
        assert np.array_equal(ints.astype(float), reals)

        x = rng.integers(0, 16, (2, 3, 6, 6))
        k = rng.integers(-15, 16, (4, 3, 3, 3))
        ints = int_conv2d(IntTensor(x, 4), IntTensor(k, 4, "weight"), 2, 1).data
        reals = conv2d(x.astype(float), k.astype(float), 2, 1)
        assert np.array_equal(ints.astype(float), reals)

    def test_matches_python_int_oracle(self):
        rng = np.random.default_rng(5)
        a = rng.integers(-100, 100, (3, 4))
        b = rng.integers(-100, 100, (4, 2))
        got = int_matmul(IntTensor(a, 8, "acc"), IntTensor(b, 8, "acc")).data
        for i in range(3):
            for j in range(2):
                acc = 0
                for k in range(4):
                    acc += int(a[i, k]) * int(b[k, j])
                assert int(got[i, j]) == acc

    def test_overflow_detected(self):
        big = np.full((2, 2), 2**31, dtype=np.int64)
        with pytest.raises(AccumulatorOverflowError):
            int_matmul(IntTensor(big, 64, "acc"), IntTensor(big, 64, "acc"))

    def test_overflow_reports_layer(self):
        big = np.full((2, 2), 2**31, dtype=np.int64)
        with pytest.raises(AccumulatorOverflowError) as err:
            int_matmul(IntTensor(big, 64, "acc"), IntTensor(big, 64, "acc"), layer=3)
        assert err.value.layer == 3


class TestIntTensor:
    def test_code_range_enforced(self):
        with pytest.raises(Exception):
            IntTensor(np.array([16]), bits=4, kind="code")
        IntTensor(np.array([15]), bits=4, kind="code")

    def test_weight_range_enforced(self):
        IntTensor(np.array([-15, 15]), bits=4, kind="weight")
        with pytest.raises(Exception):
            IntTensor(np.array([-16]), bits=4, kind="weight")

    def test_accumulator_exempt(self):
        IntTensor(np.array([2**40]), bits=4, kind="acc")


class TestMaxPool:
    def test_matches_bruteforce(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((2, 3, 6, 6))
        pooled, idx = maxpool2d(x, 2)
        for n in range(2):
            for c in range(3):
                for i in range(3):
                    for j in range(3):
                        win = x[n, c, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                        assert pooled[n, c, i, j] == win.max()

    def test_tie_takes_first_in_scan_order(self):
        x = np.zeros((1, 1, 2, 2))
        _, idx = maxpool2d(x, 2)
        assert idx[0, 0, 0, 0] == 0

    def test_backward_routes_to_argmax(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        pooled, idx = maxpool2d(x, 2)
        g = np.ones_like(pooled)
        back = maxpool2d_backward(g, idx, x.shape, 2)
        expect = np.zeros_like(x)
        expect[0, 0, 1, 1] = expect[0, 0, 1, 3] = 1
        expect[0, 0, 3, 1] = expect[0, 0, 3, 3] = 1
        assert np.array_equal(back, expect)
