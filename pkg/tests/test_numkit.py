import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpqdm2 import numkit
from mpqdm2.errors import ContractError, FormatError


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# -- matmul -----------------------------------------------------------------


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(numkit.matmul(np.eye(3), a), a)


def test_matmul_hand():
    assert numkit.matmul([[1, 2], [3, 4]], [[1], [1]]).tolist() == [[3.0], [7.0]]


def test_matmul_triple_loop():
    rng = numkit.make_rng(3)
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    assert np.max(np.abs(numkit.matmul(a, b) - naive_matmul(a, b))) < 1e-12


def test_matmul_contracts():
    with pytest.raises(ContractError):
        numkit.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ContractError):
        numkit.matmul(np.ones(3), np.ones((3, 1)))
    with pytest.raises(ContractError):
        numkit.matmul([[np.nan]], [[1.0]])


# -- svd ----------------------------------------------------------------------


def test_svd_diagonal():
    r = numkit.svd(np.diag([3.0, 2.0, 1.0]))
    assert np.allclose(r.s, [3, 2, 1], atol=1e-14)


def test_svd_zero():
    r = numkit.svd(np.zeros((4, 3)))
    assert np.all(r.s == 0)
    assert np.all(np.isfinite(r.u)) and np.all(np.isfinite(r.v))


def test_svd_random_against_gram_eigenvalues():
    a = numkit.make_rng(11).normal(size=(6, 4))
    r = numkit.svd(a)
    assert np.linalg.norm(a - r.reconstruct()) < 1e-9
    eig = np.sort(np.linalg.eigvalsh(a.T @ a))[::-1]
    assert np.max(np.abs(r.s - np.sqrt(np.maximum(eig, 0)))) < 1e-7


def test_svd_orthonormal_factors():
    a = numkit.make_rng(12).normal(size=(7, 5))
    r = numkit.svd(a)
    assert np.allclose(r.u.T @ r.u, np.eye(5), atol=1e-10)
    assert np.allclose(r.v.T @ r.v, np.eye(5), atol=1e-10)
    assert np.all(np.diff(r.s) <= 0)


def test_svd_wide_and_rank_deficient():
    rng = numkit.make_rng(13)
    a = rng.normal(size=(3, 2)) @ rng.normal(size=(2, 8))
    r = numkit.svd(a)
    assert r.u.shape == (3, 3) and r.v.shape == (8, 3)
    assert np.linalg.norm(a - r.reconstruct()) < 1e-9
    assert r.s[2] < 1e-9
    assert np.allclose(r.u.T @ r.u, np.eye(3), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)), elements=finite))
def test_svd_reconstruction_property(a):
    r = numkit.svd(a)
    assert np.linalg.norm(a - r.reconstruct()) / max(1.0, np.linalg.norm(a)) <= 1e-9


# -- kurtosis -------------------------------------------------------------------


def test_kurtosis_two_point():
    assert numkit.kurtosis([1, -1, 1, -1]) == pytest.approx(1.0, abs=1e-15)


def test_kurtosis_spike_moment_oracle():
    v = np.array([0, 0, 0, 0, 10.0])
    mu = v.mean()
    m2 = sum((x - mu) ** 2 for x in v) / 5
    m4 = sum((x - mu) ** 4 for x in v) / 5
    assert numkit.kurtosis(v) == pytest.approx(m4 / m2**2, rel=1e-14)
    assert numkit.kurtosis(v) == pytest.approx(3.25, rel=1e-14)


def test_kurtosis_gaussian():
    v = numkit.make_rng(5).normal(size=100_000)
    assert abs(numkit.kurtosis(v) - 3.0) < 0.1


def test_kurtosis_degenerate():
    assert numkit.kurtosis(np.full(8, 2.5)) == 0.0
    assert numkit.is_degenerate(np.full(8, 2.5))
    assert not numkit.is_degenerate([0.0, 1.0])
    with pytest.raises(ContractError):
        numkit.kurtosis([1.0])


@settings(max_examples=80, deadline=None)
@given(
    arrays(np.float64, st.integers(3, 40), elements=st.floats(-100, 100)),
    st.floats(0.1, 10).map(lambda x: x * (1 if int(x * 100) % 2 else -1)),
    st.floats(-50, 50),
)
def test_kurtosis_affine_invariance(v, a, b):
    if np.std(v) < 1e-3 * max(1.0, np.max(np.abs(v))):
        return
    assert numkit.kurtosis(a * v + b) == pytest.approx(numkit.kurtosis(v), rel=1e-9, abs=1e-9)


# -- softmax / kl ------------------------------------------------------------------


def test_softmax_constant():
    for tau in (0.1, 1.0, 7.0):
        assert np.allclose(numkit.softmax([2.0, 2.0, 2.0], tau), 1 / 3, atol=1e-15)


def test_softmax_closed_form():
    assert np.allclose(numkit.softmax([0.0, math.log(3)], 1.0), [0.25, 0.75], atol=1e-15)


def test_softmax_large_inputs():
    p = numkit.softmax([1000.0, 999.0])
    e = 1.0 / (1.0 + math.exp(-1.0))
    assert np.all(np.isfinite(p))
    assert np.allclose(p, [e, 1 - e], atol=1e-15)


def test_softmax_bad_tau():
    with pytest.raises(ContractError):
        numkit.softmax([1.0, 2.0], 0.0)
    with pytest.raises(ContractError):
        numkit.log_softmax([1.0, 2.0], -1.0)


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-50, 50)), st.floats(-1e3, 1e3),
       st.floats(0.05, 10))
def test_softmax_shift_invariance(v, c, tau):
    assert np.max(np.abs(numkit.softmax(v + c, tau) - numkit.softmax(v, tau))) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
def test_log_softmax_consistent(v):
    assert np.allclose(np.exp(numkit.log_softmax(v)), numkit.softmax(v), atol=1e-14)


def test_kl_identical_and_closed_form():
    p = numkit.softmax([0.3, -1.0, 2.0])
    assert numkit.kl_divergence(p, p) == 0.0
    assert numkit.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), rel=1e-15)


def test_kl_summation_oracle():
    rng = numkit.make_rng(21)
    for _ in range(20):
        p = numkit.softmax(rng.normal(size=6))
        q = numkit.softmax(rng.normal(size=6))
        ref = 0.0
        for a, b in zip(p, q):
            ref += a * math.log(a / b)
        assert abs(numkit.kl_divergence(p, q) - ref) < 1e-12


def test_kl_contracts():
    with pytest.raises(ContractError):
        numkit.kl_divergence([0.5, 0.5], [1.0, 0.0])
    with pytest.raises(ContractError):
        numkit.kl_divergence([0.5, 0.5], [0.2, 0.2])
    with pytest.raises(ContractError):
        numkit.kl_divergence([1.0], [0.5, 0.5])


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.integers(2, 10), elements=st.floats(-10, 10)),
       arrays(np.float64, st.integers(2, 10), elements=st.floats(-10, 10)))
def test_kl_nonnegative(a, b):
    n = min(len(a), len(b))
    p, q = numkit.softmax(a[:n]), numkit.softmax(b[:n])
    d = numkit.kl_divergence(p, q)
    assert d >= 0
    if np.array_equal(p, q):
        assert d == 0


# -- rng ---------------------------------------------------------------------------


def test_rng_reproducible_and_split_independent():
    a = numkit.make_rng(2**64 - 1).normal(size=5)
    b = numkit.make_rng(2**64 - 1).normal(size=5)
    assert np.array_equal(a, b)
    c1, c2 = numkit.split_rng(numkit.make_rng(4), 2)
    x, y = c1.normal(size=100), c2.normal(size=100)
    assert not np.array_equal(x, y)
    d1, _ = numkit.split_rng(numkit.make_rng(4), 2)
    assert np.array_equal(d1.normal(size=100), x)


# -- T2D1 -----------------------------------------------------------------------------


def test_tensor_round_trip():
    a = numkit.make_rng(1).normal(size=(3, 5))
    buf = numkit.tensor_to_bytes(a)
    assert buf[:4] == b"T2D1" and len(buf) == 12 + 8 * 15
    back, end = numkit.tensor_from_bytes(buf)
    assert end == len(buf) and np.array_equal(back, a)
    fh = io.BytesIO()
    numkit.write_tensor(fh, a)
    fh.seek(0)
    assert np.array_equal(numkit.read_tensor(fh), a)


def test_tensor_bad_input():
    buf = numkit.tensor_to_bytes(np.ones((2, 2)))
    with pytest.raises(FormatError):
        numkit.tensor_from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        numkit.tensor_from_bytes(buf[:-1])
    with pytest.raises(FormatError):
        numkit.read_tensor(io.BytesIO(buf[:8]))
