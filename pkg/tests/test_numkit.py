import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from headsteer.errors import DomainError
from headsteer.numkit import (
    RngStream,
    ZeroNormWarning,
    add_scaled,
    cosine_matrix,
    cosine_sim,
    matmul,
    mean_std_cv,
    softmax_stable,
    transpose,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def test_softmax_examples():
    assert np.allclose(softmax_stable([0.0, 0.0]), [0.5, 0.5])
    out = softmax_stable([1000.0, 1000.0, 1000.0])
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [1 / 3] * 3)


def test_softmax_matches_reference():
    v = np.random.default_rng(3).normal(0, 5, 8)
    ref = [math.exp(x) for x in v]
    s = math.fsum(ref)
    assert np.allclose(softmax_stable(v), [r / s for r in ref], atol=1e-6)


@given(arrays(np.float64, st.integers(1, 20), elements=finite), finite)
def test_softmax_is_distribution_and_shift_invariant(v, c):
    p = softmax_stable(v)
    assert abs(p.sum() - 1) < 1e-6
    assert np.all(p >= 0)
    assert np.allclose(p, softmax_stable(v + c), atol=1e-9)


def test_softmax_rejects_bad_input():
    with pytest.raises(DomainError):
        softmax_stable([])
    with pytest.raises(DomainError):
        softmax_stable([1.0, np.nan])


def test_cosine_examples():
    assert cosine_sim([3, 4], [3, 4]) == 1.0
    assert cosine_sim([1, 0], [0, 1]) == 0.0
    a, b = [1, 2, 3], [4, 5, 6]
    ref = 32 / (math.sqrt(14) * math.sqrt(77))
    assert abs(cosine_sim(a, b) - ref) < 1e-12
    assert abs(cosine_sim(a, b) - 0.974631) < 1e-6


def test_cosine_zero_norm_warns_and_returns_zero():
    with pytest.warns(ZeroNormWarning):
        assert cosine_sim([0, 0], [1, 2]) == 0.0
    assert np.all(cosine_matrix(np.zeros((2, 3)))[0] == 0.0)


vec = arrays(np.float64, 6, elements=st.floats(-10, 10, allow_nan=False))


@given(vec, vec, st.floats(1e-3, 1e3))
def test_cosine_symmetric_and_scale_invariant(a, b, lam):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ZeroNormWarning)
        s = cosine_sim(a, b)
        assert -1.0 <= s <= 1.0
        assert s == cosine_sim(b, a)
        assert abs(cosine_sim(lam * a, b) - s) < 1e-6


def test_mean_std_cv():
    assert mean_std_cv([5, 5, 5]) == (5.0, 0.0, 0.0)
    assert mean_std_cv([1, 3]) == (2.0, 1.0, 0.5)
    assert mean_std_cv([-1, 1])[2] is None
    xs = np.random.default_rng(0).uniform(0, 1, 100)
    m = math.fsum(xs) / 100
    sd = math.sqrt(math.fsum((x - m) ** 2 for x in xs) / 100)
    got = mean_std_cv(xs)
    assert abs(got[0] - m) < 1e-6 and abs(got[1] - sd) < 1e-6 and abs(got[2] - sd / m) < 1e-6
    with pytest.raises(DomainError):
        mean_std_cv([])


def test_matrix_helpers():
    gen = np.random.default_rng(1)
    M = gen.normal(size=(3, 3)).astype(np.float32)
    assert np.array_equal(matmul(np.eye(3, dtype=np.float32), M), M)
    A, B = gen.normal(size=(3, 4)), gen.normal(size=(4, 2))
    naive = [[sum(A[i, k] * B[k, j] for k in range(4)) for j in range(2)] for i in range(3)]
    assert np.allclose(transpose(matmul(A, B)), np.array(naive).T, atol=1e-5)
    assert np.allclose(transpose(matmul(A, B)), matmul(transpose(B), transpose(A)), atol=1e-5)
    assert matmul([[2.0]], [[3.0]])[0, 0] == 6.0
    assert np.allclose(add_scaled(np.ones(3), np.ones(3), 2.0), 3.0)
    with pytest.raises(DomainError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DomainError):
        add_scaled(np.ones(2), np.ones(3))


@given(st.integers(0, 2**63), st.integers(0, 2**32))
def test_rng_stream_replays(seed, sid):
    a = RngStream(seed, sid).generator().random(16)
    b = RngStream(seed, sid).generator().random(16)
    assert a.tobytes() == b.tobytes()
    c = RngStream(seed, sid + 1).generator().random(16)
    assert a.tobytes() != c.tobytes()


def test_cosine_survives_tiny_and_huge_magnitudes():
    ones = np.ones(6)
    for scale in (5e-160, 1e-300, 1e150):
        assert cosine_sim(scale * ones, ones) == 1.0
        assert abs(cosine_matrix(np.stack([scale * ones, ones]))[0, 1] - 1.0) < 1e-15
