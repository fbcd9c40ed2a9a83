import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pluralign.errors import InvalidArgumentError
from pluralign.numerics import (
    argmax_index,
    check_distribution,
    entropy,
    js_distance,
    log_softmax,
    softmax,
    total_variation,
)

finite = st.floats(-30, 30, allow_nan=False)
logit_vectors = arrays(np.float64, st.integers(1, 12), elements=finite)


@st.composite
def distributions(draw, size=None):
    n = size if size is not None else draw(st.integers(1, 8))
    w = draw(arrays(np.float64, n, elements=st.floats(0, 1, allow_nan=False)))
    if w.sum() == 0:
        w[draw(st.integers(0, n - 1))] = 1.0
    return w / w.sum()


def test_softmax_uniform_and_shift():
    assert np.allclose(softmax([0, 0, 0]), [1 / 3] * 3, atol=1e-15)
    assert np.allclose(softmax([7.5] * 4, 0.4), [0.25] * 4, atol=1e-15)


def test_softmax_two_logits_matches_frozen_value():
    # mpmath: e/(e+1) = 0.73105857863000487925...
    p = softmax([1.0, 0.0])
    assert p[0] == pytest.approx(0.7310585786300049, abs=1e-15)
    assert p[1] == pytest.approx(0.2689414213699951, abs=1e-15)


@pytest.mark.parametrize("bad", [[np.nan, 0.0], [np.inf], []])
def test_softmax_rejects_bad_logits(bad):
    with pytest.raises(InvalidArgumentError):
        softmax(bad)


@pytest.mark.parametrize("t", [0.0, -1.0, math.inf])
def test_softmax_rejects_bad_temperature(t):
    with pytest.raises(InvalidArgumentError):
        softmax([1.0, 2.0], t)


@given(logit_vectors, st.floats(-100, 100), st.floats(0.05, 10))
def test_softmax_shift_invariance(x, c, t):
    assert np.allclose(softmax(x + c, t), softmax(x, t), atol=1e-12, rtol=0)


@given(logit_vectors, st.floats(0.05, 10))
def test_softmax_is_a_distribution(x, t):
    check_distribution(softmax(x, t))


@given(logit_vectors, st.floats(0.2, 10))
def test_log_softmax_round_trip(x, t):
    assert np.allclose(np.exp(log_softmax(x, t)), softmax(x, t), atol=1e-12, rtol=0)


def test_log_softmax_cases():
    assert np.allclose(log_softmax([0.0, 0.0]), [-math.log(2)] * 2, atol=1e-15)
    # mpmath reference: [1000 - log(e^1000 + 1), -log(e^1000 + 1)] = [0 (to 1e-434), -1000]
    out = log_softmax([1000.0, 0.0])
    assert np.all(np.isfinite(out))
    assert out[0] == pytest.approx(0.0, abs=1e-300)
    assert out[1] == pytest.approx(-1000.0, abs=1e-12)


def test_entropy_examples():
    assert entropy([0.5, 0.5], 2) == pytest.approx(1.0, abs=1e-15)
    assert entropy([1.0, 0.0, 0.0], 2) == 0.0
    assert entropy([1.0, 0.0, 0.0]) == 0.0
    assert entropy([0.5, 0.25, 0.25], 2) == pytest.approx(1.5, abs=1e-15)
    # mpmath: 1.5 * ln 2 = 1.03972077083991796412...
    assert entropy([0.5, 0.25, 0.25]) == pytest.approx(1.0397207708399179, abs=1e-15)


def test_entropy_rejects_invalid_input():
    with pytest.raises(InvalidArgumentError):
        entropy([0.5, 0.6])
    with pytest.raises(InvalidArgumentError):
        entropy([0.5, 0.5], log_base=1.0)


@given(distributions(), st.randoms())
def test_entropy_bounds_and_permutation(p, rnd):
    h = entropy(p, 2)
    assert 0.0 <= h <= math.log2(p.size) + 1e-12
    perm = list(range(p.size))
    rnd.shuffle(perm)
    assert entropy(p[perm], 2) == pytest.approx(h, abs=1e-12)


def test_js_examples():
    assert js_distance([0.2, 0.8], [0.2, 0.8]) == 0.0
    assert js_distance([1.0, 0.0], [0.0, 1.0]) == 1.0
    # mpmath: 0.55792304528414388119...
    assert js_distance([0.5, 0.5], [1.0, 0.0]) == pytest.approx(0.5579230452841439, abs=1e-12)


def test_js_length_mismatch():
    with pytest.raises(InvalidArgumentError):
        js_distance([1.0], [0.5, 0.5])


@given(st.integers(1, 6).flatmap(lambda n: st.tuples(*[distributions(n)] * 3)))
@settings(max_examples=200)
def test_js_is_a_metric(triple):
    p, q, r = triple
    d_pq = js_distance(p, q)
    assert 0.0 <= d_pq <= 1.0
    assert d_pq == pytest.approx(js_distance(q, p), abs=1e-12)
    assert js_distance(p, p) <= 1e-12
    assert d_pq <= js_distance(p, r) + js_distance(r, q) + 1e-7


def test_argmax_examples():
    assert argmax_index([0.2, 0.5, 0.3]) == 1
    assert argmax_index([0.5, 0.5]) == 0
    for k in range(5):
        assert argmax_index(np.eye(5)[k]) == k


def test_total_variation():
    assert total_variation([1, 0], [0, 1]) == 1.0
    assert total_variation([0.3, 0.7], [0.3, 0.7]) == 0.0
