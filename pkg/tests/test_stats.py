import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import gammaln

from nchabc.errors import (
    DegenerateWeightsError,
    DomainError,
    EmptyDataError,
    InvalidBandwidthError,
    InvalidDfError,
)
from nchabc.stats import (
    ResponseTransform,
    Rng,
    epanechnikov,
    equal_weight_quantile_index,
    f_tail_p,
    inverse_transform,
    mad_scale,
    transform,
    weighted_quantile,
)


def brute_weighted_quantile(samples, weights, q):
    """Walk the sorted samples accumulating weight until the share reaches q."""
    pairs = sorted(zip(samples, weights))
    total = sum(weights)
    acc = 0.0
    for x, w in pairs:
        acc += w
        if w > 0 and acc >= q * total * (1 - 1e-12):
            return x
    return pairs[-1][0]


# -- epanechnikov --------------------------------------------------------------


@pytest.mark.parametrize("t, delta, expected", [(0, 1, 1.0), (1, 1, 0.0), (0.5, 1, 0.75), (3, 1, 0.0)])
def test_epanechnikov_values(t, delta, expected):
    assert epanechnikov(t, delta) == expected


@pytest.mark.parametrize("delta", [0.0, -1.0])
def test_epanechnikov_rejects_bad_bandwidth(delta):
    with pytest.raises(InvalidBandwidthError):
        epanechnikov(0.1, delta)


@given(
    st.floats(0, 10, allow_nan=False),
    st.floats(0, 10, allow_nan=False),
    st.floats(0.01, 10),
    st.floats(0.01, 100),
)
def test_epanechnikov_monotone_and_scale_invariant(t1, t2, delta, c):
    lo, hi = sorted((t1, t2))
    assert epanechnikov(lo, delta) >= epanechnikov(hi, delta)
    assert epanechnikov(c * t1, c * delta) == pytest.approx(epanechnikov(t1, delta), abs=1e-12)
    assert 0.0 <= epanechnikov(t1, delta) <= 1.0


def test_epanechnikov_array():
    w = epanechnikov(np.array([0.0, 0.5, 2.0]), 1.0)
    np.testing.assert_array_equal(w, [1.0, 0.75, 0.0])


# -- mad ---------------------------------------------------------------------


def test_mad_values():
    assert mad_scale([3, 3, 3]) == 0.0
    assert mad_scale([1, 2, 3, 4, 5]) == 1.0


def test_mad_normal_quartile():
    x = Rng(11).generator.standard_normal(10_000)
    assert mad_scale(x) == pytest.approx(0.6745, abs=0.02)


def test_mad_empty():
    with pytest.raises(EmptyDataError):
        mad_scale([])


# -- weighted quantile -------------------------------------------------------


def test_weighted_quantile_examples():
    assert weighted_quantile([1, 2, 3, 4, 5], [1] * 5, 0.5) == 3
    for q in (0.01, 0.5, 0.99):
        assert weighted_quantile([1, 2], [0, 1], q) == 2
    # cumulative shares 1/8, 2/8, 3/8, 1 -> first to reach 1/2 is 4
    assert weighted_quantile([1, 2, 3, 4], [1, 1, 1, 5], 0.5) == 4


def test_weighted_quantile_zero_weight():
    with pytest.raises(DegenerateWeightsError):
        weighted_quantile([1, 2], [0, 0], 0.5)


def test_weighted_quantile_vector_q():
    out = weighted_quantile([5, 1, 3], [1, 1, 1], [0.2, 0.5, 0.9])
    np.testing.assert_array_equal(out, [1, 3, 5])


def test_weighted_quantile_brute_force_1000_cases():
    gen = Rng(2024).generator
    for _ in range(1000):
        n = int(gen.integers(1, 30))
        x = np.round(gen.normal(size=n), 2)  # rounding creates ties
        w = gen.exponential(size=n) * (gen.random(n) > 0.2)
        if w.sum() == 0:
            w[0] = 1.0
        q = float(gen.uniform(0.001, 0.999))
        assert weighted_quantile(x, w, q) == brute_weighted_quantile(list(x), list(w), q)


@given(
    st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=40),
    st.floats(0.001, 0.999),
)
def test_equal_weights_match_unweighted_order_statistic(xs, q):
    n = len(xs)
    expected = sorted(xs)[math.ceil(q * n * (1 - 1e-12)) - 1]
    assert weighted_quantile(xs, [1.0] * n, q) == expected
    assert sorted(xs)[int(equal_weight_quantile_index(n, q)[0])] == expected


@given(
    st.lists(st.tuples(st.floats(-100, 100), st.floats(0.01, 10)), min_size=1, max_size=30),
    st.floats(0.001, 0.999),
    st.floats(0.001, 0.999),
)
def test_weighted_quantile_monotone_in_q(pairs, q1, q2):
    xs, ws = zip(*pairs)
    lo, hi = sorted((q1, q2))
    assert weighted_quantile(xs, ws, lo) <= weighted_quantile(xs, ws, hi)


# -- transforms --------------------------------------------------------------


def test_transform_examples():
    assert transform(0.5, ResponseTransform.logit(0, 1)) == 0.0
    assert inverse_transform(transform(0.3, ResponseTransform.logit(0, 1)), ResponseTransform.logit(0, 1)) == pytest.approx(0.3, rel=1e-15)
    assert transform(1.0, ResponseTransform.log()) == 0.0


@pytest.mark.parametrize(
    "t, x",
    [(ResponseTransform.log(), 0.0), (ResponseTransform.log(), -1.0), (ResponseTransform.logit(0, 1), 1.0),
     (ResponseTransform.logit(2, 3), 1.5)],
)
def test_transform_domain_errors(t, x):
    with pytest.raises(DomainError):
        transform(x, t)


def test_transform_roundtrip_1000_points():
    gen = Rng(5).generator
    cases = [
        (ResponseTransform.identity(), gen.normal(0, 100, 1000)),
        (ResponseTransform.log(), gen.exponential(50, 1000)),
        (ResponseTransform.logit(0, 10), gen.uniform(0.001, 9.999, 1000)),
        (ResponseTransform.logit(1e-6, 0.1), 10 ** -gen.uniform(1.01, 5.99, 1000)),
    ]
    for t, x in cases:
        back = t.inverse(t.forward(x))
        np.testing.assert_allclose(back, x, rtol=1e-12, atol=0)


def test_logit_inverse_stays_strictly_inside():
    t = ResponseTransform.logit(0, 10)
    y = t.inverse(np.array([-1000.0, -40.0, 40.0, 1000.0]))
    assert np.all((y > 0) & (y < 10))
    assert ResponseTransform.log().inverse(-1e4) > 0


# -- F tail ------------------------------------------------------------------


def f_density(x, d1, d2):
    logc = gammaln((d1 + d2) / 2) - gammaln(d1 / 2) - gammaln(d2 / 2) + (d1 / 2) * math.log(d1 / d2)
    return math.exp(logc + (d1 / 2 - 1) * math.log(x) - ((d1 + d2) / 2) * math.log1p(d1 * x / d2))


@pytest.mark.parametrize("d", [1, 2, 5, 30, 99])
def test_f_tail_half_at_one(d):
    assert f_tail_p(1.0, d, d) == pytest.approx(0.5, abs=1e-12)


def test_f_tail_extreme():
    assert f_tail_p(1e6, 10, 10) < 1e-10


def test_f_tail_matches_quadrature():
    # oracle: 1 - integral of the density over (0, r)
    r, d = 1.5, 99
    head, _ = integrate.quad(f_density, 0, r, args=(d, d), epsabs=1e-13, epsrel=1e-12, limit=200)
    assert f_tail_p(r, d, d) == pytest.approx(1 - head, abs=1e-6)
    tail, _ = integrate.quad(f_density, 3.0, np.inf, args=(4, 7), epsabs=1e-13, epsrel=1e-12)
    assert f_tail_p(3.0, 4, 7) == pytest.approx(tail, abs=1e-8)


@given(st.floats(1e-3, 1e3), st.integers(1, 200))
def test_f_reciprocal_symmetry(r, d):
    assert f_tail_p(r, d, d) + f_tail_p(1 / r, d, d) == pytest.approx(1.0, abs=1e-10)


def test_f_invalid_df():
    with pytest.raises(InvalidDfError):
        f_tail_p(1.0, 0, 3)


# -- rng ---------------------------------------------------------------------


def test_rng_determinism_and_independence():
    a = Rng(42, 7).generator.random(100_000)
    b = Rng(42, 7).generator.random(100_000)
    c = Rng(42, 8).generator.random(100_000)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert abs(np.corrcoef(a, c)[0, 1]) < 0.02


def test_rng_derive_is_keyed():
    r = Rng(3)
    np.testing.assert_array_equal(r.derive("x", 1).generator.random(5), Rng(3).derive("x", 1).generator.random(5))
    assert not np.array_equal(r.derive("x", 1).generator.random(5), r.derive("x", 2).generator.random(5))
