"""Truncation error bound, its inversion and residual mass."""

import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from gammastick.crm import GammaProcessParams, draw_batch, expected_total_mass
from gammastick.errors import DomainError
from gammastick.numeric import SeededRng
from gammastick.truncation import (
    TruncationQuery, expected_residual_mass, marginal_truncation_bound, min_rounds_for_error,
    simulate_tail_event, truncation_bound,
)

ONES = GammaProcessParams(1.0, 1.0, 1.0)


def test_bound_examples():
    assert truncation_bound(1, ONES, 0) == pytest.approx(0.6321205588, abs=1e-10)
    assert truncation_bound(1000, ONES, 17) == pytest.approx(-math.expm1(-1000 * 2.0 ** -17), rel=1e-14)
    assert truncation_bound(1000, ONES, 17) == pytest.approx(0.0076004, rel=1e-4)
    assert 0.0151 <= truncation_bound(1000, ONES, 16) < 0.0152
    assert marginal_truncation_bound(TruncationQuery(1, ONES, 0)) == truncation_bound(1, ONES, 0)


def test_bound_hand_evaluation():
    p = GammaProcessParams(2.0, 3.0, 1.5)
    expected = 1 - math.exp(-7 * 1.5 * (2 / 3) * (2 / 3) ** 4)
    assert truncation_bound(7, p, 4) == pytest.approx(expected, rel=1e-14)


def test_bound_limits_and_large_n():
    assert truncation_bound(1, ONES, 5000) == 0.0
    assert truncation_bound(10 ** 300, ONES, 0) == 1.0
    # tiny bounds keep full relative precision
    assert truncation_bound(1, ONES, 200) == pytest.approx(2.0 ** -200, rel=1e-12)


def test_query_validation():
    with pytest.raises(DomainError):
        TruncationQuery(0, ONES, 1)
    with pytest.raises(DomainError):
        TruncationQuery(1, ONES, -1)


def test_min_rounds_examples():
    assert min_rounds_for_error(1000, ONES, 0.01) == 17
    assert min_rounds_for_error(1, GammaProcessParams(1.0, 1.0, 1e-6), 0.5) == 0
    for eps in (0.0, 1.0, -0.2):
        with pytest.raises(DomainError):
            min_rounds_for_error(10, ONES, eps)


@given(st.integers(1, 10 ** 6), st.floats(0.05, 20), st.floats(0.05, 20), st.floats(0.05, 20),
       st.floats(1e-9, 0.99))
def test_min_rounds_is_minimal(n, alpha, c, gamma, eps):
    p = GammaProcessParams(alpha, c, gamma)
    r = min_rounds_for_error(n, p, eps)
    assert truncation_bound(n, p, r) <= eps
    if r >= 1:
        assert truncation_bound(n, p, r - 1) > eps


@given(st.integers(1, 10 ** 4), st.floats(0.05, 10), st.floats(0.05, 10), st.floats(0.05, 10),
       st.integers(0, 60))
def test_bound_monotonicity(n, alpha, c, gamma, r):
    p = GammaProcessParams(alpha, c, gamma)
    b = truncation_bound(n, p, r)
    assert 0.0 <= b <= 1.0
    assert truncation_bound(n, p, r + 1) <= b
    assert truncation_bound(n + 1, p, r) >= b
    assert truncation_bound(n, GammaProcessParams(alpha, c, gamma * 1.5), r) >= b


def test_residual_mass_examples():
    p = GammaProcessParams(1.0, 1.0, 5.0)
    assert expected_residual_mass(p, 0) == expected_total_mass(p)
    assert expected_residual_mass(p, 30) == pytest.approx(5 * 2.0 ** -30, rel=1e-14)
    assert expected_residual_mass(p, 30) == pytest.approx(4.657e-9, rel=1e-3)
    with pytest.raises(DomainError):
        expected_residual_mass(p, -1)


def test_empirical_residual_mass():
    p = GammaProcessParams(1.0, 1.0, 5.0)
    tail = draw_batch(p, 40, 10_000, "theorem", SeededRng(6)).masses_beyond(3)
    assert abs(tail.mean() - 0.625) <= 4 * tail.std(ddof=1) / math.sqrt(tail.size)


@pytest.mark.parametrize("n", [1, 10])
@pytest.mark.parametrize("rounds", [1, 3, 5])
def test_bound_holds_empirically(n, rounds):
    est = simulate_tail_event(n, ONES, rounds, 20_000, SeededRng(100 + 10 * n + rounds))
    assert est.correction < 1e-15
    assert est.upper <= truncation_bound(n, ONES, rounds) + 3 * est.std_error
