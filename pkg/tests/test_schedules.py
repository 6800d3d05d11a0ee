import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from otafl.estimators import TheoryConstants
from otafl.schedules import (Schedule, diminishing, rate_bound_thm2, rate_bound_thm4, theorem2_beta,
                             theorem2_iterations, theorem4_beta, theorem4_iterations, validate_assumption3)


def unit(**kw):
    base = dict(L=1.0, b=1.0, L_xi=1.0, A=1.0, b1=1.0, b2=1.0, n_devices=1, delta_hat=1.0, c1=1.0, c3=0.0)
    base.update(kw)
    return TheoryConstants(**base)


def test_diminishing_examples():
    assert diminishing(3, 0.5, 0.5) == 0.25
    assert diminishing(15, 2.5, 0.25) == pytest.approx(1.25, abs=1e-15)
    with pytest.raises(ValueError):
        diminishing(0, 0.0, 0.5)


@given(st.floats(0.01, 10), st.floats(0.01, 2), st.integers(0, 10**6))
def test_diminishing_strictly_decreasing(a0, u, k):
    assert diminishing(k + 1, a0, u) < diminishing(k, a0, u)


def test_diminishing_vanishes():
    assert diminishing(10**12, 0.5, 0.5) < 1e-6


def test_schedule_kinds():
    s = Schedule()
    assert s.eta(3) == 0.25 and s.gamma(15) == pytest.approx(1.25)
    c2 = Schedule("constant-thm2", 1.0, 2.0, horizon=16)
    assert c2.eta(0) == c2.eta(99) == 0.5 and c2.gamma(5) == 1.0
    c4 = Schedule("constant-thm4", 1.0, 2.0, horizon=16)
    assert c4.eta(7) == 0.25 and c4.gamma(7) == 2.0
    with pytest.raises(ValueError):
        Schedule("cosine")


def test_assumption3_examples():
    assert validate_assumption3(0.5, 0.25).ok
    bad = validate_assumption3(0.1, 0.1)
    assert not bad.ok and len(bad.violated) == 2
    assert not validate_assumption3(1.0, 0.0).ok


@given(st.floats(-0.5, 1.5), st.floats(-0.5, 1.5))
def test_assumption3_matches_inequalities(u1, u2):
    expected = u1 > 0 and u2 > 0 and 0 < u1 + u2 <= 1 and u1 + 3 * u2 > 1 and u1 + u2 > 0.5
    assert validate_assumption3(u1, u2).ok == expected


def test_theorem2_unit_case():
    # independent evaluation: (2*1/(1*1*1) + 0 + 0)^2 / (0.1^2 * 0.1^2)
    assert theorem2_iterations(0.1, 0.1, unit(), 0.0, 1.0, 1.0) == round(2.0**2 / 1e-4) == 40000


def test_theorem4_unit_case():
    # mu C2 = 2: (1 + 1)^2 * 10^4
    assert theorem4_iterations(0.1, 0.1, unit(), 2.0, 1.0) == 40000


def test_doubling_eps_quarters_k():
    c = unit(c3=0.7, delta_hat=3.3)
    assert theorem2_iterations(0.1, 0.2, c, 1.5, 0.3, 0.4) / theorem2_iterations(0.2, 0.2, c, 1.5, 0.3, 0.4) == \
        pytest.approx(4.0, rel=1e-6)


def test_k_scales_inverse_beta_squared():
    c = unit(delta_hat=2.0)
    assert theorem4_iterations(0.1, 0.1, c, 5.0, 0.2) / theorem4_iterations(0.1, 0.2, c, 5.0, 0.2) == \
        pytest.approx(4.0, rel=1e-6)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99), st.floats(0.1, 10), st.floats(0, 5), st.floats(0.05, 2),
       st.floats(0.05, 2))
def test_beta_k_round_trip(eps, beta, dh, C, eta0, gamma0):
    c = unit(delta_hat=dh, c3=0.5)
    K = theorem2_iterations(eps, beta, c, C, eta0, gamma0)
    assert theorem2_beta(K, eps, c, C, eta0, gamma0) <= beta * (1 + 1e-9)
    if K > 1:
        assert theorem2_beta(K - 1, eps, c, C, eta0, gamma0) > beta * (1 - 1e-9)
    K4 = theorem4_iterations(eps, beta, c, C, eta0)
    assert theorem4_beta(K4, eps, c, C, eta0) <= beta * (1 + 1e-9)


@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0, 10), st.floats(0, 10))
def test_monotone_in_delta_and_moment_bound(d1, d2, C1, C2):
    (dl, dh), (Cl, Ch) = sorted((d1, d2)), sorted((C1, C2))
    assert theorem2_iterations(0.1, 0.1, unit(delta_hat=dl), Cl, 0.5, 0.5) <= \
        theorem2_iterations(0.1, 0.1, unit(delta_hat=dh), Ch, 0.5, 0.5)
    # async variant: larger C2' never needs fewer rounds
    assert theorem4_iterations(0.1, 0.1, unit(delta_hat=dl), Cl, 0.5) <= \
        theorem4_iterations(0.1, 0.1, unit(delta_hat=dl), Ch, 0.5)


def test_rate_bound_examples():
    ones = unit(c1=1.0, c3=1.0)
    assert rate_bound_thm2(100, 1.0, 1.0, ones, 1.0) == pytest.approx(0.4, abs=1e-15)
    c = unit(c3=0.3, delta_hat=2.0)
    assert rate_bound_thm2(400, 0.2, 0.7, c, 3.0) / rate_bound_thm2(100, 0.2, 0.7, c, 3.0) == pytest.approx(0.5)
    assert rate_bound_thm4(400, 0.2, c, 3.0) / rate_bound_thm4(100, 0.2, c, 3.0) == pytest.approx(0.5)


def test_calculator_errors():
    for eps, beta in ((0.0, 0.1), (0.1, 0.0), (1.0, 0.5), (-0.1, 0.5)):
        with pytest.raises(ValueError):
            theorem2_iterations(eps, beta, unit(), 0.0, 1.0, 1.0)
        with pytest.raises(ValueError):
            theorem4_iterations(eps, beta, unit(), 0.0, 1.0)
    with pytest.raises(ValueError):
        rate_bound_thm2(0, 1.0, 1.0, unit(), 0.0)


def test_calculators_are_pure():
    c = unit(delta_hat=math.pi)
    assert theorem2_iterations(0.3, 0.4, c, 2.0, 0.5, 0.5) == theorem2_iterations(0.3, 0.4, c, 2.0, 0.5, 0.5)
