import math
import warnings

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from subjectdp import accountant as acct

B4 = acct.PrivacyBudget(4.0, 1e-5)


# -- Renyi curve ------------------------------------------------------------


def test_full_batch_closed_form():
    assert acct.rdp_subsampled_gaussian(1.0, 2.0, 8) == 1.0


def test_subsampling_never_exceeds_full_batch():
    assert acct.rdp_subsampled_gaussian(0.01, 1.0, 2) <= acct.rdp_subsampled_gaussian(1.0, 1.0, 2)


@pytest.mark.parametrize("order", range(2, 65))
def test_integer_orders_match_quadrature(order):
    got = acct.rdp_subsampled_gaussian(0.1, 1.5, order)
    assert oracles.rel_err(got, oracles.rdp_quadrature(0.1, 1.5, order)) <= 1e-6


@pytest.mark.parametrize("order", [1.25, 1.5, 2.5, 7.75])
@pytest.mark.parametrize("q,sigma", [(0.01, 0.8), (0.3, 2.0)])
def test_fractional_orders_match_quadrature(q, sigma, order):
    got = acct.rdp_subsampled_gaussian(q, sigma, order)
    assert oracles.rel_err(got, oracles.rdp_quadrature(q, sigma, order)) <= 1e-6


@pytest.mark.parametrize("order", [1.0, 0.5, -2])
def test_order_at_most_one_rejected(order):
    with pytest.raises(ValueError):
        acct.rdp_subsampled_gaussian(0.1, 1.0, order)


def test_curve_matches_scalar_evaluation():
    curve = acct.rdp_curve(0.05, 1.1)
    for k in (0, 1, 2, 10, 100, len(acct.DEFAULT_ORDERS) - 1):
        assert curve[k] == pytest.approx(
            acct.rdp_subsampled_gaussian(0.05, 1.1, acct.DEFAULT_ORDERS[k]), rel=1e-12)


def test_default_grid():
    grid = acct.DEFAULT_ORDERS
    assert grid[:3] == (1.25, 1.5, 2.0) and grid[-1] == 512.0
    assert len(grid) == 2 + 511


@settings(max_examples=60, deadline=None)
@given(
    q=st.floats(1e-4, 1.0),
    sigma=st.floats(0.3, 50),
    a=st.sampled_from([1.25, 1.5, 2.0, 3.0, 5.5, 10.0, 40.0]),
    grow=st.floats(1.01, 3.0),
)
def test_rdp_monotonicity(q, sigma, a, grow):
    base = acct.rdp_subsampled_gaussian(q, sigma, a)
    tol = 1e-12 * max(base, 1e-300)
    assert base >= 0 and math.isfinite(base)
    assert acct.rdp_subsampled_gaussian(q, sigma, a * grow) >= base - tol
    assert acct.rdp_subsampled_gaussian(min(q * grow, 1.0), sigma, a) >= base - tol
    assert acct.rdp_subsampled_gaussian(q, sigma * grow, a) <= base + tol


# -- RDP to DP ---------------------------------------------------------------


def test_epsilon_single_order():
    eps = acct.epsilon_from_rdp([2.0], [1.0], 1e-5)
    assert eps == pytest.approx(float(1 + mp.log(mp.mpf(10) ** 5)), rel=1e-14)
    assert eps == pytest.approx(12.5129, abs=1e-4)


def test_zero_rdp_uses_largest_order():
    orders = acct.DEFAULT_ORDERS
    eps = acct.epsilon_from_rdp(orders, np.zeros(len(orders)), 1e-5)
    assert eps == math.log(1e5) / (orders[-1] - 1)


def test_empty_grid_rejected():
    with pytest.raises(ValueError):
        acct.epsilon_from_rdp([], [], 1e-5)


def test_more_steps_never_lower_epsilon():
    e1 = acct.epsilon_for_sigma(0.05, 1.0, 100, 1e-5)
    e2 = acct.epsilon_for_sigma(0.05, 1.0, 200, 1e-5)
    assert e2 >= e1
    curve = acct.rdp_curve(0.05, 1.0)
    np.testing.assert_array_equal(200 * curve, 2 * (100 * curve))


# -- sigma solver ------------------------------------------------------------


def test_solve_sigma_bracket():
    sigma = acct.solve_sigma(B4, acct.AccountingParams(0.1, 100 * 25))
    assert acct.epsilon_for_sigma(0.1, sigma, 2500, 1e-5) <= 4.0
    assert acct.epsilon_for_sigma(0.1, 0.95 * sigma, 2500, 1e-5) > 4.0
    assert acct.epsilon_for_sigma(0.1, sigma * (1 - 2 * acct.SIGMA_RTOL), 2500, 1e-5) > 4.0


def test_subject_multiplier_raises_sigma():
    p1 = acct.AccountingParams(0.01, 1000)
    p10 = acct.AccountingParams(0.01, 1000, subject_multiplier=10)
    assert acct.solve_sigma(B4, p10) > acct.solve_sigma(B4, p1)


def test_sigma_scales_like_sqrt_steps():
    s1 = acct.solve_sigma(B4, acct.AccountingParams(0.1, 2500))
    s4 = acct.solve_sigma(B4, acct.AccountingParams(0.1, 10000))
    assert s4 / s1 == pytest.approx(2.0, rel=0.15)


def test_solve_sigma_monotone_in_budget_and_q():
    p = acct.AccountingParams(0.05, 500)
    assert acct.solve_sigma(acct.PrivacyBudget(2.0, 1e-5), p) >= acct.solve_sigma(B4, p)
    assert acct.solve_sigma(B4, acct.AccountingParams(0.1, 500)) >= acct.solve_sigma(B4, p)


def test_solve_sigma_infeasible():
    with pytest.raises(acct.BudgetInfeasibleError, match="budget infeasible"):
        acct.solve_sigma(acct.PrivacyBudget(1e-6, 1e-12), acct.AccountingParams(1.0, 10**6))


def test_solve_sigma_needs_target_delta():
    with pytest.raises(ValueError):
        acct.solve_sigma(acct.PrivacyBudget(1.0, 2.0), acct.AccountingParams(0.1, 10))


def test_group_size_uses_split_budget():
    z3 = acct.solve_sigma(B4, acct.AccountingParams(0.08, 400, group_size=3))
    split = acct.group_budget_split(B4, 3)
    assert split.epsilon == pytest.approx(4 / 3)
    assert z3 == acct.solve_sigma(split, acct.AccountingParams(0.08, 400))
    assert z3 > acct.solve_sigma(B4, acct.AccountingParams(0.08, 400))


def test_effective_q_clamped_with_warning():
    p = acct.AccountingParams(0.5, 10, subject_multiplier=4)
    with pytest.warns(acct.PrivacyWarning):
        assert p.effective_q == 1.0


def test_accounting_params_validation():
    for kwargs in ({"q": 0.0, "steps": 1}, {"q": 0.5, "steps": 0},
                   {"q": 0.5, "steps": 1, "group_size": 0},
                   {"q": 0.5, "steps": 1, "subject_multiplier": 0.5}):
        with pytest.raises(ValueError):
            acct.AccountingParams(**kwargs)


def test_budget_validation():
    for eps, delta in ((0, 1e-5), (math.inf, 1e-5), (1, 0), (1, math.nan)):
        with pytest.raises(ValueError):
            acct.PrivacyBudget(eps, delta)
    assert acct.PrivacyBudget(1, 3).vacuous


# -- closed form ------------------------------------------------------------


def test_closed_form_value():
    got = acct.closed_form_sigma(B4, acct.AccountingParams(0.1, 2500))
    expected = mp.mpf("0.1") * mp.sqrt(2500 * mp.log(mp.mpf(10) ** 5)) / 4
    assert oracles.rel_err(got.sigma, expected) <= 1e-14
    assert got.sigma == pytest.approx(4.241337765, rel=1e-9)
    assert got.precondition_met


def test_closed_form_linear_in_k_and_q():
    base = acct.closed_form_sigma(B4, acct.AccountingParams(0.05, 2500)).sigma
    k10 = acct.closed_form_sigma(B4, acct.AccountingParams(0.05, 2500, subject_multiplier=10)).sigma
    q2 = acct.closed_form_sigma(B4, acct.AccountingParams(0.1, 2500)).sigma
    assert k10 == pytest.approx(10 * base, rel=1e-14)
    assert q2 == pytest.approx(2 * base, rel=1e-14)


def test_closed_form_precondition_warns():
    with pytest.warns(acct.PrivacyWarning):
        got = acct.closed_form_sigma(B4, acct.AccountingParams(0.01, 100))
    assert not got.precondition_met and got.sigma > 0


# -- group privacy ----------------------------------------------------------


@pytest.mark.parametrize("variant", ["loose", "tight"])
def test_group_identity_at_one(variant):
    b = acct.PrivacyBudget(1.0, 1e-5)
    assert acct.group_dp_convert(b, 1, variant) == b


def test_group_k2_values():
    b = acct.PrivacyBudget(1.0, 1e-5)
    loose = acct.group_dp_convert(b, 2, "loose")
    tight = acct.group_dp_convert(b, 2, "tight")
    assert loose.epsilon == tight.epsilon == 2.0
    assert loose.delta == pytest.approx(5.43656e-5, rel=1e-5)
    assert tight.delta == pytest.approx(3.71828e-5, rel=1e-5)


def test_group_unknown_variant():
    with pytest.raises(ValueError):
        acct.group_dp_convert(B4, 2, "medium")


def test_group_overflow_is_loud():
    with pytest.raises(OverflowError):
        acct.group_dp_convert(acct.PrivacyBudget(20.0, 1e-5), 64)
    assert math.isfinite(acct.log_group_delta(20.0, 1e-5, 64))


@settings(max_examples=100, deadline=None)
@given(eps=st.floats(1e-3, 10), delta=st.floats(1e-12, 0.5), k=st.integers(1, 64))
def test_tight_never_exceeds_loose(eps, delta, k):
    loose = acct.log_group_delta(eps, delta, k, "loose")
    tight = acct.log_group_delta(eps, delta, k, "tight")
    if k == 1:
        assert loose == tight
    else:
        assert tight < loose


@settings(max_examples=100, deadline=None)
@given(eps=st.floats(1e-2, 10), delta=st.floats(1e-12, 0.5), Z=st.integers(1, 64))
def test_split_inverts_loose_conversion(eps, delta, Z):
    total = acct.PrivacyBudget(eps, delta)
    back = acct.group_dp_convert(acct.group_budget_split(total, Z), Z, "loose")
    assert back.epsilon == pytest.approx(eps, rel=1e-12)
    assert back.delta == pytest.approx(delta, rel=1e-12)


def test_split_identity_and_factor_three():
    assert acct.group_budget_split(B4, 1) == B4
    assert acct.group_budget_split(B4, 3).epsilon == pytest.approx(4 / 3, rel=1e-15)


# -- UserLDP -----------------------------------------------------------------


def test_randomized_response_floor():
    eps, delta = mp.mpf(4), mp.mpf("1e-5")
    expected = 1 / (mp.sqrt(2 * mp.pi) * eps * delta * mp.exp(eps))
    assert oracles.rel_err(acct.randomized_response_sigma(B4), expected) <= 1e-13
    assert acct.randomized_response_sigma(B4) == pytest.approx(182.67, abs=0.01)


def test_randomized_response_decreases_with_delta():
    assert acct.randomized_response_sigma(acct.PrivacyBudget(4, 1e-4)) < \
        acct.randomized_response_sigma(B4)


def test_userldp_sigma_is_max_of_constraints():
    got = acct.userldp_sigma(B4, 2500)
    assert got.sigma == max(got.accountant_sigma, got.randomized_response_sigma)
    assert got.sigma >= 182
    assert got.accountant_sigma == acct.solve_sigma(B4, acct.AccountingParams(1.0, 2500))


# -- rounds ------------------------------------------------------------------


@pytest.mark.parametrize("eps,R,expected", [(4, 1, 4.0), (4, 100, 0.4), (4, 25, 0.8)])
def test_apportion_per_round(eps, R, expected):
    assert acct.apportion_per_round(eps, R) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("R,s,expected", [(100, 16, 25), (200, 16, 50), (7, 1, 7), (10, 3, 6)])
def test_round_reduction(R, s, expected):
    plan = acct.plan_horizontal(R, s, "round_reduction")
    assert plan.effective_rounds == expected and plan.step_multiplier == 1


def test_minibatch_scaling_keeps_rounds():
    plan = acct.plan_horizontal(100, 16, "minibatch_scaling")
    assert plan.effective_rounds == 100 and plan.step_multiplier == 16
    assert acct.plan_horizontal(9, 1, "minibatch_scaling").step_multiplier == 1


@settings(max_examples=200, deadline=None)
@given(R=st.integers(1, 10**6), s=st.integers(1, 10**4))
def test_reduced_rounds_is_exact_ceiling(R, s):
    e = acct.reduced_rounds(R, s)
    assert e == int(mp.ceil(mp.mpf(R) / mp.sqrt(s)))


# -- utility bounds ----------------------------------------------------------

SMALL = dict(L=1, M=1, eta=0.1, T=100, n=1000, d=10, epsilon=1, delta=1e-5)


def test_localgroupdp_fixed_instance():
    x = acct.UtilityBoundInputs(**SMALL, k=2, q=0.1)
    ref = oracles.bound_localgroupdp(1, 1, 0.1, 100, 1000, 10, 1, 1e-5, 2, 0.1)
    assert oracles.rel_err(acct.utility_bound_localgroupdp(x), ref) <= 1e-12


def test_localgroupdp_k1_uses_log_inverse_delta():
    x = acct.UtilityBoundInputs(**SMALL, k=1, q=0.1)
    third = 0.1 * 10 * 0.01 * 100 * math.log(1e5)
    base = 1 / 20 + 0.05 + 0.1 * 101 / 1000
    assert acct.utility_bound_localgroupdp(x) == pytest.approx(base + third, rel=1e-13)


def test_localgroupdp_quadratic_in_k():
    def third(k):
        x = acct.UtilityBoundInputs(**SMALL, k=k, q=0.1)
        return acct.utility_bound_localgroupdp(x) - (1 / 20 + 0.05 + 0.1 * 101 / 1000)

    for k in (1, 2, 4, 8):
        assert third(2 * k) >= 4 * third(k)


def test_userldp_bound_collapse_and_growth():
    m1 = acct.utility_bound_userldp(acct.UtilityBoundInputs(**SMALL, m=1))
    g = acct.utility_bound_localgroupdp(acct.UtilityBoundInputs(**SMALL, k=1, q=1))
    assert m1 == pytest.approx(g, rel=1e-15)
    base = 1 / 20 + 0.05 + 0.1 * 101 / 1000

    def third(m):
        return acct.utility_bound_userldp(acct.UtilityBoundInputs(**SMALL, m=m)) - base

    assert third(512) >= 64 * third(64)


def test_userldp_fixed_instance():
    x = acct.UtilityBoundInputs(**SMALL, m=64)
    ref = oracles.bound_userldp(1, 1, 0.1, 100, 1000, 10, 1, 1e-5, 64)
    assert oracles.rel_err(acct.utility_bound_userldp(x), ref) <= 1e-12


def test_higradavgdp_k1_first_term():
    x = acct.UtilityBoundInputs(**SMALL, k=1, q=0.1)
    first = 1 / (2 * 0.1 * 100) + 0.1 / 2
    noise = 0.1 * 10 * 0.01 * 100 * math.log(1e5)
    assert acct.utility_bound_higradavgdp(x) == pytest.approx(first + noise + 0.1 * 101 / 1000,
                                                              rel=1e-13)


def test_higradavgdp_first_term_linear_in_k():
    def first(k):
        x = acct.UtilityBoundInputs(**{**SMALL, "d": 1e-300}, k=k, q=1e-100)
        return acct.utility_bound_higradavgdp(x)

    assert first(2000) / first(1000) == pytest.approx(2.0, rel=1e-3)


def test_higradavgdp_fixed_instance():
    x = acct.UtilityBoundInputs(**SMALL, k=3, q=0.05)
    ref = oracles.bound_higradavgdp(1, 1, 0.1, 100, 1000, 10, 1, 1e-5, 3, 0.05)
    assert oracles.rel_err(acct.utility_bound_higradavgdp(x), ref) <= 1e-12


def test_bound_inputs_must_be_positive():
    with pytest.raises(ValueError):
        acct.UtilityBoundInputs(**{**SMALL, "L": 0})
    with pytest.raises(ValueError):
        acct.UtilityBoundInputs(**{**SMALL, "delta": 1.0})


@settings(max_examples=60, deadline=None)
@given(
    k=st.floats(1, 50), d=st.integers(1, 10**5), T=st.integers(1, 10**5),
    grow=st.floats(1.0, 4.0),
)
def test_bound_noise_terms_monotone(k, d, T, grow):
    def val(f, **kw):
        base = dict(L=1, M=1, eta=0.01, T=T, n=100, d=d, epsilon=2, delta=1e-5, k=k, q=0.1, m=1)
        base.update(kw)
        return f(acct.UtilityBoundInputs(**base))

    for f in (acct.utility_bound_localgroupdp, acct.utility_bound_higradavgdp):
        assert math.isfinite(val(f))
        assert val(f, k=k * grow) >= val(f) * (1 - 1e-12) or f is acct.utility_bound_higradavgdp
        assert val(f, d=int(d * grow)) >= val(f) * (1 - 1e-12)
    assert val(acct.utility_bound_userldp, m=int(1 + 3 * grow)) >= val(acct.utility_bound_userldp)


def test_noise_plan_as_dict():
    plan = acct.NoisePlan(1.5, 0.4, 25, acct.HorizontalMode.ROUND_REDUCTION, 100, 2500, 0.1)
    d = plan.as_dict()
    assert d["mode"] == "round_reduction" and d["effective_rounds"] == 25


def test_no_warnings_in_contract():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        acct.solve_sigma(B4, acct.AccountingParams(0.05, 200))
