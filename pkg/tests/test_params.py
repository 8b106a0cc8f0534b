import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import hyper_for, random_eta, random_spd
from mixatlas.errors import DimensionMismatch, NonPositiveVariance, SingularCovariance
from mixatlas.kernels import gaussian_kernel
from mixatlas.params import (
    ComponentParams, HiddenState, Hyperparams, ModelParams, SufficientStats, absorbing_bounds,
    complete_loglik, expected_objective, gaussian_logpdf, image_loglik, in_absorbing_set,
    log_posterior_penalty, m_step, sa_update, sufficient_stats,
)


def _random_problem(geometry, n=5, tau_m=2, seed=0):
    rng = np.random.default_rng(seed)
    eta = random_eta(rng, geometry, tau_m)
    data = rng.normal(scale=0.5, size=(n, geometry.n_pixels))
    hidden = HiddenState(rng.normal(scale=0.2, size=(n, 2 * geometry.k_g)),
                         rng.integers(0, tau_m, size=n))
    return rng, eta, data, hidden


# -- containers --------------------------------------------------------------

def test_component_validation():
    with pytest.raises(NonPositiveVariance):
        ComponentParams(np.zeros(2), 0.0, np.eye(2))
    with pytest.raises(DimensionMismatch):
        ComponentParams(np.zeros(2), 1.0, np.zeros((2, 3)))


def test_rho_must_be_probability():
    c = ComponentParams(np.zeros(2), 1.0, np.eye(2))
    with pytest.raises(ValueError):
        ModelParams([c, c.copy()], [0.6, 0.5])
    ModelParams([c, c.copy()], [0.5, 0.5])


def test_hyperparam_bounds(small_geometry):
    with pytest.raises(ValueError):
        hyper_for(small_geometry, a_p=2.5)
    with pytest.raises(ValueError):
        hyper_for(small_geometry, a_g=4 * small_geometry.k_g)
    h = hyper_for(small_geometry)
    assert h.a_g == 4 * small_geometry.k_g + 1 and h.a_p == 3


def test_kernel_induced_priors(small_geometry):
    h = hyper_for(small_geometry)
    np.testing.assert_allclose(h.sigma_p_mat @ h.precision_p, np.eye(4), atol=1e-6)
    kg = small_geometry.k_g
    assert np.allclose(h.sigma_g_mat[:kg, kg:], 0)
    assert np.allclose(h.sigma_g_mat[:kg, :kg], h.sigma_g_mat[kg:, kg:])


# -- likelihoods -------------------------------------------------------------

def test_image_loglik_vanishes(small_geometry):
    g = small_geometry
    rng = np.random.default_rng(0)
    comp = ComponentParams(rng.normal(size=4), 1.0 / (2 * math.pi), np.eye(8))
    beta = rng.normal(scale=0.2, size=8)
    y = g.render(comp.alpha, beta)
    assert image_loglik(y, beta, comp, g) == pytest.approx(0.0, abs=1e-12)


def test_image_loglik_zero_template(small_geometry):
    comp = ComponentParams(np.zeros(4), 0.3, np.eye(8))
    value = image_loglik(np.zeros(16), np.ones(8), comp, small_geometry)
    assert value == pytest.approx(-8 * math.log(2 * math.pi * 0.3), abs=1e-12)


def test_image_loglik_matches_scalar_loop(small_geometry):
    g = small_geometry
    rng = np.random.default_rng(1)
    comp = ComponentParams(rng.normal(size=4), 0.2, np.eye(8))
    beta = rng.normal(scale=0.3, size=8)
    y = rng.normal(size=16)
    ref = 0.0
    for u in range(16):
        v = g.coords[u]
        zx = sum(gaussian_kernel(v, g.g_landmarks.points[j], 0.6) * beta[j] for j in range(4))
        zy = sum(gaussian_kernel(v, g.g_landmarks.points[j], 0.6) * beta[4 + j]
                 for j in range(4))
        moved = (v[0] - zx, v[1] - zy)
        pred = sum(gaussian_kernel(moved, g.p_points[j], 0.8) * comp.alpha[j] for j in range(4))
        ref += -0.5 * math.log(2 * math.pi * 0.2) - (y[u] - pred) ** 2 / 0.4
    assert image_loglik(y, beta, comp, g) == pytest.approx(ref, abs=1e-10)


def test_image_loglik_dimension_errors(small_geometry):
    comp = ComponentParams(np.zeros(4), 1.0, np.eye(8))
    with pytest.raises(DimensionMismatch):
        image_loglik(np.zeros(15), np.zeros(8), comp, small_geometry)
    with pytest.raises(DimensionMismatch):
        image_loglik(np.zeros(16), np.zeros(7), comp, small_geometry)


def test_complete_loglik_single_image(small_geometry):
    g = small_geometry
    rng = np.random.default_rng(2)
    gamma = random_spd(rng, 8, 0.1)
    c = ComponentParams(rng.normal(size=4), 0.4, gamma)
    eta = ModelParams([c, c.copy()], [0.3, 0.7])
    y = g.render(c.alpha)
    hidden = HiddenState(np.zeros((1, 8)), [1])
    ref = (-8 * math.log(2 * math.pi * 0.4) - 4 * math.log(2 * math.pi)
           - 0.5 * math.log(np.linalg.det(gamma)) + math.log(0.7))
    assert complete_loglik(y[None], hidden, eta, g) == pytest.approx(ref, abs=1e-10)


def test_complete_loglik_one_component_has_no_rho_term(small_geometry):
    rng, eta, data, hidden = _random_problem(small_geometry, n=3, tau_m=1)
    ref = sum(image_loglik(y, b, eta.components[0], small_geometry)
              + gaussian_logpdf(b, eta.components[0].gamma_g) for y, b in zip(data, hidden.beta))
    assert complete_loglik(data, hidden, eta, small_geometry) == pytest.approx(ref, abs=1e-10)


def test_complete_loglik_term_by_term():
    from mixatlas.kernels import Geometry, KernelConfig
    g = Geometry.regular(3, 3, (2, 2), (2, 2), KernelConfig(0.7, 0.6))
    rng, eta, data, hidden = _random_problem(g, n=2)
    ref = 0.0
    for y, b, t in zip(data, hidden.beta, hidden.tau):
        comp = eta.components[t]
        resid = y - g.design(b) @ comp.alpha
        ref += -4.5 * math.log(2 * math.pi * comp.sigma2) - resid @ resid / (2 * comp.sigma2)
        gi = np.linalg.inv(comp.gamma_g)
        ref += (-4 * math.log(2 * math.pi) - 0.5 * math.log(np.linalg.det(comp.gamma_g))
                - 0.5 * b @ gi @ b)
        ref += math.log(eta.rho[t])
    assert complete_loglik(data, hidden, eta, g) == pytest.approx(ref, abs=1e-10)


def test_complete_loglik_decreases_in_tails(small_geometry):
    rng, eta, _, _ = _random_problem(small_geometry, n=1)
    comp = eta.components[0]
    y = small_geometry.render(comp.alpha)[None]
    direction = rng.normal(size=8)
    values = [complete_loglik(y, HiddenState(c * direction[None], [0]), eta, small_geometry)
              for c in (2.0, 4.0, 8.0, 16.0)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_complete_loglik_singular_covariance(small_geometry):
    c = ComponentParams(np.zeros(4), 1.0, np.zeros((8, 8)))
    eta = ModelParams([c], [1.0])
    with pytest.raises(SingularCovariance):
        complete_loglik(np.zeros((1, 16)), HiddenState(np.zeros((1, 8)), [0]), eta,
                        small_geometry)


# -- sufficient statistics ---------------------------------------------------

def test_stats_all_in_first_component(small_geometry):
    _, _, data, hidden = _random_problem(small_geometry, n=4)
    hidden = HiddenState(hidden.beta, np.zeros(4, dtype=int))
    s = sufficient_stats(data, hidden, small_geometry, 2)
    np.testing.assert_array_equal(s.s0, [4, 0])
    for block in s.blocks():
        assert np.all(block[1] == 0)


def test_stats_single_image_at_zero(small_geometry):
    y = np.random.default_rng(3).normal(size=(1, 16))
    s = sufficient_stats(y, HiddenState(np.zeros((1, 8)), [0]), small_geometry, 1)
    k0 = small_geometry.design0
    np.testing.assert_allclose(s.s2[0], k0.T @ k0, rtol=0, atol=1e-15)
    assert np.all(s.s3[0] == 0)


def test_stats_match_accumulation_oracle(small_geometry):
    _, _, data, hidden = _random_problem(small_geometry, n=3)
    s = sufficient_stats(data, hidden, small_geometry, 2)
    ref = SufficientStats.zeros(2, 4, 4)
    for y, b, t in zip(data, hidden.beta, hidden.tau):
        k = np.array([[gaussian_kernel(v - z, p, 0.8) for p in small_geometry.p_points]
                      for v, z in zip(small_geometry.coords, small_geometry.displacement(b))])
        ref.s0[t] += 1
        ref.s1[t] += k.T @ y
        ref.s2[t] += k.T @ k
        ref.s3[t] += np.outer(b, b)
        ref.s4[t] += y @ y
    for a, b in zip(s.blocks(), ref.blocks()):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_stats_additive_over_subsets(small_geometry):
    _, _, data, hidden = _random_problem(small_geometry, n=6)
    whole = sufficient_stats(data, hidden, small_geometry, 2)
    a = sufficient_stats(data[:2], HiddenState(hidden.beta[:2], hidden.tau[:2]), small_geometry, 2)
    b = sufficient_stats(data[2:], HiddenState(hidden.beta[2:], hidden.tau[2:]), small_geometry, 2)
    for x, y in zip(whole.blocks(), (a + b).blocks()):
        np.testing.assert_allclose(x, y, rtol=1e-12, atol=1e-12)


def test_stats_dimension_check(small_geometry):
    with pytest.raises(DimensionMismatch):
        sufficient_stats(np.zeros((2, 15)), HiddenState(np.zeros((2, 8)), [0, 0]),
                         small_geometry, 1)


# -- stochastic approximation ------------------------------------------------

def _two_stats(geometry, seed=0):
    _, _, data, h1 = _random_problem(geometry, n=5, seed=seed)
    rng = np.random.default_rng(seed + 100)
    h2 = HiddenState(rng.normal(scale=0.3, size=h1.beta.shape), rng.integers(0, 2, size=5))
    return data, sufficient_stats(data, h1, geometry, 2), sufficient_stats(data, h2, geometry, 2)


def test_sa_update_unit_step(small_geometry):
    _, s, s_new = _two_stats(small_geometry)
    assert sa_update(s, s_new, 1.0).equals(s_new)


def test_sa_update_fixed_point(small_geometry):
    _, s, _ = _two_stats(small_geometry)
    assert sa_update(s, s.copy(), 0.37).equals(s)


def test_sa_update_elementwise(small_geometry):
    _, s, s_new = _two_stats(small_geometry)
    out = sa_update(s, s_new, 0.3)
    for a, b, c in zip(s.blocks(), s_new.blocks(), out.blocks()):
        np.testing.assert_allclose(c, 0.7 * a + 0.3 * b, rtol=1e-14, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.floats(1e-6, 1.0), st.integers(0, 1000))
def test_sa_update_preserves_absorbing_set(small_geometry, delta, seed):
    data, s, s_new = _two_stats(small_geometry, seed)
    assert in_absorbing_set(s, data) and in_absorbing_set(s_new, data)
    assert in_absorbing_set(sa_update(s, s_new, delta), data)


def test_sa_update_rejects_bad_step(small_geometry):
    _, s, s_new = _two_stats(small_geometry)
    with pytest.raises(ValueError):
        sa_update(s, s_new, 1.5)


# -- absorbing set -----------------------------------------------------------

@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 3.0))
def test_fresh_stats_are_absorbed(small_geometry, seed, scale):
    rng = np.random.default_rng(seed)
    data = rng.normal(scale=scale, size=(4, 16))
    hidden = HiddenState(rng.normal(scale=2.0, size=(4, 8)), rng.integers(0, 3, size=4))
    assert in_absorbing_set(sufficient_stats(data, hidden, small_geometry, 3), data)


def test_count_above_n_is_rejected(small_geometry):
    data, s, _ = _two_stats(small_geometry)
    s.s0[0] = data.shape[0] + 1
    assert not in_absorbing_set(s, data)


def test_absorbing_bounds_scale_with_design_norm(small_geometry):
    data, s, _ = _two_stats(small_geometry)
    b = absorbing_bounds(data, 4)
    assert b.s2 == 5 * 16 * 4
    assert b.s4 == pytest.approx(float((data ** 2).sum()))
    s.s3[1] = -np.eye(8)
    assert not in_absorbing_set(s, bounds=b)


# -- M-step ------------------------------------------------------------------

def test_rho_worked_example(small_geometry):
    h = hyper_for(small_geometry, a_rho=1.0)
    s = SufficientStats.zeros(2, 4, 4)
    s.s0[:] = [6, 4]
    s.s2[:] = np.eye(4)
    prev = random_eta(np.random.default_rng(0), small_geometry)
    eta = m_step(s, h, prev, 10, 16)
    np.testing.assert_allclose(eta.rho, [7 / 12, 5 / 12], rtol=0, atol=1e-15)


def test_empty_component_falls_back_to_prior(small_geometry):
    h = hyper_for(small_geometry)
    s = SufficientStats.zeros(2, 4, 4)
    prev = random_eta(np.random.default_rng(1), small_geometry)
    eta = m_step(s, h, prev, 0, 16)
    for comp in eta.components:
        np.testing.assert_allclose(comp.gamma_g, h.sigma_g_mat, rtol=1e-14, atol=1e-16)
        np.testing.assert_allclose(comp.alpha, h.mu_p, atol=1e-12)
        assert comp.sigma2 == pytest.approx(h.sigma0_2)


def test_rho_sums_to_one(small_geometry):
    h = hyper_for(small_geometry, tau_m=3, a_rho=0.7)
    s = SufficientStats.zeros(3, 4, 4)
    s.s0[:] = [0.1, 2.3, 7.6]
    s.s2[:] = np.eye(4)
    eta = m_step(s, h, random_eta(np.random.default_rng(2), small_geometry, 3), 10, 16)
    assert eta.rho.sum() == pytest.approx(1.0, abs=1e-15)


def test_sigma_fixed_copies_variance(small_geometry):
    h = hyper_for(small_geometry, sigma_fixed=True)
    data, s, _ = _two_stats(small_geometry)
    prev = random_eta(np.random.default_rng(3), small_geometry)
    eta = m_step(s, h, prev, 5, 16)
    np.testing.assert_array_equal(eta.sigma2(), prev.sigma2())
    for t, comp in enumerate(eta.components):
        lhs = s.s2[t] + prev.sigma2()[t] * h.precision_p
        np.testing.assert_allclose(lhs @ comp.alpha, s.s1[t] + prev.sigma2()[t] *
                                   h.precision_p @ h.mu_p, atol=1e-9)


def test_alpha_sigma_fixed_point(small_geometry):
    h = hyper_for(small_geometry)
    data, s, _ = _two_stats(small_geometry)
    eta = m_step(s, h, random_eta(np.random.default_rng(4), small_geometry), 5, 16)
    for t, comp in enumerate(eta.components):
        a, sig = comp.alpha, comp.sigma2
        rss = s.s4[t] + a @ s.s2[t] @ a - 2 * a @ s.s1[t]
        assert sig == pytest.approx((rss + h.a_p * h.sigma0_2) / (s.s0[t] * 16 + h.a_p),
                                    rel=1e-7)
        np.testing.assert_allclose((s.s2[t] + sig * h.precision_p) @ a, s.s1[t], atol=1e-6)


def test_m_step_increases_objective(small_geometry):
    h = hyper_for(small_geometry)
    data, s, _ = _two_stats(small_geometry)
    rng = np.random.default_rng(5)
    eta = m_step(s, h, random_eta(rng, small_geometry), 5, 16)
    best = expected_objective(s, eta, h, 16)
    for _ in range(20):
        other = random_eta(rng, small_geometry)
        assert expected_objective(s, other, h, 16) < best


def test_expected_objective_matches_complete_loglik(small_geometry):
    h = hyper_for(small_geometry)
    rng, eta, data, hidden = _random_problem(small_geometry, n=4)
    s = sufficient_stats(data, hidden, small_geometry, 2)
    lhs = expected_objective(s, eta, h, 16)
    rhs = complete_loglik(data, hidden, eta, small_geometry) + log_posterior_penalty(eta, h)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-9)


# -- priors ------------------------------------------------------------------

def test_penalty_alpha_term_vanishes_at_mean(small_geometry):
    h = hyper_for(small_geometry)
    eta = random_eta(np.random.default_rng(6), small_geometry)
    eta0 = ModelParams([ComponentParams(h.mu_p.copy(), c.sigma2, c.gamma_g)
                        for c in eta.components], eta.rho)
    d = log_posterior_penalty(eta, h) - log_posterior_penalty(eta0, h)
    ref = sum(-0.5 * c.alpha @ h.precision_p @ c.alpha for c in eta.components)
    assert d == pytest.approx(ref, rel=1e-12)


def test_uniform_rho_beats_skewed(small_geometry):
    h = hyper_for(small_geometry)
    eta = random_eta(np.random.default_rng(7), small_geometry)
    uni = ModelParams(eta.components, [0.5, 0.5])
    skew = ModelParams(eta.components, [0.9, 0.1])
    assert log_posterior_penalty(uni, h) > log_posterior_penalty(skew, h)


def test_penalty_term_by_term(small_geometry):
    h = hyper_for(small_geometry, a_p=4.0, sigma0_2=0.3, a_rho=2.0)
    eta = random_eta(np.random.default_rng(8), small_geometry)
    ref = 0.0
    for c in eta.components:
        d = c.alpha - h.mu_p
        ref += -0.5 * d @ np.linalg.inv(h.sigma_p_mat) @ d
        ref += h.a_p * (-h.sigma0_2 / (2 * c.sigma2) - 0.5 * math.log(c.sigma2))
        ref += h.a_g * (-0.5 * np.trace(np.linalg.inv(c.gamma_g) @ h.sigma_g_mat)
                        - 0.5 * math.log(np.linalg.det(c.gamma_g)))
    ref += h.a_rho * np.log(eta.rho).sum()
    assert log_posterior_penalty(eta, h) == pytest.approx(ref, rel=1e-6)
