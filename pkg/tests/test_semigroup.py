import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import enumerate_paths
from fkc.errors import HypothesisViolation, StructuralError
from fkc.measure import Measure, StateSpace
from fkc.models import (
    reference_chain,
    rows_equal_chain,
    shifted_reference_chain,
    two_state_ctmc,
)
from fkc.semigroup import (
    backward_weight,
    discrete_chain_model,
    k_operator,
    phi,
    propagate_unnormalized,
)


def test_unpenalized_mass_preserved():
    m = rows_equal_chain()
    mu = Measure(m.space, [0.1, 0.6, 0.3])
    out = propagate_unnormalized(m, mu, 0, 7)
    assert out.total_mass == pytest.approx(1.0, abs=1e-14)


def test_empty_interval(ref_model):
    mu = Measure(ref_model.space, [0.2, 0.3, 0.5])
    assert np.allclose(propagate_unnormalized(ref_model, mu, 4, 4).weights, mu.weights, rtol=1e-15)
    assert np.array_equal(backward_weight(ref_model, 9, 9), np.ones(3))


def test_constant_potential_mass_and_backward_weight():
    m = two_state_ctmc(kappa=-1.0)
    mu = Measure(m.space, [0.3, 0.7])
    out = propagate_unnormalized(m, mu, 0, 12)  # three time units
    assert out.total_mass == pytest.approx(np.exp(-3.0), rel=1e-12)
    h = backward_weight(m, 4, 20)
    assert np.allclose(h, np.exp(-4.0), rtol=1e-12)


def test_s_greater_than_t(ref_model):
    with pytest.raises(ValueError):
        propagate_unnormalized(ref_model, Measure.uniform(ref_model.space), 5, 3)
    with pytest.raises(ValueError):
        backward_weight(ref_model, 5, 3)
    with pytest.raises(ValueError):
        k_operator(ref_model, Measure.uniform(ref_model.space), 0, 5, 3)


def test_zero_mass_is_hypothesis_violation():
    m = discrete_chain_model(StateSpace.range(2), 3, np.eye(2), np.array([1.0, 0.0]))
    with pytest.raises(HypothesisViolation):
        m.kernel(0)


def test_mismatched_measure(ref_model):
    with pytest.raises(StructuralError):
        phi(ref_model, Measure.uniform(StateSpace.range(2)), 0, 1)


def test_rows_equal_forgets_start():
    m = rows_equal_chain((0.2, 0.5, 0.3))
    out = phi(m, Measure.dirac(m.space, 0), 3, 4)
    assert np.allclose(out.weights, [0.2, 0.5, 0.3], atol=1e-15)


def test_shift_invariance():
    base = reference_chain(20)
    shifted = shifted_reference_chain(-0.7, 20)
    mu = Measure(base.space, [0.5, 0.25, 0.25])
    a = phi(base, mu, 2, 17)
    b = phi(shifted, mu, 2, 17)
    assert np.abs(a.weights - b.weights).sum() <= 1e-12
    a = k_operator(base, mu, 2, 9, 17)
    b = k_operator(shifted, mu, 2, 9, 17)
    assert np.abs(a.weights - b.weights).sum() <= 1e-12


@pytest.mark.parametrize("x", [0, 1, 2])
@pytest.mark.parametrize("s,t", [(0, 5), (3, 7), (6, 8)])
def test_phi_matches_path_enumeration(ref_model, x, s, t):
    law, mass = enumerate_paths(x, s, t)
    out = propagate_unnormalized(ref_model, Measure.dirac(ref_model.space, index=x), s, t)
    assert np.allclose(out.weights, law, rtol=1e-12)
    assert out.total_mass == pytest.approx(mass, rel=1e-12)
    assert np.allclose(phi(ref_model, Measure.dirac(ref_model.space, index=x), s, t).weights,
                       law / mass, rtol=1e-12)


@pytest.mark.parametrize("x", [0, 1, 2])
def test_k_operator_matches_path_enumeration(ref_model, x):
    law, mass = enumerate_paths(x, 0, 2, T=4)
    out = k_operator(ref_model, Measure.dirac(ref_model.space, index=x), 0, 2, 4)
    assert np.allclose(out.weights, law / mass, rtol=1e-12)


def test_k_operator_mixture_of_rows(ref_model):
    mu = np.array([0.2, 0.5, 0.3])
    expected = np.zeros(3)
    for x in range(3):
        law, mass = enumerate_paths(x, 1, 3, T=6)
        expected += mu[x] * law / mass
    out = k_operator(ref_model, Measure(ref_model.space, mu), 1, 3, 6)
    assert np.allclose(out.weights, expected, rtol=1e-12)


def test_k_with_terminal_equal_to_t_is_phi_for_diracs(ref_model):
    for x in range(3):
        d = Measure.dirac(ref_model.space, index=x)
        a = k_operator(ref_model, d, 2, 9, 9)
        b = phi(ref_model, d, 2, 9)
        assert np.abs(a.weights - b.weights).sum() <= 1e-13


def test_k_differs_from_phi_for_mixtures(ref_model):
    mu = Measure(ref_model.space, [0.5, 0.0, 0.5])
    a = k_operator(ref_model, mu, 0, 6, 6)
    b = phi(ref_model, mu, 0, 6)
    assert np.abs(a.weights - b.weights).sum() > 1e-3


def test_unpenalized_k_ignores_terminal():
    m = rows_equal_chain()
    mu = Measure(m.space, [0.1, 0.1, 0.8])
    a = k_operator(m, mu, 0, 3, 3)
    b = k_operator(m, mu, 0, 3, 15)
    assert np.allclose(a.weights, b.weights, atol=1e-15)


def test_long_horizon_does_not_underflow():
    m = reference_chain(2000)
    w = propagate_unnormalized(m, Measure.uniform(m.space), 0, 10).weights
    h = backward_weight(m, 0, 2000)
    assert np.all(np.isfinite(h))
    p = phi(m, Measure.uniform(m.space), 0, 2000)
    assert p.is_probability and np.all(w > 0)


grid_points = st.lists(st.integers(0, 60), min_size=3, max_size=3).map(sorted)


@settings(max_examples=60, deadline=None)
@given(grid_points)
def test_chapman_kolmogorov(pts):
    m = _shared_model()
    s, r, t = pts
    lhs = m.product(s, r) @ m.product(r, t)
    rhs = m.product(s, t)
    assert np.allclose(lhs, rhs, rtol=1e-10, atol=0)


@settings(max_examples=60, deadline=None)
@given(grid_points, st.lists(st.floats(0.01, 1.0), min_size=3, max_size=3))
def test_phi_composition(pts, w):
    m = _shared_model()
    s, r, t = pts
    mu = Measure(m.space, np.array(w) / sum(w))
    direct = phi(m, mu, s, t)
    composed = phi(m, phi(m, mu, s, r), r, t)
    assert np.abs(direct.weights - composed.weights).sum() <= 1e-10


@settings(max_examples=30, deadline=None)
@given(grid_points, st.floats(-2.0, 2.0))
def test_potential_shift_invariance(pts, c):
    s, r, t = pts
    a_model, b_model = _shared_model(), shifted_reference_chain(c)
    mu = Measure(a_model.space, [0.3, 0.3, 0.4])
    assert np.abs(phi(a_model, mu, s, t).weights - phi(b_model, mu, s, t).weights).sum() <= 1e-12
    assert np.abs(
        k_operator(a_model, mu, s, r, t).weights - k_operator(b_model, mu, s, r, t).weights
    ).sum() <= 1e-12


_MODEL = []


def _shared_model():
    if not _MODEL:
        _MODEL.append(reference_chain(60))
    return _MODEL[0]
