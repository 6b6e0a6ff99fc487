import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fkc.eta import (
    eigen_residual,
    eta_extract,
    q_kernel_build,
    q_mixing_check,
    ratio_convergence_check,
    uniqueness_check,
)
from fkc.mixing import Coefficients, mixing_report
from fkc.models import (
    reference_chain,
    rows_equal_chain,
    shifted_reference_chain,
    two_state_substochastic,
    two_state_substochastic_matrix,
)


def perron(q):
    vals, vecs = np.linalg.eig(q)
    k = np.argmax(vals.real)
    v = np.abs(vecs[:, k].real)
    return vals[k].real, v


def test_unpenalized_eta_is_one():
    m = rows_equal_chain()
    e = eta_extract(m, 15)
    assert np.allclose(e.values, 1.0, rtol=1e-14)
    assert eigen_residual(m, e, 2, 9) == pytest.approx(0.0, abs=1e-15)


def test_two_state_eta_is_perron_vector():
    m = two_state_substochastic(60)
    _, v = perron(two_state_substochastic_matrix())
    e = eta_extract(m, 60)
    for s in (0, 10, 20):
        assert e.at(s)[1] / e.at(s)[0] == pytest.approx(v[1] / v[0], rel=1e-10)


def test_constant_shift_leaves_eta_unchanged():
    a = eta_extract(reference_chain(40), 40)
    b = eta_extract(shifted_reference_chain(0.8, 40), 40)
    for s in range(0, 41, 5):
        np.testing.assert_allclose(a.at(s) / a.at(s)[0], b.at(s) / b.at(s)[0], rtol=1e-12)
    assert b.at(0)[0] == 1.0


def test_eta_normalization_and_bounds(ref_model):
    e = eta_extract(ref_model, 40)
    assert e.values[0, e.x0] == 1.0
    assert np.all(np.isfinite(e.sup_norms)) and np.all(e.values > 0)


def test_eigen_residual_reference(ref_model):
    e = eta_extract(ref_model, 40)
    assert eigen_residual(ref_model, e, 3, 3) == 0.0
    assert eigen_residual(ref_model, e, 0, 5) <= 1e-9
    worst = max(eigen_residual(ref_model, e, s, t) for s in range(41) for t in range(s, 41))
    assert worst <= 1e-9
    with pytest.raises(ValueError):
        eigen_residual(ref_model, e, 5, 2)


def test_diagnostic_decays_with_terminal(ref_model):
    c = Coefficients(ref_model)
    vals = [eta_extract(ref_model, T).convergence for T in (4, 8, 16)]
    for (T_lo, T_hi), a, b in zip(((4, 8), (8, 16)), vals, vals[1:]):
        if c.product(T_lo - 1, T_hi - 1) <= 0.5:
            assert b <= a / 2


def test_ratio_trivial_cases(ref_model):
    r = ratio_convergence_check(ref_model, 2, 1, 1, 6, 20)
    assert r.lhs == 0.0 and r.passed
    m = rows_equal_chain()
    r = ratio_convergence_check(m, 2, 0, 2, 6, 15)
    assert r.lhs == pytest.approx(0.0, abs=1e-15)


def test_ratio_sweep(ref_model):
    rng = np.random.default_rng(5)
    c = Coefficients(ref_model)
    for _ in range(100):
        s = int(rng.integers(0, 55))
        t = int(rng.integers(s + 1, 61))
        u = int(rng.integers(t, 61))
        x, y = (int(v) for v in rng.integers(0, 3, 2))
        r = ratio_convergence_check(ref_model, s, x, y, t, u, c)
        assert r.status == "ok" and r.slack >= -1e-9


def test_ratio_rejects_bad_order(ref_model):
    with pytest.raises(ValueError):
        ratio_convergence_check(ref_model, 3, 0, 1, 3, 5)


def test_uniqueness_trivial(ref_model):
    f = np.array([1.0, 2.0, 0.5])
    assert uniqueness_check(ref_model, 20, f, f) == 0.0
    assert uniqueness_check(ref_model, 20, f, 3 * f) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        uniqueness_check(ref_model, 20, f, np.array([1.0, 0.0, 1.0]))


def test_uniqueness_decays(ref_model):
    fb = np.random.default_rng(2).uniform(0.1, 5.0, 3)
    seq = [uniqueness_check(ref_model, T, np.ones(3), fb) for T in (10, 20, 40)]
    assert seq[0] > seq[1] > seq[2]
    assert seq[-1] <= 1e-6


def test_q_kernel_unpenalized_is_original():
    m = rows_equal_chain()
    qk = q_kernel_build(m, eta_extract(m, 10))
    np.testing.assert_allclose(qk.step(3), m.kernel(3), rtol=1e-14)


def test_q_kernel_matches_doob_transform():
    m = two_state_substochastic(60)
    q = two_state_substochastic_matrix()
    lam, v = perron(q)
    doob = q * v[None, :] / (lam * v[:, None])
    qk = q_kernel_build(m, eta_extract(m, 60))
    np.testing.assert_allclose(qk.step(0), doob, rtol=1e-10)


def test_q_kernel_rows_and_markov_consistency(ref_model):
    qk = q_kernel_build(ref_model, eta_extract(ref_model, 60))
    assert qk.max_row_error() <= 1e-10
    for s in range(0, 58, 3):
        np.testing.assert_allclose(qk.composed(s, s + 2), qk.direct(s, s + 2), atol=1e-10)


def test_q_mixing_trivial():
    m = rows_equal_chain()
    qk = q_kernel_build(m, eta_extract(m, 10))
    rep = mixing_report(m)
    assert q_mixing_check(qk, rep, 2, 3, 0, 2).lhs == pytest.approx(0.0, abs=1e-15)
    assert q_mixing_check(qk, rep, 2, 3, 1, 1).lhs == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 59), st.integers(1, 60), st.integers(0, 2), st.integers(0, 2))
def test_q_mixing_sweep(s, span, x, y):
    qk, coeffs = _q()
    t = min(60, s + span)
    assert q_mixing_check(qk, coeffs, s, t, x, y).slack >= -1e-9


_Q = []


def _q():
    if not _Q:
        m = reference_chain(60)
        _Q.append((q_kernel_build(m, eta_extract(m, 60)), Coefficients(m)))
    return _Q[0]
