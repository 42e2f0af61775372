import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvfields.polyalg import (
    MonomialBasis,
    Polynomial,
    PolyMap,
    PolyTrajectory,
    UniPoly,
    UniPolyMatrix,
    compose,
    compose_scaled,
    fit_trajectory,
    integrate,
)

from _oracles import (
    eval_monomial_sum,
    fd_jacobian,
    fd_gradient,
    quad_integral,
    unipoly_eval_naive,
)


def _math_comb(n, k):
    from math import comb

    return comb(n, k)


def test_basis_count_and_order():
    for n, d in [(1, 0), (1, 5), (2, 3), (3, 4), (4, 2)]:
        basis = MonomialBasis(n, d)
        assert len(basis) == _math_comb(n + d, d)
        totals = [sum(e) for e in basis.exponents]
        # graded: total degrees ascending, ties broken lexicographically
        assert totals == sorted(totals)
        for a, b in zip(basis.exponents, basis.exponents[1:]):
            assert (sum(a), a) < (sum(b), b)


def test_basis_rejects_bad_args():
    with pytest.raises(ValueError):
        MonomialBasis(0, 2)
    with pytest.raises(ValueError):
        MonomialBasis(2, -1)


def test_eval_matches_naive_sum():
    rng = np.random.default_rng(3)
    for n, d in [(1, 4), (2, 3), (3, 5)]:
        basis = MonomialBasis(n, d)
        p = Polynomial(basis, rng.standard_normal(len(basis)))
        for _ in range(20):
            x = rng.uniform(-2, 2, size=n)
            want = eval_monomial_sum(p.coeffs, basis.exponents, x)
            assert abs(p(x) - want) <= 1e-12 * max(1.0, abs(want))


def test_eval_batched_agrees_with_single():
    rng = np.random.default_rng(4)
    basis = MonomialBasis(3, 4)
    p = Polynomial(basis, rng.standard_normal(len(basis)))
    pts = rng.uniform(-1, 1, size=(17, 3))
    batch = p(pts)
    singles = np.array([p(x) for x in pts])
    assert np.allclose(batch, singles, atol=1e-13)


def test_arithmetic_pointwise():
    rng = np.random.default_rng(5)
    b1 = MonomialBasis(2, 3)
    b2 = MonomialBasis(2, 2)
    p = Polynomial(b1, rng.standard_normal(len(b1)))
    q = Polynomial(b2, rng.standard_normal(len(b2)))
    for _ in range(10):
        x = rng.uniform(-1.5, 1.5, size=2)
        assert abs((p + q)(x) - (p(x) + q(x))) < 1e-11
        assert abs((p - q)(x) - (p(x) - q(x))) < 1e-11
        assert abs((p * q)(x) - p(x) * q(x)) < 1e-10
        assert abs((2.5 * p)(x) - 2.5 * p(x)) < 1e-12
        assert abs((p + 1.0)(x) - (p(x) + 1.0)) < 1e-12


def test_partial_matches_finite_differences():
    rng = np.random.default_rng(6)
    basis = MonomialBasis(3, 4)
    p = Polynomial(basis, rng.standard_normal(len(basis)))
    for _ in range(20):
        x = rng.uniform(-1, 1, size=3)
        grad = np.array([p.partial(j)(x) for j in range(3)])
        fd = fd_gradient(p, x, h=1e-5)
        assert np.allclose(grad, fd, rtol=1e-6, atol=1e-6)


def test_partial_of_constant_is_zero():
    basis = MonomialBasis(2, 3)
    c = Polynomial.constant(basis, 7.0)
    assert c.partial(0).is_zero and c.partial(1).is_zero


def test_embed_preserves_values():
    rng = np.random.default_rng(7)
    small = MonomialBasis(2, 2)
    big = MonomialBasis(2, 5)
    p = Polynomial(small, rng.standard_normal(len(small)))
    q = p.embed(big)
    for _ in range(10):
        x = rng.uniform(-2, 2, size=2)
        assert abs(p(x) - q(x)) < 1e-13
    with pytest.raises(ValueError):
        q.embed(small)


def test_affine_pullback_pointwise():
    rng = np.random.default_rng(8)
    basis = MonomialBasis(3, 4)
    p = Polynomial(basis, rng.standard_normal(len(basis)))
    shift = rng.uniform(-1, 1, size=3)
    scale = rng.uniform(0.5, 2.0, size=3)
    q = p.affine_pullback(shift, scale)
    assert q.basis == basis
    for _ in range(20):
        x = rng.uniform(-1, 1, size=3)
        assert abs(q(x) - p(scale * x + shift)) < 1e-10


def test_polymap_jacobian_matches_fd():
    rng = np.random.default_rng(9)
    basis = MonomialBasis(2, 3)
    f = PolyMap(tuple(Polynomial(basis, rng.standard_normal(len(basis))) for _ in range(2)))
    for _ in range(20):
        x = rng.uniform(-1, 1, size=2)
        J = f.jacobian_at(x)
        Jfd = fd_jacobian(f, x, h=1e-5)
        assert np.allclose(J, Jfd, rtol=1e-6, atol=1e-6)


def test_polymap_aligns_mixed_bases():
    p = Polynomial.monomial(MonomialBasis(2, 1), (1, 0))
    q = Polynomial.monomial(MonomialBasis(2, 3), (0, 3))
    f = PolyMap((p, q))
    assert f.basis.degree == 3
    x = np.array([2.0, -1.0])
    assert np.allclose(f(x), [2.0, -1.0])


# ---------------------------------------------------------------------------
# univariate


def test_unipoly_eval_and_arithmetic():
    rng = np.random.default_rng(10)
    p = UniPoly(rng.standard_normal(5))
    q = UniPoly(rng.standard_normal(3))
    for t in rng.uniform(-2, 2, size=10):
        assert abs(p(t) - unipoly_eval_naive(p.coeffs, t)) < 1e-12
        assert abs((p + q)(t) - (p(t) + q(t))) < 1e-12
        assert abs((p * q)(t) - p(t) * q(t)) < 1e-10
        assert abs((p - 1.5)(t) - (p(t) - 1.5)) < 1e-12


def test_unipoly_deriv_antideriv_roundtrip():
    rng = np.random.default_rng(11)
    p = UniPoly(rng.standard_normal(6))
    back = p.antideriv().deriv()
    assert np.allclose(back.coeffs, p.coeffs, atol=1e-13)


def test_unipoly_rescale_time():
    p = UniPoly([1.0, 2.0, -3.0])
    q = p.rescale_time(0.5)
    for t in np.linspace(-2, 2, 9):
        assert abs(q(t) - p(0.5 * t)) < 1e-13


def test_unipoly_normalized_strips_trailing():
    p = UniPoly([1.0, 2.0, 0.0, 1e-15])
    assert p.normalized(1e-12).degree == 1
    assert UniPoly([0.0, 0.0]).normalized().degree == 0


def test_integrate_matches_quadrature():
    rng = np.random.default_rng(12)
    for _ in range(10):
        p = UniPoly(rng.standard_normal(7))
        T = float(rng.uniform(0.3, 4.0))
        want = quad_integral(lambda t: p(t), 0.0, T)
        got = integrate(p, T)
        assert abs(got - want) <= 1e-9 * max(1.0, abs(want))
    with pytest.raises(ValueError):
        integrate(UniPoly([1.0]), 0.0)


@given(
    a=st.lists(st.floats(-10, 10), min_size=1, max_size=6),
    b=st.lists(st.floats(-10, 10), min_size=1, max_size=6),
    alpha=st.floats(-5, 5),
    T=st.floats(0.1, 3.0),
)
@settings(max_examples=60, deadline=None)
def test_integrate_is_linear(a, b, alpha, T):
    p, q = UniPoly(np.array(a)), UniPoly(np.array(b))
    lhs = integrate(p + alpha * q, T)
    rhs = integrate(p, T) + alpha * integrate(q, T)
    assert abs(lhs - rhs) <= 1e-12 * max(1.0, abs(lhs), abs(rhs))


@given(
    a=st.lists(st.floats(-10, 10), min_size=1, max_size=5),
    b=st.lists(st.floats(-10, 10), min_size=1, max_size=5),
)
@settings(max_examples=60, deadline=None)
def test_unipoly_product_rule(a, b):
    p, q = UniPoly(np.array(a)), UniPoly(np.array(b))
    lhs = (p * q).deriv()
    rhs = p.deriv() * q + p * q.deriv()
    n = max(len(lhs.coeffs), len(rhs.coeffs))
    lc = np.zeros(n)
    rc = np.zeros(n)
    lc[: len(lhs.coeffs)] = lhs.coeffs
    rc[: len(rhs.coeffs)] = rhs.coeffs
    scale = max(1.0, np.abs(lc).max(), np.abs(rc).max())
    assert np.allclose(lc, rc, atol=1e-9 * scale)


def test_unipolymatrix_basics():
    C0 = np.array([[1.0, 0.5], [0.5, 2.0]])
    C1 = np.array([[0.0, 1.0], [1.0, -1.0]])
    P = UniPolyMatrix(np.stack([C0, C1]))
    t = 0.7
    assert np.allclose(P(t), C0 + t * C1)
    assert np.allclose(P.entry(0, 1).coeffs, [0.5, 1.0])
    with pytest.raises(ValueError):
        UniPolyMatrix(np.array([[[1.0, 2.0], [0.0, 1.0]]]))  # not symmetric


def test_unipolymatrix_from_entries_and_rescale():
    e00 = UniPoly([1.0, 1.0])
    e01 = UniPoly([0.0, -2.0])
    e11 = UniPoly([3.0])
    P = UniPolyMatrix.from_entries([[e00, e01], [e01, e11]])
    Q = P.rescale_time(2.0)
    for t in np.linspace(0, 1, 5):
        assert np.allclose(Q(t), P(2.0 * t), atol=1e-12)
    R = (P + (-P)).normalized()
    assert R.degree == 0 and np.allclose(R(0.3), 0.0)


# ---------------------------------------------------------------------------
# trajectories and composition


def _random_traj(rng, n=2, deg=3, horizon=2.0):
    comps = tuple(UniPoly(rng.standard_normal(deg + 1)) for _ in range(n))
    return PolyTrajectory(n, horizon, horizon, comps, 0.0)


def test_compose_matches_pointwise():
    rng = np.random.default_rng(13)
    basis = MonomialBasis(2, 3)
    p = Polynomial(basis, rng.standard_normal(len(basis)))
    traj = _random_traj(rng)
    u = compose(p, traj)
    for t in np.linspace(0.0, traj.horizon, 50):
        want = p(traj.position(t))
        assert abs(u(t) - want) <= 1e-9 * max(1.0, abs(want))


def test_compose_scaled_degree_bound():
    rng = np.random.default_rng(14)
    basis = MonomialBasis(2, 4)
    p = Polynomial(basis, rng.standard_normal(len(basis)))
    traj = _random_traj(rng, deg=3)
    u = compose_scaled(p, traj)
    assert u.degree <= basis.degree * traj.degree


def test_trajectory_velocity_is_position_derivative():
    rng = np.random.default_rng(15)
    traj = _random_traj(rng, n=3, deg=4, horizon=1.5)
    h = 1e-6
    for t in np.linspace(0.1, 1.4, 7):
        fd = (traj.position(t + h) - traj.position(t - h)) / (2 * h)
        assert np.allclose(traj.velocity(t), fd, rtol=1e-5, atol=1e-5)


def test_with_time_scale_keeps_curve():
    rng = np.random.default_rng(16)
    traj = _random_traj(rng, horizon=3.0)
    other = traj.with_time_scale(1.0)
    assert other.time_scale == 1.0
    for t in np.linspace(0, 3.0, 11):
        assert np.allclose(other.position(t), traj.position(t), atol=1e-10)
        assert np.allclose(other.velocity(t), traj.velocity(t), atol=1e-9)


def test_fit_recovers_polynomial_data():
    rng = np.random.default_rng(17)
    T = 2.5
    true = [UniPoly(rng.standard_normal(4)) for _ in range(2)]
    ts = np.linspace(0, T, 40)
    xs = np.stack([p(ts) for p in true], axis=1)
    traj = fit_trajectory(ts, xs, degree=3)
    assert traj.residual < 1e-10
    for j, p in enumerate(true):
        # fit lives in scaled time s = t/T
        want = p.rescale_time(T).coeffs
        got = traj.components[j].coeffs
        assert np.allclose(got, want, atol=1e-8 * max(1.0, np.abs(want).max()))


def test_fit_residual_matches_lstsq_oracle():
    rng = np.random.default_rng(18)
    ts = np.linspace(0, 1.0, 60)
    xs = np.stack([np.sin(3 * ts), np.cos(2 * ts)], axis=1)
    deg = 4
    traj = fit_trajectory(ts, xs, degree=deg)
    V = np.vander(ts, deg + 1, increasing=True)
    sol, *_ = np.linalg.lstsq(V, xs, rcond=None)
    resid = xs - V @ sol
    want = float(np.sqrt(np.mean(np.sum(resid**2, axis=1))))
    assert abs(traj.residual - want) < 1e-8


def test_fit_auto_degree_policy():
    ts = np.linspace(0, 1.0, 50)
    xs = np.stack([2 * ts - 1, ts], axis=1)  # exactly linear
    traj = fit_trajectory(ts, xs)
    assert traj.degree == 1
    assert traj.residual < 1e-12


def test_fit_validation_errors():
    ts = np.linspace(0, 1, 10)
    xs = np.zeros((10, 2))
    with pytest.raises(ValueError):
        fit_trajectory(ts[::-1], xs)
    with pytest.raises(ValueError):
        fit_trajectory(ts[:3], xs[:3], degree=5)
    with pytest.raises(ValueError):
        fit_trajectory(ts - 1.0, xs)


@given(
    coefs=st.lists(st.floats(-3, 3), min_size=2, max_size=5),
    T=st.floats(0.5, 3.0),
)
@settings(max_examples=40, deadline=None)
def test_fit_coefficient_recovery_property(coefs, T):
    p = UniPoly(np.array(coefs))
    ts = np.linspace(0, T, 30)
    xs = p(ts)[:, None]
    traj = fit_trajectory(ts, xs, degree=p.degree)
    for t in np.linspace(0, T, 10):
        scale = max(1.0, np.abs(xs).max())
        assert abs(traj.position(t)[0] - p(t)) <= 1e-7 * scale
