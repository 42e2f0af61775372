import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cvfields.data import decay_demo
from cvfields.dynsys import (
    ModulatedField,
    ObstacleField,
    SequentialField,
    SimTrajectory,
    calibrate_alpha,
    compose_sequential,
    contraction_residual,
    integrate_field,
    modulate,
    read_obstacle_stream,
    tube_radius,
    write_obstacle_stream,
)
from cvfields.learner import ContractionSpec, MetricField, fit
from cvfields.polyalg import MonomialBasis, Polynomial, PolyMap

from _oracles import fd_gradient, fd_jacobian

rng = np.random.default_rng(7)


def _unit(n, j):
    e = [0] * n
    e[j] = 1
    return tuple(e)


def linear_field(A, b=None):
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    basis = MonomialBasis(n, 1)
    comps = []
    for i in range(n):
        c = np.zeros(len(basis))
        if b is not None:
            c[basis.index_of((0,) * n)] = b[i]
        for j in range(n):
            c[basis.index_of(_unit(n, j))] = A[i, j]
        comps.append(Polynomial(basis, c))
    return PolyMap(tuple(comps))


def random_polymap(seed, n=2, degree=3, scale=0.5):
    r = np.random.default_rng(seed)
    basis = MonomialBasis(n, degree)
    return PolyMap(
        tuple(Polynomial(basis, scale * r.normal(size=len(basis))) for _ in range(n))
    )


class TestIntegrateField:
    def test_linear_decay_matches_closed_form(self):
        f = linear_field(-np.eye(2))
        traj = integrate_field(f, (1.0, 0.0), horizon=10.0, dt=1e-3)
        assert traj.termination == "horizon"
        assert np.linalg.norm(traj.final_state) <= 1e-3
        exact = np.exp(-traj.t)[:, None] * np.array([1.0, 0.0])
        assert np.max(np.linalg.norm(traj.states - exact, axis=1)) <= 1e-6

    def test_zero_field_stops_immediately(self):
        f = linear_field(np.zeros((2, 2)))
        traj = integrate_field(f, (0.3, -0.2), horizon=5.0, dt=0.01)
        assert traj.termination == "stop-threshold"
        assert len(traj.t) == 1
        assert np.array_equal(traj.states[0], [0.3, -0.2])

    def test_rotation_conserves_radius(self):
        f = linear_field([[0.0, -1.0], [1.0, 0.0]])
        traj = integrate_field(f, (1.0, 1.0), horizon=2 * np.pi, dt=1e-3)
        radii = np.linalg.norm(traj.states, axis=1)
        assert np.max(np.abs(radii - np.sqrt(2.0))) <= 1e-5

    def test_fourth_order_convergence(self):
        f = linear_field(-np.eye(1))
        errs = []
        for dt in (0.02, 0.01):
            traj = integrate_field(f, (1.0,), horizon=2.0, dt=dt)
            errs.append(abs(traj.final_state[0] - np.exp(-2.0)))
        # halving dt must cut the global error by at least 2^3
        assert errs[0] / errs[1] >= 8.0

    def test_domain_exit_flagged(self):
        f = linear_field(np.eye(2))  # expanding flow
        box = np.array([[-2.0, 2.0], [-2.0, 2.0]])
        traj = integrate_field(f, (1.0, 1.0), horizon=10.0, dt=0.01, domain=box)
        assert traj.termination == "domain-exit"
        assert traj.duration < 10.0
        assert np.any(traj.final_state > 2.0)

    def test_nonfinite_state_reports_domain_exit(self):
        basis = MonomialBasis(1, 3)
        c = np.zeros(len(basis))
        c[basis.index_of((3,))] = 1.0
        f = PolyMap((Polynomial(basis, c),))  # xdot = x^3 blows up
        traj = integrate_field(f, (5.0,), horizon=50.0, dt=0.5)
        assert traj.termination == "domain-exit"
        assert "nonfinite" in traj.note
        assert np.all(np.isfinite(traj.states))

    def test_uniform_grid_and_velocities(self):
        f = linear_field(-np.eye(2))
        traj = integrate_field(f, (1.0, 2.0), horizon=1.0, dt=0.3)
        # dt is adjusted to divide the horizon exactly
        assert len(traj.t) == len(traj.states) == len(traj.velocities)
        assert traj.t[-1] == pytest.approx(1.0)
        steps = np.diff(traj.t)
        assert np.allclose(steps, steps[0])
        assert np.allclose(traj.velocities, -traj.states)

    def test_rejects_bad_arguments(self):
        f = linear_field(-np.eye(2))
        with pytest.raises(ValueError):
            integrate_field(f, (1.0, 0.0), horizon=-1.0)
        with pytest.raises(ValueError):
            integrate_field(f, (1.0, 0.0), horizon=1.0, dt=2.0)

    def test_csv_roundtrip_via_demonstration(self, tmp_path):
        from cvfields.data import read_trajectory_csv, write_trajectory_csv

        f = linear_field(-np.eye(2))
        traj = integrate_field(f, (1.0, -1.0), horizon=1.0, dt=0.05)
        path = tmp_path / "sim.csv"
        write_trajectory_csv(path, traj.to_demonstration())
        back = read_trajectory_csv(path)
        assert np.allclose(back.positions, traj.states)
        assert np.allclose(back.t, traj.t)


class TestComposeSequential:
    def test_two_attractors_visited_in_order(self):
        a = np.array([1.0, 0.0])
        b = np.array([-1.0, 0.5])
        f1 = linear_field(-np.eye(2), b=a)  # -(x - a)
        f2 = linear_field(-np.eye(2), b=b)
        execu = compose_sequential([f1, f2], threshold=0.01)
        traj = execu.run((0.0, 0.0), horizon=40.0, dt=0.01)
        assert traj.termination == "stop-threshold"
        assert len(traj.switches) == 1
        dist_a = np.linalg.norm(traj.states - a, axis=1)
        # reached a (to the switch threshold) before heading to b
        assert dist_a.min() <= 0.0101
        assert np.linalg.norm(traj.final_state - b) <= 0.0101
        idx_switch = np.searchsorted(traj.t, traj.switches[0])
        assert dist_a[idx_switch] <= 0.0101

    def test_single_element_matches_integrate_field(self):
        f = linear_field(-np.eye(2))
        a = compose_sequential([f], threshold=0.01).run((1.0, 1.0), 5.0, dt=0.01)
        btraj = integrate_field(f, (1.0, 1.0), 5.0, dt=0.01, stop_threshold=0.01)
        assert np.array_equal(a.states, btraj.states)
        assert np.array_equal(a.t, btraj.t)
        assert a.termination == btraj.termination == "stop-threshold"

    def test_final_field_never_slowing_flags_horizon(self):
        f1 = linear_field(-np.eye(2))
        f2 = linear_field(np.zeros((2, 2)), b=(1.0, 0.0))  # constant drift
        traj = compose_sequential([f1, f2]).run((1.0, 0.0), horizon=8.0, dt=0.01)
        assert traj.termination == "horizon"
        assert len(traj.switches) == 1

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            SequentialField((linear_field(-np.eye(2)), linear_field(-np.eye(3))))


class TestContractionResidual:
    def test_linear_decay_identity_metric(self):
        f = linear_field(-np.eye(2))
        assert contraction_residual(f, None, 1.0, (0.3, -0.7)) == pytest.approx(-1.0)

    def test_rotation_not_contracting(self):
        f = linear_field([[0.0, -1.0], [1.0, 0.0]])
        # skew-symmetric Jacobian: sym part vanishes, tau term remains
        assert contraction_residual(f, None, 1.0, (2.0, 1.0)) == pytest.approx(1.0)

    def test_batch_shape(self):
        f = linear_field(-np.eye(2))
        out = contraction_residual(f, None, 0.5, rng.normal(size=(9, 2)))
        assert out.shape == (9,)
        assert np.allclose(out, -1.5)

    def test_matches_finite_difference_construction(self):
        n = 2
        f = random_polymap(3, n=n, degree=3)
        base = MonomialBasis(n, 2)
        bump = Polynomial(base, np.zeros(len(base)))
        c = bump.coeffs.copy()
        c[base.index_of((0, 0))] = 1.0
        c[base.index_of((2, 0))] = 0.1
        c[base.index_of((0, 2))] = 0.1
        diag = Polynomial(base, c)
        off = Polynomial(base, np.zeros(len(base)))
        metric = MetricField(((diag, off), (off, diag)))
        tau = 0.8
        for _ in range(20):
            x = rng.uniform(-1.0, 1.0, size=n)
            J = fd_jacobian(lambda y: np.asarray(f(y)), x)
            M = metric(x)
            Mdot = np.zeros((n, n))
            fx = np.asarray(f(x))
            for i in range(n):
                for j in range(n):
                    Mdot[i, j] = fd_gradient(lambda y: metric.entry(i, j)(y), x) @ fx
            R = M @ J + (M @ J).T + Mdot + tau * M
            want = np.linalg.eigvalsh(R)[-1]
            got = contraction_residual(f, metric, tau, x)
            assert got == pytest.approx(want, rel=1e-6, abs=1e-6)


def _fit_decay_model(degree):
    demos = [
        decay_demo((1.2, 0.4), horizon=3.0, n_samples=80),
        decay_demo((-0.5, 1.0), horizon=3.0, n_samples=80),
    ]
    return demos, fit(demos, degree, ContractionSpec(1.0))


@pytest.fixture(scope="module")
def decay_model():
    return _fit_decay_model(3)


class TestTubeRadius:
    def _traj_of(self, model, demos):
        from cvfields.learner import FitOptions, _fit_normalized_trajectories
        from cvfields.learner import NormalizationTransform

        tr = NormalizationTransform.identity(2)
        return _fit_normalized_trajectories(demos[:1], tr, FitOptions())[0]

    def test_constant_residual_gives_region_bound(self):
        f = linear_field(-np.eye(2))
        demos = [decay_demo((1.0, 0.5), horizon=2.0, n_samples=60)]
        traj = self._traj_of(None, demos)
        box = np.array([[-2.0, 2.0], [-2.0, 2.0]])
        est = tube_radius(f, None, 1.0, traj, box)
        assert est.K == 0.0
        assert est.region_bounded
        assert np.isinf(est.epsilon)
        assert est.clipped(5.0) == 5.0

    def test_epsilon_linear_in_tau_for_constant_metric(self):
        f = random_polymap(11, degree=3)
        demos = [decay_demo((0.5, 0.5), horizon=2.0, n_samples=60)]
        traj = self._traj_of(None, demos)
        box = np.array([[-1.5, 1.5], [-1.5, 1.5]])
        e1 = tube_radius(f, None, 1.0, traj, box, samples_per_axis=20)
        e2 = tube_radius(f, None, 2.0, traj, box, samples_per_axis=20)
        # identity metric: the -(tau/2) M term has zero gradient
        assert e2.K == e1.K
        assert e2.epsilon == pytest.approx(2.0 * e1.epsilon, rel=1e-12)

    def test_trajectory_outside_box_rejected(self):
        f = linear_field(-np.eye(2))
        demos = [decay_demo((3.0, 0.0), horizon=2.0, n_samples=60)]
        traj = self._traj_of(None, demos)
        box = np.array([[-1.0, 1.0], [-1.0, 1.0]])
        with pytest.raises(ValueError):
            tube_radius(f, None, 1.0, traj, box)

    def test_perturbations_inside_tube_contract(self, decay_model):
        demos, model = decay_model
        tau = 1.0
        pts = np.concatenate([d.positions for d in demos])
        lo = pts.min(axis=0) - 0.4
        hi = pts.max(axis=0) + 0.4
        box = np.stack([lo, hi], axis=1)
        from cvfields.learner import FitOptions, NormalizationTransform, _fit_normalized_trajectories

        traj = _fit_normalized_trajectories(
            demos[:1], NormalizationTransform.identity(2), FitOptions()
        )[0]
        est = tube_radius(model, None, tau, traj, box, samples_per_axis=25)
        assert est.epsilon > 0
        delta = min(est.clipped(0.15), 0.15)
        T = 2.0
        x_nom0 = demos[0].positions[0]
        nom = integrate_field(model, x_nom0, T, dt=T / 800)
        r = np.random.default_rng(21)
        for _ in range(16):
            d0 = r.normal(size=2)
            d0 *= delta / np.linalg.norm(d0)
            pert = integrate_field(model, x_nom0 + d0, T, dt=T / 800)
            gap = np.linalg.norm(pert.states - nom.states, axis=1)
            assert np.all(np.diff(gap) <= 1e-9)  # monotone shrinking
            assert gap[-1] <= np.exp(-tau * T / 4) * gap[0] * (1 + 1e-6)


class TestCoalescence:
    def test_exponential_envelope_along_demo(self, decay_model):
        demos, model = decay_model
        tau = 1.0
        T = 2.5
        x0 = demos[1].positions[0]
        delta = 1e-3 * np.array([1.0, -1.0]) / np.sqrt(2.0)
        a = integrate_field(model, x0, T, dt=T / 1500)
        b = integrate_field(model, x0 + delta, T, dt=T / 1500)
        gap = np.linalg.norm(a.states - b.states, axis=1)
        envelope = 1.05 * np.exp(-tau * a.t / 2.0) * gap[0]
        assert np.all(gap <= envelope + 1e-15)


class TestLemmaTwo:
    def test_min_eigenvalue_perturbation_bound(self):
        # |lmin(A) - lmin(B)| <= n max_ij |A_ij - B_ij| on symmetric pairs
        r = np.random.default_rng(5)
        for n in (2, 3, 5):
            A = r.normal(size=(1000, n, n))
            A = A + A.transpose(0, 2, 1)
            B = A + 0.3 * (lambda S: S + S.transpose(0, 2, 1))(
                r.normal(size=(1000, n, n))
            )
            la = np.linalg.eigvalsh(A)[:, 0]
            lb = np.linalg.eigvalsh(B)[:, 0]
            bound = n * np.abs(A - B).max(axis=(1, 2))
            assert np.all(np.abs(la - lb) <= bound + 1e-12)


class TestObstacleField:
    def test_record_ordering_and_lookup(self):
        ob = ObstacleField(
            records=((2.0, [[0.0, 0.0]]), (0.5, [[1.0, 1.0]])),
        )
        assert [s for s, _ in ob.snapshot()] == [0.5, 2.0]
        assert ob.active_points(0.0) is None
        assert np.allclose(ob.active_points(0.5), [[1.0, 1.0]])
        assert np.allclose(ob.active_points(1.9), [[1.0, 1.0]])
        assert np.allclose(ob.active_points(2.0), [[0.0, 0.0]])

    def test_update_is_snapshot_handoff(self):
        ob = ObstacleField()
        before = ob.snapshot()
        ob.update(1.0, [[0.0, 1.0]])
        assert before == ()  # old snapshot untouched
        assert len(ob.snapshot()) == 1
        with pytest.raises(ValueError):
            ob.update(2.0, [1.0, 2.0])  # not (k, n)

    def test_validation(self):
        with pytest.raises(ValueError):
            ObstacleField(r=0)
        with pytest.raises(ValueError):
            ObstacleField(alpha=-0.1)
        with pytest.raises(ValueError):
            ObstacleField(rho=0.0)

    def test_stream_roundtrip(self, tmp_path):
        ob = ObstacleField(
            records=((0.0, [[1.0, 2.0]]), (1.5, [[0.0, 0.0], [3.0, -1.0]])),
            r=6,
        )
        path = tmp_path / "obstacles.ndjson"
        write_obstacle_stream(path, ob)
        back = read_obstacle_stream(path, r=6)
        assert len(back.snapshot()) == 2
        for (s1, p1), (s2, p2) in zip(ob.snapshot(), back.snapshot()):
            assert s1 == s2
            assert np.array_equal(p1, p2)

    def test_stream_from_lines(self):
        lines = io.StringIO(
            json.dumps({"t": 0.0, "points": [[0.5, 0.5]]})
            + "\n\n"
            + json.dumps({"t": 1.0, "points": [[-0.5, 0.5]]})
            + "\n"
        )
        ob = read_obstacle_stream(lines)
        assert len(ob.snapshot()) == 2


class TestModulate:
    def test_single_point_repulsion(self):
        f = linear_field(-np.eye(2))
        ob = ObstacleField(records=((0.0, [[0.0, 0.0]]),), r=2, alpha=1.0)
        g = modulate(f, ob)
        x = np.array([1.0, 0.0])
        # (x - j)/|x - j|^2 = (1, 0) here
        assert np.allclose(g(0.0, x), f(x) + np.array([1.0, 0.0]))

    def test_symmetric_pair_cancels_along_axis(self):
        f = linear_field(-np.eye(2))
        ob = ObstacleField(records=((0.0, [[0.6, 0.0], [-0.6, 0.0]]),), r=3)
        g = modulate(f, ob)
        x = np.zeros(2)
        h = np.asarray(g(0.0, x)) - f(x)
        assert h[0] == pytest.approx(0.0, abs=1e-15)

    def test_alpha_zero_is_bitwise_identity(self):
        f = random_polymap(17)
        ob = ObstacleField(records=((0.0, [[0.2, 0.1]]),), alpha=0.0)
        g = modulate(f, ob)
        for _ in range(10):
            x = rng.normal(size=2)
            assert np.array_equal(g(3.0, x), f(x))
        base = integrate_field(f, (0.4, -0.2), 1.0, dt=0.01, domain=np.array([[-5, 5], [-5, 5]]))
        mod = integrate_field(g, (0.4, -0.2), 1.0, dt=0.01, domain=np.array([[-5, 5], [-5, 5]]))
        assert np.array_equal(base.states, mod.states)

    def test_empty_obstacles_identity(self):
        f = linear_field(-np.eye(2))
        g = modulate(f, ObstacleField())
        x = np.array([0.3, 0.4])
        assert np.array_equal(g(0.0, x), f(x))

    def test_clamp_below_rho(self):
        ob = ObstacleField(records=((0.0, [[0.0, 0.0]]),), r=4, rho=1e-2)
        f = linear_field(np.zeros((2, 2)))
        g = modulate(f, ob)
        near = np.array([5e-3, 0.0])
        h = np.asarray(g(0.0, near))
        # magnitude saturates at its rho-sphere value, direction kept
        assert np.linalg.norm(h) == pytest.approx((1e-2) ** (1 - 4))
        assert h[0] > 0 and h[1] == 0.0
        at_zero = np.asarray(g(0.0, np.zeros(2)))
        assert np.all(np.isfinite(at_zero))

    def test_moving_obstacle_deflects_and_reconverges(self):
        f = linear_field(-np.eye(2))
        crossing = [
            (0.2 * k, [[0.5, -0.4 + 0.1 * k]]) for k in range(9)
        ]  # sweeps through the path around t ~ 0.8
        ob = ObstacleField(records=tuple(crossing), r=4, rho=1e-3)
        nominal = integrate_field(f, (1.0, 0.0), 6.0, dt=6.0 / 3000)
        alpha = calibrate_alpha(f, ob, nominal.states, times=nominal.t)
        assert alpha > 0
        ob.alpha = alpha
        g = modulate(f, ob)
        traj = integrate_field(g, (1.0, 0.0), 6.0, dt=6.0 / 3000)
        clearance = np.inf
        for t, x in zip(traj.t, traj.states):
            pts = ob.active_points(float(t))
            if pts is not None:
                clearance = min(clearance, np.linalg.norm(x - pts, axis=1).min())
        assert clearance >= ob.rho
        deviation = np.linalg.norm(traj.states - nominal.states, axis=1)
        assert deviation.max() > 1e-3  # it actually deflected
        assert np.linalg.norm(traj.final_state - nominal.final_state) <= 0.05


@settings(max_examples=50, deadline=None)
@given(
    st.floats(-2.0, 2.0),
    st.floats(-2.0, 2.0),
    st.floats(0.0, 5.0),
)
def test_alpha_zero_identity_property(x1, x2, t):
    f = linear_field([[0.0, -1.0], [1.0, 0.0]])
    g = ModulatedField(f, ObstacleField(records=((0.0, [[0.1, 0.1]]),), alpha=0.0))
    x = np.array([x1, x2])
    assert np.array_equal(g(t, x), f(x))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-6, 0.99), st.integers(1, 6))
def test_repulsion_clamped_inside_rho(frac, r):
    rho = 0.05
    ob = ObstacleField(records=((0.0, [[0.0, 0.0]]),), r=r, rho=rho)
    f = linear_field(np.zeros((2, 2)))
    g = ModulatedField(f, ob)
    x = np.array([frac * rho, 0.0])
    h = np.asarray(g(0.0, x))
    assert np.linalg.norm(h) == pytest.approx(rho ** (1 - r), rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.2, 3.0), st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_residual_sign_tracks_tau(tau, x1, x2):
    # f = -x contracts at rate 2 (unhalved sym), so residual is tau - 2
    f = linear_field(-np.eye(2))
    res = contraction_residual(f, None, tau, (x1, x2))
    assert res == pytest.approx(tau - 2.0)
