import numpy as np
import pytest

from dsgdlab.errors import ContractionError, PartitionError, RegularityError
from dsgdlab.graphs import penalty_from_matrix
from dsgdlab.losses import monomial_loss, quadratic_saddle, separable_polynomial
from dsgdlab.manifold import (
    ManifoldModel,
    PicardOptions,
    default_gamma0,
    evolution_operator,
    linearize,
    saddle_context,
    solve_perturbed_saddle,
)
from dsgdlab.schedules import ConstantGamma, PowerLawGamma


def quad_context(gamma=None):
    # saddle of the restriction with one unstable direction; one penalized
    # off-constraint direction
    loss = separable_polynomial({0: {2: 0.5}, 1: {2: -0.5}, 2: {2: 0.5}}, dim=3)
    q = penalty_from_matrix(np.diag([0.0, 0.0, 2.0]))
    return saddle_context(loss, q, gamma or PowerLawGamma(1.0, 0.8), np.zeros(3))


def cubic_context():
    # unstable equation decoupled: the manifold is exactly the stable axis
    loss = separable_polynomial({0: {2: 0.5}, 1: {2: -0.5, 3: 0.1}}, dim=2)
    q = penalty_from_matrix(np.zeros((2, 2)))
    return saddle_context(loss, q, ConstantGamma(1.0), np.zeros(2))


def cross_cubic_context(coef=0.1):
    # h = (x1^2 - x2^2)/2 + coef x1^2 x2: the descent flow x1' = -x1 - 2c x1 x2,
    # x2' = x2 - c x1^2 has the invariant graph x2 = c x1^2 / 3 up to O(x^3)
    # corrections; for the leading-order check below c = 0.1 gives psi ~ z^2/30
    loss = monomial_loss(2, {(2, 0): 0.5, (0, 2): -0.5, (2, 1): coef})
    q = penalty_from_matrix(np.zeros((2, 2)))
    return saddle_context(loss, q, ConstantGamma(1.0), np.zeros(2))


def shifted_context(q2=2.0, b=0.2):
    # nonzero stationary path: grad h = (x1, -x2, x3 + b)
    loss = separable_polynomial({0: {2: 0.5}, 1: {2: -0.5}, 2: {2: 0.5, 1: b}}, dim=3)
    q = penalty_from_matrix(np.diag([0.0, 0.0, q2]))
    return saddle_context(loss, q, PowerLawGamma(1.0, 0.8), np.zeros(3))


def test_context_counts_unstable_directions():
    ctx = quad_context()
    assert ctx.n_u == 1
    assert ctx.n_s == 2


def test_context_rejects_degenerate_hessian():
    loss = separable_polynomial({0: {2: 0.5}, 1: {4: 1.0}}, dim=2)  # flat direction
    q = penalty_from_matrix(np.zeros((2, 2)))
    with pytest.raises(RegularityError):
        saddle_context(loss, q, ConstantGamma(1.0), np.zeros(2))


def test_context_rejects_noncritical_point():
    loss = separable_polynomial({0: {2: 0.5, 1: 1.0}, 1: {2: -0.5}}, dim=2)
    q = penalty_from_matrix(np.zeros((2, 2)))
    with pytest.raises(RegularityError):
        saddle_context(loss, q, ConstantGamma(1.0), np.zeros(2))


def test_default_gamma0_quadratic():
    ctx = quad_context()
    g0 = default_gamma0(ctx)
    hess = ctx.loss.hessian(ctx.saddle)
    assert np.min(np.abs(np.linalg.eigvalsh(hess + g0 * ctx.qmat))) > 0.1


def test_perturbed_path_is_zero_for_centered_saddle():
    ctx = quad_context()
    path = solve_perturbed_saddle(ctx, np.linspace(2.0, 50.0, 30))
    assert np.max(np.abs(path.points)) == 0.0
    assert path.arc_length_estimate == 0.0


def test_perturbed_path_closed_form():
    # stationarity of (x1^2 - x2^2)/2 + x2 + (gamma q2/2) x2^2 gives
    # g = (0, 1/(1 - gamma q2))
    q2 = 2.0
    loss = separable_polynomial({0: {2: 0.5}, 1: {2: -0.5, 1: 1.0}}, dim=2)
    q = penalty_from_matrix(np.diag([0.0, q2]))
    ctx = saddle_context(loss, q, PowerLawGamma(1.0, 0.8), np.zeros(2))
    grid = np.linspace(2.0, 400.0, 200)
    path = solve_perturbed_saddle(ctx, grid)
    expected = 1.0 / (1.0 - grid * q2)
    assert np.allclose(path.points[:, 0], 0.0, atol=1e-12)
    assert np.allclose(path.points[:, 1], expected, atol=1e-9)
    assert np.max(path.residuals(loss, q.matrix)) <= 1e-9
    # norm decreasing toward zero on the tail
    norms = np.linalg.norm(path.points, axis=1)
    assert np.all(np.diff(norms) < 0)
    assert norms[-1] < 2e-3
    # arc length against the analytic integral |g2(end) - g2(start)| (monotone
    # scalar curve), and stability under grid refinement
    analytic = abs(expected[-1] - expected[0])
    assert path.arc_length_estimate == pytest.approx(analytic, rel=0.01)
    fine = solve_perturbed_saddle(ctx, np.linspace(2.0, 400.0, 400))
    assert fine.arc_length_estimate == pytest.approx(path.arc_length_estimate, rel=0.01)


def test_linearize_quadratic_q0():
    loss = quadratic_saddle([1.0, -1.0])
    q = penalty_from_matrix(np.zeros((2, 2)))
    ctx = saddle_context(loss, q, ConstantGamma(1.0), np.zeros(2))
    split = linearize(ctx, 3.0, np.zeros(2))
    assert np.allclose(split.lambdas, [1.0, -1.0])
    assert split.n_u == 1
    assert np.allclose(split.modes @ split.a_matrix @ split.modes.T,
                       np.diag(split.lambdas), atol=1e-12)


def test_linearize_penalty_stabilizes_off_constraint():
    loss = quadratic_saddle([1.0, -1.0])
    q = penalty_from_matrix(np.diag([0.0, 2.0]))
    ctx = saddle_context(loss, q, PowerLawGamma(1.0, 1.0), np.zeros(2))

    a_direct = -loss.hessian(np.zeros(2)) - 5.0 * q.matrix
    assert np.allclose(np.sort(np.linalg.eigvalsh(a_direct)), [1.0 - 10.0, -1.0])
    split = linearize(ctx, 5.0, np.zeros(2))
    assert split.n_u == 0  # both directions stable once gamma q > 1
    assert np.allclose(np.sort(split.lambdas), [1.0 - 10.0, -1.0])


def test_linearize_eigenvalue_limits():
    ctx = quad_context()
    b_eigs = np.sort(np.linalg.eigvalsh(-ctx.restricted_hessian()))[::-1]
    slopes = []
    for t in (200.0, 400.0, 800.0):
        split = linearize(ctx, t, np.zeros(3))
        in_constraint = split.lambdas[[0, 1]]
        assert np.allclose(in_constraint, b_eigs, atol=1e-3)
        slopes.append(split.lambdas[2] / float(ctx.gamma(t)))
    # off-constraint eigenvalue scales like -gamma * eig(Q_off)
    assert np.allclose(slopes, -2.0, rtol=0.05)


def test_partition_error_near_zero_crossing():
    loss = quadratic_saddle([1.0, -1.0])
    q = penalty_from_matrix(np.diag([0.0, 2.0]))
    ctx = saddle_context(loss, q, ConstantGamma(0.5), np.zeros(2))
    with pytest.raises(PartitionError):
        linearize(ctx, 1.0, np.zeros(2))  # 1 - gamma q = 0 exactly


def test_evolution_operator_identity_and_scalar_decay():
    ctx = quad_context()
    model = ManifoldModel(ctx, 4.0, 40.0, PicardOptions(horizon=8.0, dt=0.01, tail=4.0))
    frame = model.frame(5.0)
    v_same = evolution_operator(frame, 6.0, 6.0, "stable")
    expect = np.diag([0.0, 1.0, 1.0])
    assert np.allclose(v_same, expect, atol=1e-12)
    # in-constraint stable eigenvalue is exactly -1: one unit of time decays e^-1
    v = evolution_operator(frame, 6.0, 7.0, "stable")
    assert v[1, 1] == pytest.approx(np.exp(-1.0), rel=1e-6)
    with pytest.raises(ValueError):
        evolution_operator(frame, 7.0, 6.0, "stable")
    with pytest.raises(ValueError):
        evolution_operator(frame, 6.0, 7.0, "unstable")
    v_u = evolution_operator(frame, 7.0, 6.0, "unstable")
    assert v_u[0, 0] == pytest.approx(np.exp(-1.0), rel=1e-6)


def test_evolution_decay_envelope_fit():
    ctx = quad_context()
    model = ManifoldModel(ctx, 4.0, 40.0, PicardOptions(horizon=8.0, dt=0.01, tail=4.0))
    frame = model.frame(5.0)
    rng = np.random.default_rng(0)
    pairs = np.sort(5.0 + 7.0 * rng.random((40, 2)), axis=1)
    gaps = pairs[:, 1] - pairs[:, 0]
    norms = np.array([np.linalg.norm(evolution_operator(frame, t1, t2, "stable"), 2)
                      for t1, t2 in pairs])
    keep = gaps > 0.1
    slope, intercept = np.polyfit(gaps[keep], np.log(norms[keep]), 1)
    k_fit = np.exp(intercept) * 1.05
    rate = -slope
    assert rate > 0
    held = np.sort(5.0 + 7.0 * rng.random((40, 2)), axis=1)
    for t1, t2 in held:
        n = np.linalg.norm(evolution_operator(frame, t1, t2, "stable"), 2)
        assert n <= k_fit * np.exp(-rate * (t2 - t1)) * 1.05 + 1e-12


def test_picard_quadratic_zero_input_exact_in_one_iteration():
    ctx = quad_context()
    model = ManifoldModel(ctx, 4.0, 40.0, PicardOptions(horizon=8.0, dt=0.01, tail=4.0))
    assert model.psi_is_zero
    sol = model.picard_solve(5.0, np.zeros((1, 2)))
    assert sol.iterations == 1
    assert np.max(np.abs(sol.u)) == 0.0
    assert sol.residual == 0.0


def test_picard_quadratic_general_input_is_propagated_ic():
    ctx = quad_context()
    model = ManifoldModel(ctx, 4.0, 40.0, PicardOptions(horizon=8.0, dt=0.01, tail=4.0))
    a_s = np.array([[0.05, -0.03]])
    sol = model.picard_solve(5.0, a_s)
    assert sol.iterations <= 2
    frame = model.frame(5.0)
    # stable components follow the evolution operator exactly; unstable stay 0
    for idx in (10, 100, 400):
        t = frame.times[idx]
        v = evolution_operator(frame, t, frame.t0, "unstable")  # orientation guard
        expected = np.exp(frame.cumlam[idx, 1:] - frame.cumlam[0, 1:]) * a_s[0]
        assert np.allclose(sol.u[0, idx, 1:], expected, atol=1e-12)
        assert abs(sol.u[0, idx, 0]) < 1e-12
    assert np.allclose(sol.psi, 0.0)


def test_picard_decoupled_cubic_finds_flat_manifold():
    # the x2^3 perturbation leaves the unstable equation self-contained, so
    # the solver must discover that the manifold stays the stable axis
    ctx = cubic_context()
    model = ManifoldModel(ctx, 1.0, 40.0, PicardOptions(horizon=10.0, dt=0.005,
                                                        tail=5.0, tol=1e-10))
    assert not model.psi_is_zero
    sol = model.picard_solve(2.0, np.array([[0.08]]))
    assert np.max(np.abs(sol.psi)) < 1e-10
    assert sol.residual < 1e-6


def test_picard_cross_cubic_contracts_and_resubstitutes():
    ctx = cross_cubic_context()
    model = ManifoldModel(ctx, 1.0, 40.0, PicardOptions(horizon=10.0, dt=0.005,
                                                        tail=5.0, tol=1e-10))
    assert not model.psi_is_zero
    sol = model.picard_solve(2.0, np.array([[0.08]]))
    ratios = sol.contraction_ratios()
    assert len(ratios) >= 1
    assert np.all(ratios < 0.5)
    assert sol.residual < 1e-6
    # exponential-decay envelope: log|u| below a fitted negative-slope line
    norms = np.linalg.norm(sol.u[0], axis=1)
    mask = (sol.times > sol.times[0] + 1.0) & (norms > 1e-14)
    slope, intercept = np.polyfit(sol.times[mask], np.log(norms[mask]), 1)
    assert slope < -0.5
    assert np.all(np.log(norms[mask]) <= intercept + slope * sol.times[mask] + 0.5)


def test_picard_tangency_slope_two_with_coefficient():
    ctx = cross_cubic_context()
    model = ManifoldModel(ctx, 1.0, 40.0, PicardOptions(horizon=10.0, dt=0.005,
                                                        tail=5.0, tol=1e-11))
    sizes = np.geomspace(0.003, 0.03, 6)
    psis = model.psi(2.0, sizes[:, None])
    mags = np.abs(psis[:, 0])
    slope = np.polyfit(np.log(sizes), np.log(mags), 1)[0]
    assert slope == pytest.approx(2.0, abs=0.2)
    # invariant-graph oracle: psi = z^2/30 to leading order
    assert psis[0, 0] / sizes[0] ** 2 == pytest.approx(1.0 / 30.0, rel=0.05)


def test_picard_rejects_large_initial_condition():
    ctx = cubic_context()
    model = ManifoldModel(ctx, 1.0, 40.0, PicardOptions(horizon=8.0, dt=0.01, tail=4.0),
                          radius=0.2)
    with pytest.raises(ContractionError):
        model.picard_solve(2.0, np.array([[0.5]]))


def test_picard_forced_path_runs_and_decays():
    # nonzero stationary path: the forcing term feeds the equation
    ctx = shifted_context()
    model = ManifoldModel(ctx, 4.0, 60.0, PicardOptions(horizon=10.0, dt=0.01, tail=6.0,
                                                        tol=1e-9))
    assert not model.psi_is_zero
    sol = model.picard_solve(6.0, np.zeros((1, 2)))
    assert sol.residual < 1e-6
    psi_val = np.linalg.norm(sol.psi)
    sol_late = model.picard_solve(30.0, np.zeros((1, 2)))
    assert np.linalg.norm(sol_late.psi) < psi_val + 1e-9


def test_coordinate_change_roundtrip():
    ctx = shifted_context()
    model = ManifoldModel(ctx, 4.0, 60.0, PicardOptions(horizon=10.0, dt=0.01, tail=6.0))
    rng = np.random.default_rng(1)
    x = ctx.saddle + 0.1 * rng.standard_normal((5, 3))
    z = model.coordinate_change(x, 10.0)
    back = model.coordinate_change_inverse(z, 10.0)
    assert np.max(np.abs(back - x)) < 1e-10
