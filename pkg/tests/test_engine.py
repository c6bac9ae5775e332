import numpy as np
import pytest

from dsgdlab.engine import (
    NoiseModel,
    agentwise_step,
    boundedness_probe,
    general_step,
    network_mean_residual,
    rate_check_kar,
    run,
    run_agentwise,
    run_batch,
    technical_inner_product,
)
from dsgdlab.errors import DivergedError
from dsgdlab.graphs import (
    Graph,
    consensus_penalty,
    laplacian,
    path_graph,
    penalty_from_matrix,
)
from dsgdlab.losses import (
    custom_loss,
    quadratic_form,
    quadratic_saddle,
    shifted_quadratic,
    sum_loss,
    zero_loss,
)
from dsgdlab.schedules import Schedule


SCHED = Schedule(1.0, 1.0, 0.5, 0.6)


def consensus_problem(n, d):
    q = consensus_penalty(laplacian(path_graph(n)), d)
    losses = sum_loss([zero_loss(d) for _ in range(n)])
    return q, losses


def test_one_step_consensus_hand_case():
    # alpha_1 * gamma_1 = 0.5 with loss 0 averages the two agents in one step
    sched = Schedule(1.0, 1.0, 0.5, 0.6)
    q, losses = consensus_problem(2, 1)
    x = np.array([1.0, 0.0])
    stream = NoiseModel().start(2, 1)
    new = general_step(x, 1, losses.assembled, q, sched, stream)
    assert np.allclose(new, [0.5, 0.5])


def test_fixed_point_is_fixed():
    q, losses = consensus_problem(3, 2)
    x = np.tile([0.3, -0.7], 3)  # consensual, zero loss: v = 0 and Qx = 0
    stream = NoiseModel().start(3, 2)
    new = general_step(x, 5, losses.assembled, q, SCHED, stream)
    assert np.array_equal(new, x)


def test_plain_descent_step_hand_case():
    loss = quadratic_saddle([1.0, -1.0])
    q = penalty_from_matrix(np.zeros((2, 2)))
    sched = Schedule(0.1, 1.0, 1.0, 0.6)  # alpha_1 = 0.1
    stream = NoiseModel().start(1, 2)
    new = general_step(np.array([1.0, 1.0]), 1, loss, q, sched, stream)
    assert np.allclose(new, [0.9, 1.1])


def test_general_step_detects_divergence():
    loss = custom_loss(1, lambda x: np.zeros(np.shape(x)[:-1]),
                       lambda x: np.full_like(np.asarray(x, float), np.inf))
    q = penalty_from_matrix(np.zeros((1, 1)))
    with pytest.raises(DivergedError) as err:
        general_step(np.array([1.0]), 3, loss, q, SCHED, NoiseModel().start(1, 1))
    assert err.value.step == 3


def random_agent_losses(rng, n, d):
    comps = []
    for _ in range(n):
        h = rng.standard_normal((d, d))
        comps.append(quadratic_form(h + h.T + 2 * d * np.eye(d), rng.standard_normal(d)))
    return sum_loss(comps)


def test_agentwise_matches_general_random_tuples():
    rng = np.random.default_rng(42)
    for trial in range(25):
        n = int(rng.integers(2, 9))
        d = int(rng.integers(1, 4))
        edges = {(1, j) for j in range(2, n + 1)}
        edges |= {(int(i), int(j)) for i, j in rng.integers(1, n + 1, (2 * n, 2))
                  if i < j}
        g = Graph.from_edges(n, edges)
        losses = random_agent_losses(rng, n, d)
        q = consensus_penalty(laplacian(g), d)
        noise = NoiseModel("gaussian", 0.5, seed=int(rng.integers(1 << 30)))
        x0 = rng.standard_normal((n, d))

        s_a = noise.start(n, d)
        s_g = noise.start(n, d)
        xa = x0.copy()
        xg = x0.ravel().copy()
        for k in range(1, 16):
            xa = agentwise_step(xa, k, losses, g, SCHED, s_a)
            xg = general_step(xg, k, losses.assembled, q, SCHED, s_g)
            assert np.linalg.norm(xa.ravel() - xg) <= 1e-12 * max(1.0, np.linalg.norm(xg))


def test_pure_consensus_preserves_mean():
    g = path_graph(4)
    losses = sum_loss([zero_loss(2) for _ in range(4)])
    x = np.random.default_rng(0).standard_normal((4, 2))
    stream = NoiseModel().start(4, 2)
    mean0 = x.mean(axis=0)
    for k in range(1, 200):
        x = agentwise_step(x, k, losses, g, SCHED, stream)
        assert np.allclose(x.mean(axis=0), mean0, atol=1e-13)


def test_two_agent_quadratics_reach_sum_minimizer():
    # f1 = (x-1)^2/2, f2 = (x+1)^2/2: the sum is minimized at 0. The agents'
    # disagreement floor is Theta(1/gamma_k); the network mean contracts fast.
    losses = sum_loss([shifted_quadratic([1.0]), shifted_quadratic([-1.0])])
    g = path_graph(2)
    traj = run_agentwise(np.array([[2.0], [-0.5]]), 100_000, losses, g,
                         Schedule(1.0, 1.0, 0.5, 0.6))
    assert abs(traj.final_state.mean()) < 1e-4
    assert np.linalg.norm(traj.final_state) < 5e-3
    assert traj.consensus_error[-1] < 5e-3


def test_run_zero_steps_contains_initial_state_only():
    q, losses = consensus_problem(2, 1)
    traj = run(np.array([1.0, 0.0]), 0, losses.assembled, q, SCHED, record_state=True)
    assert len(traj) == 1
    assert traj.steps[0] == 0
    assert np.array_equal(traj.states[0], [1.0, 0.0])


def test_run_determinism_same_seed():
    q, losses = consensus_problem(3, 1)
    noise = NoiseModel("gaussian", 0.3, seed=9)
    a = run(np.array([1.0, 0.0, -1.0]), 500, losses.assembled, q, SCHED, noise,
            record_state=True, n_agents=3)
    b = run(np.array([1.0, 0.0, -1.0]), 500, losses.assembled, q, SCHED, noise,
            record_state=True, n_agents=3)
    assert np.array_equal(a.states, b.states)
    assert np.array_equal(a.consensus_error, b.consensus_error)


def test_run_agentwise_equals_run_general_whole_trajectory():
    rng = np.random.default_rng(5)
    n, d = 3, 2
    g = path_graph(n)
    losses = random_agent_losses(rng, n, d)
    q = consensus_penalty(laplacian(g), d)
    noise = NoiseModel("uniform-sphere", 0.4, seed=77)
    x0 = rng.standard_normal((n, d))
    ta = run_agentwise(x0, 300, losses, g, SCHED, noise, record=1, record_state=True)
    tg = run(x0.ravel(), 300, losses.assembled, q, SCHED, noise, record=1,
             record_state=True, n_agents=n)
    assert np.max(np.abs(ta.states - tg.states)) < 1e-12


def test_consensus_error_decays_with_zero_loss():
    q, losses = consensus_problem(5, 2)
    noise = NoiseModel("gaussian", 0.1, seed=3)
    x0 = np.random.default_rng(1).standard_normal(10)
    traj = run(x0, 100_000, losses.assembled, q, SCHED, noise, n_agents=5)
    idx_1e3 = np.searchsorted(traj.steps, 1000)
    assert traj.consensus_error[-1] < 1e-3
    assert traj.consensus_error[-1] < traj.consensus_error[idx_1e3]


def test_expected_one_step_update_matches_drift():
    # averaging over draws converges to x - alpha (grad + gamma Q x) at MC rate
    loss = quadratic_form(np.diag([1.0, 2.0]), [0.3, -0.1])
    q = penalty_from_matrix(np.diag([0.0, 1.0]))
    x = np.array([0.7, -0.4])
    k = 10
    sigma = 0.5
    n_draws = 40_000
    stream = NoiseModel("gaussian", sigma, seed=11).start(1, 2)
    acc = np.zeros(2)
    for _ in range(n_draws):
        acc += general_step(x, k, loss, q, SCHED, stream)
    mc = acc / n_draws
    expected = x - SCHED.alpha(k) * (loss.subgradient(x) + SCHED.gamma(k) * (q.matrix @ x))
    tol = 5.0 * float(SCHED.alpha(k)) * sigma / np.sqrt(n_draws)
    assert np.linalg.norm(mc - expected) < tol


def test_noise_streams_are_zero_mean_with_directional_excitation():
    # conditionally zero mean with bounded second moment, and the averaged
    # positive part along any unit direction stays above a positive floor
    rng = np.random.default_rng(17)
    for kind in ("gaussian", "uniform-sphere"):
        stream = NoiseModel(kind, 1.0, seed=5).start(2, 3)
        draws = stream.draw_chunk(4000).reshape(4000, 6)
        assert np.max(np.abs(draws.mean(axis=0))) < 0.05
        second_moment = np.mean(np.sum(draws ** 2, axis=1))
        assert second_moment < 10.0
        for _ in range(5):
            theta = rng.standard_normal(6)
            theta /= np.linalg.norm(theta)
            positive_part = np.maximum(draws @ theta, 0.0).mean()
            assert positive_part > 0.1


def test_noise_restricted_to_constraint_directions():
    q, losses = consensus_problem(3, 2)
    from dsgdlab.graphs import constraint_rotation
    rot = constraint_rotation(q)
    noise = NoiseModel("gaussian", 1.0, seed=4, restrict_to_constraint=True)
    stream = noise.start(3, 2, rot)
    for _ in range(10):
        draw = stream.draw().ravel()
        assert np.linalg.norm(rot.off_constraint_part(draw)) < 1e-12


def test_technical_inner_product_positive_for_coercive_losses():
    loss = quadratic_form(np.eye(3))
    q = penalty_from_matrix(np.diag([0.0, 1.0, 2.0]))
    rng = np.random.default_rng(8)
    # threshold: alpha_k gamma_k lambda_max small enough, per the two-case bound
    for k in (1000, 10_000, 100_000):
        for _ in range(50):
            x = rng.standard_normal(3)
            x *= (1.0 + 9.0 * rng.random()) / np.linalg.norm(x)  # ||x|| in [1, 10]
            v = loss.subgradient(x)
            val = technical_inner_product(x, v, q, float(SCHED.alpha(k)),
                                          float(SCHED.gamma(k)))
            assert val > 0


def test_boundedness_probe_coercive_and_anticoercive():
    loss = quadratic_form(np.eye(2))
    q = penalty_from_matrix(np.zeros((2, 2)))
    noise = NoiseModel("gaussian", 1.0, seed=0)
    traj = run(np.array([5.0, -3.0]), 100_000, loss, q, SCHED, noise)
    rep = boundedness_probe(traj, ceiling=1e3)
    assert rep.within_bound

    anti = quadratic_form(-np.eye(2))
    with pytest.raises(DivergedError):
        run(np.array([1.0, 0.0]), 500_000, anti, q, Schedule(1.0, 1.0, 0.5, 0.6),
            ceiling=1e3)


def test_boundedness_pure_consensus_norm_nonincreasing():
    q, losses = consensus_problem(4, 1)
    x0 = np.array([3.0, -1.0, 2.0, 0.0])
    traj = run(x0, 10_000, losses.assembled, q, SCHED)
    assert traj.sup_state_norm <= np.linalg.norm(x0) + 1e-12
    rep = boundedness_probe(traj, ceiling=np.linalg.norm(x0) + 1e-9)
    assert rep.within_bound


def test_network_mean_residual_identity_and_gap():
    rng = np.random.default_rng(12)
    n, d = 4, 2
    losses = sum_loss([shifted_quadratic(rng.standard_normal(d)) for _ in range(n)])
    g = path_graph(n)
    noise = NoiseModel("gaussian", 0.2, seed=21)
    traj = run_agentwise(rng.standard_normal((n, d)), 400, losses, g, SCHED, noise,
                         record=1, record_state=True, record_noise=True)
    rep = network_mean_residual(traj, losses, SCHED)
    assert np.max(rep.identity_residual) < 1e-12
    # gap bounded by Lipschitz(grad f_n) * max_n ||x_n - mean||; here Lip = 1
    blocks = traj.states.reshape(-1, n, d)
    spread = np.linalg.norm(blocks - blocks.mean(axis=1, keepdims=True), axis=2).max(axis=1)
    assert np.all(rep.approximation_gap <= spread[:-1] + 1e-12)
    # at consensus the gap vanishes
    consensual = np.tile(rng.standard_normal(d), (n, 1))
    traj2 = run_agentwise(consensual, 1, losses, g, SCHED, record=1,
                          record_state=True, record_noise=True)
    rep2 = network_mean_residual(traj2, losses, SCHED)
    assert rep2.approximation_gap[0] < 1e-14


def test_rate_check_kar_immediate_kill():
    # r1(0) = 1 wipes z in one step and nothing is re-injected
    rep = rate_check_kar(a1=1.0, delta1=0.0, a2=0.0, delta2=1.0, delta0=0.5,
                         z0=3.0, steps=100)
    assert rep.z_final == 0.0
    assert rep.converges


def test_rate_check_kar_decay():
    # quasi-stationary level r2/r1 = (k+1)^(delta1-delta2) makes the rescaled
    # tail behave like (k+1)^(delta0-(delta2-delta1)); check both the envelope
    # at delta0 = 0.5 and the faster-rescaled variant reaching 0.01
    rep = rate_check_kar(a1=1.0, delta1=0.4, a2=1.0, delta2=1.0, delta0=0.5,
                         z0=1.0, steps=1_000_000)
    assert rep.converges
    assert rep.scaled_limit == pytest.approx(1e6 ** -0.1, rel=0.1)
    rep_fast = rate_check_kar(a1=1.0, delta1=0.4, a2=1.0, delta2=1.0, delta0=0.2,
                              z0=1.0, steps=1_000_000)
    assert rep_fast.scaled_limit < 0.01
    assert rep_fast.converges


def test_rate_check_kar_monotone_without_forcing():
    rep = rate_check_kar(a1=0.5, delta1=0.3, a2=0.0, delta2=1.0, delta0=0.0,
                         z0=2.0, steps=200)
    assert 0.0 <= rep.z_final <= 2.0


def test_rate_check_kar_rejects_bad_params():
    with pytest.raises(ValueError):
        rate_check_kar(a1=1.0, delta1=1.2, a2=1.0, delta2=2.0, delta0=0.1, z0=1.0, steps=10)
    with pytest.raises(ValueError):
        rate_check_kar(a1=1.0, delta1=0.5, a2=1.0, delta2=0.4, delta0=0.0, z0=1.0, steps=10)
    with pytest.raises(ValueError):
        rate_check_kar(a1=1.0, delta1=0.2, a2=1.0, delta2=1.0, delta0=0.9, z0=1.0, steps=10)


def test_run_batch_rows_match_single_runs():
    rng = np.random.default_rng(31)
    n, d = 3, 2
    g = path_graph(n)
    losses = random_agent_losses(rng, n, d)
    q = consensus_penalty(laplacian(g), d)
    noise = NoiseModel("gaussian", 0.3)
    x0 = rng.standard_normal(n * d)
    seeds = [5, 17, 99]
    batch = run_batch(x0, 200, losses.assembled, q, SCHED, noise, seeds,
                      n_agents=n, chunk=64)
    for row, seed in enumerate(seeds):
        single = run(x0, 200, losses.assembled, q, SCHED,
                     NoiseModel("gaussian", 0.3, seed=seed), n_agents=n)
        assert np.linalg.norm(batch.final_states[row] - single.final_state) < 1e-12
        assert abs(batch.consensus_error[row, -1] - single.consensus_error[-1]) < 1e-12


def test_run_batch_divergence_recorded_not_fatal():
    anti = quadratic_form(-np.eye(1))
    q = penalty_from_matrix(np.zeros((1, 1)))
    ok = quadratic_form(np.eye(1))
    batch = run_batch(np.array([1.0]), 30_000, anti, q, Schedule(1.0, 1.0, 0.5, 0.6),
                      NoiseModel(), [0, 1], ceiling=1e3)
    assert np.all(batch.diverged_at > 0)
    batch_ok = run_batch(np.array([1.0]), 1000, ok, q, SCHED, NoiseModel(), [0])
    assert np.all(batch_ok.diverged_at == -1)
