"""Discrete stochastic recursions: the general penalized form and the
agentwise consensus form.

The general update is
    x(k+1) = x(k) - alpha_k (v(k) + gamma_k Q x(k) + xi(k+1)),
with v(k) a subgradient selection; the agentwise form
    x_n(k+1) = x_n(k) + beta_k sum_{l in neighbors} (x_l - x_n)
               - alpha_k (v_n(k) + xi_n(k+1))
is its special case with Q = L kron I_d and beta_k = alpha_k gamma_k. Noise is
drawn from one sub-stream per agent, spawned from the master seed, so stacked
and agentwise runs can consume identical realizations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DivergedError
from .graphs import consensus_penalty, constraint_rotation, laplacian

DIVERGENCE_CEILING = 1e12


@dataclass(frozen=True)
class NoiseModel:
    """Zero-mean per-step noise: none, gaussian(sigma), or uniform-sphere(r).

    restrict_to_constraint projects each stacked draw onto nullspace(Q),
    exciting only constraint directions.
    """

    kind: str = "none"
    scale: float = 0.0
    seed: int = 0
    restrict_to_constraint: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "gaussian", "uniform-sphere"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        if self.kind != "none" and self.scale <= 0:
            raise ValueError("gaussian and uniform-sphere noise need a positive scale")

    def start(self, n_agents, agent_dim, rotation=None, seed=None):
        projector = None
        if self.restrict_to_constraint:
            if rotation is None:
                raise ValueError("restrict_to_constraint needs the constraint rotation")
            basis = rotation.constraint_basis
            projector = basis @ basis.T
        return NoiseStream(self.kind, self.scale,
                           self.seed if seed is None else seed,
                           n_agents, agent_dim, projector)


class NoiseStream:
    """Stateful per-run noise source with one spawned generator per agent."""

    def __init__(self, kind, scale, seed, n_agents, agent_dim, projector=None):
        self.kind = kind
        self.scale = scale
        self.n_agents = n_agents
        self.agent_dim = agent_dim
        self.projector = projector
        if kind == "none":
            self._gens = None
        else:
            children = np.random.SeedSequence(seed).spawn(n_agents)
            self._gens = [np.random.default_rng(c) for c in children]

    def draw(self):
        """One noise event, shape (n_agents, agent_dim)."""
        return self.draw_chunk(1)[0]

    def draw_chunk(self, count):
        """count consecutive events, shape (count, n_agents, agent_dim).

        Chunked draws consume each agent generator exactly as repeated single
        draws do, so chunking never changes realizations.
        """
        if self.kind == "none":
            return np.zeros((count, self.n_agents, self.agent_dim))
        cols = []
        for gen in self._gens:
            block = gen.standard_normal((count, self.agent_dim))
            if self.kind == "uniform-sphere":
                norms = np.linalg.norm(block, axis=-1, keepdims=True)
                norms[norms == 0.0] = 1.0
                block = self.scale * block / norms
            else:
                block = self.scale * block
            cols.append(block)
        out = np.stack(cols, axis=1)
        if self.projector is not None:
            flat = out.reshape(count, -1) @ self.projector.T
            out = flat.reshape(count, self.n_agents, self.agent_dim)
        return out


def general_step(x, k, loss, q, schedule, noise):
    """One update of the penalized recursion; consumes one noise event."""
    if k < 1:
        raise ValueError("step index starts at 1")
    x = np.asarray(x, dtype=float)
    qm = q.matrix if hasattr(q, "matrix") else np.asarray(q, dtype=float)
    if x.shape[-1] != qm.shape[0] or loss.dim != qm.shape[0]:
        raise ValueError("dimension mismatch between state, loss, and penalty")
    v = loss.subgradient(x)
    xi = noise.draw().ravel()
    alpha_k = schedule.alpha(k)
    new = x - alpha_k * (v + schedule.gamma(k) * (qm @ x) + xi)
    if not np.all(np.isfinite(new)):
        raise DivergedError(k)
    return new


def agentwise_step(states, k, losses, graph, schedule, noise):
    """One agentwise update; each agent mixes neighbor states and descends its
    private loss. Equals the stacked general step with Q = L kron I_d."""
    return _agentwise_update(np.asarray(states, dtype=float), k, losses,
                             laplacian(graph), schedule, noise)


def _agentwise_update(states, k, losses, lap, schedule, noise):
    if k < 1:
        raise ValueError("step index starts at 1")
    grads = np.stack([c.subgradient(states[n]) for n, c in enumerate(losses.components)])
    xi = noise.draw()
    # sum over neighbors of (x_l - x_n) is exactly -(L @ states) row-wise
    new = states - schedule.beta(k) * (lap @ states) - schedule.alpha(k) * (grads + xi)
    if not np.all(np.isfinite(new)):
        raise DivergedError(k)
    return new


@dataclass
class Trajectory:
    """Checkpointed record of a run: per-row step count, elapsed time, and metrics."""

    steps: np.ndarray
    zeta: np.ndarray
    consensus_error: np.ndarray
    grad_norm: np.ndarray
    state_norm: np.ndarray
    final_state: np.ndarray
    sup_state_norm: float
    mode: str = "general"
    noise_kind: str = "none"
    n_agents: int = 1
    agent_dim: int = 0
    states: Optional[np.ndarray] = None
    noise_means: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.steps)


def _record_points(steps, record):
    if record == "geometric":
        pts = {0, steps}
        p = 1
        while p < steps:
            pts.add(p)
            p *= 2
        return sorted(pts)
    interval = int(record)
    if interval < 1:
        raise ValueError("record interval must be >= 1")
    pts = set(range(0, steps + 1, interval))
    pts.add(steps)
    return sorted(pts)


def _metrics(x, loss, rotation):
    cons = float(rotation.off_constraint_norm(x))
    proj = rotation.project_constraint(x)
    v = loss.subgradient(proj)
    gnorm = float(np.linalg.norm(rotation.constraint_part(v)))
    return cons, gnorm, float(np.linalg.norm(x))


def run(initial, steps, loss, q, schedule, noise=NoiseModel(), *, record="geometric",
        record_state=False, record_noise=False, ceiling=DIVERGENCE_CEILING,
        rotation=None, n_agents=1):
    """Iterate the general recursion, recording metrics at checkpoints.

    Deterministic given the noise seed. n_agents fixes the noise sub-stream
    layout: with n_agents = N the run consumes the same realizations as the
    agentwise form on N agents. Raises DivergedError past the ceiling.
    """
    x = np.asarray(initial, dtype=float).copy()
    m = len(x)
    if m % n_agents:
        raise ValueError("state dimension must split evenly across agents")
    if rotation is None:
        rotation = constraint_rotation(q)
    stream = noise.start(n_agents, m // n_agents, rotation)
    points = _record_points(steps, record)
    qm = q.matrix if hasattr(q, "matrix") else np.asarray(q, dtype=float)

    rows, states, noise_means = [], [], []
    zeta = 0.0
    sup_norm = float(np.linalg.norm(x))

    def record_row(count):
        rows.append((count, zeta) + _metrics(x, loss, rotation))
        if record_state:
            states.append(x.copy())

    record_row(0)
    pts = iter(points[1:])
    next_pt = next(pts, None)
    for k in range(1, steps + 1):
        v = loss.subgradient(x)
        xi_mat = stream.draw()
        alpha_k = schedule.alpha(k)
        x = x - alpha_k * (v + schedule.gamma(k) * (qm @ x) + xi_mat.ravel())
        zeta += alpha_k
        norm = float(np.linalg.norm(x))
        sup_norm = max(sup_norm, norm)
        if not np.isfinite(norm) or norm > ceiling:
            raise DivergedError(k)
        if record_noise:
            noise_means.append(xi_mat.mean(axis=0))
        if k == next_pt:
            record_row(k)
            next_pt = next(pts, None)

    cols = np.array(rows).T
    return Trajectory(cols[0].astype(int), cols[1], cols[2], cols[3], cols[4],
                      x, sup_norm, "general", noise.kind, n_agents, m // n_agents,
                      np.array(states) if record_state else None,
                      np.array(noise_means) if record_noise else None)


def run_agentwise(initial_states, steps, losses, graph, schedule, noise=NoiseModel(),
                  *, record="geometric", record_state=False, record_noise=False,
                  ceiling=DIVERGENCE_CEILING):
    """Iterate the agentwise recursion on a communication graph."""
    states = np.asarray(initial_states, dtype=float).copy()
    n, d = states.shape
    if n != losses.n_agents or d != losses.agent_dim:
        raise ValueError("initial states disagree with the loss stack")
    lap = laplacian(graph)
    rotation = constraint_rotation(consensus_penalty(lap, d))
    stream = noise.start(n, d, rotation)
    points = _record_points(steps, record)
    loss = losses.assembled

    rows, recs, noise_means = [], [], []
    zeta = 0.0
    sup_norm = float(np.linalg.norm(states))

    def record_row(count):
        flat = states.ravel()
        rows.append((count, zeta) + _metrics(flat, loss, rotation))
        if record_state:
            recs.append(flat.copy())

    record_row(0)
    pts = iter(points[1:])
    next_pt = next(pts, None)
    for k in range(1, steps + 1):
        grads = np.stack([c.subgradient(states[i]) for i, c in enumerate(losses.components)])
        xi = stream.draw()
        alpha_k = schedule.alpha(k)
        states = states - schedule.beta(k) * (lap @ states) - alpha_k * (grads + xi)
        zeta += alpha_k
        norm = float(np.linalg.norm(states))
        sup_norm = max(sup_norm, norm)
        if not np.isfinite(norm) or norm > ceiling:
            raise DivergedError(k)
        if record_noise:
            noise_means.append(xi.mean(axis=0))
        if k == next_pt:
            record_row(k)
            next_pt = next(pts, None)

    cols = np.array(rows).T
    return Trajectory(cols[0].astype(int), cols[1], cols[2], cols[3], cols[4],
                      states.ravel(), sup_norm, "agentwise", noise.kind, n, d,
                      np.array(recs) if record_state else None,
                      np.array(noise_means) if record_noise else None)


@dataclass(frozen=True)
class MeanResidualReport:
    """Exact mean-recursion residuals (zero to round-off) and the gap between
    the averaged agent gradients and the gradient at the network mean."""

    identity_residual: np.ndarray
    approximation_gap: np.ndarray


def network_mean_residual(traj, losses, schedule):
    """Check that the network mean follows the averaged-gradient recursion.

    Needs an agentwise trajectory recorded at every step with states and noise
    means; losses must be continuously differentiable so the gradient at the
    mean is well defined.
    """
    if traj.mode != "agentwise":
        raise ValueError("need an agentwise trajectory")
    if traj.states is None or traj.noise_means is None:
        raise ValueError("trajectory must record states and noise at every step")
    if not all(c.is_smooth(1) for c in losses.components):
        raise ValueError("mean-recursion comparison needs smooth losses")
    k_count = len(traj.states) - 1
    if not np.array_equal(traj.steps, np.arange(k_count + 1)):
        raise ValueError("trajectory must be recorded at every step")

    n, d = losses.n_agents, losses.agent_dim
    blocks = traj.states.reshape(-1, n, d)
    means = blocks.mean(axis=1)
    identity = np.empty(k_count)
    gap = np.empty(k_count)
    for k in range(1, k_count + 1):
        prev = blocks[k - 1]
        avg_grad = np.stack([c.subgradient(prev[i])
                             for i, c in enumerate(losses.components)]).mean(axis=0)
        predicted = means[k - 1] - schedule.alpha(k) * (avg_grad + traj.noise_means[k - 1])
        identity[k - 1] = np.linalg.norm(means[k] - predicted)
        grad_at_mean = np.stack([c.subgradient(means[k - 1])
                                 for c in losses.components]).mean(axis=0)
        gap[k - 1] = np.linalg.norm(avg_grad - grad_at_mean)
    return MeanResidualReport(identity, gap)


@dataclass(frozen=True)
class BoundednessReport:
    sup_norm: float
    within_bound: bool


def boundedness_probe(traj, ceiling=1e3):
    """Did the whole run stay inside the configured norm ball?"""
    return BoundednessReport(traj.sup_state_norm, bool(traj.sup_state_norm <= ceiling))


@dataclass(frozen=True)
class KarRateReport:
    converges: bool
    scaled_limit: float
    z_final: float


def rate_check_kar(a1, delta1, a2, delta2, delta0, z0, steps):
    """Iterate z_{k+1} = (1 - r1(k)) z_k + r2(k) and report the rescaled tail.

    r1(k) = a1 (k+1)^-delta1 (clipped at 1), r2(k) = a2 (k+1)^-delta2; the
    rescaling (k+1)^delta0 z_k should vanish whenever delta0 < delta2 - delta1.
    """
    if a1 <= 0:
        raise ValueError("a1 must be positive")
    if a2 < 0:
        raise ValueError("a2 must be nonnegative")
    if not 0 <= delta1 < 1:
        raise ValueError("delta1 must lie in [0, 1)")
    if delta2 <= delta1:
        raise ValueError("delta2 must exceed delta1")
    if not 0 <= delta0 < delta2 - delta1:
        raise ValueError("delta0 must lie in [0, delta2 - delta1)")
    z = float(z0)
    early_at = max(10, steps // 100)
    early = None
    for k in range(1, steps + 1):
        r1 = min(a1 * (k + 1.0) ** (-delta1), 1.0)
        r2 = a2 * (k + 1.0) ** (-delta2)
        z = (1.0 - r1) * z + r2
        if k == early_at:
            early = (k + 1.0) ** delta0 * z
    scaled = (steps + 1.0) ** delta0 * z
    converges = bool(np.isfinite(scaled) and (early is None or scaled <= early + 1e-300))
    return KarRateReport(converges, float(scaled), z)


def technical_inner_product(x, v, q, alpha_k, gamma_k):
    """<x - alpha/2 (v - gamma Q x), v + gamma Q x>, positive for large k
    outside the coercivity radius."""
    qm = q.matrix if hasattr(q, "matrix") else np.asarray(q, dtype=float)
    qx = qm @ np.asarray(x, dtype=float)
    w = np.asarray(v, dtype=float) + gamma_k * qx
    return float(np.dot(x - 0.5 * alpha_k * (np.asarray(v) - gamma_k * qx), w))


@dataclass
class BatchRun:
    """Vectorized multi-seed run: per-seed rows of checkpointed metrics."""

    seeds: np.ndarray
    steps: np.ndarray
    zeta: np.ndarray
    consensus_error: np.ndarray  # (n_seeds, n_records)
    grad_norm: np.ndarray
    state_norm: np.ndarray
    final_states: np.ndarray
    sup_state_norm: np.ndarray
    diverged_at: np.ndarray  # -1 where the seed stayed finite

    @property
    def n_seeds(self):
        return len(self.seeds)


def run_batch(initial, steps, loss, q, schedule, noise, seeds, *,
              record="geometric", ceiling=DIVERGENCE_CEILING, rotation=None,
              chunk=256, step_callback=None, n_agents=1, k_start=1):
    """Run one seed per row of a vectorized batch of the general recursion.

    Each seed draws from its own spawned stream, so row s reproduces the
    single run with that seed (up to BLAS summation order). Diverged rows are
    frozen at their last finite state and recorded, not fatal. k_start shifts
    the schedule index (restart experiments resume mid-schedule).
    """
    seeds = np.asarray(list(seeds), dtype=int)
    s_count = len(seeds)
    x0 = np.asarray(initial, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (s_count, len(x0)))
    x = np.array(x0, dtype=float)
    m = x.shape[1]
    if m % n_agents:
        raise ValueError("state dimension must split evenly across agents")
    if rotation is None:
        rotation = constraint_rotation(q)
    qm = q.matrix if hasattr(q, "matrix") else np.asarray(q, dtype=float)
    streams = [noise.start(n_agents, m // n_agents, rotation, seed=int(s)) for s in seeds]

    points = _record_points(steps, record)
    zeta0 = float(np.sum(schedule.alpha(np.arange(1, k_start)))) if k_start > 1 else 0.0
    ks = np.arange(k_start, k_start + steps)
    zeta_all = zeta0 + np.concatenate([[0.0], np.cumsum(schedule.alpha(ks))]) \
        if steps else np.array([zeta0])
    zeta_rec = zeta_all[points]

    basis = rotation.constraint_basis
    off = rotation.off_basis

    def metrics(xs):
        cons = np.linalg.norm(xs @ off, axis=1)
        proj = (xs @ basis) @ basis.T
        v = loss.subgradient(proj)
        gn = np.linalg.norm(v @ basis, axis=1)
        return cons, gn, np.linalg.norm(xs, axis=1)

    n_rec = len(points)
    cons_rec = np.empty((s_count, n_rec))
    grad_rec = np.empty((s_count, n_rec))
    norm_rec = np.empty((s_count, n_rec))
    cons_rec[:, 0], grad_rec[:, 0], norm_rec[:, 0] = metrics(x)
    sup_norm = np.linalg.norm(x, axis=1)
    diverged_at = np.full(s_count, -1, dtype=int)
    active = np.ones(s_count, dtype=bool)

    rec_idx = 1
    k = 1
    while k <= steps:
        span = min(chunk, steps - k + 1)
        if noise.kind == "none":
            xi_chunk = None
        else:
            xi_chunk = np.stack([st.draw_chunk(span).reshape(span, m) for st in streams])
        for j in range(span):
            count = k + j
            kk = k_start + count - 1
            v = loss.subgradient(x)
            drive = v + schedule.gamma(kk) * (x @ qm)
            if xi_chunk is not None:
                drive = drive + xi_chunk[:, j, :]
            x_new = x - schedule.alpha(kk) * drive
            norms = np.linalg.norm(x_new, axis=1)
            bad = active & (~np.isfinite(norms) | (norms > ceiling))
            if np.any(bad):
                diverged_at[bad] = kk
                active &= ~bad
            x = np.where(active[:, None], x_new, x)
            sup_norm = np.maximum(sup_norm, np.where(active, norms, sup_norm))
            if step_callback is not None:
                step_callback(kk, x, active)
            if rec_idx < n_rec and count == points[rec_idx]:
                cons_rec[:, rec_idx], grad_rec[:, rec_idx], norm_rec[:, rec_idx] = metrics(x)
                rec_idx += 1
        k += span

    return BatchRun(seeds, np.asarray(points), zeta_rec, cons_rec, grad_rec,
                    norm_rec, x, sup_norm, diverged_at)
