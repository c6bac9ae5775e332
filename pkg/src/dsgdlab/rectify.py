"""Rectified coordinates around the stable manifold: the flattening map, the
distance functional, the repulsion inequality, and the rectified-field
spectrum.

In the rotated/recentered coordinates z = U(t)(x - g(gamma_t)), the manifold
is the graph z_u = psi(t, z_s). The flattening map Phi subtracts the graph
from the unstable block, so manifold points land on {first n_u coordinates
zero}; the distance functional eta is the Euclidean norm of those
coordinates. One Euler step of the flow multiplies eta by at least
(1 + c2 eps) up to an O(eps^2) error, which is the quantitative repulsion
statement checked here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NewtonError, OutOfBallError
from .graphs import penalty_from_matrix
from .losses import LossOracle
from .manifold import ManifoldModel, PicardOptions, saddle_context
from .schedules import ConstantGamma


def _as_batch(z):
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    return (z[None, :] if single else z), single


def rectify_phi(model, z, t, options=None):
    """Flattening map in rotated coordinates: (z_u - psi(t, z_s); z_s).

    Input points must lie inside the validity ball (rotated-frame norm).
    """
    zb, single = _as_batch(z)
    if np.max(np.linalg.norm(zb, axis=1)) > model.radius + 1e-12:
        raise OutOfBallError("point outside the manifold validity ball")
    out = zb.copy()
    n_u = model.context.n_u
    out[:, :n_u] -= model.psi(t, zb[:, n_u:], options)
    return out[0] if single else out


def rectify_phi_inverse(model, w, t, options=None, tol=1e-11, max_iter=30):
    """Invert the flattening map by fixed-point iteration.

    The Jacobian is identity plus the O(|z|) graph slope, so x <- x - (Phi(x)-w)
    contracts near the origin.
    """
    wb, single = _as_batch(w)
    x = wb.copy()
    for _ in range(max_iter):
        r = rectify_phi(model, x, t, options) - wb
        x = x - r
        if np.max(np.abs(r)) < tol:
            return x[0] if single else x
    raise NewtonError("flattening-map inversion did not converge")


def eta(model, x, t, options=None):
    """Distance-to-manifold functional in original coordinates.

    eta(x, t) = || unstable components of Phi(U(t)(x - g(gamma_t)), t) ||.
    """
    xb, single = _as_batch(x)
    z = model.coordinate_change(xb, t)
    phi = rectify_phi(model, z, t, options)
    val = np.linalg.norm(phi[:, : model.context.n_u], axis=1)
    return float(val[0]) if single else val


def distance_coordinates(x, n_u):
    """The coordinate-slice distance d(x) = sqrt(sum of first n_u squares)."""
    x = np.asarray(x, dtype=float)
    return np.linalg.norm(x[..., :n_u], axis=-1)


@dataclass(frozen=True)
class RepulsionReport:
    """Fit of eta_after >= (1 + c2 eps) eta_before - c3 eps^2 over the sweep."""

    c2_hat: float
    c3_hat: float
    violations: np.ndarray
    n_pairs: int
    n_censored: int

    @property
    def fit_valid(self):
        return bool(self.c2_hat > 0 and np.isfinite(self.c3_hat)
                    and len(self.violations) == 0)


def repulsion_check(model, sample_ball, epsilon_grid, t_grid, n_samples=500,
                    seed=0, options=None, rate_floor_quantile=0.05):
    """Sweep one Euler step of the flow and fit the repulsion constants.

    For every sampled point, time, and step size, compares eta after the step
    x + eps J(x, t) (evaluated at time t + eps) against eta before. c2_hat is
    the worst relative growth rate on points meaningfully off the manifold;
    c3_hat is the smallest curvature allowance making the inequality hold on
    every pair. Points leaving the validity ball are censored and counted.
    """
    ctx = model.context
    rng = np.random.default_rng(seed)
    n_u = ctx.n_u
    before_all, after_all, eps_all = [], [], []
    censored = 0
    for t in np.asarray(t_grid, dtype=float):
        offsets = rng.standard_normal((n_samples, ctx.dim))
        offsets *= (sample_ball * rng.random(n_samples) ** (1.0 / ctx.dim)
                    / np.linalg.norm(offsets, axis=1))[:, None]
        xs = ctx.saddle + offsets
        z_before = model.coordinate_change(xs, t)
        ok_before = (np.linalg.norm(z_before, axis=1) <= model.radius) \
            & (np.linalg.norm(z_before[:, n_u:], axis=1) <= model.radius / 3.0)
        censored += int(np.sum(~ok_before))
        zb = z_before[ok_before]
        eta_before = np.linalg.norm(
            zb[:, :n_u] - model.psi(t, zb[:, n_u:], options), axis=1)
        x_ok = xs[ok_before]
        for eps in np.asarray(epsilon_grid, dtype=float):
            stepped = x_ok + eps * model.drive_field(x_ok, t)
            z_after = model.coordinate_change(stepped, t + eps)
            ok = (np.linalg.norm(z_after, axis=1) <= model.radius) \
                & (np.linalg.norm(z_after[:, n_u:], axis=1) <= model.radius / 3.0)
            censored += int(np.sum(~ok))
            za = z_after[ok]
            eta_after = np.linalg.norm(
                za[:, :n_u] - model.psi(t + eps, za[:, n_u:], options), axis=1)
            before_all.append(eta_before[ok])
            after_all.append(eta_after)
            eps_all.append(np.full(int(np.sum(ok)), eps))

    before = np.concatenate(before_all)
    after = np.concatenate(after_all)
    eps = np.concatenate(eps_all)
    n_pairs = len(before)

    floor = max(1e-9, float(np.quantile(before, rate_floor_quantile)))
    mask = before > floor
    rates = (after[mask] - before[mask]) / (eps[mask] * before[mask])
    c2_hat = float(np.min(rates)) if np.any(mask) else np.nan
    c2_pos = max(c2_hat, 0.0)
    slack = (1.0 + c2_pos * eps) * before - after
    c3_hat = max(0.0, float(np.max(slack / eps ** 2)))
    bad = after < (1.0 + c2_pos * eps) * before - c3_hat * eps ** 2 - 1e-12
    if c2_hat <= 0:
        bad |= mask_to_full(mask, rates <= 0)
    return RepulsionReport(c2_hat, c3_hat, np.flatnonzero(bad), n_pairs, censored)


def mask_to_full(outer_mask, inner_mask):
    out = np.zeros(len(outer_mask), dtype=bool)
    out[np.flatnonzero(outer_mask)[inner_mask]] = True
    return out


def moving_frame_field(model, z, t):
    """The flow field in the rotated/recentered coordinates,
    H(z, t) = U J(U^T z + g, t) + Udot U^T z - U g' gammadot."""
    lam, modes, mode_rate, forcing, g_t = model.local_linearization(t)
    zb, single = _as_batch(z)
    w = zb @ modes + g_t
    out = model.drive_field(w, t) @ modes.T + zb @ mode_rate.T - forcing
    return out[0] if single else out


def rectified_field(model, w, t, fd_step=1e-4, options=None):
    """Vector field governing Phi-coordinates: D_x Phi H + D_t Phi at Phi^-1(w)."""
    wb, single = _as_batch(w)
    n_u = model.context.n_u
    if model.psi_is_zero:
        out = moving_frame_field(model, wb, t)
        return out[0] if single else out
    x = rectify_phi_inverse(model, wb, t, options)
    h_val = moving_frame_field(model, x, t)
    b = len(wb)
    n_s = model.context.n_s
    # graph-slope block of D_x Phi by central differences in the stable block
    stencil = []
    for j in range(n_s):
        e = np.zeros(n_s)
        e[j] = fd_step
        stencil.append(x[:, n_u:] + e)
        stencil.append(x[:, n_u:] - e)
    psis = model.psi(t, np.concatenate(stencil, axis=0), options)
    dpsi = np.empty((b, n_u, n_s))
    for j in range(n_s):
        plus = psis[2 * j * b:(2 * j + 1) * b]
        minus = psis[(2 * j + 1) * b:(2 * j + 2) * b]
        dpsi[:, :, j] = (plus - minus) / (2.0 * fd_step)
    # time slope of the graph at the stable components
    dt_loc = fd_step
    psi_p = model.psi(t + dt_loc, x[:, n_u:], options)
    psi_m = model.psi(t - dt_loc, x[:, n_u:], options)
    dpsi_dt = (psi_p - psi_m) / (2.0 * dt_loc)
    out = h_val.copy()
    out[:, :n_u] -= np.einsum("bus,bs->bu", dpsi, h_val[:, n_u:]) + dpsi_dt
    return out[0] if single else out


@dataclass(frozen=True)
class SpectrumReport:
    times: np.ndarray
    eigenvalues: np.ndarray      # (n_t, M), sorted descending by real part
    n_positive: np.ndarray
    min_positive_tail: float
    max_imag: float


def rectified_field_spectrum(model, t_grid, fd_step=1e-4, options=None):
    """Finite-difference Jacobian spectrum of the rectified field at the origin.

    For large t the Jacobian has exactly n_u positive eigenvalues, the rest
    negative, with the smallest positive eigenvalue bounded away from zero
    over the tail of the grid.
    """
    t_grid = np.asarray(t_grid, dtype=float)
    m = model.context.dim
    eigs = np.empty((len(t_grid), m))
    n_pos = np.empty(len(t_grid), dtype=int)
    max_imag = 0.0
    for i, t in enumerate(t_grid):
        cols = []
        basis = fd_step * np.eye(m)
        plus = rectified_field(model, basis, t, fd_step, options)
        minus = rectified_field(model, -basis, t, fd_step, options)
        w_t = (plus - minus).T / (2.0 * fd_step)
        vals = np.linalg.eigvals(w_t)
        max_imag = max(max_imag, float(np.max(np.abs(vals.imag))))
        re = np.sort(vals.real)[::-1]
        eigs[i] = re
        n_pos[i] = int(np.sum(re > 0))
    tail = eigs[len(t_grid) // 2:]
    pos_tail = tail[tail > 0]
    min_pos = float(np.min(pos_tail)) if len(pos_tail) else 0.0
    return SpectrumReport(t_grid, eigs, n_pos, min_pos, max_imag)


def approximate_eigenvalue_bound(a, x, lam):
    """Residual certificate: ||(A - lam I) x|| = eps with unit x locates lam
    within eps * sqrt(m) of the spectrum of symmetric A."""
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if not np.allclose(a, a.T, atol=1e-12):
        raise ValueError("matrix must be symmetric")
    x = x / np.linalg.norm(x)
    eps = float(np.linalg.norm(a @ x - lam * x))
    bound = eps * np.sqrt(a.shape[0])
    actual = float(np.min(np.abs(np.linalg.eigvalsh(a) - lam)))
    return eps, bound, actual


def autonomous_restriction(context, t_span=40.0, picard=None, radius=0.3):
    """Classical (constant-coefficient) manifold model of the flow restricted
    to the constraint space; its graph map is the limit object the
    time-varying flattening converges to."""
    basis = context.rotation.constraint_basis
    saddle_c = np.asarray(context.saddle, dtype=float) @ basis
    loss = context.loss

    def value(y):
        return loss.value(np.asarray(y, dtype=float) @ basis.T)

    def subgradient(y):
        return loss.subgradient(np.asarray(y, dtype=float) @ basis.T) @ basis

    def hessian(y):
        return basis.T @ loss.hessian(np.asarray(y, dtype=float) @ basis.T) @ basis

    restricted = LossOracle(basis.shape[1], value, subgradient, hessian, "c3")
    q_zero = penalty_from_matrix(np.zeros((basis.shape[1], basis.shape[1])))
    ctx_c = saddle_context(restricted, q_zero, ConstantGamma(0.0), saddle_c)
    opts = picard or PicardOptions()
    return ManifoldModel(ctx_c, 0.0, t_span, opts, radius)


@dataclass(frozen=True)
class FlatteningComparison:
    t0_grid: np.ndarray
    gaps: np.ndarray

    @property
    def decreasing(self):
        return bool(np.all(np.diff(self.gaps) <= 1e-12 + 0.05 * self.gaps[:-1]))


def compare_flattening_limit(model, auto_model, t0_grid, n_samples=32, seed=0,
                             sample_ball=0.05, options=None):
    """Gap between constraint components of the time-varying flattening and the
    autonomous one, on shared samples; shrinks as t0 grows."""
    ctx = model.context
    d = ctx.rotation.constraint_dim
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((n_samples, ctx.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = sample_ball * rng.random(n_samples) ** (1.0 / ctx.dim)
    xs = ctx.saddle + dirs * radii[:, None]
    gaps = []
    for t0 in np.asarray(t0_grid, dtype=float):
        z = model.coordinate_change(xs, t0)
        phi_full = rectify_phi(model, z, t0, options)[:, :d]
        z_c = auto_model.coordinate_change(xs @ ctx.rotation.constraint_basis, 0.0)
        phi_star = rectify_phi(auto_model, z_c, 0.0, options)
        gaps.append(float(np.max(np.linalg.norm(phi_full - phi_star, axis=1))))
    return FlatteningComparison(np.asarray(t0_grid, dtype=float), np.array(gaps))


@dataclass(frozen=True)
class FlatteningDriftProbe:
    times: np.ndarray
    dt_phi_norm: np.ndarray
    dx_phi_gap: np.ndarray       # ||D_x Phi(0, t) - I||


def dt_phi_decay_probe(model, t_grid, fd_step=1e-3, options=None):
    """Finite-difference time and space derivatives of the flattening at the
    origin; both drift terms decay as the penalty grows."""
    ctx = model.context
    n_u, n_s = ctx.n_u, ctx.n_s
    t_grid = np.asarray(t_grid, dtype=float)
    dt_norm = np.empty(len(t_grid))
    dx_gap = np.empty(len(t_grid))
    zero_s = np.zeros((1, n_s))
    for i, t in enumerate(t_grid):
        p_plus = model.psi(t + fd_step, zero_s, options)
        p_minus = model.psi(t - fd_step, zero_s, options)
        dt_norm[i] = float(np.linalg.norm((p_plus - p_minus) / (2.0 * fd_step)))
        stencil = np.concatenate([fd_step * np.eye(n_s), -fd_step * np.eye(n_s)])
        psis = model.psi(t, stencil, options)
        dpsi = (psis[:n_s] - psis[n_s:]).T / (2.0 * fd_step)
        dx_gap[i] = float(np.linalg.norm(dpsi))
    return FlatteningDriftProbe(t_grid, dt_norm, dx_gap)
