"""Stable-manifold machinery near regular saddle points of the constrained
objective.

The penalized stationary path g(gamma) solves grad h(g) + gamma Q g = 0 and
collapses onto the saddle as the penalty grows. Linearizing the flow about
g(gamma_t) gives the symmetric matrix A(t) = -hess h(g) - gamma_t Q, whose
eigenframe U(t) (tracked continuously in t) splits coordinates into an
unstable block (positive eigenvalues, count n_u) and a stable block. The
manifold of initial conditions attracted to the saddle is the graph of a map
psi from the stable block into the unstable block, computed as the fixed
point of an integral equation: the stable-propagated initial condition, plus
the stable-evolution integral of the nonlinear remainder minus the
path-motion forcing, minus the unstable-evolution tail integral truncated at
a certified horizon.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import (
    ContractionError,
    DegenerateJacobianError,
    EigvecContinuityError,
    HorizonError,
    NewtonError,
    PartitionError,
    RegularityError,
)
from .graphs import PenaltyMatrix, _fix_eigvec_signs, constraint_rotation

GRAD_TOL = 1e-9
MIN_RESTRICTED_EIG = 1e-6
PARTITION_TOL = 1e-8
MATCH_OVERLAP_FLOOR = 0.7


@dataclass(frozen=True)
class SaddleContext:
    """A critical point of the restricted objective with an invertible
    restricted Hessian, plus the penalty and weight function around it."""

    loss: object
    q: PenaltyMatrix
    gamma: object       # callable t -> gamma_t with .derivative
    saddle: np.ndarray
    rotation: object
    n_u: int
    n_s: int

    @property
    def dim(self):
        return len(self.saddle)

    @property
    def qmat(self):
        return self.q.matrix

    def restricted_hessian(self):
        basis = self.rotation.constraint_basis
        return basis.T @ self.loss.hessian(self.saddle) @ basis


def saddle_context(loss, q, gamma, saddle):
    """Validate the critical point and count its unstable directions.

    n_u is the number of unstable directions of the restricted descent flow,
    i.e. negative eigenvalues of the restricted Hessian; the penalty makes
    every off-constraint direction stable for large t.
    """
    saddle = np.asarray(saddle, dtype=float)
    if loss.hessian is None or not loss.is_smooth(2):
        raise ValueError("saddle analysis needs a twice-differentiable loss near the point")
    rotation = constraint_rotation(q)
    grad_c = rotation.constraint_part(loss.subgradient(saddle))
    if np.linalg.norm(grad_c) > GRAD_TOL:
        raise RegularityError(
            f"restricted gradient norm {np.linalg.norm(grad_c):.2e} exceeds {GRAD_TOL:g}")
    basis = rotation.constraint_basis
    hess_c = basis.T @ loss.hessian(saddle) @ basis
    eig_c = np.linalg.eigvalsh(hess_c)
    if np.min(np.abs(eig_c)) <= MIN_RESTRICTED_EIG:
        raise RegularityError(
            f"restricted Hessian eigenvalue {eig_c[np.argmin(np.abs(eig_c))]:.2e} "
            "is too close to zero")
    n_u = int(np.sum(eig_c < 0))
    return SaddleContext(loss, q, gamma, saddle, rotation, n_u, len(saddle) - n_u)


def default_gamma0(context, floor=0.1):
    """Smallest power-of-two penalty at which the penalized Hessian is safely
    nonsingular, found by doubling from 1."""
    gamma = 1.0
    hess = context.loss.hessian(context.saddle)
    for _ in range(60):
        sv = np.abs(np.linalg.eigvalsh(hess + gamma * context.qmat))
        if np.min(sv) > floor:
            return gamma
        gamma *= 2.0
    raise DegenerateJacobianError("no penalty level makes the penalized Hessian nonsingular")


@dataclass(frozen=True)
class PerturbedSaddlePath:
    gamma_grid: np.ndarray
    points: np.ndarray
    arc_length_estimate: float

    def residuals(self, loss, qmat):
        vals = []
        for g, pt in zip(self.gamma_grid, self.points):
            vals.append(np.linalg.norm(loss.subgradient(pt) + g * (qmat @ pt)))
        return np.array(vals)


def _newton_stationary(loss, qmat, gamma, start, tol=GRAD_TOL, max_iter=50):
    x = np.asarray(start, dtype=float).copy()
    for _ in range(max_iter):
        r = loss.subgradient(x) + gamma * (qmat @ x)
        if np.linalg.norm(r) <= tol:
            return x
        jac = loss.hessian(x) + gamma * qmat
        try:
            step = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError as exc:
            raise DegenerateJacobianError(
                f"singular penalized Hessian at gamma={gamma:g}") from exc
        if not np.all(np.isfinite(step)):
            raise NewtonError(f"Newton step not finite at gamma={gamma:g}")
        x = x - step
    raise NewtonError(f"Newton did not reach residual {tol:g} at gamma={gamma:g}")


def solve_perturbed_saddle(context, gamma_grid):
    """Continuation Newton solve of the penalized stationarity condition.

    Warm-starts each penalty level from the previous solution; residuals are
    driven below 1e-9. The arc length estimate is the polygonal length of the
    computed path.
    """
    gamma_grid = np.asarray(gamma_grid, dtype=float)
    if np.any(np.diff(gamma_grid) <= 0):
        raise ValueError("gamma_grid must be increasing")
    pts = []
    guess = context.saddle
    for gamma in gamma_grid:
        guess = _newton_stationary(context.loss, context.qmat, float(gamma), guess)
        pts.append(guess.copy())
    pts = np.array(pts)
    arc = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    return PerturbedSaddlePath(gamma_grid, pts, arc)


@dataclass(frozen=True)
class SpectralSplit:
    """Eigenframe of the flow linearization at one time, unstable block first.

    Rows of modes are eigenvectors: modes @ a_matrix @ modes.T = diag(lambdas).
    """

    t: float
    a_matrix: np.ndarray
    modes: np.ndarray
    lambdas: np.ndarray
    n_u: int

    @property
    def lambda_u(self):
        return self.lambdas[: self.n_u]

    @property
    def lambda_s(self):
        return self.lambdas[self.n_u:]


def _eigh_descending(a):
    w, v = np.linalg.eigh(a)
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]


def _match_to_previous(prev_modes, w, v):
    """Permute and sign-fix eigenvector columns to follow the previous frame."""
    overlap = prev_modes @ v
    rows, cols = linear_sum_assignment(-np.abs(overlap))
    perm = np.empty_like(cols)
    perm[rows] = cols
    chosen = np.abs(overlap[np.arange(len(perm)), perm])
    if np.min(chosen) < MATCH_OVERLAP_FLOOR:
        raise EigvecContinuityError(
            f"eigenvector tracking overlap dropped to {np.min(chosen):.3f}; "
            "continuity of the eigenframe is ambiguous here")
    signs = np.sign(overlap[np.arange(len(perm)), perm])
    signs[signs == 0] = 1.0
    return w[perm], (v[:, perm] * signs).T


def linearize(context, t, g_at_t=None, reference_modes=None):
    """Spectral split of A(t) = -hess h(g(gamma_t)) - gamma_t Q.

    Without a reference frame, eigenvalues are sorted descending (unstable
    block leads). Eigenvalues within PARTITION_TOL of zero cannot be assigned
    a side and raise PartitionError.
    """
    gamma_t = float(context.gamma(t))
    if g_at_t is None:
        g_at_t = _newton_stationary(context.loss, context.qmat, gamma_t, context.saddle)
    a = -context.loss.hessian(g_at_t) - gamma_t * context.qmat
    if reference_modes is None:
        w, v = _eigh_descending(a)
        modes = _fix_eigvec_signs(v).T
    else:
        w_raw, v_raw = np.linalg.eigh(a)
        w, modes = _match_to_previous(reference_modes, w_raw, v_raw)
    if np.min(np.abs(w)) < PARTITION_TOL:
        raise PartitionError(
            f"eigenvalue {w[np.argmin(np.abs(w))]:.2e} at t={t:g} is too close to zero")
    n_u = int(np.sum(w > 0))
    if reference_modes is None and not np.all(np.diff(w) <= 0):
        raise PartitionError("descending eigenvalue ordering failed")
    return SpectralSplit(float(t), a, modes, w, n_u)


@dataclass
class PicardFrame:
    """Everything the integral equation needs on a uniform grid from t0."""

    times: np.ndarray
    dt: float
    n_u: int
    lambdas: np.ndarray        # (n, M), unstable block first
    modes: np.ndarray          # (n, M, M), rows are eigenvectors
    cumlam: np.ndarray         # (n, M), trapezoid cumulative integral of lambdas
    gamma_vals: np.ndarray
    g_path: np.ndarray         # (n, M)
    forcing: np.ndarray        # (n, M): U(t) g'(gamma_t) gammadot_t
    mode_rate: np.ndarray      # (n, M, M): Udot U^T
    context: SaddleContext

    @property
    def t0(self):
        return float(self.times[0])

    def index_of(self, t):
        i = int(round((t - self.t0) / self.dt))
        if i < 0 or i >= len(self.times) or abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t:g} is not on the frame grid")
        return i

    def cumlam_at(self, t):
        cols = [np.interp(t, self.times, self.cumlam[:, j])
                for j in range(self.cumlam.shape[1])]
        return np.array(cols)


def evolution_operator(frame, t1, t2, which):
    """Block-diagonal evolution operator exp(int_{t1}^{t2} Lambda_block).

    The stable operator propagates forward (t2 >= t1), the unstable one
    backward (t2 <= t1); both directions are contractions.
    """
    m = frame.lambdas.shape[1]
    n_u = frame.n_u
    if which == "stable":
        if t2 < t1:
            raise ValueError("stable evolution needs t2 >= t1")
        idx = slice(n_u, m)
    elif which == "unstable":
        if t2 > t1:
            raise ValueError("unstable evolution needs t2 <= t1")
        idx = slice(0, n_u)
    else:
        raise ValueError("which must be 'stable' or 'unstable'")
    expo = frame.cumlam_at(t2) - frame.cumlam_at(t1)
    out = np.zeros((m, m))
    diag = np.zeros(m)
    diag[idx] = np.exp(expo[idx])
    np.fill_diagonal(out, diag)
    return out


def _phi1(a):
    out = np.ones_like(a)
    big = np.abs(a) > 1e-12
    out[big] = np.expm1(a[big]) / a[big]
    return out


def _phi_tilde(a):
    # int_0^1 s e^{a s} ds  (= 1/2 at a = 0), computed stably
    out = np.full_like(a, 0.5)
    small = np.abs(a) < 1e-4
    out[small] = 0.5 + a[small] / 3.0 + a[small] ** 2 / 8.0
    big = ~small
    ab = a[big]
    out[big] = (np.exp(ab) - _phi1(ab)) / ab
    return out


@dataclass(frozen=True)
class PicardOptions:
    horizon: float = 12.0
    dt: float = 0.01
    tail: float = 6.0
    tol: float = 1e-9           # fixed-point sup-norm tolerance
    tail_tol: float = 1e-6      # certified truncated-tail budget
    max_iters: int = 60


@dataclass(frozen=True)
class PicardSolution:
    """Converged fixed point of the manifold integral equation on a grid."""

    times: np.ndarray
    u: np.ndarray              # (batch, n, M)
    a_s: np.ndarray            # (batch, n_s)
    n_u: int
    deltas: np.ndarray         # sup-norm change per iteration
    residual: float            # change of one extra substitution
    tail_estimate: float
    horizon_index: int

    @property
    def iterations(self):
        return len(self.deltas)

    @property
    def psi(self):
        """Unstable components at the initial time, one row per a_s."""
        return self.u[:, 0, : self.n_u]

    def contraction_ratios(self):
        d = self.deltas[self.deltas > 0]
        return d[1:] / d[:-1] if len(d) > 1 else np.array([])


class ManifoldModel:
    """Precomputed manifold data for one saddle: reference eigenframe track,
    cached integral-equation frames, and the coordinate change
    z = U(t) (x - g(gamma_t))."""

    def __init__(self, context, t_start, t_end, picard=PicardOptions(),
                 radius=0.3, ref_points=256):
        if t_end <= t_start:
            raise ValueError("t_end must exceed t_start")
        self.context = context
        self.t_start = float(t_start)
        self.t_end = float(t_end)
        self.picard = picard
        self.radius = float(radius)
        self._frames = {}
        self._build_reference(ref_points)
        self._detect_structure()

    # -- reference track ---------------------------------------------------

    def _build_reference(self, ref_points):
        ctx = self.context
        times = np.linspace(self.t_start, self.t_end, ref_points)
        self.stationary = (np.linalg.norm(ctx.loss.subgradient(ctx.saddle)) <= 1e-12
                           and np.linalg.norm(ctx.qmat @ ctx.saddle) <= 1e-12)
        g_ref = np.empty((ref_points, ctx.dim))
        if self.stationary:
            g_ref[:] = ctx.saddle
        else:
            guess = ctx.saddle
            for i in range(ref_points - 1, -1, -1):  # continuation from large gamma
                guess = _newton_stationary(ctx.loss, ctx.qmat,
                                           float(ctx.gamma(times[i])), guess)
                g_ref[i] = guess
        anchor = linearize(ctx, times[-1], g_ref[-1])
        if anchor.n_u != ctx.n_u:
            raise PartitionError(
                f"anchor split found {anchor.n_u} unstable directions, expected {ctx.n_u}")
        lam_ref = np.empty((ref_points, ctx.dim))
        modes_ref = np.empty((ref_points, ctx.dim, ctx.dim))
        lam_ref[-1], modes_ref[-1] = anchor.lambdas, anchor.modes
        for i in range(ref_points - 2, -1, -1):
            split = linearize(ctx, times[i], g_ref[i], reference_modes=modes_ref[i + 1])
            lam_ref[i], modes_ref[i] = split.lambdas, split.modes
        if np.any(lam_ref[:, : ctx.n_u] <= 0) or np.any(lam_ref[:, ctx.n_u:] >= 0):
            raise PartitionError(
                "sign pattern of the tracked split is not stable over the model span; "
                "raise t_start")
        self.ref_times = times
        self.ref_g = g_ref
        self.ref_lambdas = lam_ref
        self.ref_modes = modes_ref

    def _detect_structure(self):
        ctx = self.context
        self.const_modes = bool(
            np.max(np.abs(self.ref_modes[0] - self.ref_modes[-1])) < 1e-10
            and np.max(np.abs(self.ref_modes[len(self.ref_modes) // 2]
                              - self.ref_modes[-1])) < 1e-10)
        # remainder-free detection: along a stationary path the nonlinear
        # remainder reduces to the gradient's linearization error at the
        # saddle, which vanishes identically for quadratic objectives
        self.psi_is_zero = False
        if self.stationary and self.const_modes:
            rng = np.random.default_rng(0)
            offsets = self.radius * rng.standard_normal((16, ctx.dim))
            hess = ctx.loss.hessian(ctx.saddle)
            grad0 = ctx.loss.subgradient(ctx.saddle)
            lin_err = ctx.loss.subgradient(ctx.saddle + offsets) - grad0 - offsets @ hess
            scale = max(1.0, float(np.max(np.abs(hess))))
            self.psi_is_zero = float(np.max(np.abs(lin_err))) <= 1e-12 * scale

    # -- coordinate machinery ----------------------------------------------

    def _ref_index(self, t):
        return int(np.clip(np.searchsorted(self.ref_times, t), 1, len(self.ref_times) - 1))

    def split_at(self, t):
        """Tracked spectral split at an arbitrary time inside the span."""
        ctx = self.context
        i = self._ref_index(t)
        if self.stationary:
            g_t = ctx.saddle
        else:
            g_t = _newton_stationary(ctx.loss, ctx.qmat, float(ctx.gamma(t)),
                                     self.ref_g[i])
        return linearize(ctx, t, g_t, reference_modes=self.ref_modes[i]), g_t

    def coordinate_change(self, x, t):
        """z = U(t) (x - g(gamma_t)); batched over leading axes of x."""
        if self.stationary and self.const_modes:
            return (np.asarray(x, dtype=float) - self.context.saddle) @ self.ref_modes[-1].T
        split, g_t = self.split_at(t)
        return (np.asarray(x, dtype=float) - g_t) @ split.modes.T

    def coordinate_change_inverse(self, z, t):
        if self.stationary and self.const_modes:
            return np.asarray(z, dtype=float) @ self.ref_modes[-1] + self.context.saddle
        split, g_t = self.split_at(t)
        return np.asarray(z, dtype=float) @ split.modes + g_t

    def drive_field(self, x, t):
        """Right-hand side of the flow, -grad h(x) - gamma_t Q x."""
        x = np.asarray(x, dtype=float)
        return -self.context.loss.subgradient(x) - float(self.context.gamma(t)) \
            * (x @ self.context.qmat)

    def local_linearization(self, t, fd_step=1e-4):
        """(lambdas, modes, mode rate, forcing, path point) at a single time."""
        ctx = self.context
        if self.stationary and self.const_modes:
            modes = self.ref_modes[-1]
            base = np.diag(modes @ (-ctx.loss.hessian(ctx.saddle)) @ modes.T)
            qdiag = np.diag(modes @ ctx.qmat @ modes.T)
            lam = base - float(ctx.gamma(t)) * qdiag
            zero = np.zeros((ctx.dim, ctx.dim))
            return lam, modes, zero, np.zeros(ctx.dim), ctx.saddle
        split, g_t = self.split_at(t)
        if self.stationary:
            g_p = g_m = ctx.saddle
        else:
            g_p = _newton_stationary(ctx.loss, ctx.qmat, float(ctx.gamma(t + fd_step)), g_t)
            g_m = _newton_stationary(ctx.loss, ctx.qmat, float(ctx.gamma(t - fd_step)), g_t)
        split_p = linearize(ctx, t + fd_step, g_p, reference_modes=split.modes)
        split_m = linearize(ctx, t - fd_step, g_m, reference_modes=split.modes)
        mode_rate = ((split_p.modes - split_m.modes) / (2.0 * fd_step)) @ split.modes.T
        gamma_t = float(ctx.gamma(t))
        jac = ctx.loss.hessian(g_t) + gamma_t * ctx.qmat
        g_prime = -np.linalg.solve(jac, ctx.qmat @ g_t)
        forcing = split.modes @ (g_prime * float(ctx.gamma.derivative(t)))
        return split.lambdas, split.modes, mode_rate, forcing, g_t

    # -- frames --------------------------------------------------------------

    def frame(self, t0, options=None):
        opts = options or self.picard
        key = (round(float(t0), 9), opts.horizon, opts.dt, opts.tail)
        if key not in self._frames:
            self._frames[key] = self._build_frame(float(t0), opts)
        return self._frames[key]

    def _build_frame(self, t0, opts):
        ctx = self.context
        if t0 < self.t_start - 1e-9:
            raise ValueError(f"t0={t0:g} is before the model span")
        n = int(round((opts.horizon + opts.tail) / opts.dt)) + 1
        times = t0 + opts.dt * np.arange(n)
        if times[-1] > self.t_end + 1e-9:
            raise ValueError("frame grid exceeds the model span; extend t_end")
        gamma_vals = np.array([float(ctx.gamma(t)) for t in times])
        m = ctx.dim

        if self.stationary and self.const_modes:
            modes0 = self.ref_modes[-1]
            a0 = -ctx.loss.hessian(ctx.saddle)
            base = np.diag(modes0 @ a0 @ modes0.T)
            qdiag = np.diag(modes0 @ ctx.qmat @ modes0.T)
            lam = base[None, :] - gamma_vals[:, None] * qdiag[None, :]
            g_path = np.tile(ctx.saddle, (n, 1))
            modes = np.broadcast_to(modes0, (n, m, m)).copy()
            forcing = np.zeros((n, m))
            mode_rate = np.zeros((n, m, m))
        else:
            lam = np.empty((n, m))
            modes = np.empty((n, m, m))
            g_path = np.empty((n, m))
            forcing = np.empty((n, m))
            i0 = self._ref_index(t0)
            prev_modes = self.ref_modes[i0]
            guess = ctx.saddle if self.stationary else self.ref_g[i0]
            gdot = ctx.gamma.derivative(times)
            for i, t in enumerate(times):
                if self.stationary:
                    g_i = ctx.saddle
                else:
                    g_i = _newton_stationary(ctx.loss, ctx.qmat, gamma_vals[i], guess)
                    guess = g_i
                split = linearize(ctx, t, g_i, reference_modes=prev_modes)
                lam[i], modes[i] = split.lambdas, split.modes
                prev_modes = modes[i]
                g_path[i] = g_i
                jac = ctx.loss.hessian(g_i) + gamma_vals[i] * ctx.qmat
                g_prime = -np.linalg.solve(jac, ctx.qmat @ g_i)
                forcing[i] = modes[i] @ (g_prime * float(gdot[i]))
            d_modes = np.gradient(modes, opts.dt, axis=0)
            mode_rate = np.einsum("nij,nkj->nik", d_modes, modes)

        if np.any(lam[:, : ctx.n_u] <= 0) or np.any(lam[:, ctx.n_u:] >= 0):
            raise PartitionError(
                f"split sign pattern unstable inside the frame starting at t0={t0:g}")
        cumlam = np.zeros((n, m))
        cumlam[1:] = np.cumsum(0.5 * (lam[1:] + lam[:-1]) * opts.dt, axis=0)
        return PicardFrame(times, opts.dt, ctx.n_u, lam, modes, cumlam, gamma_vals,
                           g_path, forcing, mode_rate, ctx)

    # -- the integral equation ----------------------------------------------

    def remainder_field(self, z, frame):
        """Nonlinear remainder in rotated coordinates at every grid time.

        z has shape (batch, n, M): F-rotated(z, t) = U F(U^T z, t) + Udot U^T z
        with F(y, t) = -grad h(y + g) - gamma Q (y + g) - A(t) y.
        """
        ctx = frame.context
        y = np.einsum("nji,bnj->bni", frame.modes, z)
        w = y + frame.g_path[None, :, :]
        drive = -ctx.loss.subgradient(w) - frame.gamma_vals[None, :, None] * (w @ ctx.qmat)
        # U A U^T z is diagonal in the rotated frame: just lambda * z
        f_rot = np.einsum("nij,bnj->bni", frame.modes, drive) - frame.lambdas[None, :, :] * z
        if np.any(frame.mode_rate):
            f_rot = f_rot + np.einsum("nij,bnj->bni", frame.mode_rate, z)
        return f_rot

    def _apply_integral_operator(self, u, a_s, frame):
        """One substitution into the right-hand side of the integral equation."""
        n_u = frame.n_u
        n = len(frame.times)
        h = frame.dt
        g_all = self.remainder_field(u, frame) - frame.forcing[None, :, :]
        a_coef = frame.cumlam[1:] - frame.cumlam[:-1]          # (n-1, M)

        new = np.empty_like(u)
        # stable block: forward propagation of the initial condition plus the
        # exponential-trapezoid integral recursion
        a_st = a_coef[:, n_u:]
        p1 = _phi1(a_st)
        pt = _phi_tilde(a_st)
        decay = np.exp(a_st)
        gs = g_all[:, :, n_u:]
        dg = gs[:, 1:, :] - gs[:, :-1, :]
        inc = h * (gs[:, 1:, :] * p1[None] - dg * pt[None])
        j_acc = np.zeros((u.shape[0], u.shape[2] - n_u))
        prop = np.exp(frame.cumlam[:, n_u:] - frame.cumlam[0, n_u:])
        new[:, 0, n_u:] = a_s + j_acc
        for i in range(n - 1):
            j_acc = decay[i][None, :] * j_acc + inc[:, i, :]
            new[:, i + 1, n_u:] = prop[i + 1][None, :] * a_s + j_acc

        # unstable block: backward tail recursion, truncated at the grid end
        if n_u:
            a_un = a_coef[:, :n_u]
            p1u = _phi1(-a_un)
            ptu = _phi_tilde(-a_un)
            decay_u = np.exp(-a_un)
            gu = g_all[:, :, :n_u]
            dgu = gu[:, 1:, :] - gu[:, :-1, :]
            inc_u = h * (gu[:, :-1, :] * p1u[None] + dgu * ptu[None])
            k_acc = np.zeros((u.shape[0], n_u))
            new[:, n - 1, :n_u] = -k_acc
            for i in range(n - 2, -1, -1):
                k_acc = inc_u[:, i, :] + decay_u[i][None, :] * k_acc
                new[:, i, :n_u] = -k_acc
        return new, g_all

    def picard_solve(self, t0, a_s, options=None):
        """Fixed-point iteration of the manifold integral equation.

        a_s is one stable-block initial condition per row, each within a third
        of the validity radius. Raises ContractionError when iterates diverge
        and HorizonError when the certified truncation error exceeds tol.
        """
        opts = options or self.picard
        ctx = self.context
        a_s = np.atleast_2d(np.asarray(a_s, dtype=float))
        if a_s.shape[1] != ctx.n_s:
            raise ValueError(f"a_s must have {ctx.n_s} stable components")
        if np.max(np.linalg.norm(a_s, axis=1)) > self.radius / 3.0 + 1e-12:
            raise ContractionError(
                "stable initial condition outside the contraction radius (r/3)")
        frame = self.frame(t0, opts)
        n = len(frame.times)
        b = a_s.shape[0]
        m = ctx.dim

        u = np.zeros((b, n, m))
        prop = np.exp(frame.cumlam[:, frame.n_u:] - frame.cumlam[0, frame.n_u:])
        u[:, :, frame.n_u:] = prop[None, :, :] * a_s[:, None, :]

        deltas = []
        grow = 0
        g_all = None
        for _ in range(opts.max_iters):
            new, g_all = self._apply_integral_operator(u, a_s, frame)
            delta = float(np.max(np.abs(new - u)))
            deltas.append(delta)
            u = new
            if delta < opts.tol:
                break
            if len(deltas) > 1 and delta > deltas[-2]:
                grow += 1
                if grow >= 3 or delta > 1e6 * (1.0 + float(np.max(np.abs(a_s)))):
                    raise ContractionError(
                        "integral-equation iterates stopped contracting; "
                        "shrink the initial condition or the radius")
            else:
                grow = 0
        else:
            raise ContractionError(
                f"no convergence to {opts.tol:g} within {opts.max_iters} iterations")

        resub, _ = self._apply_integral_operator(u, a_s, frame)
        residual = float(np.max(np.abs(resub - u)))

        tail_start = frame.index_of(round(frame.t0 + opts.horizon, 9))
        sigma_floor = float(np.min(frame.lambdas[:, : frame.n_u])) if frame.n_u else np.inf
        g_tail_max = float(np.max(np.abs(g_all[:, tail_start:, : frame.n_u]))) \
            if frame.n_u else 0.0
        tail_est = g_tail_max / sigma_floor * float(np.exp(-sigma_floor * opts.tail)) \
            if frame.n_u else 0.0
        if tail_est > opts.tail_tol:
            raise HorizonError(
                f"truncated-tail bound {tail_est:.2e} exceeds the tolerance; "
                "extend the tail window")
        return PicardSolution(frame.times[: tail_start + 1], u[:, : tail_start + 1, :],
                              a_s, frame.n_u, np.array(deltas), residual, tail_est,
                              tail_start)

    def psi(self, t0, z_s, options=None):
        """Graph map of the manifold: unstable components over the stable block."""
        z_s = np.atleast_2d(np.asarray(z_s, dtype=float))
        if self.psi_is_zero:
            return np.zeros((z_s.shape[0], self.context.n_u))
        return self.picard_solve(t0, z_s, options).psi


def build_manifold_model(context, t_start, t_end, picard=PicardOptions(),
                         radius=0.3, ref_points=256):
    return ManifoldModel(context, t_start, t_end, picard, radius, ref_points)

