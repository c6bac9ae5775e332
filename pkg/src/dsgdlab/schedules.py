"""Power-law step-size and penalty-weight schedules.

alpha_k = a * k**(-tau_alpha) shrinks, gamma_k = g * k**tau_gamma grows, with
1/2 < tau_gamma < tau_alpha <= 1, so the effective consensus weight
beta_k = alpha_k * gamma_k decays at rate tau_beta = tau_alpha - tau_gamma in
(0, 1/2). Iteration counting starts at k = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .errors import QuadratureError, ScheduleError


@dataclass(frozen=True)
class Schedule:
    alpha_scale: float
    tau_alpha: float
    gamma_scale: float
    tau_gamma: float

    def alpha(self, k):
        return self.alpha_scale * np.asarray(k, dtype=float) ** (-self.tau_alpha)

    def gamma(self, k):
        return self.gamma_scale * np.asarray(k, dtype=float) ** self.tau_gamma

    def beta(self, k):
        return self.alpha(k) * self.gamma(k)

    @property
    def tau_beta(self):
        return self.tau_alpha - self.tau_gamma


@dataclass(frozen=True)
class ScheduleInfo:
    tau_beta: float


def validate(schedule):
    """Check the exponent chain 1/2 < tau_gamma < tau_alpha <= 1.

    Returns the implied consensus-weight decay exponent tau_beta; raises
    ScheduleError naming the violated inequality.
    """
    if schedule.alpha_scale <= 0:
        raise ScheduleError("alpha_scale must be positive")
    if schedule.gamma_scale <= 0:
        raise ScheduleError("gamma_scale must be positive")
    if not schedule.tau_gamma > 0.5:
        raise ScheduleError(
            f"tau_gamma = {schedule.tau_gamma:g} violates 1/2 < tau_gamma")
    if not schedule.tau_gamma < schedule.tau_alpha:
        raise ScheduleError(
            f"tau_gamma < tau_alpha violated ({schedule.tau_gamma:g} vs {schedule.tau_alpha:g})")
    if not schedule.tau_alpha <= 1.0:
        raise ScheduleError(f"tau_alpha = {schedule.tau_alpha:g} violates tau_alpha <= 1")
    tau_beta = schedule.tau_beta
    if not tau_beta > 0:
        raise ScheduleError(f"implied tau_beta = {tau_beta:g} is not positive")
    return ScheduleInfo(tau_beta)


def elapsed_times(schedule, k_max):
    """zeta_k = sum_{j<=k} alpha_j for k = 0..k_max (zeta_0 = 0)."""
    ks = np.arange(1, k_max + 1, dtype=float)
    return np.concatenate([[0.0], np.cumsum(schedule.alpha(ks))])


class ElapsedClock:
    """Running sum of step sizes, identifying iteration count with time."""

    def __init__(self, zeta=0.0):
        self.zeta = float(zeta)

    def advance(self, alpha_k):
        self.zeta += float(alpha_k)
        return self.zeta


@dataclass(frozen=True)
class PowerLawGamma:
    """Smooth interpolation gamma_t = g * t**r, agreeing with gamma_k at integers."""

    scale: float
    exponent: float

    def __call__(self, t):
        return self.scale * np.asarray(t, dtype=float) ** self.exponent

    def derivative(self, t):
        return self.scale * self.exponent * np.asarray(t, dtype=float) ** (self.exponent - 1.0)

    def second_derivative(self, t):
        r = self.exponent
        return self.scale * r * (r - 1.0) * np.asarray(t, dtype=float) ** (r - 2.0)

    def antiderivative(self, t):
        r1 = self.exponent + 1.0
        return self.scale * np.asarray(t, dtype=float) ** r1 / r1


@dataclass(frozen=True)
class ConstantGamma:
    level: float

    def __call__(self, t):
        return self.level * np.ones_like(np.asarray(t, dtype=float))

    def derivative(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def second_derivative(self, t):
        return np.zeros_like(np.asarray(t, dtype=float))

    def antiderivative(self, t):
        return self.level * np.asarray(t, dtype=float)


def interpolate_gamma(schedule):
    """C2 interpolation of the penalty weights for t >= 1."""
    validate(schedule)
    return PowerLawGamma(schedule.gamma_scale, schedule.tau_gamma)


@dataclass(frozen=True)
class GammaConditionReport:
    """Grid evaluation of gamma_t * int_{t0}^t exp(-int_tau^t gamma) exp(-a(tau-t0)) dtau."""

    times: np.ndarray
    values: np.ndarray
    decreasing_tail: bool
    terminal_below_initial: bool


def gamma_condition_check(schedule, t0, alpha_decay, horizon, grid_points=24):
    """Numerically evaluate the damped-forcing integral and report its tail trend.

    The integrand concentrates near tau = t because the inner integral of the
    growing weight dominates; adaptive quadrature handles the boundary layer.
    """
    if alpha_decay <= 0:
        raise ValueError("alpha_decay must be positive")
    if horizon <= t0:
        raise ValueError("horizon must exceed t0")
    gamma = interpolate_gamma(schedule)
    big_g = gamma.antiderivative

    # empty interval at t = t0 contributes an exact zero first point
    ts = np.concatenate([[t0], np.geomspace(t0 * 1.05, horizon, grid_points - 1)])
    values = np.empty_like(ts)
    for i, t in enumerate(ts):
        def integrand(tau, t=t):
            return np.exp(big_g(tau) - big_g(t) - alpha_decay * (tau - t0))

        val, err = integrate.quad(integrand, t0, t, limit=400)
        if err > 1e-8 + 1e-4 * abs(val):
            raise QuadratureError(
                f"gamma-condition quadrature error {err:g} at t={t:g} exceeds budget")
        values[i] = gamma(t) * val

    tail = values[len(values) // 2:]
    decreasing = bool(np.all(np.diff(tail) <= 1e-12 + 1e-6 * tail[:-1]))
    # compare against the first nonempty-interval evaluation
    return GammaConditionReport(ts, values, decreasing, bool(values[-1] < values[1]))
