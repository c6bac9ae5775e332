"""Objective functions with subgradient selection oracles.

Every oracle evaluates on arrays of shape (..., dim): values come back with
shape (...), subgradients with shape (..., dim). Kinks are known structurally
(the builders know where their functions are nonsmooth); the selection at a
kink is the minimal-norm element of the known subdifferential, so sign(0)=0
for the absolute value and ReLU'(0)=0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

SMOOTHNESS_ORDER = {"lipschitz": 0, "c1": 1, "c2": 2, "c3": 3}


@dataclass(frozen=True)
class LossOracle:
    """Evaluable objective with a Clarke subgradient selection.

    hessian is present only where second derivatives exist everywhere;
    zero_in_subdifferential, when present, certifies criticality structurally
    (0 in the full subdifferential, not merely a zero selection).
    """

    dim: int
    value: Callable
    subgradient: Callable
    hessian: Optional[Callable] = None
    smoothness: str = "c1"
    zero_in_subdifferential: Optional[Callable] = None

    def is_smooth(self, order=1):
        return SMOOTHNESS_ORDER.get(self.smoothness, 0) >= order


@dataclass(frozen=True)
class SumLoss:
    """Separable objective h(x) = sum_n f_n(x_n) over stacked agent blocks."""

    components: tuple
    assembled: LossOracle

    @property
    def n_agents(self):
        return len(self.components)

    @property
    def agent_dim(self):
        return self.components[0].dim

    def split(self, x):
        """View the stacked vector as (..., N, d) agent blocks."""
        x = np.asarray(x)
        return x.reshape(x.shape[:-1] + (self.n_agents, self.agent_dim))


def sum_loss(components):
    """Stack per-agent oracles into the assembled block-separable oracle."""
    components = tuple(components)
    d = components[0].dim
    if any(c.dim != d for c in components):
        raise ValueError("all components must share the agent dimension")
    n = len(components)
    m = n * d

    def value(x):
        x = np.asarray(x, dtype=float)
        blocks = x.reshape(x.shape[:-1] + (n, d))
        return sum(c.value(blocks[..., i, :]) for i, c in enumerate(components))

    def subgradient(x):
        x = np.asarray(x, dtype=float)
        blocks = x.reshape(x.shape[:-1] + (n, d))
        parts = [c.subgradient(blocks[..., i, :]) for i, c in enumerate(components)]
        return np.concatenate(parts, axis=-1)

    hessian = None
    if all(c.hessian is not None for c in components):
        def hessian(x):
            x = np.asarray(x, dtype=float)
            blocks = x.reshape(x.shape[:-1] + (n, d))
            if x.ndim == 1:
                out = np.zeros((m, m))
                for i, c in enumerate(components):
                    out[i * d:(i + 1) * d, i * d:(i + 1) * d] = c.hessian(blocks[i])
                return out
            raise ValueError("batched Hessians are not supported")

    smoothness = min((c.smoothness for c in components), key=lambda s: SMOOTHNESS_ORDER[s])
    zero_fns = [c.zero_in_subdifferential for c in components]
    zero_in = None
    if all(f is not None for f in zero_fns):
        def zero_in(x, tol=1e-9):
            blocks = np.asarray(x, dtype=float).reshape(n, d)
            return all(f(blocks[i], tol=tol) for i, f in enumerate(zero_fns))

    assembled = LossOracle(m, value, subgradient, hessian, smoothness, zero_in)
    return SumLoss(components, assembled)


def zero_loss(dim):
    def value(x):
        x = np.asarray(x, dtype=float)
        return np.zeros(x.shape[:-1])

    def subgradient(x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def hessian(x):
        return np.zeros((dim, dim))

    return LossOracle(dim, value, subgradient, hessian, "c3",
                      zero_in_subdifferential=lambda x, tol=1e-9: True)


def quadratic_saddle(curvatures):
    """h(x) = 1/2 sum c_i x_i^2 with a critical point at the origin.

    All curvatures must be nonzero (the critical point stays regular) and at
    least one negative (so it is not a minimum).
    """
    c = np.asarray(curvatures, dtype=float)
    if np.any(c == 0.0):
        raise ValueError("zero curvature would make the critical point degenerate")
    if not np.any(c < 0.0):
        raise ValueError("need at least one negative curvature")
    return separable_polynomial({i: {2: 0.5 * ci} for i, ci in enumerate(c)}, dim=len(c))


def quadratic_form(hess, linear=None):
    """h(x) = 1/2 x.T H x + b.T x for symmetric H."""
    h = np.asarray(hess, dtype=float)
    dim = h.shape[0]
    if not np.allclose(h, h.T, atol=1e-12):
        raise ValueError("Hessian must be symmetric")
    b = np.zeros(dim) if linear is None else np.asarray(linear, dtype=float)

    def value(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.einsum("...i,ij,...j->...", x, h, x) + x @ b

    def subgradient(x):
        return np.asarray(x, dtype=float) @ h + b

    return LossOracle(dim, value, subgradient, lambda x: h.copy(), "c3",
                      zero_in_subdifferential=lambda x, tol=1e-9:
                      bool(np.linalg.norm(np.asarray(x) @ h + b) <= tol))


def shifted_quadratic(anchor):
    """h(x) = 1/2 ||x - a||^2."""
    a = np.asarray(anchor, dtype=float)
    return quadratic_form(np.eye(len(a)), -a)


def separable_polynomial(coeffs, dim):
    """h(x) = sum_i sum_p coeffs[i][p] * x_i**p, a smooth separable polynomial.

    coeffs maps coordinate index -> {power: coefficient} with powers >= 1.
    """
    table = []
    for i in range(dim):
        terms = coeffs.get(i, {})
        for p in terms:
            if p < 1:
                raise ValueError("powers must be >= 1")
        table.append(sorted(terms.items()))

    def value(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for i, terms in enumerate(table):
            for p, c in terms:
                out = out + c * x[..., i] ** p
        return out

    def subgradient(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for i, terms in enumerate(table):
            for p, c in terms:
                out[..., i] += c * p * x[..., i] ** (p - 1)
        return out

    def hessian(x):
        x = np.asarray(x, dtype=float)
        diag = np.zeros(dim)
        for i, terms in enumerate(table):
            for p, c in terms:
                if p >= 2:
                    diag[i] += c * p * (p - 1) * x[i] ** (p - 2)
        return np.diag(diag)

    def zero_in(x, tol=1e-9):
        return bool(np.linalg.norm(subgradient(np.asarray(x, dtype=float))) <= tol)

    return LossOracle(dim, value, subgradient, hessian, "c3", zero_in)


def monomial_loss(dim, terms):
    """h(x) = sum over terms of c * prod x_i**p_i for multi-index powers.

    terms maps exponent tuples (length dim, nonnegative ints) to coefficients;
    allows cross terms that separable_polynomial cannot express.
    """
    parsed = []
    for powers, c in terms.items():
        powers = tuple(int(p) for p in powers)
        if len(powers) != dim or any(p < 0 for p in powers):
            raise ValueError(f"bad exponent tuple {powers}")
        parsed.append((np.array(powers), float(c)))

    def _mono(x, powers):
        out = np.ones(x.shape[:-1])
        for i, p in enumerate(powers):
            if p:
                out = out * x[..., i] ** p
        return out

    def value(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape[:-1])
        for powers, c in parsed:
            out = out + c * _mono(x, powers)
        return out

    def subgradient(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for powers, c in parsed:
            for j in range(dim):
                if powers[j]:
                    dropped = powers.copy()
                    dropped[j] -= 1
                    out[..., j] += c * powers[j] * _mono(x, dropped)
        return out

    def hessian(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros((dim, dim))
        for powers, c in parsed:
            for j in range(dim):
                if powers[j] == 0:
                    continue
                d1 = powers.copy()
                d1[j] -= 1
                for k in range(dim):
                    if d1[k] == 0:
                        continue
                    d2 = d1.copy()
                    d2[k] -= 1
                    out[j, k] += c * powers[j] * d1[k] * _mono(x, d2)
        return out

    def zero_in(x, tol=1e-9):
        return bool(np.linalg.norm(subgradient(np.asarray(x, dtype=float))) <= tol)

    return LossOracle(dim, value, subgradient, hessian, "c3", zero_in)


def l1_regularized(base, weight):
    """base(x) + weight * sum|x_i| with the minimal-norm selection sign(0)=0."""
    if weight <= 0:
        raise ValueError("weight must be positive")

    def value(x):
        x = np.asarray(x, dtype=float)
        return base.value(x) + weight * np.sum(np.abs(x), axis=-1)

    def subgradient(x):
        x = np.asarray(x, dtype=float)
        return base.subgradient(x) + weight * np.sign(x)

    zero_in = None
    if base.is_smooth(1):
        def zero_in(x, tol=1e-9):
            # 0 in grad_base + weight * prod [d|x_i|]: off kinks the selection
            # must vanish; at kinks the base gradient must sit inside the box.
            x = np.asarray(x, dtype=float)
            g = base.subgradient(x)
            at_kink = x == 0.0
            ok_kink = np.abs(g) <= weight + tol
            ok_smooth = np.abs(g + weight * np.sign(x)) <= tol
            return bool(np.all(np.where(at_kink, ok_kink, ok_smooth)))

    return LossOracle(base.dim, value, subgradient, None, "lipschitz", zero_in)


def _relu_layer_sizes(input_dim, widths):
    sizes = []
    fan_in = input_dim
    for w in list(widths) + [1]:
        sizes.append((fan_in, w))
        fan_in = w
    return sizes


def relu_regression(inputs, targets, widths=()):
    """Squared loss of a small bias-free ReLU network.

    h(theta) = 1/2 sum_s (net(x_s; theta) - y_s)^2 where net applies
    ReLU after each hidden layer; widths lists the hidden layer sizes
    (empty means a linear model). The parameter vector stacks the weight
    matrices in order, each flattened row-major. ReLU'(0) = 0.
    """
    xs = np.atleast_2d(np.asarray(inputs, dtype=float))
    ys = np.asarray(targets, dtype=float).ravel()
    if xs.shape[0] != ys.shape[0]:
        raise ValueError("inputs and targets disagree on sample count")
    if xs.shape[0] == 0:
        raise ValueError("need at least one sample")
    sizes = _relu_layer_sizes(xs.shape[1], widths)
    dim = sum(fi * fo for fi, fo in sizes)

    def unpack(theta):
        mats, off = [], 0
        for fi, fo in sizes:
            mats.append(theta[off:off + fi * fo].reshape(fi, fo))
            off += fi * fo
        return mats

    def forward(mats):
        act = xs
        pre_acts = []
        for k, w in enumerate(mats):
            z = act @ w
            pre_acts.append(z)
            act = np.maximum(z, 0.0) if k < len(mats) - 1 else z
        return act[:, 0], pre_acts

    def value_one(theta):
        pred, _ = forward(unpack(theta))
        return 0.5 * np.sum((pred - ys) ** 2)

    def subgradient_one(theta):
        mats = unpack(theta)
        acts = [xs]
        pre_acts = []
        for k, w in enumerate(mats):
            z = acts[-1] @ w
            pre_acts.append(z)
            acts.append(np.maximum(z, 0.0) if k < len(mats) - 1 else z)
        delta = acts[-1][:, 0] - ys
        grad_out = delta[:, None]
        grads = [None] * len(mats)
        for k in range(len(mats) - 1, -1, -1):
            grads[k] = acts[k].T @ grad_out
            if k > 0:
                grad_out = (grad_out @ mats[k].T) * (pre_acts[k - 1] > 0.0)
        return np.concatenate([g.ravel() for g in grads])

    def value(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return value_one(x)
        flat = x.reshape(-1, dim)
        return np.array([value_one(t) for t in flat]).reshape(x.shape[:-1])

    def subgradient(x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return subgradient_one(x)
        flat = x.reshape(-1, dim)
        return np.stack([subgradient_one(t) for t in flat]).reshape(x.shape)

    return LossOracle(dim, value, subgradient, None, "lipschitz")


def custom_loss(dim, value, subgradient, hessian=None, smoothness="c1"):
    """User-supplied value/subgradient pair."""
    return LossOracle(dim, value, subgradient, hessian, smoothness)


@dataclass(frozen=True)
class CoercivityReport:
    c1_hat: float
    c2_hat: float
    passed: bool
    samples: int


def check_coercivity(loss, radius, sample_count=2000, seed=0):
    """Sampled falsification check of the inward-gradient growth conditions.

    Samples ||x|| in [R, 10R]; c1_hat is the worst observed cosine
    <x, v>/(||x|| ||v||) and c2_hat the largest ||v||/||x||. Passing means
    c1_hat > 0 with c2_hat finite on the sample; this refutes rather than
    proves the global property. Samples with v = 0 satisfy both conditions
    vacuously and are skipped for the cosine.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((sample_count, loss.dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(radius, 10.0 * radius, size=sample_count)
    xs = dirs * radii[:, None]
    vs = loss.subgradient(xs)
    vnorm = np.linalg.norm(vs, axis=1)
    nonzero = vnorm > 0
    if not np.any(nonzero):
        return CoercivityReport(1.0, 0.0, True, sample_count)
    cos = np.einsum("ij,ij->i", xs[nonzero], vs[nonzero]) / (radii[nonzero] * vnorm[nonzero])
    c1_hat = float(np.min(cos))
    c2_hat = float(np.max(vnorm / radii))
    return CoercivityReport(c1_hat, c2_hat, bool(c1_hat > 0 and np.isfinite(c2_hat)),
                            sample_count)


def finite_difference_gradient(loss, x, step=1e-5):
    """Central-difference gradient, the independent oracle for smooth points."""
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for i in range(len(x)):
        e = np.zeros_like(x)
        e[i] = step
        out[i] = (loss.value(x + e) - loss.value(x - e)) / (2.0 * step)
    return out
