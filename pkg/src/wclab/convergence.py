"""Minimax convergence testbed: max-of-quadratics with exact proximal points.

The objective is phi(theta) = max_j 0.5 * ||theta - c_j||^2 over m centers.
Each component has identity Hessian (kappa = 1 gradient Lipschitz), phi is
convex, and differences of components are affine, so the proximal
subproblem min phi + kappa*||.-theta||^2 reduces to a small exactly
solvable piecewise-quadratic program. That makes the envelope-gradient
decay rate of the alternating max/descent loop falsifiable at desk scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import ConfigError, NumericError, ProxError

ACTIVE_TOL = 1e-9
KKT_GAP_TOL = 1e-8
DIVERGENCE_NORM = 1e6


@dataclass
class SyntheticMinimax:
    """m quadratic components 0.5*||theta - c_j||^2 in R^d."""

    centers: np.ndarray        # (m, d)
    kappa: float = 1.0         # gradient-Lipschitz constant of each component

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        if self.centers.ndim != 2 or len(self.centers) == 0:
            raise ConfigError(f"centers must be (m, d), got shape {self.centers.shape}")

    @classmethod
    def random(cls, m, d, seed, spread=2.0):
        rng = seeding.derive_rng(seed, seeding.TAG_THETA0, m, d)
        return cls(rng.standard_normal((m, d)) * spread)

    @property
    def m(self):
        return len(self.centers)

    @property
    def d(self):
        return self.centers.shape[1]

    def component_values(self, theta) -> np.ndarray:
        diff = theta[None, :] - self.centers
        return 0.5 * (diff * diff).sum(axis=1)

    def phi(self, theta) -> float:
        return float(self.component_values(theta).max())

    def worst_component(self, theta) -> int:
        return int(np.argmax(self.component_values(theta)))

    def component_grad(self, theta, j) -> np.ndarray:
        return theta - self.centers[j]


def _solve_support(centers, support, kappa, anchor):
    """KKT solve for a candidate active set.

    The minimizer has the form theta_hat = (sum mu_j c_j + 2k*anchor)/(1+2k)
    with mu on the simplex supported on `support`, and all active component
    values equal. Equal-value constraints are affine in mu. Returns
    (mu_full, theta_hat) or None if the linear system is singular.
    """
    m, d = centers.shape
    s = len(support)
    cs = centers[support]
    denom = 1.0 + 2.0 * kappa if anchor is not None else 1.0
    base = (2.0 * kappa / denom) * anchor if anchor is not None else np.zeros(d)

    a = np.zeros((s, s))
    b = np.zeros(s)
    a[0, :] = 1.0
    b[0] = 1.0
    c0 = cs[0]
    for r in range(1, s):
        cr = cs[r]
        # (cr - c0) . theta_hat(mu) = 0.5*(||cr||^2 - ||c0||^2)
        a[r, :] = (cr - c0) @ cs.T / denom
        b[r] = 0.5 * (cr @ cr - c0 @ c0) - (cr - c0) @ base
    try:
        mu_s = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        return None
    mu = np.zeros(m)
    mu[support] = mu_s
    theta_hat = mu_s @ cs / denom + base
    return mu, theta_hat


def _kkt_gap(centers, mu, theta_hat, kappa, anchor):
    grad = mu @ (theta_hat[None, :] - centers)
    if anchor is not None:
        grad = grad + 2.0 * kappa * (theta_hat - anchor)
    return float(np.linalg.norm(grad))


def _minimize_max_quadratics(inst: SyntheticMinimax, kappa, anchor):
    """Exact minimizer of max_j q_j + kappa*||.-anchor||^2 (anchor None: no prox term).

    Active sets are enumerated by size with early exit: once a support's
    KKT conditions verify (weights in the simplex, no inactive component
    above the active level), convexity certifies global optimality.
    """
    from itertools import combinations

    centers = inst.centers
    m = inst.m
    values_at = inst.component_values

    order = np.argsort(-values_at(anchor)) if anchor is not None else np.arange(m)
    scale = max(1.0, float(np.abs(centers).max()) ** 2)
    best = None
    for size in range(1, m + 1):
        for support in combinations(order.tolist(), size):
            solved = _solve_support(centers, list(support), kappa, anchor)
            if solved is None:
                continue
            mu, theta_hat = solved
            if mu.min() < -1e-10:
                continue
            vals = values_at(theta_hat)
            active_level = vals[list(support)].max()
            if vals.max() > active_level + ACTIVE_TOL * scale:
                continue
            gap = _kkt_gap(centers, np.clip(mu, 0.0, None), theta_hat, kappa, anchor)
            candidate = (gap, theta_hat, np.clip(mu, 0.0, None))
            if gap <= KKT_GAP_TOL:
                return theta_hat, candidate[2], gap
            if best is None or gap < best[0]:
                best = candidate
    if best is not None:
        raise ProxError(f"prox subproblem not certified; best KKT gap {best[0]:.3e}", gap=best[0])
    raise ProxError("prox subproblem: no feasible active set found", gap=float("inf"))


def prox_point(inst: SyntheticMinimax, theta, kappa=None) -> np.ndarray:
    """argmin_theta' phi(theta') + kappa * ||theta' - theta||^2."""
    theta = np.asarray(theta, dtype=np.float64)
    kappa = inst.kappa if kappa is None else float(kappa)
    if kappa <= 0:
        raise ConfigError(f"kappa must be positive, got {kappa}")
    theta_hat, _, _ = _minimize_max_quadratics(inst, kappa, theta)
    return theta_hat


def moreau_grad_norm(inst: SyntheticMinimax, theta, kappa=None) -> float:
    """|| grad of the 1/(2 kappa) envelope || = 2 kappa ||theta - prox(theta)||."""
    theta = np.asarray(theta, dtype=np.float64)
    kappa = inst.kappa if kappa is None else float(kappa)
    theta_hat = prox_point(inst, theta, kappa)
    return float(2.0 * kappa * np.linalg.norm(theta - theta_hat))


def moreau_envelope(inst: SyntheticMinimax, theta, kappa=None) -> float:
    theta = np.asarray(theta, dtype=np.float64)
    kappa = inst.kappa if kappa is None else float(kappa)
    theta_hat = prox_point(inst, theta, kappa)
    return inst.phi(theta_hat) + kappa * float(((theta_hat - theta) ** 2).sum())


def minimax_center(inst: SyntheticMinimax):
    """Global minimizer and minimum of phi itself."""
    theta_star, _, _ = _minimize_max_quadratics(inst, inst.kappa, None)
    return theta_star, inst.phi(theta_star)


def theorem3_rhs(lipschitz, kappa, b_gap, envelope_gap0, t, delta) -> float:
    """High-probability ceiling for the running average of squared envelope
    gradient norms after t steps:

        4 L sqrt(kappa * gap0 / t) + 8 L sqrt(2 B kappa / (t+1) * ln(1/delta))
    """
    if lipschitz <= 0 or kappa <= 0 or t <= 0:
        raise ConfigError("lipschitz, kappa and t must be positive")
    if not 0.0 < delta <= 1.0:
        raise ConfigError(f"delta must be in (0, 1], got {delta}")
    if b_gap < 0 or envelope_gap0 < 0:
        raise ConfigError("gap terms must be >= 0")
    first = 4.0 * lipschitz * math.sqrt(kappa * envelope_gap0 / t)
    second = 8.0 * lipschitz * math.sqrt(2.0 * b_gap * kappa / (t + 1.0) * math.log(1.0 / delta))
    return first + second


@dataclass
class ConvergenceTrace:
    """Strided diagnostics of one alternating-descent run."""

    steps: np.ndarray                  # recorded step indices
    grad_norms: np.ndarray             # envelope gradient norms at those steps
    running_avg_sq: np.ndarray         # running average of squared norms
    slope: float                       # log-log fit of running_avg_sq vs step
    eta: float
    sigma: float
    lipschitz: float                   # max component gradient norm over the visit
    b_gap: float                       # max phi gap over the visited region
    envelope_gap0: float               # envelope(theta_0) - min phi
    phi_min: float
    final_avg_sq: float

    def rhs(self, t, delta):
        return theorem3_rhs(self.lipschitz, 1.0, self.b_gap, self.envelope_gap0, t, delta)

    def to_csv_rows(self, delta=0.1):
        rows = []
        for step, g, avg in zip(self.steps, self.grad_norms, self.running_avg_sq):
            bound = self.rhs(int(step), delta) if step > 0 else float("nan")
            rows.append((int(step), float(g), float(avg), bound))
        return rows


def _fit_slope(steps, values, t_min):
    pts = [(s, v) for s, v in zip(steps, values) if s >= t_min and v > 0]
    if len(pts) < 2:
        return float("nan")
    xs = np.log([p[0] for p in pts])
    ys = np.log([p[1] for p in pts])
    return float(np.polyfit(xs, ys, 1)[0])


def run_convergence_experiment(inst: SyntheticMinimax, t_total, eta="auto",
                               sigma=0.0, seed=0, record_every=None,
                               slope_t_min=100) -> ConvergenceTrace:
    """Alternating worst-component selection and noisy gradient descent.

    Each step picks the currently worst quadratic (the exact inner
    maximum), then descends along its gradient plus zero-mean Gaussian
    noise. The envelope gradient norm is evaluated at every iterate to
    maintain the running average; strided values land in the trace.

    eta="auto" uses sqrt(gap0 / (kappa * L0^2 * T)) with L0 estimated at
    the start point, the step size the decay guarantee is stated for.
    """
    if t_total < 1:
        raise ConfigError(f"t_total must be >= 1, got {t_total}")
    kappa = inst.kappa
    rng = seeding.derive_rng(seed, seeding.TAG_GRAD_NOISE, t_total)
    theta = seeding.derive_rng(seed, seeding.TAG_THETA0).standard_normal(inst.d)

    _, phi_min = minimax_center(inst)
    envelope_gap0 = moreau_envelope(inst, theta, kappa) - phi_min
    if eta == "auto":
        l0 = float(np.sqrt(2.0 * inst.component_values(theta).max()))
        eta_val = math.sqrt(max(envelope_gap0, 1e-12) / (kappa * l0 * l0 * t_total))
    else:
        eta_val = float(eta)
        if eta_val <= 0:
            raise ConfigError(f"eta must be positive, got {eta_val}")

    record_every = max(1, t_total // 400) if record_every is None else int(record_every)
    steps, norms, avgs = [], [], []
    sum_sq = 0.0
    max_phi = -np.inf
    max_grad_norm = 0.0

    for t in range(t_total + 1):
        values = inst.component_values(theta)
        phi_t = float(values.max())
        max_phi = max(max_phi, phi_t)
        max_grad_norm = max(max_grad_norm, float(np.sqrt(2.0 * values.max())))

        g_norm = moreau_grad_norm(inst, theta, kappa)
        sum_sq += g_norm * g_norm
        if t % record_every == 0 or t == t_total:
            steps.append(t)
            norms.append(g_norm)
            avgs.append(sum_sq / (t + 1))

        if t == t_total:
            break
        j = int(np.argmax(values))
        grad = inst.component_grad(theta, j)
        if sigma > 0:
            grad = grad + rng.normal(0.0, sigma, inst.d)
        theta = theta - eta_val * grad
        if np.linalg.norm(theta) > DIVERGENCE_NORM:
            raise NumericError(f"iterate diverged at step {t}: ||theta|| > {DIVERGENCE_NORM:g}")

    slope = _fit_slope(steps, avgs, slope_t_min)
    return ConvergenceTrace(
        steps=np.asarray(steps), grad_norms=np.asarray(norms),
        running_avg_sq=np.asarray(avgs), slope=slope, eta=eta_val, sigma=sigma,
        lipschitz=max_grad_norm, b_gap=float(max_phi - phi_min),
        envelope_gap0=float(envelope_gap0), phi_min=float(phi_min),
        final_avg_sq=float(sum_sq / (t_total + 1)),
    )


# ---------------------------------------------------------------------------
# diagnostic-only approximate envelope for arbitrary objectives

def approx_moreau_grad_norm(objective, theta0, kappa=1.0, steps=200, lr=0.05):
    """Inner gradient-descent prox solve for objectives without exact prox.

    objective(theta) must return (value, gradient). Diagnostic only; there
    is no accuracy guarantee when the objective is not weakly convex.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    theta = theta0.copy()
    for _ in range(int(steps)):
        _, grad = objective(theta)
        step = grad + 2.0 * kappa * (theta - theta0)
        theta = theta - lr * step
    return float(2.0 * kappa * np.linalg.norm(theta - theta0)), theta
