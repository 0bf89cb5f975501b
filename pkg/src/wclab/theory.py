"""Closed-form evaluators for the risk-decomposition and capacity bounds.

Pure numeric functions, independent of the trainer, so hypothetical
architectures can be explored from the CLI. Natural logarithms everywhere;
the loss-side lemmas force that choice and the capacity formulas inherit it.

Name note: beta_dist is the parameter-distance budget (how far training may
move from the initialization in operator norm). It is unrelated to the
confidence threshold used by the trainer, which also goes by beta there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import losses
from . import model as model_mod
from .errors import ConfigError


def constants(n_c, eps):
    """Risk-decomposition constants (C1, C2).

    C1 = 1 / (n_c * eps * ln(1/(1-eps))) scales the consistency risk,
    C2 = 1 / ln 2 scales the supervised risk.
    """
    if not 0.0 < eps < 0.5:
        raise ConfigError(f"eps must be in (0, 0.5), got {eps}")
    if n_c < 2:
        raise ConfigError(f"need at least two classes, got {n_c}")
    c1 = 1.0 / (n_c * eps * math.log(1.0 / (1.0 - eps)))
    c2 = 1.0 / math.log(2.0)
    return c1, c2


@dataclass
class BoundConfig:
    """Inputs of the CNN generalization bound."""

    n_l: int
    n_u: int
    n_c: int
    k: int
    w: int                     # parameter count, multi-output network
    w_g: int                   # parameter count, single-output variant
    chi: float                 # max input norm, raw
    chi_tau: float             # max input norm after transformation
    beta_dist: float           # distance budget from initialization
    nu: float = 0.0            # init operator-norm slack
    eps: float = 0.05
    delta: float = 0.05
    c0: float = 1.0            # universal constant, not pinned by theory

    def validate(self):
        for name in ("n_l", "n_u", "n_c", "k", "w", "w_g"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.n_l < 2:
            raise ConfigError(f"n_l must be >= 2 for the log log term, got {self.n_l}")
        if not 0.0 < self.eps < 0.5:
            raise ConfigError(f"eps must be in (0, 0.5), got {self.eps}")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError(f"delta must be in (0, 1), got {self.delta}")
        if self.chi < 0 or self.chi_tau < 0:
            raise ConfigError("input norm bounds must be >= 0")
        if self.beta_dist < 0:
            raise ConfigError(f"beta_dist must be >= 0, got {self.beta_dist}")
        if self.nu < 0:
            raise ConfigError(f"nu must be >= 0, got {self.nu}")
        if self.c0 <= 0:
            raise ConfigError(f"c0 must be positive, got {self.c0}")
        return self


@dataclass
class BoundReport:
    """Evaluated constants and itemized bound terms; total == sum of terms."""

    c1: float
    c2: float
    c_n: float
    c_m: float
    psi: float
    big_psi: float
    risk_labeled: float
    risk_unlabeled: float
    term_unlabeled: float
    term_labeled: float
    term_k: float              # K-proportional part of the complexity term
    term_deviation: float      # concentration part of the complexity term
    term_psi: float
    total: float

    def terms(self):
        return {
            "unlabeled-risk": self.term_unlabeled,
            "labeled-risk": self.term_labeled,
            "k-complexity": self.term_k,
            "deviation": self.term_deviation,
            "psi": self.term_psi,
        }

    def to_dict(self):
        return asdict(self)


def _capacity_constant(chi, beta_dist, nu):
    return 3.0 * chi * math.exp(beta_dist / (1.0 + nu))


def rademacher_multi_bound(n, n_c, w, chi, beta_dist, nu=0.0) -> float:
    """Capacity bound for the multi-output network class.

    4/sqrt(n*n_c) + 12/sqrt(n*n_c) * sqrt(W * ln(C_N * sqrt(n*n_c)))
    with C_N = 3*chi*exp(beta_dist/(1+nu)).
    """
    if n <= 0 or n_c <= 0 or w <= 0:
        raise ConfigError("counts must be positive")
    c_n = _capacity_constant(chi, beta_dist, nu)
    root = math.sqrt(n * n_c)
    arg = c_n * root
    if arg <= 1.0:
        raise ConfigError(f"log argument {arg} <= 1; the bound is vacuous here")
    return 4.0 / root + (12.0 / root) * math.sqrt(w * math.log(arg))


def rademacher_single_bound(n, w_g, chi, beta_dist, nu=0.0) -> float:
    """Single-output variant: 4/sqrt(n) + 12/sqrt(n) * sqrt(W_g * ln(C*n)).

    Pass the raw input-norm bound chi for the untransformed class or
    chi_tau for the class composed with input transformations.
    """
    if n <= 0 or w_g <= 0:
        raise ConfigError("counts must be positive")
    c = _capacity_constant(chi, beta_dist, nu)
    arg = c * n
    if arg <= 1.0:
        raise ConfigError(f"log argument {arg} <= 1; the bound is vacuous here")
    return 4.0 / math.sqrt(n) + (12.0 / math.sqrt(n)) * math.sqrt(w_g * math.log(arg))


def thm2_bound(cfg: BoundConfig, risk_labeled, risk_unlabeled) -> BoundReport:
    """Assemble the CNN generalization bound from empirical risks and capacity.

    Terms, in report order: C1 * unlabeled risk, C2(1 + C0/2) * labeled
    risk, the K-proportional complexity term plus the unlabeled deviation
    term, and the multi-output chaining term (3 C0 C2 / 2) * Psi.
    """
    cfg.validate()
    if risk_labeled < 0 or risk_unlabeled < 0:
        raise ConfigError("empirical risks must be >= 0")
    c1, c2 = constants(cfg.n_c, cfg.eps)
    c_n = _capacity_constant(cfg.chi, cfg.beta_dist, cfg.nu)
    c_m = _capacity_constant(max(cfg.chi, cfg.chi_tau), cfg.beta_dist, cfg.nu)
    arg_m = c_m * cfg.n_u
    if arg_m <= 1.0:
        raise ConfigError(f"log argument {arg_m} <= 1 in the K term; bound is vacuous")

    term_unlabeled = c1 * risk_unlabeled
    term_labeled = c2 * (1.0 + cfg.c0 / 2.0) * risk_labeled
    term_k = c1 * (16.0 * cfg.k * cfg.n_c / math.sqrt(cfg.n_u)) \
        * ((1.0 - cfg.eps) / cfg.eps) \
        * (1.0 + 3.0 * math.sqrt(cfg.w_g * math.log(arg_m)))
    term_deviation = c1 * 3.0 * math.sqrt(math.log(4.0 / cfg.delta) / (2.0 * cfg.n_u))

    psi = rademacher_multi_bound(cfg.n_l, cfg.n_c, cfg.w, cfg.chi, cfg.beta_dist, cfg.nu)
    big_psi = 2.0 * (math.sqrt(cfg.n_c) * math.log(cfg.n_l * cfg.n_c * math.e) ** 1.5 * psi
                     + 1.0 / math.sqrt(cfg.n_l)) \
        + (math.log(cfg.n_c * math.e) / cfg.n_l) \
        * (math.log(2.0 / cfg.delta) + math.log(math.log(cfg.n_l)))
    term_psi = (3.0 * cfg.c0 * c2 / 2.0) * big_psi

    total = term_unlabeled + term_labeled + term_k + term_deviation + term_psi
    return BoundReport(
        c1=c1, c2=c2, c_n=c_n, c_m=c_m, psi=psi, big_psi=big_psi,
        risk_labeled=float(risk_labeled), risk_unlabeled=float(risk_unlabeled),
        term_unlabeled=term_unlabeled, term_labeled=term_labeled,
        term_k=term_k, term_deviation=term_deviation, term_psi=term_psi,
        total=total,
    )


def thm1_assemble(c1, c2, risk_labeled, risk_unlabeled, rad_l, rad_u, n_l, n_u, delta) -> float:
    """General-model bound: empirical risks, capacity terms, deviation terms."""
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must be in (0, 1), got {delta}")
    if n_l <= 0 or n_u <= 0:
        raise ConfigError("sample counts must be positive")
    dev = math.log(4.0 / delta)
    return (c1 * risk_unlabeled + c2 * risk_labeled
            + 2.0 * c2 * rad_l + 2.0 * c1 * rad_u
            + 3.0 * c2 * math.sqrt(dev / (2.0 * n_l))
            + 3.0 * c1 * math.sqrt(dev / (2.0 * n_u)))


# ---------------------------------------------------------------------------
# empirical risks

def empirical_risk_labeled(net, features, labels) -> float:
    """Mean hard-label cross-entropy of the network on a labeled set."""
    if len(features) == 0:
        raise ConfigError("empirical_risk_labeled: empty set")
    from . import autodiff as ad
    with ad.no_grad():
        scores = net.forward(np.asarray(features)).data
    return float(losses.ce_hard_rows(scores, labels).mean())


def empirical_risk_unlabeled_worst(net, features, usets, eps=losses.DEFAULT_CLAMP_EPS) -> float:
    """Mean over samples of the worst-case soft consistency loss.

    Per sample: max over its K variants of the clamped soft cross-entropy
    between the variant's probabilities and the original's probabilities.
    """
    if len(features) == 0:
        raise ConfigError("empirical_risk_unlabeled_worst: empty set")
    if len(usets) != len(features):
        raise ConfigError(f"{len(features)} samples but {len(usets)} uncertainty sets")
    from . import autodiff as ad
    k = usets[0].k
    if any(u.k != k for u in usets):
        raise ConfigError("all uncertainty sets must share K")
    with ad.no_grad():
        base_probs = losses.softmax_rows(net.forward(np.asarray(features)).data)
        worst = np.full(len(features), -np.inf)
        for j in range(k):
            stack = np.stack([u.variants[j] for u in usets])
            probs_j = losses.softmax_rows(net.forward(stack).data)
            worst = np.maximum(worst, losses.ce_soft_rows(probs_j, base_probs, eps=eps))
    return float(worst.mean())


# ---------------------------------------------------------------------------
# equivalence of the hard max and its simplex relaxation

def fact1_verify(loss_values):
    """Optimal simplex weights for sum_j v_j * l_j.

    A linear objective over the simplex attains its maximum at a vertex,
    so the weights are one-hot at the argmax (smallest index on ties) and
    the value equals the plain maximum.
    """
    v = np.asarray(loss_values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ConfigError(f"fact1_verify needs a non-empty vector, got shape {v.shape}")
    idx = int(np.argmax(v))
    weights = np.zeros_like(v)
    weights[idx] = 1.0
    return weights, float(v[idx])


# ---------------------------------------------------------------------------
# measured quantities for plugging real runs into the bound

def measure_norm_bounds(net, init_snapshot, features, transformed_features=None):
    """(chi, chi_tau, nu, beta_dist) measured from a network and data.

    chi and chi_tau are the largest flattened input 2-norms seen raw and
    after transformation; nu is the worst initialization operator norm
    minus one (floored at zero); beta_dist is the layerwise operator-norm
    distance between the current parameters and the initialization.
    """
    x = np.asarray(features, dtype=np.float64)
    chi = float(np.sqrt((x.reshape(len(x), -1) ** 2).sum(axis=1)).max()) if len(x) else 0.0
    if transformed_features is not None and len(transformed_features):
        xt = np.asarray(transformed_features, dtype=np.float64)
        chi_tau = float(np.sqrt((xt.reshape(len(xt), -1) ** 2).sum(axis=1)).max())
    else:
        chi_tau = chi
    norms = model_mod.operator_norms(init_snapshot)
    nu = max(0.0, max(norms) - 1.0) if norms else 0.0
    beta_dist = model_mod.network_distance(net.snapshot(), init_snapshot)
    return chi, chi_tau, nu, beta_dist
