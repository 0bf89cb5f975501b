"""Headless property checks, a reduced mirror of the full test suite.

Run via `wclab selfcheck`. Each check returns (name, ok, detail); the CLI
prints one line per check and exits nonzero on any failure.
"""

from __future__ import annotations

import math

import numpy as np

from . import augment, convergence, losses, theory, trainer
from . import autodiff as ad
from . import data as data_mod
from . import model as model_mod


def _check_loss_lemmas(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    n_c, eps = 10, 0.1
    c1, c2 = theory.constants(n_c, eps)
    scores = rng.normal(0, 3, (n, n_c))
    labels = rng.integers(0, n_c, n)
    hard = losses.ce_hard_rows(scores, labels)
    miss = scores.argmax(axis=1) != labels
    ok_hard = bool(np.all(math.log(2) * miss <= hard + 1e-12))

    s = rng.uniform(0, 1, (n, n_c))
    t = rng.uniform(0, 1, (n, n_c))
    soft = losses.ce_soft_rows(s, t, eps=eps)
    floor = n_c * eps * math.log(1.0 / (1.0 - eps))
    ok_soft = bool(np.all(soft >= floor - 1e-12))

    pointwise = c1 * losses.ce_soft_rows(s, t, eps=eps) + c2 * hard
    ok_point = bool(np.all(miss <= pointwise + 1e-12))
    ok = ok_hard and ok_soft and ok_point
    return "loss-lemmas", ok, f"hard={ok_hard} soft={ok_soft} pointwise={ok_point}"


def _check_gradients(nets=5, seed=3):
    worst = 0.0
    for i in range(nets):
        rng = np.random.default_rng(seed + i)
        net = model_mod.Network.mlp((3, 5, 3), seed=seed + i)
        x = rng.normal(0, 1, (2, 3))
        y = rng.integers(0, 3, 2)

        def loss_value():
            return losses.supervised_loss(net, x, y).item()

        net.zero_grads()
        ad.backward(losses.supervised_loss(net, x, y))
        h = 1e-5
        for p in net.parameters():
            flat = p.data.reshape(-1)
            for idx in range(flat.size):
                old = flat[idx]
                flat[idx] = old + h
                up = loss_value()
                flat[idx] = old - h
                down = loss_value()
                flat[idx] = old
                fd = (up - down) / (2 * h)
                ana = p.grad.reshape(-1)[idx]
                worst = max(worst, abs(ana - fd) / max(1.0, abs(fd)))
    return "gradient-check", worst < 1e-4, f"max rel err {worst:.2e}"


def _check_operator_matrix(seed=5):
    rng = np.random.default_rng(seed)
    kernel = rng.normal(0, 1, (2, 1, 3, 3))
    x = rng.normal(0, 1, (1, 1, 5, 5))
    m = model_mod.conv_operator_matrix(kernel, (1, 5, 5), padding=1)
    with ad.no_grad():
        direct = ad.conv2d(ad.Tensor(x), ad.Tensor(kernel), padding=1).data
    via_matrix = (m @ x.reshape(-1)).reshape(direct.shape)
    err = float(np.abs(direct - via_matrix).max())
    return "conv-operator-matrix", err < 1e-12, f"max abs err {err:.2e}"


def _check_spectral_norm(seed=7):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        m = rng.normal(0, 1, (12, 9))
        est = model_mod.spectral_norm(m)
        true = float(np.linalg.svd(m, compute_uv=False)[0])
        worst = max(worst, abs(est - true) / true)
    return "spectral-norm", worst < 1e-6, f"max rel err {worst:.2e}"


def _check_aggregation(seed=11):
    rng = np.random.default_rng(seed)
    ok = True
    for _ in range(500):
        v = rng.uniform(0, 2, rng.integers(1, 6))
        lo, _ = losses.aggregate(v, "min")
        mid, _ = losses.aggregate(v, "mean")
        hi, idx = losses.aggregate(v, "max")
        _, fact_value = theory.fact1_verify(v)
        ok &= lo <= mid + 1e-12 <= hi + 2e-12 and fact_value == hi
    return "aggregation-order", bool(ok), "min <= mean <= max, simplex max == vector max"


def _check_prox():
    inst = convergence.SyntheticMinimax(np.zeros((1, 1)))
    theta_hat = convergence.prox_point(inst, np.array([3.0]), kappa=1.0)
    g = convergence.moreau_grad_norm(inst, np.array([3.0]), kappa=1.0)
    ok = abs(theta_hat[0] - 2.0) < 1e-10 and abs(g - 2.0) < 1e-10
    return "prox-closed-form", ok, f"theta_hat={theta_hat[0]:.12f} grad={g:.12f}"


def _check_seed_nesting(seed=13):
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (1, 8, 8))
    one = augment.build_uncertainty_set(x, 1, 5, 17, 2)
    three = augment.build_uncertainty_set(x, 3, 5, 17, 2)
    ok = np.array_equal(one.variants[0], three.variants[0])
    return "uncertainty-set-nesting", bool(ok), "variant 0 independent of K"


def _check_determinism():
    ds = data_mod.make_two_moons(80, 0.1, seed=4)
    split = data_mod.split_ssl(ds, 4, fold_seed=1)
    cfg = trainer.TrainConfig(total_steps=5, b_l=4, b_u=8, k=2, eval_every=5,
                              ema_decay=0.9, beta=0.5)
    _, rows_a = trainer.run_training(cfg, ds, split, test_dataset=ds)
    _, rows_b = trainer.run_training(cfg, ds, split, test_dataset=ds)
    ok = all(ra.as_tuple() == rb.as_tuple() for ra, rb in zip(rows_a, rows_b))
    return "training-determinism", ok, f"{len(rows_a)} metric rows compared"


ALL_CHECKS = (
    _check_loss_lemmas,
    _check_gradients,
    _check_operator_matrix,
    _check_spectral_norm,
    _check_aggregation,
    _check_prox,
    _check_seed_nesting,
    _check_determinism,
)


def run_all(report=print):
    """Run every check; returns True when all pass."""
    all_ok = True
    for fn in ALL_CHECKS:
        name, ok, detail = fn()
        all_ok &= ok
        report(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return all_ok
