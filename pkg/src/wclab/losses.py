"""Loss functions and per-variant aggregation.

Two input conventions coexist deliberately. Hard-label cross-entropy
consumes raw logits, log(sum_i exp(s_i - s_y)), and is used for the
supervised and pseudo-label paths. Soft-label cross-entropy consumes
probability vectors clamped coordinate-wise to [eps, 1-eps] (no
renormalization), -sum_i t_i log s_i, and is used for soft consistency
targets and the risk-decomposition checks. Natural logarithms throughout.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError

DEFAULT_CLAMP_EPS = 0.05
AGGREGATOR_MODES = ("max", "mean", "min")


def _check_eps(eps):
    if not 0.0 < eps < 0.5:
        raise ConfigError(f"clamp eps must be in (0, 0.5), got {eps}")


# ---------------------------------------------------------------------------
# plain (array in, float out) forms

def zero_one(pred_label, true_label, n_c) -> int:
    """1 iff the labels differ."""
    pred_label, true_label = int(pred_label), int(true_label)
    if not (0 <= pred_label < n_c and 0 <= true_label < n_c):
        raise ConfigError(
            f"labels must lie in [0, {n_c}), got {pred_label} and {true_label}"
        )
    return int(pred_label != true_label)


def ce_hard(scores, y) -> float:
    """log sum_i exp(s_i - s_y) on raw logits. Always >= 0."""
    s = np.asarray(scores, dtype=np.float64)
    if s.ndim != 1:
        raise ShapeError(f"ce_hard expects a score vector, got shape {s.shape}")
    shifted = s - s[int(y)]
    m = shifted.max()
    return float(np.log(np.exp(shifted - m).sum()) + m)


def ce_hard_rows(scores, labels) -> np.ndarray:
    """Row-wise hard-label cross-entropy for a (B, n_c) score matrix."""
    s = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    picked = s[np.arange(len(s)), labels]
    m = s.max(axis=1)
    return np.log(np.exp(s - m[:, None]).sum(axis=1)) + m - picked


def ce_soft(probs, targets, eps=DEFAULT_CLAMP_EPS) -> float:
    """-sum_i t_i log s_i with both vectors clamped to [eps, 1-eps]."""
    _check_eps(eps)
    s = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    t = np.clip(np.asarray(targets, dtype=np.float64), eps, 1.0 - eps)
    if s.shape != t.shape:
        raise ShapeError(f"ce_soft: scores {s.shape} vs targets {t.shape}")
    return float(-(t * np.log(s)).sum())


def ce_soft_rows(probs, targets, eps=DEFAULT_CLAMP_EPS) -> np.ndarray:
    _check_eps(eps)
    s = np.clip(np.asarray(probs, dtype=np.float64), eps, 1.0 - eps)
    t = np.clip(np.asarray(targets, dtype=np.float64), eps, 1.0 - eps)
    return -(t * np.log(s)).sum(axis=-1)


def softmax_rows(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    shifted = s - s.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def total_loss(supervised, unsupervised, lam):
    """supervised + lam * unsupervised (works on floats and tensors)."""
    if lam < 0:
        raise ConfigError(f"trade-off lam must be >= 0, got {lam}")
    if isinstance(supervised, ad.Tensor) or isinstance(unsupervised, ad.Tensor):
        return ad.add(supervised, ad.mul(unsupervised, lam))
    return supervised + lam * unsupervised


# ---------------------------------------------------------------------------
# aggregation over the K variants

def aggregate(values, mode):
    """Reduce a K-vector of per-variant losses to (value, chosen index).

    max: largest value, ties broken by smallest index (np.argmax).
    mean: arithmetic mean, index 0 by convention.
    min: smallest value, smallest index on ties.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ConfigError(f"aggregate needs a non-empty vector, got shape {v.shape}")
    if mode == "max":
        idx = int(np.argmax(v))
        return float(v[idx]), idx
    if mode == "min":
        idx = int(np.argmin(v))
        return float(v[idx]), idx
    if mode == "mean":
        return float(v.mean()), 0
    raise ConfigError(f"unknown aggregator {mode!r}, expected one of {AGGREGATOR_MODES}")


@dataclass
class ConsistencyBatchLosses:
    """Per-sample, per-variant unlabeled losses plus the selection results."""

    losses: np.ndarray         # (B, K)
    mask: np.ndarray           # (B,) bool, confidence gate
    chosen: np.ndarray         # (B,) selected variant per sample
    values: np.ndarray         # (B,) aggregated per-sample value

    @property
    def mask_rate(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    def masked_batch_value(self, mode) -> float:
        """Batch loss under the given aggregation mode, masked rows as 0."""
        if self.losses.size == 0:
            return 0.0
        if mode == "max":
            per = self.losses.max(axis=1)
        elif mode == "min":
            per = self.losses.min(axis=1)
        elif mode == "mean":
            per = self.losses.mean(axis=1)
        else:
            raise ConfigError(f"unknown aggregator {mode!r}")
        return float((per * self.mask).mean())

    def variant_batch_value(self, j) -> float:
        """Batch loss if variant j were always selected (masked)."""
        return float((self.losses[:, j] * self.mask).mean())


# ---------------------------------------------------------------------------
# graph-building forms used by the trainer

def supervised_loss(net, x_batch, labels) -> ad.Tensor:
    """Mean hard-label cross-entropy over a labeled batch (builds the graph)."""
    scores = net.forward(x_batch)
    per_row = ce_hard_rows_tensor(scores, labels)
    b = per_row.data.shape[0]
    return ad.weighted_sum(per_row, np.full(b, 1.0 / b))


def ce_hard_rows_tensor(scores: ad.Tensor, labels) -> ad.Tensor:
    """Tape-aware row-wise hard-label cross-entropy; gradient is softmax - onehot."""
    labels = np.asarray(labels, dtype=np.int64)
    s = scores.data
    if s.ndim != 2 or len(labels) != s.shape[0]:
        raise ShapeError(f"ce_hard_rows_tensor: scores {s.shape} vs {len(labels)} labels")
    m = s.max(axis=1, keepdims=True)
    e = np.exp(s - m)
    z = e.sum(axis=1, keepdims=True)
    out = np.log(z[:, 0]) + m[:, 0] - s[np.arange(len(labels)), labels]

    def grad_fn(g):
        p = e / z
        p[np.arange(len(labels)), labels] -= 1.0
        return p * g[:, None]

    return ad._node(out, [(scores, grad_fn)])


def ce_soft_rows_tensor(scores: ad.Tensor, targets, eps=DEFAULT_CLAMP_EPS) -> ad.Tensor:
    """Tape-aware soft cross-entropy on logits: softmax, clamp, -sum t log s."""
    _check_eps(eps)
    t = np.clip(np.asarray(targets, dtype=np.float64), eps, 1.0 - eps)
    probs = ad.softmax(scores)
    clamped = ad.clamp(probs, eps, 1.0 - eps)
    logs = ad.log(clamped)
    weighted = ad.mul(logs, -t)

    b = weighted.data.shape[0]
    row_sum = ad._node(weighted.data.sum(axis=1), [
        (weighted, lambda g: np.repeat(g[:, None], weighted.data.shape[1], axis=1)),
    ])
    return row_sum


def consistency_losses(net, x_weak, uset, target_mode="pseudo", eps=DEFAULT_CLAMP_EPS) -> np.ndarray:
    """K per-variant losses for one sample, targets from frozen parameters.

    pseudo mode scores each variant's logits against the weak view's
    predicted label; soft mode compares clamped probability vectors.
    """
    if uset.k == 0:
        raise ConfigError("consistency_losses: empty uncertainty set")
    with ad.no_grad():
        target_scores = net.forward(np.asarray(x_weak)[None]).data[0]
        variant_scores = net.forward(np.stack(uset.variants)).data
    if target_mode == "pseudo":
        label = int(np.argmax(target_scores))
        return ce_hard_rows(variant_scores, np.full(uset.k, label))
    if target_mode == "soft":
        target = softmax_rows(target_scores)
        return ce_soft_rows(softmax_rows(variant_scores), target[None, :], eps=eps)
    raise ConfigError(f"unknown target mode {target_mode!r}")


def fixmatch_unlabeled_loss(net, weak_batch, usets, beta, aggregator="max",
                            target_mode="pseudo", eps=DEFAULT_CLAMP_EPS):
    """Thresholded worst/mean/best-case consistency loss over a batch.

    Targets come from the weak views under frozen parameters (stop
    gradient). Per-variant losses are evaluated without the tape to pick
    each sample's variant; the graph is then built by one full-batch
    forward on the selected variants, so masked samples and unselected
    variants contribute exactly zero gradient. Returns (scalar loss
    tensor, ConsistencyBatchLosses).
    """
    if not 0.0 < beta <= 1.0:
        raise ConfigError(f"confidence threshold must be in (0, 1], got {beta}")
    b = len(weak_batch)
    if b == 0:
        raise ConfigError("fixmatch_unlabeled_loss: empty batch")
    k = usets[0].k
    if any(u.k != k for u in usets):
        raise ConfigError("all uncertainty sets in a batch must share K")

    with ad.no_grad():
        target_scores = net.forward(np.stack(weak_batch)).data
    target_probs = softmax_rows(target_scores)
    pseudo_labels = target_probs.argmax(axis=1)
    mask = target_probs.max(axis=1) > beta

    # selection pass, no tape
    loss_matrix = np.empty((b, k))
    variant_stack = [np.stack([usets[i].variants[j] for i in range(b)]) for j in range(k)]
    with ad.no_grad():
        for j in range(k):
            scores_j = net.forward(variant_stack[j]).data
            if target_mode == "pseudo":
                loss_matrix[:, j] = ce_hard_rows(scores_j, pseudo_labels)
            elif target_mode == "soft":
                loss_matrix[:, j] = ce_soft_rows(softmax_rows(scores_j), target_probs, eps=eps)
            else:
                raise ConfigError(f"unknown target mode {target_mode!r}")

    if aggregator == "max":
        chosen = loss_matrix.argmax(axis=1)
        values = loss_matrix[np.arange(b), chosen]
    elif aggregator == "min":
        chosen = loss_matrix.argmin(axis=1)
        values = loss_matrix[np.arange(b), chosen]
    elif aggregator == "mean":
        chosen = np.zeros(b, dtype=np.int64)
        values = loss_matrix.mean(axis=1)
    else:
        raise ConfigError(f"unknown aggregator {aggregator!r}, expected one of {AGGREGATOR_MODES}")

    batch_losses = ConsistencyBatchLosses(loss_matrix, mask, chosen.astype(np.int64), values)

    if aggregator == "mean":
        # every variant participates, each at weight mask / (B * K)
        loss = None
        weights = mask.astype(np.float64) / (b * k)
        for j in range(k):
            scores_j = net.forward(variant_stack[j])
            per_row = _row_loss_tensor(scores_j, target_mode, pseudo_labels, target_probs, eps)
            term = ad.weighted_sum(per_row, weights)
            loss = term if loss is None else ad.add(loss, term)
        return loss, batch_losses

    selected = np.stack([usets[i].variants[int(chosen[i])] for i in range(b)])
    scores_sel = net.forward(selected)
    per_row = _row_loss_tensor(scores_sel, target_mode, pseudo_labels, target_probs, eps)
    loss = ad.weighted_sum(per_row, mask.astype(np.float64) / b)
    return loss, batch_losses


def _row_loss_tensor(scores, target_mode, pseudo_labels, target_probs, eps):
    if target_mode == "pseudo":
        return ce_hard_rows_tensor(scores, pseudo_labels)
    return ce_soft_rows_tensor(scores, target_probs, eps=eps)
