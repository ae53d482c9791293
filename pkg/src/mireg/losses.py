"""Training objectives, evaluable on fixed inputs, with analytic gradients.

There is no optimiser here: the losses exist so that fixtures and heads can be
scored and gradient-checked.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

EPS = 1e-12


@dataclass
class LossConfig:
    delta_p: float = 0.1
    delta_n: float = 1.4
    gamma: float = 10.0
    matching_radius: float = 0.05

    def __post_init__(self):
        if not self.delta_p < self.delta_n:
            raise ValueError("delta_p must be smaller than delta_n")
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")


@dataclass
class CircleAnchor:
    """One anchor patch: distances to its positive patches (with overlap ratios)
    and to its negative patches."""

    pos_d: np.ndarray
    pos_overlap: np.ndarray
    neg_d: np.ndarray

    def __post_init__(self):
        self.pos_d = np.asarray(self.pos_d, dtype=np.float64).reshape(-1)
        self.pos_overlap = np.asarray(self.pos_overlap, dtype=np.float64).reshape(-1)
        self.neg_d = np.asarray(self.neg_d, dtype=np.float64).reshape(-1)
        if self.pos_d.shape != self.pos_overlap.shape:
            raise ValueError("each positive needs an overlap ratio")
        if np.any((self.pos_overlap < 0) | (self.pos_overlap > 1)):
            raise ValueError("overlap ratios must lie in [0, 1]")


def _anchor_terms(a: CircleAnchor, cfg: LossConfig):
    lam = np.sqrt(a.pos_overlap)
    pos = np.exp(lam * cfg.gamma * (a.pos_d - cfg.delta_p) ** 2)
    neg = np.exp(cfg.gamma * (cfg.delta_n - a.neg_d) ** 2)
    return lam, pos, neg


def circle_loss_side(anchors: Sequence[CircleAnchor], cfg: LossConfig,
                     diagnostics: Optional[Counter] = None) -> float:
    """Mean over anchors of ``log(1 + sum_pos exp(.) * sum_neg exp(.))``.

    Positive exponent ``lambda * beta_p * (d - delta_p)`` with
    ``lambda = sqrt(overlap)`` and ``beta_p = gamma * (d - delta_p)``; negative
    exponent ``beta_n * (delta_n - d)`` with ``beta_n = gamma * (delta_n - d)``.
    """
    if len(anchors) == 0:
        if diagnostics is not None:
            diagnostics["empty_anchor_set"] += 1
        return 0.0
    total = 0.0
    for a in anchors:
        _, pos, neg = _anchor_terms(a, cfg)
        total += np.log1p(pos.sum() * neg.sum())
    return float(total / len(anchors))


def circle_loss(anchors_q: Sequence[CircleAnchor], anchors_p: Sequence[CircleAnchor], cfg: LossConfig,
                diagnostics: Optional[Counter] = None) -> float:
    return 0.5 * (circle_loss_side(anchors_q, cfg, diagnostics) + circle_loss_side(anchors_p, cfg, diagnostics))


def circle_loss_side_grad(anchors: Sequence[CircleAnchor], cfg: LossConfig):
    """Gradients of :func:`circle_loss_side` w.r.t. each anchor's ``pos_d`` and ``neg_d``."""
    grads = []
    n = max(len(anchors), 1)
    for a in anchors:
        lam, pos, neg = _anchor_terms(a, cfg)
        sp, sn = pos.sum(), neg.sum()
        denom = 1.0 + sp * sn
        g_pos = pos * 2 * lam * cfg.gamma * (a.pos_d - cfg.delta_p) * sn / denom / n
        g_neg = neg * (-2) * cfg.gamma * (cfg.delta_n - a.neg_d) * sp / denom / n
        grads.append((g_pos, g_neg))
    return grads


def nll_loss(assignments: Sequence[np.ndarray], gt_pairs: Sequence[np.ndarray],
             unmatched_rows: Sequence[np.ndarray], unmatched_cols: Sequence[np.ndarray],
             diagnostics: Optional[Counter] = None) -> float:
    """Mean over sampled matches of the negative log-likelihood on slack-augmented
    assignment matrices.

    For match ``i`` with an ``(n+1, m+1)`` matrix: ground-truth pairs index the
    core, unmatched rows index the last column, unmatched columns the last row.
    Probabilities below ``1e-12`` are clamped and counted.
    """
    if len(assignments) == 0:
        return 0.0
    total = 0.0
    for H, pairs, rows, cols in zip(assignments, gt_pairs, unmatched_rows, unmatched_cols):
        H = np.asarray(H, dtype=np.float64)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        picked = np.concatenate([
            H[pairs[:, 0], pairs[:, 1]],
            H[rows, H.shape[1] - 1],
            H[H.shape[0] - 1, cols],
        ])
        low = picked < EPS
        if low.any() and diagnostics is not None:
            diagnostics["clamped_probabilities"] += int(low.sum())
        total += -np.log(np.maximum(picked, EPS)).sum()
    return float(total / len(assignments))


def nll_loss_grad(assignments, gt_pairs, unmatched_rows, unmatched_cols) -> list[np.ndarray]:
    """Gradient of :func:`nll_loss` w.r.t. every assignment entry (unclamped region)."""
    out = []
    n = max(len(assignments), 1)
    for H, pairs, rows, cols in zip(assignments, gt_pairs, unmatched_rows, unmatched_cols):
        H = np.asarray(H, dtype=np.float64)
        G = np.zeros_like(H)
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        np.add.at(G, (pairs[:, 0], pairs[:, 1]), -1.0 / H[pairs[:, 0], pairs[:, 1]])
        rows = np.asarray(rows, dtype=np.int64).reshape(-1)
        cols = np.asarray(cols, dtype=np.int64).reshape(-1)
        np.add.at(G, (rows, H.shape[1] - 1), -1.0 / H[rows, H.shape[1] - 1])
        np.add.at(G, (H.shape[0] - 1, cols), -1.0 / H[H.shape[0] - 1, cols])
        out.append(G / n)
    return out


def _clamp(p):
    return np.clip(np.asarray(p, dtype=np.float64), EPS, 1 - EPS)


def mask_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Row-averaged BCE plus Laplace-smoothed Dice, averaged over rows.

    Per row: ``BCE(m, g) + 1 - 2 (m.g + 1) / (|m| + |g| + 1)`` where ``|.|`` is
    the row sum and BCE is the mean over the row's entries.
    """
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground truth shapes differ")
    p = _clamp(pred)
    bce = -(gt * np.log(p) + (1 - gt) * np.log(1 - p)).mean(axis=1)
    dice = 1.0 - 2.0 * ((pred * gt).sum(1) + 1.0) / (pred.sum(1) + gt.sum(1) + 1.0)
    return float((bce + dice).mean())


def mask_loss_grad(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Gradient of :func:`mask_loss` w.r.t. ``pred`` for entries inside the clamp range."""
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    gt = np.atleast_2d(np.asarray(gt, dtype=np.float64))
    n_rows, k = pred.shape
    p = _clamp(pred)
    g_bce = (-(gt / p) + (1 - gt) / (1 - p)) / k
    num = (pred * gt).sum(1, keepdims=True) + 1.0
    den = pred.sum(1, keepdims=True) + gt.sum(1, keepdims=True) + 1.0
    g_dice = -2.0 * (gt * den - num) / den ** 2
    return (g_bce + g_dice) / n_rows


def total_loss(circle: float, nll: float, mask: float) -> float:
    return float(circle + nll + mask)
