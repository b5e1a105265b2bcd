"""Training objectives: classification cross-entropy, positive-pair
contrastive loss, and the symmetric two-path combination.

The contrastive loss treats its target embeddings z as constants
(stop-gradient), so only the predictor side p receives a gradient.
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class LossConfig:
    temperature: float = 1.0
    normalize_embeddings: bool = True
    epsilon: float = 1e-12

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def _check_probs(probs):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("probs must be [B x n_classes]")
    if (probs < 0.0).any() or np.abs(probs.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
        raise ValueError("probability rows must be nonnegative and sum to 1 within 1e-6")
    return probs


def classification_loss(probs, labels, epsilon=1e-12):
    """Cross entropy summed over the batch: -sum_i log(probs[i, y_i] + eps)."""
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=np.intp)
    picked = probs[np.arange(probs.shape[0]), labels]
    return float(-np.log(picked + epsilon).sum())


def classification_loss_grad(probs, labels, epsilon=1e-12):
    """Returns (loss, d loss / d probs)."""
    probs = _check_probs(probs)
    labels = np.asarray(labels, dtype=np.intp)
    rows = np.arange(probs.shape[0])
    picked = probs[rows, labels]
    dprobs = np.zeros_like(probs)
    dprobs[rows, labels] = -1.0 / (picked + epsilon)
    return float(-np.log(picked + epsilon).sum()), dprobs


def _normalize_rows(x):
    norms = np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-30)
    return x / norms, norms


def _pair_terms(p, z, labels, cfg):
    """Similarity matrix, label mask, and per-anchor numerator/denominator."""
    p = np.asarray(p, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if p.shape != z.shape or p.shape[0] != labels.shape[0]:
        raise ValueError("p, z, labels must be batch-aligned")
    if cfg.normalize_embeddings:
        p_hat, p_norm = _normalize_rows(p)
        z_hat, _ = _normalize_rows(z)
    else:
        p_hat, p_norm = p, np.ones((p.shape[0], 1))
        z_hat = z
    sim = np.exp(p_hat @ z_hat.T / cfg.temperature)
    mask = (labels[:, None] == labels[None, :]).astype(np.float64)
    num = (mask * sim).sum(axis=1)
    den = sim.sum(axis=1)
    return p_hat, p_norm, z_hat, sim, mask, num, den


def positive_pair_loss(p, z, labels, cfg=None):
    """Mean over anchors of -log(same-label similarity mass / total mass).

    Self-pairs sit on the mask diagonal, so every anchor has at least one
    positive. A batch of one is 0 by convention.
    """
    cfg = cfg or LossConfig()
    if np.asarray(p).shape[0] < 2:
        return 0.0
    _, _, _, _, _, num, den = _pair_terms(p, z, labels, cfg)
    return float(-np.mean(np.log(num / den)))


def positive_pair_loss_grad(p, z, labels, cfg=None):
    """Returns (loss, d loss / d p); z is a constant by contract."""
    cfg = cfg or LossConfig()
    p = np.asarray(p, dtype=np.float64)
    if p.shape[0] < 2:
        return 0.0, np.zeros_like(p)
    b = p.shape[0]
    p_hat, p_norm, z_hat, sim, mask, num, den = _pair_terms(p, z, labels, cfg)
    loss = float(-np.mean(np.log(num / den)))
    # dL/dS_ij = -(1/B) (M_ij / num_i - 1 / den_i); dS_ij/dp_hat_i = S_ij z_hat_j / tau
    dsim = -(mask / num[:, None] - 1.0 / den[:, None]) / b
    dp_hat = (dsim * sim) @ z_hat / cfg.temperature
    if cfg.normalize_embeddings:
        # Through row normalization: dp = (dp_hat - p_hat (p_hat . dp_hat)) / |p|
        dp = (dp_hat - p_hat * (p_hat * dp_hat).sum(axis=1, keepdims=True)) / p_norm
    else:
        dp = dp_hat
    return loss, dp


def claad_loss(p1, z2, p2, z1, labels, cfg=None):
    """Symmetric average of the two cross-path positive-pair losses."""
    cfg = cfg or LossConfig()
    return 0.5 * (
        positive_pair_loss(p1, z2, labels, cfg) + positive_pair_loss(p2, z1, labels, cfg)
    )


def claad_loss_grad(p1, z2, p2, z1, labels, cfg=None):
    """Returns (loss, d/dp1, d/dp2); both z inputs are constants."""
    cfg = cfg or LossConfig()
    loss1, dp1 = positive_pair_loss_grad(p1, z2, labels, cfg)
    loss2, dp2 = positive_pair_loss_grad(p2, z1, labels, cfg)
    return 0.5 * (loss1 + loss2), 0.5 * dp1, 0.5 * dp2
