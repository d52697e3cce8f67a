"""Group weighting: GroupDRO updates and collaborative (contribution-driven) updates.

Weights are plain 1-D arrays on the probability simplex, one entry per group.
Losses and contributions use NaN for groups absent from the current batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .losses import GRAD_FLOOR, EpochGradientAccumulator, SharpnessResult, SparseGrad

_logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class BalanceConfig:
    eta: float = 1.0
    gamma: float = 1.0
    rho: float = 0.0
    alpha: float = 1.0
    beta_source: str = "sharp"

    def __post_init__(self):
        vals = (self.eta, self.gamma, self.rho, self.alpha)
        if not np.all(np.isfinite(vals)):
            raise ValueError("balance hyperparameters must be finite")
        if self.gamma < 0 or self.rho < 0 or self.alpha <= 0 or self.eta < 0:
            raise ValueError("need gamma >= 0, rho >= 0, alpha > 0, eta >= 0")
        if self.beta_source not in ("sharp", "plain"):
            raise ValueError("beta_source must be 'sharp' or 'plain'")


@dataclass(eq=False)
class ContributionVector:
    total: np.ndarray
    pairwise: np.ndarray
    beta: np.ndarray


def uniform_weights(n_groups: int) -> np.ndarray:
    return np.full(n_groups, 1.0 / n_groups)


def _exp_update(w, scores, present, eta):
    # absent groups get exponent 0: their raw mass is kept, then all renormalize
    z = np.where(present, eta * np.nan_to_num(scores), 0.0)
    z = z - z.max()
    new = w * np.exp(z)
    return new / new.sum()


def update_weights(w, C, present, eta: float) -> np.ndarray:
    """Multiplicative update of ``w`` by total contributions ``C``."""
    return _exp_update(np.asarray(w, float), np.asarray(C, float), np.asarray(present, bool), eta)


def groupdro_update(w, losses, present, eta: float) -> np.ndarray:
    """Exponentiated-gradient GroupDRO step on group losses."""
    return _exp_update(np.asarray(w, float), np.asarray(losses, float), np.asarray(present, bool), eta)


def mixing_weights(w, present, counts=None) -> np.ndarray:
    """``w`` renormalized over the groups present in the batch (0 elsewhere).

    With ``counts``, each group's weight is scaled by its triple count first,
    so uniform ``w`` reproduces the plain batch-mean loss.
    """
    present = np.asarray(present, bool)
    if not present.any():
        raise ValueError("empty batch")
    mw = np.where(present, w, 0.0)
    if counts is not None:
        mw = mw * np.asarray(counts, float)
    return mw / mw.sum()


def combine_losses(w, lhat, present) -> float:
    mw = mixing_weights(w, present)
    return float(np.sum(mw[present] * np.asarray(lhat, float)[present]))


def beta_weights(losses, gamma: float) -> np.ndarray:
    """``L^gamma`` normalized over groups with a defined loss; 0 for undefined."""
    losses = np.asarray(losses, float)
    defined = ~np.isnan(losses)
    out = np.zeros_like(losses)
    if not defined.any():
        return out
    if gamma == 0:
        out[defined] = 1.0 / defined.sum()
        return out
    powered = losses[defined] ** gamma
    total = powered.sum()
    if not total > 0:
        _logger.warning("all group losses are zero; beta falls back to uniform")
        out[defined] = 1.0 / defined.sum()
        return out
    out[defined] = powered / total
    return out


def pairwise_contribution(grad_pq: SparseGrad, lhat_pq: float, accum_user, accum_item,
                          lbar_ab: float, alpha: float = 1.0, accum_norm=None) -> float:
    """First-order contribution of one group's step to another group's loss.

    Both gradients are replaced by ``sqrt(loss) * unit direction``, so the
    value is ``alpha * sqrt(lhat_pq * lbar_ab) * cos(grad_pq, accum_ab)``.
    """
    g_norm = grad_pq.norm()
    if accum_norm is None:
        accum_norm = float(np.sqrt(np.sum(accum_user ** 2) + np.sum(accum_item ** 2)))
    if g_norm <= GRAD_FLOOR or accum_norm <= GRAD_FLOOR:
        return 0.0
    cos = np.clip(grad_pq.dot_dense(accum_user, accum_item) / (g_norm * accum_norm), -1.0, 1.0)
    return float(alpha * np.sqrt(lhat_pq) * np.sqrt(lbar_ab) * cos)


def total_contributions(result: SharpnessResult, acc: EpochGradientAccumulator,
                        cfg: BalanceConfig) -> ContributionVector:
    if not acc.has_last:
        raise RuntimeError("no completed epoch to estimate contributions from")
    G = len(result.sharp_loss)
    lbar = acc.last_sharp_mean
    beta_src = lbar if cfg.beta_source == "sharp" else acc.last_plain_mean
    beta = beta_weights(beta_src, cfg.gamma)
    usable = ~np.isnan(lbar) & (acc.last_norm > GRAD_FLOOR)

    pairwise = np.zeros((G, G))
    for g in np.flatnonzero(result.present):
        grad = result.grads[g]
        g_norm = grad.norm()
        if g_norm <= GRAD_FLOOR:
            continue
        dots = (np.einsum("gkd,kd->g", acc.last_user[:, grad.user_rows], grad.user_grad)
                + np.einsum("gkd,kd->g", acc.last_item[:, grad.item_rows], grad.item_grad))
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.clip(dots / (g_norm * acc.last_norm), -1.0, 1.0)
            pc = cfg.alpha * np.sqrt(result.sharp_loss[g]) * np.sqrt(lbar) * cos
        pairwise[g] = np.where(usable, pc, 0.0)
    total = pairwise @ beta
    return ContributionVector(total, pairwise, beta)
