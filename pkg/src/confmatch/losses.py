"""Supervision terms and their analytic gradients.

Four components: focal losses on the coarse and fine probability matrices,
a masked L2 loss on the sub-pixel refinement offsets, and binary
cross-entropy on the confidence maps.  Every differentiable loss has a
closed-form gradient that is checked against central finite differences.

Reductions use compensated summation (math.fsum) so results are
independent of element order.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import matching
from .config import RunConfig
from .geometry import (
    Homography,
    build_coarse_gt,
    build_conf_gt,
    build_correspondence_field,
    build_patch_assignment,
    warp_points,
)


@dataclass(frozen=True)
class FocalConfig:
    alpha_focal: float = 0.25
    gamma_focal: float = 2.0
    clamp_eps: float = 1e-6

    def __post_init__(self):
        if not 0.0 < self.alpha_focal < 1.0:
            raise ValueError("alpha_focal must be in (0, 1)")
        if self.gamma_focal < 0.0:
            raise ValueError("gamma_focal must be >= 0")
        if self.clamp_eps <= 0.0:
            raise ValueError("clamp_eps must be > 0")


@dataclass(frozen=True)
class LossBreakdown:
    l_c: float
    l_f: float
    l_s: float
    l_m: float
    beta: float
    total: float


def _fmean(values):
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        return 0.0
    return math.fsum(values.tolist()) / values.size


def _check_binary(gt, name):
    gt = np.asarray(gt)
    if not np.isin(gt, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return gt.astype(bool)


def focal_loss(p, p_gt, cfg: FocalConfig = FocalConfig()) -> float:
    """Mean focal term over positive cells plus mean over negative cells.

    Probabilities are clamped to [eps, 1-eps] before the logs.
    """
    p = np.asarray(p, dtype=np.float64)
    gt = np.asarray(p_gt)
    if p.shape != gt.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {gt.shape}")
    pos = _check_binary(gt, "p_gt")
    pc = np.clip(p, cfg.clamp_eps, 1.0 - cfg.clamp_eps)
    a, g = cfg.alpha_focal, cfg.gamma_focal
    pos_terms = -a * (1.0 - pc[pos]) ** g * np.log(pc[pos])
    neg_terms = -(1.0 - a) * pc[~pos] ** g * np.log(1.0 - pc[~pos])
    return _fmean(pos_terms) + _fmean(neg_terms)


def focal_grad(p, p_gt, cfg: FocalConfig = FocalConfig()):
    """d focal_loss / d p; zero where the clamp is active."""
    p = np.asarray(p, dtype=np.float64)
    pos = _check_binary(p_gt, "p_gt")
    pc = np.clip(p, cfg.clamp_eps, 1.0 - cfg.clamp_eps)
    a, g = cfg.alpha_focal, cfg.gamma_focal
    n_pos = max(int(pos.sum()), 1)
    n_neg = max(int((~pos).sum()), 1)
    grad = np.where(
        pos,
        (a * g * (1.0 - pc) ** (g - 1.0) * np.log(pc) - a * (1.0 - pc) ** g / pc)
        / n_pos,
        (
            -(1.0 - a) * g * pc ** (g - 1.0) * np.log(1.0 - pc)
            + (1.0 - a) * pc ** g / (1.0 - pc)
        )
        / n_neg,
    )
    inside = (p > cfg.clamp_eps) & (p < 1.0 - cfg.clamp_eps)
    return np.where(inside, grad, 0.0)


def subpixel_loss(pred, gt, epsilon: float):
    """Masked mean squared offset error.

    Only entries whose ground-truth offset has infinity-norm below `epsilon`
    (i.e. targets inside the refinement window) contribute.  Returns
    (value, in_mask_count); an empty mask yields (0.0, 0).
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt must have equal length")
    mask = np.abs(gt).max(axis=1) < epsilon
    count = int(mask.sum())
    if count == 0:
        return 0.0, 0
    sq = ((pred[mask] - gt[mask]) ** 2).sum(axis=1)
    return math.fsum(sq.tolist()) / count, count


def subpixel_grad(pred, gt, epsilon: float):
    """d subpixel_loss / d pred: 2 (pred - gt) / |mask| on masked rows."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    mask = np.abs(gt).max(axis=1) < epsilon
    count = max(int(mask.sum()), 1)
    return np.where(mask[:, None], 2.0 * (pred - gt) / count, 0.0)


def _bce_mean(w, target, eps):
    wc = np.clip(np.asarray(w, dtype=np.float64), eps, 1.0 - eps)
    t = np.asarray(target, dtype=np.float64)
    return _fmean(-(t * np.log(wc) + (1.0 - t) * np.log(1.0 - wc)))


def confidence_loss(w1, w2, target1, target2, clamp_eps: float = 1e-6) -> float:
    """Mean binary cross-entropy per confidence map, averaged over the two maps."""
    _check_binary(target1, "target1")
    _check_binary(target2, "target2")
    return 0.5 * (_bce_mean(w1, target1, clamp_eps) + _bce_mean(w2, target2, clamp_eps))


def confidence_grad(w, target, clamp_eps: float = 1e-6):
    """Gradient of confidence_loss with respect to one of its two maps."""
    w = np.asarray(w, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    wc = np.clip(w, clamp_eps, 1.0 - clamp_eps)
    grad = (-(t / wc) + (1.0 - t) / (1.0 - wc)) / w.size
    inside = (w > clamp_eps) & (w < 1.0 - clamp_eps)
    return np.where(inside, grad, 0.0) * 0.5


def total_loss(l_c, l_f, l_s, l_m, beta) -> LossBreakdown:
    """Weighted combination; the breakdown keeps every component."""
    total = l_c + l_f + l_s + beta * l_m
    return LossBreakdown(
        l_c=float(l_c),
        l_f=float(l_f),
        l_s=float(l_s),
        l_m=float(l_m),
        beta=float(beta),
        total=float(total),
    )


def grad_check(value_fn, grad_fn, x, h: float = 1e-5) -> float:
    """Max relative error between grad_fn(x) and central finite differences."""
    if not 1e-6 <= h <= 1e-3:
        raise ValueError("h must be within [1e-6, 1e-3]")
    x = np.asarray(x, dtype=np.float64)
    analytic = np.asarray(grad_fn(x), dtype=np.float64)
    if not np.isfinite(analytic).all():
        raise FloatingPointError("analytic gradient is not finite")
    numeric = np.empty_like(analytic)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        numeric[idx] = (value_fn(xp) - value_fn(xm)) / (2.0 * h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float((np.abs(analytic - numeric) / denom).max(initial=0.0))


def pair_loss_report(
    img1,
    img2,
    h_pixels: Homography,
    cfg: RunConfig,
    weights: "matching.PipelineWeights | None" = None,
    focal_cfg: FocalConfig = FocalConfig(),
) -> dict:
    """Run the pipeline on one pair and score every supervision term
    against homography-derived ground truth."""
    state = matching.run_pipeline(img1, img2, cfg, weights, keep_probs=True)
    st1 = state.stage1

    hc, wc = state.pyr1.coarse_grid
    field = build_correspondence_field(h_pixels.rescaled(8.0), wc, hc)
    pc_gt = build_coarse_gt(field)
    l_c = focal_loss(state.pc, pc_gt, focal_cfg)

    t1, t2 = build_conf_gt(pc_gt)
    l_m = confidence_loss(state.conf1, state.conf2, t1, t2)

    h_fine = h_pixels.rescaled(2.0)
    n_coarse = len(state.coarse_pairs)
    if n_coarse:
        pf_gt = np.stack(
            [
                build_patch_assignment(h_fine, st1.starts1[m], st1.starts2[m], cfg.window)
                for m in range(n_coarse)
            ]
        )
        l_f = focal_loss(st1.probs, pf_gt, focal_cfg)
    else:
        l_f = 0.0

    if len(st1.src):
        src_centers = st1.src[:, ::-1] + 0.5  # (x, y) fine units
        tgt_centers = st1.tgt[:, ::-1] + 0.5
        gt_offsets = warp_points(h_fine, src_centers) - tgt_centers
        l_s, in_mask = subpixel_loss(state.stage2.deltas, gt_offsets, cfg.epsilon)
    else:
        l_s, in_mask = 0.0, 0

    beta_eff = cfg.beta if cfg.flags.supervise_confidence else 0.0
    breakdown = total_loss(l_c, l_f, l_s, l_m, beta_eff)
    return {
        "l_c": breakdown.l_c,
        "l_f": breakdown.l_f,
        "l_s": breakdown.l_s,
        "l_m": breakdown.l_m,
        "beta": breakdown.beta,
        "total": breakdown.total,
        "n_coarse_matches": int(n_coarse),
        "n_fine_matches": int(len(st1.src)),
        "subpixel_mask_count": int(in_mask),
        "subpixel_mask_empty": bool(len(st1.src) and in_mask == 0),
    }
