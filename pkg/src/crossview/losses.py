"""Adversarial, L1 and composite objectives for every training method."""

from __future__ import annotations

from dataclasses import dataclass, fields

import torch

REAL_SMOOTH = 0.9
LOG_FLOOR = -100.0  # same clamp as torch's BCELoss
LOG_COLUMNS = ("step", "adv_d", "adv_g", "l1_img", "l1_seg", "total")


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 100.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


PIX2PIX_WEIGHTS = LossWeights(1.0, 100.0)
REALISM_WEIGHTS = LossWeights(5.0, 2.0)


@dataclass
class LossReport:
    adv_g: torch.Tensor
    l1_img: torch.Tensor
    total: torch.Tensor
    l1_seg: torch.Tensor | float = 0.0
    adv_d: torch.Tensor | float = 0.0

    def row(self, step: int) -> dict:
        vals = {f.name: float(torch.as_tensor(getattr(self, f.name)).detach()) for f in fields(self)}
        return {"step": step, **{k: vals[k] for k in LOG_COLUMNS[1:]}}


def _check_scores(*scores):
    for s in scores:
        if torch.any(s < 0) or torch.any(s > 1) or torch.any(torch.isnan(s)):
            raise ValueError("discriminator scores must lie in [0, 1]")


def _log(x):
    return torch.clamp(torch.log(x), min=LOG_FLOOR)


def bce(scores, target: float):
    return -(target * _log(scores) + (1 - target) * _log(1 - scores)).mean()


def adv_loss_d(real_scores, fake_scores, smooth: float = REAL_SMOOTH):
    """Discriminator loss with one-sided label smoothing on the real term."""
    _check_scores(real_scores, fake_scores)
    return bce(real_scores, smooth) + bce(fake_scores, 0.0)


def adv_loss_g(fake_scores):
    """Non-saturating generator loss ``-mean log D(fake)``."""
    _check_scores(fake_scores)
    return -_log(fake_scores).mean()


def l1_loss(x, y, mask=None):
    """Mean absolute difference, over the support of ``mask`` when given."""
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")
    diff = (x - y).abs()
    if mask is None:
        return diff.mean()
    m = torch.as_tensor(mask, dtype=diff.dtype, device=diff.device).expand_as(diff)
    n = m.sum()
    if n <= 0:
        raise ValueError("mask has empty support")
    return (diff * m).sum() / n


def network_objective(d_scores, out, target, w: LossWeights = PIX2PIX_WEIGHTS, mask=None) -> LossReport:
    """Weighted adversarial plus L1 objective of a single cGAN."""
    adv = adv_loss_g(d_scores)
    l1 = l1_loss(out, target, mask)
    return LossReport(adv_g=adv, l1_img=l1, total=w.lambda1 * adv + w.lambda2 * l1)


def fork_objective(d_scores, img, img_true, seg, seg_true, w: LossWeights = PIX2PIX_WEIGHTS) -> LossReport:
    """Adversarial term on the image head only; L1 on both heads."""
    adv = adv_loss_g(d_scores)
    l1_img = l1_loss(img, img_true)
    l1_seg = l1_loss(seg, seg_true)
    total = w.lambda1 * adv + w.lambda2 * l1_img + w.lambda2 * l1_seg
    return LossReport(adv_g=adv, l1_img=l1_img, l1_seg=l1_seg, total=total)


def stacked_objective(d_scores, out6, img_true, seg_true, w: LossWeights = PIX2PIX_WEIGHTS) -> LossReport:
    """Single cGAN objective over a 6-channel (image, segmap) output.

    The six-channel L1 mean equals the average of the two three-channel means.
    """
    adv = adv_loss_g(d_scores)
    l1_img = l1_loss(out6[:, :3], img_true)
    l1_seg = l1_loss(out6[:, 3:], seg_true)
    total = w.lambda1 * adv + w.lambda2 * 0.5 * (l1_img + l1_seg)
    return LossReport(adv_g=adv, l1_img=l1_img, l1_seg=l1_seg, total=total)


def seq_objective(stage1: LossReport, stage2: LossReport) -> LossReport:
    """Sum of two full cGAN objectives; stage 2 conditions on the stage-1 image."""
    return LossReport(
        adv_g=stage1.adv_g + stage2.adv_g,
        l1_img=stage1.l1_img,
        l1_seg=stage2.l1_img,
        total=stage1.total + stage2.total,
    )


def realism_objective(out, composite_in, d_scores, band_mask, w: LossWeights = REALISM_WEIGHTS) -> LossReport:
    """Adversarial realism everywhere; pixels outside the seam bands copy the composite."""
    keep = 1.0 - torch.as_tensor(band_mask, dtype=out.dtype, device=out.device)
    adv = adv_loss_g(d_scores)
    l1 = l1_loss(out, composite_in, keep)
    return LossReport(adv_g=adv, l1_img=l1, total=w.lambda1 * adv + w.lambda2 * l1)
