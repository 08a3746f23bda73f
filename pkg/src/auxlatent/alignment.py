"""Supervised loss algebra for the latent curriculum."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch

from . import numkernel as nk

logger = logging.getLogger(__name__)

STAGE2_CE_WEIGHT = 0.1


@dataclass
class AlignWeights:
    cos: float = 1.0
    mse: float = 1.0
    stage: float = 2.0

    def __post_init__(self):
        if self.cos < 0 or self.mse < 0:
            raise ValueError("alignment weights must be non-negative")
        if self.cos == 0 and self.mse == 0:
            raise ValueError("cos and mse weights cannot both be zero")


def align_loss(h_gen: torch.Tensor, h_target: torch.Tensor, w: AlignWeights | None = None) -> torch.Tensor:
    """``cos * (1 - mean row cosine) + mse * mean squared error`` over (..., K, D)."""
    w = w or AlignWeights()
    if h_gen.shape != h_target.shape:
        raise nk.ShapeError(f"align_loss: shape mismatch {tuple(h_gen.shape)} vs {tuple(h_target.shape)}")
    cos = nk.row_cosine(h_gen, h_target).mean()
    return w.cos * (1 - cos) + w.mse * nk.mse(h_gen, h_target)


def consistency_loss(h_txt: torch.Tensor, h_img: torch.Tensor) -> torch.Tensor:
    """Pull the plan-only latents toward the image-conditioned ones.

    ``h_img`` is detached, so no gradient reaches the image stream.
    """
    if h_txt.shape != h_img.shape:
        raise nk.ShapeError(f"consistency_loss: shape mismatch {tuple(h_txt.shape)} vs {tuple(h_img.shape)}")
    return 1 - nk.row_cosine(h_txt, h_img.detach()).mean()


def stage2_loss(ce, sim_img, sim_txt, cons):
    return STAGE2_CE_WEIGHT * ce + sim_img + sim_txt + cons


def stage3_ce(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over positions where ``mask`` is true.

    ``logits[..., t, :]`` predicts ``targets[..., t]``; callers shift.
    """
    if logits.shape[:-1] != targets.shape or targets.shape != mask.shape:
        raise nk.ShapeError(
            f"stage3_ce: shapes {tuple(logits.shape)}, {tuple(targets.shape)}, {tuple(mask.shape)} disagree")
    mask = mask.to(torch.bool)
    if not bool(mask.any()):
        raise ValueError("stage3_ce: no unmasked positions")
    logp = nk.log_softmax(logits)
    nll = -logp.gather(-1, targets.long().unsqueeze(-1)).squeeze(-1)
    return nll[mask].mean()
