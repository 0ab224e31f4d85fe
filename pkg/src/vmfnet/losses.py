"""Soft Dice and L1 reconstruction losses."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import InvalidLabelError, ShapeError

DICE_EPS = 1e-6


def one_hot(labels: torch.Tensor, num_channels: int) -> torch.Tensor:
    """``[N, H, W]`` integer labels -> ``[N, C, H, W]`` float one-hot."""
    if labels.min() < 0 or labels.max() >= num_channels:
        raise InvalidLabelError(f"labels must lie in [0, {num_channels - 1}]")
    return F.one_hot(labels.long(), num_channels).permute(0, 3, 1, 2).to(torch.get_default_dtype())


def _check_one_hot(truth: torch.Tensor) -> None:
    binary = ((truth == 0) | (truth == 1)).all()
    if not binary or not torch.all(truth.sum(dim=1) == 1):
        raise InvalidLabelError("truth must be one-hot along the channel axis")


def dice_loss(
    pred: torch.Tensor, truth: torch.Tensor, reduction: str = "mean", eps: float = DICE_EPS
) -> torch.Tensor:
    """Soft Dice loss of Milletari et al., one value per sample.

    ``1 - mean_c (2 sum p t + eps) / (sum p^2 + sum t^2 + eps)`` with the
    sums taken over the spatial axes of each sample. ``reduction="none"``
    returns the ``[N]`` vector; ``"mean"`` averages it.
    """
    if pred.shape != truth.shape or pred.dim() != 4:
        raise ShapeError(f"pred {tuple(pred.shape)} and truth {tuple(truth.shape)} must match as [N, C, H, W]")
    _check_one_hot(truth)
    inter = (pred * truth).sum(dim=(2, 3))
    denom = (pred * pred).sum(dim=(2, 3)) + (truth * truth).sum(dim=(2, 3))
    per_sample = 1.0 - ((2 * inter + eps) / (denom + eps)).mean(dim=1)
    if reduction == "none":
        return per_sample
    if reduction == "mean":
        return per_sample.mean()
    raise ValueError(f"unknown reduction {reduction!r}")


def reconstruction_loss(x: torch.Tensor, x_hat: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Mean absolute error; ``reduction="none"`` gives one value per sample."""
    if x.shape != x_hat.shape:
        raise ShapeError(f"x {tuple(x.shape)} and x_hat {tuple(x_hat.shape)} differ")
    err = (x - x_hat).abs()
    if reduction == "none":
        return err.flatten(1).mean(dim=1)
    if reduction == "mean":
        return err.mean()
    raise ValueError(f"unknown reduction {reduction!r}")
