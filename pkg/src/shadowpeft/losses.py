"""Focal loss for the imbalanced shadow / non-shadow pixel distribution."""

from dataclasses import dataclass

import torch

from .errors import ConfigError, RequestError

EPS = 1e-6


@dataclass(frozen=True)
class FocalParams:
    alpha: float = 8.0 / 9.0
    gamma: float = 2.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0,1)")
        if self.gamma < 0.0:
            raise ConfigError("gamma must be >= 0")


def focal_loss(pred, target, params: FocalParams):
    """Mean focal loss over all pixels.

    ``pred`` holds probabilities in (0,1), ``target`` binary labels of the
    same shape. Predictions are clamped to [EPS, 1-EPS] so the loss stays
    finite.
    """
    if pred.shape != target.shape:
        raise RequestError(
            f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}"
        )
    p = pred.clamp(EPS, 1.0 - EPS)
    t = target.to(p.dtype)
    pos = -params.alpha * (1.0 - p) ** params.gamma * torch.log(p)
    neg = -(1.0 - params.alpha) * p ** params.gamma * torch.log(1.0 - p)
    return torch.where(t > 0.5, pos, neg).mean()
