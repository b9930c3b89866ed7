"""Segmentation, consistency and adversarial losses and their weighted total."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch

from .errors import NumericError

CLAMP = 1e-12
CONSIST_MODES = ("rms", "l2-sum", "mse")


@dataclass
class LossBundle:
    seg: float
    consist: float
    adv: float
    total: float
    lambda_adv: float

    def as_dict(self):
        return asdict(self)


def _cross_entropy(probs: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    # per-sample mean over pixels of -log p[y]
    picked = probs.gather(1, y[:, None].long()).squeeze(1)
    return -torch.log(picked.clamp_min(CLAMP)).flatten(1).mean(dim=1)


def _check_labels(y: torch.Tensor, num_classes: int) -> None:
    bad = (y < 0) | (y >= num_classes)
    if bool(bad.any()):
        idx = bad.nonzero()[0].tolist()
        raise ValueError(
            f"label {int(y[tuple(idx)])} at pixel (sample {idx[0]}, row {idx[1]}, col {idx[2]}) "
            f"is outside [0, {num_classes})"
        )


def seg_loss(p_seg: torch.Tensor, p_seg_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of the two paths' averaged pixel-wise cross-entropy.

    ``p_seg``/``p_seg_hat`` are probabilities shaped ``[N, C, H, W]``; ``y`` is ``[N, H, W]``.
    """
    if p_seg.shape != p_seg_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(p_seg.shape)} vs {tuple(p_seg_hat.shape)}")
    _check_labels(y, p_seg.shape[1])
    ce = (_cross_entropy(p_seg, y) + _cross_entropy(p_seg_hat, y)) / 2
    return ce.mean()


def consist_loss(p_seg: torch.Tensor, p_seg_hat: torch.Tensor, mode: str = "rms") -> torch.Tensor:
    """Batch mean of the per-sample distance between the two predictions.

    ``rms`` divides each sample's Euclidean norm by sqrt(#entries), ``l2-sum``
    is the plain norm and ``mse`` the mean squared difference.
    """
    if p_seg.shape != p_seg_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(p_seg.shape)} vs {tuple(p_seg_hat.shape)}")
    diff = (p_seg - p_seg_hat).flatten(1)
    sq = (diff * diff).sum(dim=1)
    if mode == "mse":
        return (sq / diff.shape[1]).mean()
    # sqrt has an infinite derivative at 0; identical predictions get a zero gradient instead
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    norm = torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq))
    if mode == "l2-sum":
        return norm.mean()
    if mode == "rms":
        return (norm / math.sqrt(diff.shape[1])).mean()
    raise ValueError(f"unknown consistency mode {mode!r}; expected one of {CONSIST_MODES}")


def adv_loss(p_c: torch.Tensor, p_c_hat: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy: original features labelled 1, perturbed labelled 0."""
    p_c = p_c.clamp(CLAMP, 1 - CLAMP)
    p_c_hat = p_c_hat.clamp(CLAMP, 1 - CLAMP)
    return -torch.log(p_c).mean() - torch.log(1 - p_c_hat).mean()


def total_loss(seg, consist, adv, lambda_adv: float = 0.2):
    """Return ``(total, bundle)`` with ``total = seg + consist + lambda_adv * adv``.

    Components may be tensors (the returned total keeps the graph) or floats.
    """
    if lambda_adv < 0:
        raise ValueError(f"lambda_adv must be >= 0, got {lambda_adv}")
    values = {}
    for name, term in (("seg", seg), ("consist", consist), ("adv", adv)):
        v = float(term.detach()) if torch.is_tensor(term) else float(term)
        if not math.isfinite(v):
            raise NumericError(f"loss term {name!r} is not finite ({v})")
        values[name] = v
    total = seg + consist + lambda_adv * adv
    bundle = LossBundle(
        seg=values["seg"],
        consist=values["consist"],
        adv=values["adv"],
        total=values["seg"] + values["consist"] + lambda_adv * values["adv"],
        lambda_adv=lambda_adv,
    )
    return total, bundle
