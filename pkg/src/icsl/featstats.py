"""Channel-wise style statistics and style randomization over feature maps.

A feature map is a tensor shaped ``[D, H, W]`` or a batch ``[N, D, H, W]``.
Statistics are always taken over the two trailing (spatial) axes, so every
function here accepts either layout.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import ConfigError, NumericError

__all__ = [
    "StyleStats",
    "SirConfig",
    "compute_style_stats",
    "mix_style_stats",
    "apply_style",
    "sir_perturb",
]


@dataclass
class StyleStats:
    """Per-channel mean and standard deviation, shaped ``[D]`` or ``[N, D]``."""

    mu: torch.Tensor
    sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape:
            raise ValueError(
                f"mu and sigma shapes differ: {tuple(self.mu.shape)} vs {tuple(self.sigma.shape)}"
            )

    @property
    def channels(self) -> int:
        return self.mu.shape[-1]


@dataclass
class SirConfig:
    enabled: bool = True
    epsilon: float = 1e-5
    lambda_mode: str = "uniform"  # uniform | fixed
    lambda_fixed: float = 0.5
    per_sample: bool = True
    detach_partner: bool = False

    def validate(self) -> None:
        if not self.epsilon > 0:
            raise ConfigError(f"sir.epsilon must be > 0, got {self.epsilon}")
        if self.lambda_mode not in ("uniform", "fixed"):
            raise ConfigError(f"sir.lambda_mode must be 'uniform' or 'fixed', got {self.lambda_mode!r}")
        if not 0.0 <= self.lambda_fixed <= 1.0:
            raise ConfigError(f"sir.lambda_fixed must lie in [0, 1], got {self.lambda_fixed}")


def _check_feature(f: torch.Tensor) -> None:
    if f.dim() not in (3, 4):
        raise ValueError(f"expected a [D,H,W] or [N,D,H,W] feature map, got shape {tuple(f.shape)}")
    if min(f.shape) < 1:
        raise ValueError(f"feature map has an empty axis: {tuple(f.shape)}")


def compute_style_stats(f: torch.Tensor, epsilon: float = 1e-5) -> StyleStats:
    """Spatial mean and ``sqrt(biased variance + epsilon)`` for every channel."""
    _check_feature(f)
    finite = torch.isfinite(f).flatten(-2).all(dim=-1)
    if not bool(finite.all()):
        bad = (~finite).nonzero()[0].tolist()
        where = f"sample {bad[0]}, channel {bad[1]}" if len(bad) == 2 else f"channel {bad[0]}"
        raise NumericError(f"non-finite activation in feature map at {where}")
    flat = f.flatten(-2)
    mu = flat.mean(dim=-1)
    var = flat.var(dim=-1, unbiased=False)
    return StyleStats(mu=mu, sigma=torch.sqrt(var + epsilon))


def mix_style_stats(a: StyleStats, b: StyleStats, lambda_style) -> StyleStats:
    """Convex combination ``lambda * a + (1 - lambda) * b``.

    ``lambda_style`` is a float or a tensor of per-sample weights shaped ``[N]``.
    """
    if a.mu.shape != b.mu.shape:
        raise ValueError(
            f"style stats dimension mismatch: {tuple(a.mu.shape)} vs {tuple(b.mu.shape)}"
        )
    lam = torch.as_tensor(lambda_style, dtype=a.mu.dtype, device=a.mu.device)
    if bool(((lam < 0) | (lam > 1)).any()):
        raise ValueError(f"lambda_style must lie in [0, 1], got {lam.tolist()}")
    if lam.dim() == 1 and a.mu.dim() == 2:
        lam = lam[:, None]
    if bool((lam == 1).all()):
        return StyleStats(a.mu, a.sigma)
    if bool((lam == 0).all()):
        return StyleStats(b.mu, b.sigma)
    return StyleStats(
        mu=lam * a.mu + (1 - lam) * b.mu,
        sigma=lam * a.sigma + (1 - lam) * b.sigma,
    )


def apply_style(f: torch.Tensor, own: StyleStats, target: StyleStats) -> torch.Tensor:
    """Whiten ``f`` with its own statistics and re-colour it with ``target``."""
    _check_feature(f)
    if own.mu.shape != f.shape[:-2] or target.mu.shape != f.shape[:-2]:
        raise ValueError(
            f"stats shaped {tuple(own.mu.shape)}/{tuple(target.mu.shape)} do not match "
            f"feature map {tuple(f.shape)}"
        )
    if bool((own.sigma <= 0).any()):
        raise NumericError("own.sigma must be strictly positive")
    normed = (f - own.mu[..., None, None]) / own.sigma[..., None, None]
    return normed * target.sigma[..., None, None] + target.mu[..., None, None]


def _draw_lambdas(n: int, config: SirConfig, generator: Optional[torch.Generator], dtype) -> torch.Tensor:
    if config.lambda_mode == "fixed":
        return torch.full((n,), float(config.lambda_fixed), dtype=dtype)
    if config.per_sample:
        return torch.rand(n, generator=generator, dtype=dtype)
    return torch.rand(1, generator=generator, dtype=dtype).expand(n).clone()


def sir_perturb(
    batch: torch.Tensor,
    config: SirConfig,
    generator: Optional[torch.Generator] = None,
    perm: Optional[torch.Tensor] = None,
    lambdas: Optional[torch.Tensor] = None,
):
    """Style-randomize a batch ``[N, D, H, W]`` of feature maps.

    Each sample is paired with a partner drawn by a uniformly random
    permutation of the batch (self-pairing is allowed) and its statistics are
    mixed with the partner's.  Returns ``(perturbed, lambdas)``; ``perm`` and
    ``lambdas`` can be given to force the pairing and the weights.
    """
    if batch.dim() != 4:
        raise ValueError(f"sir_perturb expects [N,D,H,W], got {tuple(batch.shape)}")
    n = batch.shape[0]
    if not config.enabled:
        return batch, torch.ones(n, dtype=batch.dtype)
    if n < 2:
        raise ValueError("style randomization needs a batch of at least 2 samples")
    config.validate()

    stats = compute_style_stats(batch, config.epsilon)
    if perm is None:
        perm = torch.randperm(n, generator=generator)
    if lambdas is None:
        lambdas = _draw_lambdas(n, config, generator, batch.dtype)

    partner_mu, partner_sigma = stats.mu[perm], stats.sigma[perm]
    if config.detach_partner:
        partner_mu, partner_sigma = partner_mu.detach(), partner_sigma.detach()
    mixed = mix_style_stats(stats, StyleStats(partner_mu, partner_sigma), lambdas)
    return apply_style(batch, stats, mixed), lambdas
