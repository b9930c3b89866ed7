"""Segmentation network contract, style classifier and gradient reversal.

The segmentation network is split into three pieces so style randomization can
be inserted after the first ("bottom") encoder stage:

    image --encoder_bottom--> f --encoder_top--> deep --decoder(deep, f)--> logits

Any backbone that provides these three modules can be registered with
:func:`register_backbone`; a small strided-convolution network ships as the
``"tiny"`` reference backbone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, NamedTuple, Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError
from .featstats import SirConfig, sir_perturb


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, coefficient):
        ctx.coefficient = coefficient
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return -ctx.coefficient * grad_output, None


def reverse_gradient(x: torch.Tensor, coefficient: float = 1.0) -> torch.Tensor:
    """Identity on the forward pass; scales gradients by ``-coefficient`` on the way back."""
    if coefficient < 0:
        raise ValueError(f"gradient reversal coefficient must be >= 0, got {coefficient}")
    return _ReverseGrad.apply(x, float(coefficient))


class GradientReversal(nn.Module):
    def __init__(self, coefficient: float = 1.0):
        super().__init__()
        if coefficient < 0:
            raise ValueError(f"gradient reversal coefficient must be >= 0, got {coefficient}")
        self.coefficient = coefficient

    def forward(self, x):
        return reverse_gradient(x, self.coefficient)

    def extra_repr(self):
        return f"coefficient={self.coefficient}"


class StyleClassifier(nn.Module):
    """Original-vs-perturbed discriminator on a feature map.

    Global average pooling, batch norm, ReLU, a 1x1 convolution down to one
    logit and a logistic output, so scores lie in (0, 1) for any spatial size.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.norm = nn.BatchNorm2d(channels)
        self.conv = nn.Conv2d(channels, 1, kernel_size=1)

    def logits(self, f: torch.Tensor) -> torch.Tensor:
        h = F.relu(self.norm(self.pool(f)))
        return self.conv(h).flatten()

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(f))


def _conv_bn_relu(cin, cout, stride=1, dilation=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class _SkipDecoder(nn.Module):
    """Two-stage upsampling decoder fusing deep features with the bottom feature."""

    def __init__(self, deep_channels, skip_channels, num_classes, width=16):
        super().__init__()
        self.reduce_deep = _conv_bn_relu(deep_channels, width)
        self.reduce_skip = nn.Sequential(
            nn.Conv2d(skip_channels, width // 2, 1, bias=False),
            nn.BatchNorm2d(width // 2),
            nn.ReLU(inplace=True),
        )
        self.fuse = _conv_bn_relu(width + width // 2, width)
        self.head = nn.Conv2d(width, num_classes, 1)

    def forward(self, deep, skip, out_size):
        x = self.reduce_deep(deep)
        x = F.interpolate(x, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        x = self.fuse(torch.cat([x, self.reduce_skip(skip)], dim=1))
        return F.interpolate(self.head(x), size=out_size, mode="bilinear", align_corners=False)


@dataclass
class ModelConfig:
    backbone: str = "tiny"
    in_channels: int = 3
    num_classes: int = 3
    channels: tuple = (16, 32, 64, 64)
    sir_stage: int = 1
    grl_coefficient: float = 1.0

    def validate(self):
        if self.num_classes < 2:
            raise ConfigError(f"model.num_classes must be >= 2, got {self.num_classes}")
        if not 1 <= self.sir_stage < len(self.channels):
            raise ConfigError(
                f"model.sir_stage must be in [1, {len(self.channels) - 1}], got {self.sir_stage}"
            )
        if self.grl_coefficient < 0:
            raise ConfigError("model.grl_coefficient must be >= 0")


class SegmentationModel(nn.Module):
    """Encoder-bottom / encoder-top / decoder triple producing per-pixel logits."""

    def __init__(self, encoder_bottom: nn.Module, encoder_top: nn.Module, decoder: nn.Module,
                 num_classes: int, bottom_channels: int, in_channels: int):
        super().__init__()
        self.encoder_bottom = encoder_bottom
        self.encoder_top = encoder_top
        self.decoder = decoder
        self.num_classes = num_classes
        self.bottom_channels = bottom_channels
        self.in_channels = in_channels

    def bottom(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[1] != self.in_channels:
            raise ValueError(
                f"expected images shaped [N, {self.in_channels}, H, W], got {tuple(images.shape)}"
            )
        return self.encoder_bottom(images)

    def head(self, f: torch.Tensor, out_size) -> torch.Tensor:
        return self.decoder(self.encoder_top(f), f, out_size)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.head(self.bottom(images), images.shape[-2:])


def _build_tiny(cfg: ModelConfig) -> SegmentationModel:
    chans = list(cfg.channels)
    stages = []
    cin = cfg.in_channels
    for i, c in enumerate(chans):
        # last stage keeps resolution and widens the receptive field instead
        last = i == len(chans) - 1
        stages.append(
            nn.Sequential(
                _conv_bn_relu(cin, c, stride=1 if last else 2, dilation=2 if last else 1),
                _conv_bn_relu(c, c),
            )
        )
        cin = c
    k = cfg.sir_stage
    bottom = nn.Sequential(*stages[:k])
    top = nn.Sequential(*stages[k:])
    decoder = _SkipDecoder(chans[-1], chans[k - 1], cfg.num_classes)
    return SegmentationModel(bottom, top, decoder, cfg.num_classes, chans[k - 1], cfg.in_channels)


BACKBONES: Dict[str, Callable[[ModelConfig], SegmentationModel]] = {"tiny": _build_tiny}


def register_backbone(name: str, factory: Callable[[ModelConfig], SegmentationModel]) -> None:
    """Adapter seam for full-size backbones (e.g. an encoder-decoder with a skip feature)."""
    BACKBONES[name] = factory


def build_model(cfg: ModelConfig):
    """Return ``(segmentation_model, style_classifier)`` for a config."""
    cfg.validate()
    try:
        factory = BACKBONES[cfg.backbone]
    except KeyError:
        raise ConfigError(
            f"unknown backbone {cfg.backbone!r}; registered: {sorted(BACKBONES)}"
        ) from None
    model = factory(cfg)
    return model, StyleClassifier(model.bottom_channels)


def forward_segment(model: SegmentationModel, image: torch.Tensor) -> torch.Tensor:
    """Per-pixel class probabilities for one ``[C_in, H, W]`` image or a batch."""
    single = image.dim() == 3
    x = image[None] if single else image
    probs = torch.softmax(model(x), dim=1)
    return probs[0] if single else probs


class DualOutput(NamedTuple):
    p_seg: torch.Tensor
    p_seg_hat: torch.Tensor
    p_c: Optional[torch.Tensor]
    p_c_hat: Optional[torch.Tensor]
    features: torch.Tensor
    features_hat: torch.Tensor
    lambdas: torch.Tensor


def forward_dual(
    model: SegmentationModel,
    classifier: Optional[StyleClassifier],
    images: torch.Tensor,
    sir: SirConfig,
    generator: Optional[torch.Generator] = None,
    grl_coefficient: float = 1.0,
    perm: Optional[torch.Tensor] = None,
    lambdas: Optional[torch.Tensor] = None,
    detach_classifier_input: bool = False,
) -> DualOutput:
    """Run the original and style-perturbed paths through shared weights.

    Both paths go through the top encoder and decoder as one concatenated
    batch, so batch-norm statistics are shared.  When ``classifier`` is given
    the bottom features reach it through gradient reversal (or detached, for
    the classifier's own step in alternating mode).
    """
    n = images.shape[0]
    f = model.bottom(images)
    f_hat, lambdas = sir_perturb(f, sir, generator, perm=perm, lambdas=lambdas)
    if sir.enabled:
        logits = model.head(torch.cat([f, f_hat], dim=0), images.shape[-2:])
        probs = torch.softmax(logits, dim=1)
        p_seg, p_seg_hat = probs[:n], probs[n:]
    else:
        p_seg = torch.softmax(model.head(f, images.shape[-2:]), dim=1)
        p_seg_hat = p_seg

    p_c = p_c_hat = None
    if classifier is not None:
        both = torch.cat([f, f_hat], dim=0)
        both = both.detach() if detach_classifier_input else reverse_gradient(both, grl_coefficient)
        scores = classifier(both)
        p_c, p_c_hat = scores[:n], scores[n:]
    return DualOutput(p_seg, p_seg_hat, p_c, p_c_hat, f, f_hat, lambdas)
