"""Style randomization, content-consistency and style-adversarial training for
domain-generalized segmentation, with a leave-one-domain-out harness."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, ICSLError, NumericError  # noqa: E402
from .featstats import SirConfig, StyleStats, apply_style, compute_style_stats, mix_style_stats, sir_perturb  # noqa: E402
from .losses import adv_loss, consist_loss, seg_loss, total_loss  # noqa: E402

__all__ = [
    "ConfigError", "DataError", "ICSLError", "NumericError",
    "SirConfig", "StyleStats", "apply_style", "compute_style_stats", "mix_style_stats", "sir_perturb",
    "adv_loss", "consist_loss", "seg_loss", "total_loss",
]
