"""Dice and average surface distance, aggregated per domain and class."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import ndimage

from .errors import DataError

REPORT_SCHEMA = 1
_CROSS = ndimage.generate_binary_structure(2, 1)


def _pair(pred, gt):
    pred, gt = np.asarray(pred, bool), np.asarray(gt, bool)
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    return pred, gt


def dice(pred, gt) -> float:
    """Dice overlap in percent; two empty masks agree perfectly (100)."""
    pred, gt = _pair(pred, gt)
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2 * int((pred & gt).sum()) / denom


def boundary(mask) -> np.ndarray:
    """Foreground pixels with a 4-connected background neighbour (outside counts as background)."""
    mask = np.asarray(mask, bool)
    eroded = ndimage.binary_erosion(mask, structure=_CROSS, border_value=0)
    return mask & ~eroded


def _directed(src_edge: np.ndarray, dst_edge: np.ndarray) -> float:
    # exact Euclidean distance from every pixel to the nearest dst boundary pixel
    dist = ndimage.distance_transform_edt(~dst_edge)
    return float(dist[src_edge].mean())


def asd(pred, gt) -> Optional[float]:
    """Symmetric average surface distance in pixels; ``None`` if either mask is empty."""
    pred, gt = _pair(pred, gt)
    if not pred.any() or not gt.any():
        return None
    bp, bg = boundary(pred), boundary(gt)
    return (_directed(bp, bg) + _directed(bg, bp)) / 2


@dataclass
class Entry:
    dice: float
    asd: Optional[float]
    n: int
    asd_excluded: int = 0


@dataclass
class MetricsReport:
    """Per (domain, class) means plus per-class and overall aggregates."""

    entries: Dict[Tuple[int, str], Entry]
    class_names: List[str]
    domain_names: Dict[int, str] = field(default_factory=dict)
    config_hash: str = ""
    failed: Dict[int, str] = field(default_factory=dict)

    @property
    def domains(self) -> List[int]:
        return sorted({d for d, _ in self.entries} | set(self.failed))

    def class_average(self, cls: str, metric: str = "dice") -> Optional[float]:
        vals = [getattr(e, metric) for (d, c), e in sorted(self.entries.items()) if c == cls]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    def overall(self, metric: str = "dice") -> Optional[float]:
        vals = [self.class_average(c, metric) for c in self.class_names]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def asd_exclusions(self) -> int:
        return sum(e.asd_excluded for e in self.entries.values())

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        entries = dict(self.entries)
        entries.update(other.entries)
        names = dict(self.domain_names)
        names.update(other.domain_names)
        failed = dict(self.failed)
        failed.update(other.failed)
        return MetricsReport(entries, list(self.class_names), names, self.config_hash, failed)

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "config_hash": self.config_hash,
            "class_names": list(self.class_names),
            "entries": [
                {"domain": d, "domain_name": self.domain_names.get(d, str(d)), "class": c,
                 "dice": e.dice, "asd": e.asd, "n": e.n, "asd_excluded": e.asd_excluded}
                for (d, c), e in sorted(self.entries.items())
            ],
            "aggregates": {
                "dice": {c: self.class_average(c, "dice") for c in self.class_names},
                "asd": {c: self.class_average(c, "asd") for c in self.class_names},
                "overall_dice": self.overall("dice"),
                "overall_asd": self.overall("asd"),
            },
            "asd_exclusions": self.asd_exclusions,
            "failed": {str(k): v for k, v in sorted(self.failed.items())},
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "MetricsReport":
        try:
            if data["schema"] != REPORT_SCHEMA:
                raise DataError(f"unsupported report schema {data['schema']}")
            entries, names = {}, {}
            for row in data["entries"]:
                d = int(row["domain"])
                names[d] = row.get("domain_name", str(d))
                entries[(d, row["class"])] = Entry(
                    float(row["dice"]), None if row["asd"] is None else float(row["asd"]),
                    int(row["n"]), int(row.get("asd_excluded", 0)),
                )
            failed = {int(k): v for k, v in data.get("failed", {}).items()}
            return cls(entries, list(data["class_names"]), names, data.get("config_hash", ""), failed)
        except KeyError as exc:
            raise DataError(f"malformed metrics report: missing field {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def table(self, metric: str = "dice", sep: str = "\t") -> str:
        """Per-domain columns for every class, then Avg. per class and Overall."""
        header = ["metric"]
        row = [metric]
        for c in self.class_names:
            for d in self.domains:
                header.append(f"{c}:{self.domain_names.get(d, d)}")
                if d in self.failed:
                    row.append("failed")
                    continue
                e = self.entries.get((d, c))
                v = None if e is None else getattr(e, metric)
                row.append("-" if v is None else f"{v:.2f}")
            header.append(f"{c}:Avg.")
            avg = self.class_average(c, metric)
            row.append("-" if avg is None else f"{avg:.2f}")
        header.append("Overall")
        ov = self.overall(metric)
        row.append("-" if ov is None else f"{ov:.2f}")
        return sep.join(header) + "\n" + sep.join(row) + "\n"


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def class_masks(labels: np.ndarray, decomposition: Mapping[str, Sequence[int]]) -> Dict[str, np.ndarray]:
    return {name: np.isin(labels, list(vals)) for name, vals in decomposition.items()}


def score_sample(pred_labels, gt_labels, decomposition) -> Dict[str, Tuple[float, Optional[float]]]:
    p = class_masks(np.asarray(pred_labels), decomposition)
    g = class_masks(np.asarray(gt_labels), decomposition)
    return {c: (dice(p[c], g[c]), asd(p[c], g[c])) for c in decomposition}


@torch.no_grad()
def predict_labels(model, images: np.ndarray, batch_size: int = 16) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(images), batch_size):
        x = torch.as_tensor(np.ascontiguousarray(images[i:i + batch_size]))
        out.append(model(x).argmax(dim=1).numpy())
    return np.concatenate(out)


def evaluate(model, samples: Sequence, decomposition: Mapping[str, Sequence[int]],
             domain_names: Optional[Mapping[int, str]] = None, config_hash: str = "",
             batch_size: int = 16) -> MetricsReport:
    """Argmax-segment every sample and average dice/asd per (domain, class).

    ``model`` maps a float batch ``[N, C, H, W]`` to class scores ``[N, K, H, W]``.
    """
    if not samples:
        raise DataError("evaluate needs a non-empty test set")
    # batch per image size so mixed resolutions still work
    preds = [None] * len(samples)
    by_shape: Dict[tuple, List[int]] = {}
    for i, s in enumerate(samples):
        by_shape.setdefault(s.image.shape, []).append(i)
    for idx in by_shape.values():
        labels = predict_labels(model, np.stack([samples[i].image for i in idx]), batch_size)
        for i, lab in zip(idx, labels):
            preds[i] = lab

    acc: Dict[Tuple[int, str], list] = {}
    for s, pred in zip(samples, preds):
        for c, (dv, av) in score_sample(pred, s.mask, decomposition).items():
            acc.setdefault((s.domain_id, c), []).append((dv, av))
    entries = {}
    for key, vals in acc.items():
        dices = [v[0] for v in vals]
        asds = [v[1] for v in vals if v[1] is not None]
        entries[key] = Entry(
            float(np.mean(dices)),
            float(np.mean(asds)) if asds else None,
            len(vals),
            len(vals) - len(asds),
        )
    return MetricsReport(entries, list(decomposition), dict(domain_names or {}), config_hash)


def validation_dice(model, samples, decomposition) -> Dict[str, float]:
    """Dice-only pass used for in-training validation: per-class means plus ``"mean"``."""
    labels = predict_labels(model, np.stack([s.image for s in samples]))
    per = {c: [] for c in decomposition}
    for pred, s in zip(labels, samples):
        p, g = class_masks(pred, decomposition), class_masks(s.mask, decomposition)
        for c in decomposition:
            per[c].append(dice(p[c], g[c]))
    out = {c: float(np.mean(v)) for c, v in per.items()}
    out["mean"] = float(np.mean(list(out.values()))) if out else math.nan
    return out
