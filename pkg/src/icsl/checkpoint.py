"""Checkpoint archive format.

A checkpoint is a single uncompressed ``.npz`` file holding:

``__manifest__``
    UTF-8 JSON: ``format`` ("icsl-checkpoint"), ``version``, ``kind``
    ("network" or "oracle"), ``model_config``, ``epoch``, ``step``, ``phase``,
    and the NumPy data-stream state under ``numpy_rng``.
``model/<name>``, ``classifier/<name>``
    Every parameter and buffer of the segmentation network and style
    classifier, by state-dict name.
``rng/torch``, ``rng/sir``
    Global torch RNG state and the style-randomization generator state (uint8).
``oracle/<digest>``
    Only for ``kind = oracle``: ground-truth masks keyed by image digest.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import DataError
from .model import ModelConfig, build_model

FORMAT = "icsl-checkpoint"
VERSION = 1


def _model_config_dict(cfg: ModelConfig) -> dict:
    d = dict(cfg.__dict__)
    d["channels"] = list(d["channels"])
    return d


def save_checkpoint(path, model: nn.Module, classifier: Optional[nn.Module], model_config: ModelConfig,
                    epoch: int = 0, step: int = 0, phase: int = 0,
                    sir_generator: Optional[torch.Generator] = None,
                    numpy_rng: Optional[np.random.Generator] = None, extra: Optional[Mapping] = None) -> Path:
    path = Path(path)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "kind": "network",
        "model_config": _model_config_dict(model_config),
        "epoch": epoch,
        "step": step,
        "phase": phase,
        "numpy_rng": numpy_rng.bit_generator.state if numpy_rng is not None else None,
    }
    manifest.update(extra or {})
    arrays = {"__manifest__": np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), np.uint8)}
    for name, t in model.state_dict().items():
        arrays[f"model/{name}"] = t.detach().cpu().numpy()
    if classifier is not None:
        for name, t in classifier.state_dict().items():
            arrays[f"classifier/{name}"] = t.detach().cpu().numpy()
    arrays["rng/torch"] = torch.get_rng_state().numpy()
    if sir_generator is not None:
        arrays["rng/sir"] = sir_generator.get_state().numpy()
    tmp = path.with_suffix(".tmp.npz")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)
    return path


def read_manifest(archive) -> dict:
    try:
        manifest = json.loads(bytes(archive["__manifest__"]).decode())
    except KeyError:
        raise DataError("checkpoint has no __manifest__ entry") from None
    if manifest.get("format") != FORMAT:
        raise DataError(f"not an {FORMAT} archive")
    if manifest.get("version") != VERSION:
        raise DataError(f"unsupported checkpoint version {manifest.get('version')}")
    return manifest


def _state(archive, prefix):
    return {k[len(prefix):]: torch.from_numpy(archive[k].copy()) for k in archive.files if k.startswith(prefix)}


def load_checkpoint(path):
    """Return ``(model, classifier, manifest)``; models come back in eval mode."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as archive:
        manifest = read_manifest(archive)
        if manifest["kind"] == "oracle":
            masks = {k[len("oracle/"):]: archive[k].copy() for k in archive.files if k.startswith("oracle/")}
            return OracleModel(masks, manifest["num_classes"]), None, manifest
        mc = dict(manifest["model_config"])
        mc["channels"] = tuple(mc["channels"])
        model, classifier = build_model(ModelConfig(**mc))
        model.load_state_dict(_state(archive, "model/"))
        clf_state = _state(archive, "classifier/")
        if clf_state:
            classifier.load_state_dict(clf_state)
        else:
            classifier = None
        if "rng/sir" in archive.files:
            manifest["sir_rng_state"] = torch.from_numpy(archive["rng/sir"].copy())
    model.eval()
    if classifier is not None:
        classifier.eval()
    return model, classifier, manifest


def image_digest(image: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image, dtype=np.float32).tobytes()).hexdigest()


class OracleModel(nn.Module):
    """Lookup "network" returning one-hot scores of the stored ground truth.

    Used to check the evaluation path end to end; unknown images raise.
    """

    def __init__(self, masks: Mapping[str, np.ndarray], num_classes: int):
        super().__init__()
        self.masks = dict(masks)
        self.num_classes = num_classes

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = []
        for img in x.numpy():
            key = image_digest(img)
            if key not in self.masks:
                raise DataError("oracle checkpoint has no ground truth for this image")
            m = torch.from_numpy(self.masks[key]).long()
            out.append(torch.nn.functional.one_hot(m, self.num_classes).permute(2, 0, 1).float())
        return torch.stack(out)


def save_oracle_checkpoint(path, samples, num_classes: int) -> Path:
    manifest = {"format": FORMAT, "version": VERSION, "kind": "oracle", "num_classes": num_classes}
    arrays = {"__manifest__": np.frombuffer(json.dumps(manifest).encode(), np.uint8)}
    for s in samples:
        arrays[f"oracle/{image_digest(s.image)}"] = s.mask.astype(np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return Path(path)
