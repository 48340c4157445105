"""Versioned model checkpoints: an .npz holding flat float64 arrays plus a
JSON metadata record (format version, model kind, and the full model config).

The layout is stable: ``meta`` is a JSON string array; every other entry is
one named parameter. Loading rebuilds the model from the echoed config and
fails loudly on version or shape mismatches.
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .models import ClassifierConfig, ClassifierModel, MAEConfig, MAEModel

FORMAT_VERSION = 1


def save_checkpoint(path, model) -> None:
    meta = {
        "format_version": FORMAT_VERSION,
        "kind": model.kind,
        "config": asdict(model.cfg),
    }
    arrays = {f"param/{name}": p.data for name, p in model.param_items()}
    np.savez(path, meta=np.asarray(json.dumps(meta, sort_keys=True)), **arrays)


def _load(path, expected_kind: str):
    with np.load(path, allow_pickle=False) as z:
        if "meta" not in z:
            raise ValueError(f"{path}: not a model checkpoint (missing meta record)")
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version "
                             f"{meta.get('format_version')} (expected {FORMAT_VERSION})")
        if meta.get("kind") != expected_kind:
            raise ValueError(f"{path}: checkpoint holds a {meta.get('kind')!r} model, "
                             f"expected {expected_kind!r}")
        cfg_dict = dict(meta["config"])
        cfg_dict["image_hw"] = tuple(cfg_dict["image_hw"])
        cfg_cls = ClassifierConfig if expected_kind == "classifier" else MAEConfig
        model_cls = ClassifierModel if expected_kind == "classifier" else MAEModel
        model = model_cls(cfg_cls(**cfg_dict), seed=0)
        for name, p in model.param_items():
            key = f"param/{name}"
            if key not in z:
                raise ValueError(f"{path}: checkpoint is missing parameter {name!r}")
            arr = z[key]
            if arr.shape != p.data.shape:
                raise ValueError(f"{path}: parameter {name!r} has shape {arr.shape}, "
                                 f"expected {p.data.shape}")
            p.data = arr.astype(np.float64)
    return model


def load_classifier(path) -> ClassifierModel:
    return _load(path, "classifier")


def load_mae(path) -> MAEModel:
    return _load(path, "mae")
