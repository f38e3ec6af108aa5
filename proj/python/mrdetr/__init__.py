"""Python access to the mrdetr C++ core."""

import json

from . import _mrdetr
from ._mrdetr import (
    BoxError,
    HarnessError,
    Model,
    calibrate_score,
    compute_ap,
    generate_scene,
    giou_pairwise,
    hungarian_match,
    iou_pairwise,
    nms,
    o2m_assign,
    preset_names,
)


def _overrides(overrides):
    if overrides is None:
        return []
    if isinstance(overrides, dict):
        return [f"{k}={json.dumps(v) if not isinstance(v, str) else v}" for k, v in overrides.items()]
    return list(overrides)


def resolve_config(config=None, overrides=None):
    """Resolved run configuration as a dict."""
    return json.loads(_mrdetr.resolve_config(json.dumps(config or {}), _overrides(overrides)))


def train(config=None, overrides=None, run_dir=""):
    """Trains a model; writes config.json, metrics.csv and checkpoint when run_dir is given."""
    return _mrdetr.train(json.dumps(config or {}), _overrides(overrides), run_dir)


def evaluate(model, config=None, overrides=None):
    return _mrdetr.evaluate(model, json.dumps(config or {}), _overrides(overrides))


def gradcheck(preset="mrdetr-pp", seed=1, max_coords=0):
    return _mrdetr.gradcheck(preset, seed, max_coords)


__all__ = [
    "BoxError",
    "HarnessError",
    "Model",
    "calibrate_score",
    "compute_ap",
    "evaluate",
    "generate_scene",
    "giou_pairwise",
    "gradcheck",
    "hungarian_match",
    "iou_pairwise",
    "nms",
    "o2m_assign",
    "preset_names",
    "resolve_config",
    "train",
]
