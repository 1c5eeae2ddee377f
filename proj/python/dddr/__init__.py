"""Python bindings for the dddr simulator.

Overrides are given as a mapping of dotted config keys to values, e.g.
``{"training.rounds": 2, "experiment.method": "finetune"}``.
"""

import json
import os
from os import PathLike
from typing import Any, Callable, Mapping, Optional, Union

from . import _core
from ._core import (
    DataError,
    DddrError,
    DiffusionModel,
    NumericError,
    UsageError,
    aggregate_embeddings,
    alphas_bar,
    average_accuracy,
    config_keys,
    forgetting_measure,
    forward_diffuse,
    psnr,
    shapeworld,
    ssim,
    weighted_average,
)

Overrides = Optional[Mapping[str, Any]]
PathArg = Union[str, PathLike]

__all__ = [
    "DataError", "DddrError", "DiffusionModel", "NumericError", "UsageError",
    "aggregate_embeddings", "alphas_bar", "audit", "average_accuracy", "config_keys",
    "effective_config", "evaluate", "forgetting_measure", "forward_diffuse", "psnr",
    "run", "shapeworld", "ssim", "stage", "weighted_average",
]


def _overrides(overrides: Overrides) -> list:
    out = []
    for key, value in (overrides or {}).items():
        text = value if isinstance(value, str) else json.dumps(value)
        out.append(f"{key}={text}")
    return out


def _path(p: Optional[PathArg]) -> Optional[str]:
    return None if p is None else str(p)


def effective_config(config: Optional[PathArg] = None, overrides: Overrides = None) -> dict:
    return json.loads(_core.effective_config(_path(config), _overrides(overrides)))


def run(out: PathArg, config: Optional[PathArg] = None, overrides: Overrides = None,
        progress: Optional[Callable[[str], None]] = None) -> dict:
    """Full pipeline into ``out``; returns the parsed metrics plus guard counters."""
    r = _core.run(_path(config), _overrides(overrides), str(out), progress)
    r["metrics"] = json.loads(r.pop("metrics_json"))
    return r


def stage(name: str, out: PathArg, config: Optional[PathArg] = None, overrides: Overrides = None,
          progress: Optional[Callable[[str], None]] = None):
    """One of gen-data, pretrain, invert, train."""
    r = _core.stage(name, _path(config), _overrides(overrides), str(out), progress)
    if isinstance(r, dict):
        r["metrics"] = json.loads(r.pop("metrics_json"))
    return r


def evaluate(out: PathArg, config: Optional[PathArg] = None, overrides: Overrides = None) -> dict:
    """Metrics recomputed from the classifier checkpoints stored under ``out``."""
    if config is None:
        config = _echoed(out)
    return json.loads(_core.evaluate(_path(config), _overrides(overrides), str(out)))


def audit(out: PathArg, config: Optional[PathArg] = None, overrides: Overrides = None) -> list:
    if config is None:
        config = _echoed(out)
    return _core.audit(_path(config), _overrides(overrides), str(out))


def _echoed(out: PathArg) -> Optional[str]:
    p = os.path.join(str(out), "config.effective.json")
    return p if os.path.exists(p) else None
