"""Config file parsing (YAML) and small text formats used by the CLI.

The config file mirrors the experiment/scene/estimator dataclasses section
by section. Unknown keys anywhere are errors, so typos fail loudly instead
of silently running defaults.
"""

from __future__ import annotations

from dataclasses import fields as dataclass_fields
from dataclasses import replace

import numpy as np
import yaml

from ..geometry import Pose, Rotation
from ..solver import DecoupledConfig, RansacPnPConfig
from .experiment import ExperimentConfig
from .scene import SceneConfig


class UnknownConfigKey(ValueError):
    """Config contains a key not understood by its section."""


def _build(cls, data: dict, section: str, nested: dict | None = None):
    if not isinstance(data, dict):
        raise UnknownConfigKey(f"{section} must be a mapping")
    nested = nested or {}
    allowed = {f.name for f in dataclass_fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key in nested:
            sub_cls, sub_section = nested[key]
            if not isinstance(value, dict):
                raise UnknownConfigKey(f"{section}.{key} must be a mapping")
            kwargs[key] = _build(sub_cls, value, sub_section)
        elif key in allowed:
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        else:
            raise UnknownConfigKey(f"unknown key {section}.{key!r} (allowed: {sorted(allowed)})")
    return cls(**kwargs)


def experiment_config_from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise UnknownConfigKey("config root must be a mapping")
    sections = {"experiment", "scene", "estimator"}
    unknown = set(doc) - sections
    if unknown:
        raise UnknownConfigKey(f"unknown top-level sections {sorted(unknown)} (allowed: {sorted(sections)})")

    exp_data = dict(doc.get("experiment", {}) or {})
    scene_data = doc.get("scene", {}) or {}
    est_data = dict(doc.get("estimator", {}) or {})

    scene = _build(SceneConfig, scene_data, "scene")
    ransac_data = est_data.pop("ransac", None)
    estimator = _build(DecoupledConfig, est_data, "estimator")
    if ransac_data is not None:
        estimator = replace(estimator, ransac=_build(RansacPnPConfig, ransac_data, "estimator.ransac"))

    cfg = _build(ExperimentConfig, exp_data, "experiment")
    return replace(cfg, scene=scene, estimator=estimator)


def load_experiment_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh) or {}
    return experiment_config_from_dict(doc)


def format_pose(pose: Pose) -> str:
    """Plain-text pose: 9 row-major rotation entries, 3 translation entries,
    then the scale — 13 whitespace-separated numbers on one line."""
    vals = list(pose.R.matrix.reshape(-1)) + list(pose.t) + [pose.s]
    return " ".join(repr(float(v)) for v in vals) + "\n"


def parse_pose(text: str) -> Pose:
    vals = [float(tok) for tok in text.split()]
    if len(vals) != 13:
        raise ValueError(f"pose text needs 13 numbers, got {len(vals)}")
    R = np.array(vals[:9]).reshape(3, 3)
    t = np.array(vals[9:12])
    return Pose(vals[12], Rotation(R), t)
