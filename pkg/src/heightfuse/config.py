"""Run configuration: sectioned key=value files merged with flag overrides.

The file format is plain UTF-8 lines, `#` comments, `[section]` headers,
`key = value` entries. Flags win over file values, file values win over
defaults. Unknown sections or keys are errors, never silently ignored.
The fully resolved configuration is echoed into every output directory so
a run can always be reproduced from its artifacts.
"""

from __future__ import annotations

import copy
import os

from .network import MODES, NetworkConfig
from .sim import DatasetParams, SceneParams
from .training import TrainConfig


def _levels(text: str) -> tuple:
    vals = tuple(float(v) for v in text.split(",") if v.strip() != "")
    if not vals:
        raise ValueError("empty level list")
    return vals


def _fmt(value) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


# name -> (default, parser)
SCHEMA = {
    "network": {
        "mode": ("full", str),
        "channels": (32, int),
        "directions": (16, int),
        "max_keypoints": (50, int),
        "map_size": (20, int),
        "image_size": (64, int),
        "height_scale": (50.0, float),
    },
    "train": {
        "epochs": (30, int),
        "batch_size": (8, int),
        "lr": (0.001, float),
        "lr_decayed": (0.0001, float),
        "clip_norm": (50.0, float),
    },
    "data": {
        "train_scenes": (20, int),
        "test_scenes": (5, int),
        "episodes_per_train_scene": (13, int),
        "episodes_per_test_scene": (20, int),
        "t_len": (8, int),
        "window": (20, int),
        "keypoint_count": (30, int),
        "keypoint_noise": (1.0, float),
        "outlier_rate": (0.1, float),
        "corruption_levels": ((0.0, 0.2, 0.4, 0.6, 0.8), _levels),
        "scene_size": (64, int),
        "cell_size": (5.0, float),
        "object_count": (8, int),
        "side_min": (2, int),
        "side_max": (6, int),
        "height_min": (10.0, float),
        "height_max": (100.0, float),
    },
    "nav": {
        "episodes": (50, int),
        "corruption": (0.4, float),
        "min_separation": (20, int),
    },
}


def default_values() -> dict:
    return {sec: {k: copy.copy(v[0]) for k, v in keys.items()}
            for sec, keys in SCHEMA.items()}


def parse_config_file(path) -> dict:
    """{(section, key): raw string} from a config file, validated against
    the schema."""
    out = {}
    section = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in SCHEMA:
                    raise ValueError("%s:%d: unknown section [%s]"
                                     % (path, lineno, section))
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key = value" % (path, lineno))
            if section is None:
                raise ValueError("%s:%d: key outside any [section]"
                                 % (path, lineno))
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA[section]:
                raise ValueError("%s:%d: unknown key %s.%s"
                                 % (path, lineno, section, key))
            out[(section, key)] = value
    return out


class RunConfig:
    """Resolved configuration for one command invocation."""

    def __init__(self, values: dict):
        self.values = values

    @classmethod
    def resolve(cls, config_path=None, overrides: dict | None = None) -> "RunConfig":
        """Defaults, then file values, then explicit overrides.

        overrides maps (section, key) to either a raw string or an already
        typed value.
        """
        values = default_values()
        if config_path is not None:
            for (sec, key), raw in parse_config_file(config_path).items():
                values[sec][key] = SCHEMA[sec][key][1](raw)
        for (sec, key), val in (overrides or {}).items():
            if sec not in SCHEMA or key not in SCHEMA[sec]:
                raise ValueError("unknown config key %s.%s" % (sec, key))
            values[sec][key] = SCHEMA[sec][key][1](val) if isinstance(val, str) \
                else val
        cfg = cls(values)
        cfg.network_config()   # validates mode and geometry early
        return cfg

    def get(self, section: str, key: str):
        return self.values[section][key]

    def network_config(self, mode: str | None = None) -> NetworkConfig:
        net = self.values["network"]
        if mode is not None and mode not in MODES:
            raise ValueError("unknown mode %r" % mode)
        return NetworkConfig(
            mode=mode if mode is not None else net["mode"],
            channels=net["channels"], directions=net["directions"],
            max_keypoints=net["max_keypoints"], map_size=net["map_size"],
            image_size=net["image_size"], height_scale=net["height_scale"])

    def train_config(self, seed: int) -> TrainConfig:
        tr = self.values["train"]
        return TrainConfig(epochs=tr["epochs"], batch_size=tr["batch_size"],
                           lr=tr["lr"], lr_decayed=tr["lr_decayed"],
                           clip_norm=tr["clip_norm"], seed=seed)

    def dataset_params(self) -> DatasetParams:
        d = self.values["data"]
        scene = SceneParams(size=d["scene_size"], cell_size=d["cell_size"],
                            object_count=d["object_count"],
                            side_range=(d["side_min"], d["side_max"]),
                            height_range=(d["height_min"], d["height_max"]))
        return DatasetParams(
            train_scenes=d["train_scenes"], test_scenes=d["test_scenes"],
            episodes_per_train_scene=d["episodes_per_train_scene"],
            episodes_per_test_scene=d["episodes_per_test_scene"],
            t_len=d["t_len"], window=d["window"],
            keypoint_count=d["keypoint_count"],
            keypoint_noise=d["keypoint_noise"],
            outlier_rate=d["outlier_rate"],
            corruption_levels=d["corruption_levels"], scene=scene)

    def dump(self) -> str:
        lines = []
        for sec in sorted(self.values):
            lines.append("[%s]" % sec)
            for key in sorted(self.values[sec]):
                lines.append("%s = %s" % (key, _fmt(self.values[sec][key])))
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.dump())


def data_root(flag_value=None) -> str:
    """Dataset root: the flag, else VGF_DATA_DIR, else ./data."""
    if flag_value:
        return flag_value
    return os.environ.get("VGF_DATA_DIR", "data")
