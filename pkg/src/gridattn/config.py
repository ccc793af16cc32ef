"""Plain-text key=value run configuration.

Sections and keys are fixed by a schema; unknown names are rejected so a
typo cannot silently fall back to a default. Every run writes back its
resolved snapshot, which reparses to an identical config.
"""

from __future__ import annotations

import configparser
import hashlib
import io

from gridattn.errors import ConfigError
from gridattn.extractor import ExtractorConfig
from gridattn.labels import CLASS_NAMES

# (type, default) per key; types: int, float, bool, str
SCHEMA = {
    "run": {
        "model": (str, "attention"),
    },
    "data": {
        "cell_size": (int, 32),
        "overlap": (int, 0),
        "white_threshold": (float, 0.92),
        "tissue_fraction": (float, 0.05),
    },
    "extractor": {
        "feature_size": (int, 32),
        "stages": (str, "16:3:2,32:3:2,32:3:2"),
        "freeze_depth": (int, 0),
    },
    "attention": {
        "heads": (int, 4),
        "head_extent": (int, 3),
        "hidden": (int, 16),
        "dropout": (float, 0.5),
    },
    "train": {
        "lr0": (float, 1e-3),
        "decay": (float, 0.95),
        "restart_lr": (float, 1e-4),
        "restart_period": (int, 50),
        "epochs": (int, 30),
        "batch_size": (int, 2),
        "seed": (int, 0),
        "augment": (bool, True),
        "rotation_min": (float, 0.0),
        "rotation_max": (float, 360.0),
        "scale_min": (float, 0.8),
        "scale_max": (float, 1.2),
    },
    "baseline": {
        "crop_size": (int, 32),
        "stride": (int, 32),
        "epochs": (int, 12),
        "batch_size": (int, 32),
        "lr": (float, 1e-3),
        "max_crops_per_class": (int, 800),
        "count_grid": (str, "1,2,3"),
        "conf_grid": (str, "0.5,0.7,0.9"),
    },
    "eval": {
        "dump_attention": (bool, False),
    },
    "heuristic": {
        "t_be_no_dysplasia": (int, 1),
        "t_be_with_dysplasia": (int, 1),
        "t_adenocarcinoma": (int, 1),
        "q_be_no_dysplasia": (float, 0.5),
        "q_be_with_dysplasia": (float, 0.5),
        "q_adenocarcinoma": (float, 0.5),
    },
}

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_value(raw: str, typ, section: str, key: str):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        return typ(raw)
    except ValueError:
        raise ConfigError(
            f"bad value for [{section}] {key}: {raw!r} (expected {typ.__name__})"
        ) from None


class RunConfig:
    """Resolved configuration: all schema keys present with typed values."""

    def __init__(self, sections=None):
        self.sections = {
            s: {k: default for k, (_t, default) in keys.items()} for s, keys in SCHEMA.items()
        }
        if sections:
            for s, kv in sections.items():
                for k, v in kv.items():
                    self.set(s, k, v)

    def get(self, section: str, key: str):
        return self.sections[section][key]

    def set(self, section: str, key: str, value):
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        typ = SCHEMA[section][key][0]
        if typ is float and isinstance(value, int):
            value = float(value)
        if not isinstance(value, typ):
            raise ConfigError(
                f"[{section}] {key} expects {typ.__name__}, got {type(value).__name__}"
            )
        self.sections[section][key] = value

    # -- text form -----------------------------------------------------
    @classmethod
    def parse_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"config syntax error: {exc}") from None
        cfg = cls()
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser[section].items():
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in section [{section}]")
                typ = SCHEMA[section][key][0]
                cfg.sections[section][key] = _parse_value(raw, typ, section, key)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse_text(fh.read())

    def to_text(self) -> str:
        out = io.StringIO()
        for section, keys in SCHEMA.items():
            out.write(f"[{section}]\n")
            for key in keys:
                value = self.sections[section][key]
                if isinstance(value, bool):
                    value = "true" if value else "false"
                elif isinstance(value, float):
                    value = repr(value)
                out.write(f"{key} = {value}\n")
            out.write("\n")
        return out.getvalue()

    def sha256(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


def parse_stages(spec: str):
    """'16:3:2,32:3:2' -> ((16, 3, 2), (32, 3, 2))"""
    stages = []
    for part in spec.split(","):
        fields = part.strip().split(":")
        if len(fields) != 3:
            raise ConfigError(f"bad extractor stage {part!r}; expected channels:kernel:stride")
        try:
            stages.append(tuple(int(f) for f in fields))
        except ValueError:
            raise ConfigError(f"bad extractor stage {part!r}") from None
    return tuple(stages)


def parse_float_list(spec: str):
    try:
        return tuple(float(x) for x in spec.split(","))
    except ValueError:
        raise ConfigError(f"bad numeric list {spec!r}") from None


def parse_int_list(spec: str):
    try:
        return tuple(int(x) for x in spec.split(","))
    except ValueError:
        raise ConfigError(f"bad integer list {spec!r}") from None


def extractor_config(cfg: RunConfig) -> ExtractorConfig:
    return ExtractorConfig(
        feature_size=cfg.get("extractor", "feature_size"),
        stages=parse_stages(cfg.get("extractor", "stages")),
        freeze_depth=cfg.get("extractor", "freeze_depth"),
    )


def heuristic_thresholds(cfg: RunConfig):
    """(count_thresholds, conf_thresholds) keyed by class id, from [heuristic]."""
    counts, confs = {}, {}
    for cid, name in enumerate(CLASS_NAMES):
        if cid == 0:
            continue
        counts[cid] = cfg.get("heuristic", f"t_{name}")
        confs[cid] = cfg.get("heuristic", f"q_{name}")
    return counts, confs


def paper_faithful_config() -> RunConfig:
    """The large-scale parameterization; constructible and shape-checked,
    not meant for desk-scale training."""
    cfg = RunConfig()
    cfg.set("data", "cell_size", 224)
    cfg.set("extractor", "feature_size", 512)
    cfg.set("extractor", "stages", "64:3:2,128:3:2,256:3:2,512:3:2")
    cfg.set("attention", "heads", 64)
    cfg.set("attention", "hidden", 128)
    cfg.set("train", "epochs", 200)
    return cfg
