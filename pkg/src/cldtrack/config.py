"""Run configuration: INI-style sections, environment overrides and CLI flags.

Precedence, lowest first: built-in defaults, ``--config`` file,
``CLDTRACK_<SECTION>_<KEY>`` environment variables, command-line flags.
"""

from __future__ import annotations

import argparse
import configparser
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from .errors import ConfigError

ENV_PREFIX = "CLDTRACK_"


@dataclass(frozen=True)
class Key:
    type: type
    default: Any
    help: str


def _k(t, default, help_):
    return Key(t, default, help_)


SCHEMA: dict[str, dict[str, Key]] = {
    "run": {
        "seed": _k(int, 0, "top-level seed every other seed derives from"),
        "workers": _k(int, 1, "parallel sequences during evaluation"),
    },
    "encoder": {
        "dim": _k(int, 32, "embedding dimension q"),
        "seed": _k(int, 0, "stub encoder seed (fixed like pretrained weights)"),
        "buckets": _k(int, 2, "basis vectors mixed per token by the text stub"),
    },
    "bag": {
        "tau_val": _k(float, 0.8, "minimum image-text cosine kept by validation"),
        "tau_syn": _k(float, 0.5, "minimum synonym score"),
        "alpha": _k(float, 0.3, "per-token replacement probability for perturbation"),
        "n_synonyms": _k(int, 10, "synonyms kept per word"),
        "top_k_attributes": _k(int, 4, "attributes matched from the dictionary"),
        "regen_rounds": _k(int, 2, "regeneration rounds for rejected service texts"),
        "n_task_phrases": _k(int, 10, "task phrases requested from the service"),
        "max_concept_words": _k(int, 5, "word cap on the concept name"),
        "draw_bbox": _k(bool, True, "outline the target before encoding/sending the frame"),
    },
    "client": {
        "mode": _k(str, "mock", "mock or live"),
        "endpoint": _k(str, "", "live service URL"),
        "mock_dir": _k(str, "", "directory of canned mock responses"),
        "timeout": _k(float, 30.0, "per-request timeout, seconds"),
        "max_retries": _k(int, 3, "attempts per request, including the first"),
        "concurrency": _k(int, 4, "in-flight request bound"),
        "backoff": _k(float, 0.5, "initial retry delay, seconds (doubles per retry)"),
    },
    "adapter": {
        "context_length": _k(int, 4, "number of learnable context vectors"),
        "tau_temp": _k(float, 0.07, "initial softmax temperature"),
        "init_scale": _k(float, 0.02, "std of the Gaussian initialization"),
    },
    "ttfum": {
        "window_size": _k(int, 5, "buffered search-frame text features"),
        "strategy": _k(str, "average", "average, last, max or weighted"),
        "update_interval": _k(int, 1, "frames between attention-weight refreshes"),
        "decay": _k(float, 0.5, "per-frame decay of the weighted strategy"),
    },
    "search": {
        "size": _k(int, 384, "search crop side, pixels"),
        "area_factor": _k(float, 4.0, "search crop area over previous box area"),
    },
    "exemplar": {
        "size": _k(int, 192, "exemplar crop side, pixels"),
        "area_factor": _k(float, 2.0, "exemplar crop area over box area"),
    },
    "head": {
        "grid": _k(int, 16, "score map side, cells"),
        "channels": _k(int, 8, "convolution channels per stage"),
        "stages": _k(int, 4, "conv-affine-ReLU stages"),
    },
    "inference": {
        "hanning_weight": _k(float, 0.49, "weight of the Hanning window in the score mix"),
    },
    "loss": {
        "lambda_iou": _k(float, 2.0, "GIoU loss weight"),
        "lambda_l1": _k(float, 5.0, "L1 loss weight"),
        "focal_alpha": _k(float, 2.0, "focal loss prediction exponent"),
        "focal_beta": _k(float, 4.0, "focal loss negative-penalty exponent"),
        "sigma": _k(float, 1.0, "Gaussian target radius, cells"),
    },
    "train": {
        "steps": _k(int, 1000, "gradient-descent steps"),
        "lr": _k(float, 0.05, "step size"),
        "seed": _k(int, 0, "offset added to run.seed for training data and init"),
        "clip_norm": _k(float, 1.0, "global gradient-norm cap (0 disables)"),
        "samples": _k(int, 32, "training crops cut from the training sequence"),
        "shift": _k(float, 0.3, "max crop-centre jitter, fraction of the box side"),
        "scale_jitter": _k(float, 0.1, "max log-scale jitter of the crop"),
    },
    "demo": {
        "frames": _k(int, 64, "frames in the synthetic sequence"),
        "frame_size": _k(int, 128, "synthetic frame side, pixels"),
        "target": _k(int, 20, "square side, pixels"),
        "tau_val": _k(float, -1.0, "validation threshold used for the demo bag"),
        "min_iou": _k(float, 0.5, "acceptance: mean IoU over tracked frames"),
        "max_loss_ratio": _k(float, 0.5, "acceptance: final over initial training loss"),
    },
    "gradcheck": {
        "points": _k(int, 5, "seeded parameter points"),
        "epsilon": _k(float, 1e-5, "central-difference step"),
        "tolerance": _k(float, 1e-4, "maximum allowed relative error"),
        "floor": _k(float, 1e-6, "denominator floor of the relative error"),
        "grid": _k(int, 6, "score map side for the check"),
        "dim": _k(int, 4, "embedding dimension for the check"),
        "channels": _k(int, 4, "head channels for the check"),
        "batch": _k(int, 2, "samples per point"),
    },
}

# short spellings kept for the documented flags
ALIASES = {
    "tau-val": ("bag", "tau_val"),
    "hanning-weight": ("inference", "hanning_weight"),
    "steps": ("train", "steps"),
    "lr": ("train", "lr"),
    "seed": ("run", "seed"),
    "epsilon": ("gradcheck", "epsilon"),
}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def convert(section: str, key: str, raw: Any) -> Any:
    entry = SCHEMA[section][key]
    try:
        if not isinstance(raw, str):
            return entry.type(raw)
        if entry.type is bool:
            return _parse_bool(raw)
        return entry.type(raw.strip())
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


class RunConfig:
    """Resolved configuration; read values as ``cfg.get("bag", "tau_val")`` or ``cfg["bag.tau_val"]``."""

    def __init__(self, values: Mapping[str, Mapping[str, Any]] | None = None):
        self.values = {s: {k: entry.default for k, entry in keys.items()} for s, keys in SCHEMA.items()}
        self.sources = {s: {k: "default" for k in keys} for s, keys in SCHEMA.items()}
        for section, kv in (values or {}).items():
            for key, val in kv.items():
                self.set(section, key, val, "code")

    def set(self, section: str, key: str, value: Any, source: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}] (from {source})")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key} (from {source})")
        self.values[section][key] = convert(section, key, value)
        self.sources[section][key] = source

    def get(self, section: str, key: str) -> Any:
        return self.values[section][key]

    def __getitem__(self, dotted: str) -> Any:
        section, key = dotted.split(".", 1)
        return self.get(section, key)

    def load_file(self, path: str | Path) -> None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
        for section in parser.sections():
            for key, val in parser.items(section):
                self.set(section, key, val, str(p))

    def load_env(self, environ: Mapping[str, str] | None = None) -> None:
        env = os.environ if environ is None else environ
        for name in sorted(env):
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX):].lower()
            for section in SCHEMA:
                if rest.startswith(section + "_"):
                    self.set(section, rest[len(section) + 1:], env[name], f"${name}")
                    break
            else:
                raise ConfigError(f"environment variable {name} matches no config section")

    def to_ini(self) -> str:
        lines = []
        for section, kv in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {str(v).lower() if isinstance(v, bool) else v}" for k, v in kv.items()]
            lines.append("")
        return "\n".join(lines)

    def snapshot(self) -> dict:
        return {s: dict(kv) for s, kv in self.values.items()}


def flag_name(section: str, key: str) -> str:
    return f"--{section}-{key.replace('_', '-')}"


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """Every config key as ``--section-key`` (plus the short aliases), default unset."""
    group = parser.add_argument_group("configuration overrides")
    group.add_argument("--config", metavar="PATH", help="INI-style config file")
    alias_of = {v: k for k, v in ALIASES.items()}
    for section, keys in SCHEMA.items():
        for key, entry in keys.items():
            names = [flag_name(section, key)]
            if (section, key) in alias_of:
                names.append("--" + alias_of[(section, key)])
            group.add_argument(*names, dest=f"cfg__{section}__{key}", default=None, metavar=entry.type.__name__.upper(),
                               help=f"{entry.help} (default {entry.default})")


def resolve(args: argparse.Namespace, environ: Mapping[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg.load_file(args.config)
    cfg.load_env(environ)
    for name, val in sorted(vars(args).items()):
        if name.startswith("cfg__") and val is not None:
            _, section, key = name.split("__")
            cfg.set(section, key, val, flag_name(section, key))
    return cfg
