"""Run configuration: a sectioned key = value text file plus command-line
overrides of the form ``--set section.key=value``.

Sections: [data] generator settings, [model] network sizes, [loss] objective
weights and scenario, [train] optimizer/loop settings, [run] output paths.
Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import configparser
import copy
import hashlib
import json

DEFAULTS: dict[str, dict] = {
    "data": {
        "path": "dataset.dsgo",
        "d_z": 2,
        "m_kind": "affine-basis",
        "num_tasks": 10,
        "n_train": 4,
        "n_eval": 1,
        "grid": (16,),
        "grf_exponent": 1.25,
        "seed": 0,
        "with_labels": False,
        "with_b": False,
        "for_identifiability": False,
    },
    "model": {
        "d_z": 2,
        "channels": 16,
        "modes": (8,),
        "depth": 4,
        "enc_hidden": 64,
        "dec_hidden": 64,
        "num_classes": 0,
    },
    "loss": {
        "scenario": "SC1",
        "beta_d": 1.0,
        "beta_kl": 1.0,
        "beta_cls": 0.0,
        "kl_form": "simplified",
    },
    "train": {
        "mode": "disentango",
        "epochs": 50,
        "patience": 0,
        "task_batch": 0,
        "seed": 0,
        "lr": 1e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "lr_decay": 0.995,
        "stats_momentum": 0.9,
    },
    "run": {
        "outdir": "out",
    },
}


class ConfigError(ValueError):
    pass


def _coerce(section: str, key: str, raw: str):
    default = DEFAULTS[section][key]
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"bad value for {section}.{key}: {e}") from e


def load_config(path: str | None = None, overrides: list[str] | None = None) -> dict:
    """Parse the config file (if any) and apply --set overrides on top of the
    defaults; returns a plain nested dict."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except configparser.Error as e:
            raise ConfigError(f"malformed config {path}: {e}") from e
        for section in parser.sections():
            if section not in cfg:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in cfg[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                cfg[section][key] = _coerce(section, key, raw)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value: {item!r}")
        target, raw = item.split("=", 1)
        section, key = target.split(".", 1)
        if section not in cfg or key not in cfg[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        cfg[section][key] = _coerce(section, key, raw)
    return cfg


def hash_config(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
