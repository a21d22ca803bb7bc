"""One JSON document configures every stage.

Missing keys take the defaults below; unknown keys are rejected so that
typos do not silently fall back to a default.  ``resolve`` returns a deep
copy, so callers may mutate the result.
"""
from __future__ import annotations

import copy
import json
from pathlib import Path

DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "checkpoint_dir": "checkpoints",
    "data": {
        "lastchar": {"n": 11000, "sizes": [10000, 300, 300, 400], "min_len": 2, "max_len": 6,
                     "concentration": 0.3},
        "oohmm": {"n": 3000, "sizes": [2500, 100, 100, 300], "min_T": 10, "max_T": 16,
                  "p_end": 0.6, "fidelity": 0.95},
        "sourcesep": {"n": 600, "sizes": [400, 50, 50, 100], "J": 2, "max_len": 6, "min_len": 1,
                      "n_chars": 6, "source_lm": "bigram", "vocab_size": 2000},
    },
    "model": {"d": 32, "emb": 16, "max_epochs": 3, "lr": 1e-3, "l2": 1e-5, "batch_size": 32,
              "patience": 1},
    "proposal": {"d": 32, "emb": 16, "enc_layers": 2, "hidden": 32, "c_layers": 4, "use_hhat": False},
    "train": {"lam": 0.5, "M_train": 32, "batch_size": 16, "max_epochs": 20, "baseline_decay": [0.1, 0.9],
              "lr": 1e-3, "l2": 1e-5, "patience": 3, "eval_M": 32, "eval_resample": "never",
              "steps_per_epoch": 0, "dev_size": 100},
    "eval": {"samplers": ["PF", "PS", "PF:R", "PS:R", "BEAM"], "M_grid": [8, 16, 32, 64, 128],
             "seeds": [0], "split": "test", "limit": 0, "pool_cache": "pool.jsonl"},
    "sweep": {"lams": [0.0, 0.5, 1.0], "M_train": [4, 32]},
}


class ConfigError(ValueError):
    pass


def _merge(base, over, path=""):
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            _merge(base[key], val, where)
        else:
            base[key] = val
    return base


def resolve(doc=None):
    """Defaults overlaid with ``doc`` (a dict or ``None``)."""
    return _merge(copy.deepcopy(DEFAULTS), doc or {})


def load(path=None):
    if path is None:
        return resolve()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return resolve(doc)


def dump(cfg, path):
    Path(path).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
