"""Run configuration: a JSON document validated against a published schema.

Every section is optional and falls back to the desk-scale defaults below.
Unknown keys are rejected, and all problems are reported together.
"""

import copy
import hashlib
import json
import logging
import os
from dataclasses import dataclass

from jsonschema import Draft202012Validator

from . import data, search, trainer
from .errors import ConfigError

log = logging.getLogger(__name__)

ENV_OUT = "EENAS_OUT"
DEFAULT_OUT = "eenas-out"

_num = {"type": "number"}
_pos_int = {"type": "integer", "minimum": 1}
_nonneg_int = {"type": "integer", "minimum": 0}
_unit = {"type": "number", "minimum": 0, "maximum": 1}


def _obj(props, **extra):
    return {"type": "object", "properties": props, "additionalProperties": False, **extra}


SCHEMA = _obj(
    {
        "seed": _nonneg_int,
        "output_dir": {"type": "string", "minLength": 1},
        "dataset": _obj(
            {
                "kind": {"enum": ["synthetic", "cifar10"]},
                "path": {"type": "string"},
                "n_per_class": _pos_int,
                "classes": {"type": "integer", "minimum": 2, "maximum": 256},
                "size": {"type": "integer", "minimum": 4},
                "noise": {"type": "number", "minimum": 0},
                "fractions": {"type": "array", "items": _unit, "minItems": 2, "maxItems": 2},
                "batch_size": _pos_int,
            }
        ),
        "constraints": _obj(
            {
                "accuracy": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "macs": {"type": "number", "exclusiveMinimum": 0},
            }
        ),
        "train": _obj(
            {
                "mu": {"type": "array", "items": _nonneg_int, "minItems": 3, "maxItems": 3},
                "omega": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
                "lambda_e": {"type": "number", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "optimizer": {"enum": ["sgd", "adam"]},
                "regularize_exits": {"type": "boolean"},
                "mode": {"enum": ["differentiable", "joint"]},
                "support_per_class": _nonneg_int,
                "eval_batch": _pos_int,
            }
        ),
        "search": _obj(
            {
                "n_start": _pos_int,
                "iterations": _nonneg_int,
                "population": {"type": "integer", "minimum": 2},
                "generations": _nonneg_int,
                "n_batch": _pos_int,
                "crossover_rate": _unit,
                "mutation_rate": {"oneOf": [_unit, {"type": "null"}]},
                "k": _pos_int,
                "constrained": {"type": "boolean"},
                "workers": _pos_int,
                "max_exits": {"type": "integer", "minimum": 1, "maximum": 5},
                "head_channels": _pos_int,
                "cv_folds": {"type": "integer", "minimum": 2},
                "stop_at_first_admissible": {"type": "boolean"},
            }
        ),
        "report": _obj({"entry": {"oneOf": [_nonneg_int, {"type": "null"}]}}),
    },
    **{"$schema": "https://json-schema.org/draft/2020-12/schema", "title": "eenas run configuration"},
)

DEFAULTS = {
    "seed": 0,
    "dataset": {
        "kind": "synthetic",
        "path": "",
        "n_per_class": 200,
        "classes": 10,
        "size": 16,
        "noise": 0.3,
        "fractions": [0.8, 0.2],
        "batch_size": 64,
    },
    "constraints": {"accuracy": 0.9, "macs": 6.0e5},
    "train": {
        "mu": [4, 2, 2],
        "omega": [1.0, 1.0, 1.0],
        "lambda_e": 1.0,
        "lr": 1e-3,
        "optimizer": "adam",
        "regularize_exits": True,
        "mode": "differentiable",
        "support_per_class": 10,
        "eval_batch": 512,
    },
    "search": {
        "n_start": 16,
        "iterations": 5,
        "population": 20,
        "generations": 20,
        "n_batch": 4,
        "crossover_rate": 0.9,
        "mutation_rate": None,
        "k": 3,
        "constrained": True,
        "workers": 1,
        "max_exits": 5,
        "head_channels": 16,
        "cv_folds": 5,
        "stop_at_first_admissible": False,
    },
    "report": {"entry": None},
}


def _path(err):
    parts = [str(p) for p in err.absolute_path]
    return "/".join(parts) if parts else "<root>"


def validate(doc):
    """Raise ConfigError listing every schema violation in ``doc``."""
    validator = Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    problems = []
    for e in errors:
        if e.validator == "additionalProperties":
            known = set(e.schema.get("properties", {}))
            for key in sorted(set(e.instance) - known):
                where = _path(e)
                problems.append(f"{where + '/' if where != '<root>' else ''}{key}: unknown key")
        else:
            problems.append(f"{_path(e)}: {e.message}")
    if problems:
        raise ConfigError(problems)


def _merge(base, override):
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    """Validated, defaults-filled configuration tree."""

    tree: dict

    @classmethod
    def from_dict(cls, doc):
        validate(doc)
        tree = _merge(DEFAULTS, doc)
        cfg = cls(tree)
        cfg.check()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})"]) from None
        return cls.from_dict(doc)

    @classmethod
    def default(cls):
        return cls.from_dict({})

    def check(self):
        """Cross-field rules that JSON Schema cannot express; also builds every sub-config."""
        problems = []
        for build in (self.train_config, self.search_config):
            try:
                build()
            except ValueError as exc:
                problems.append(str(exc))
        ds = self.tree["dataset"]
        if abs(sum(ds["fractions"]) - 1.0) > 1e-9:
            problems.append("dataset/fractions: must sum to 1")
        if ds["kind"] == "cifar10" and not ds["path"]:
            problems.append("dataset/path: required for the cifar10 dataset")
        if problems:
            raise ConfigError(problems)

    def with_overrides(self, seed=None, output_dir=None):
        tree = copy.deepcopy(self.tree)
        if seed is not None:
            tree["seed"] = int(seed)
        if output_dir is not None:
            tree["output_dir"] = str(output_dir)
        return RunConfig(tree)

    @property
    def seed(self):
        return int(self.tree["seed"])

    def output_dir(self):
        return self.tree.get("output_dir") or os.environ.get(ENV_OUT) or DEFAULT_OUT

    def digest(self):
        """SHA-256 of the canonical JSON form (sorted keys, no whitespace)."""
        canon = json.dumps(self.tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def train_config(self):
        t = self.tree["train"]
        c = self.tree["constraints"]
        return trainer.TrainConfig(
            mu=tuple(t["mu"]),
            omega=tuple(t["omega"]),
            lambda_e=t["lambda_e"],
            accuracy_constraint=c["accuracy"],
            macs_constraint=c["macs"],
            support_per_class=t["support_per_class"],
            seed=self.seed,
            lr=t["lr"],
            batch_size=self.tree["dataset"]["batch_size"],
            optimizer=t["optimizer"],
            regularize_exits=t["regularize_exits"],
            mode=t["mode"],
            eval_batch=t["eval_batch"],
        )

    def search_config(self):
        s = self.tree["search"]
        c = self.tree["constraints"]
        return search.SearchConfig(
            accuracy_constraint=c["accuracy"],
            macs_constraint=c["macs"],
            seed=self.seed,
            **s,
        )

    def load_dataset(self):
        ds = self.tree["dataset"]
        if ds["kind"] == "cifar10":
            return data.load_cifar10_binary(ds["path"], num_classes=ds["classes"])
        return data.generate_synthetic(self.seed, ds["n_per_class"], ds["classes"], ds["size"], ds["noise"])

    def splits(self, dataset=None):
        ds = dataset if dataset is not None else self.load_dataset()
        d = self.tree["dataset"]
        return data.split_and_batch(ds, tuple(d["fractions"]), d["batch_size"], self.seed, self.tree["train"]["support_per_class"])
