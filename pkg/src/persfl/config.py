"""Run configuration: a YAML tree validated against a fixed schema.

Every key is optional; omitted keys take the defaults below, and the fully
resolved tree is echoed into the run outputs.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .datasets import load_idx, synth_gaussian
from .distill import DEFAULT_LAMBDAS, DEFAULT_TEMPERATURES, DistillConfig
from .errors import ConfigError, PersFLError
from .fedsim import FedConfig
from .nn import Hyper
from .splitter import SplitSpec

DEFAULTS = {
    "seed": 0,
    "repetitions": 5,
    "workers": 1,
    "output_dir": None,
    "dataset": {
        "source": "synthetic",
        "synthetic": {"num_classes": 10, "per_class": 300, "dim": 20, "spread": 1.5},
        "idx": {"images": None, "labels": None, "normalize": True, "num_classes": None,
                "limit": None},
    },
    "split": {"strategy": "DS1", "K": 10, "k_overlap": 4, "alpha": 0.9, "mu": 0.0,
              "sigma": 2.0, "seed": None},
    "model": {"hidden": [100]},
    "fedavg": {"rounds": 20, "eta": 0.05, "batch_size": 32, "local_epochs": 2,
               "snapshot_policy": "every_round", "weighted": False},
    "distill": {"lambdas": list(DEFAULT_LAMBDAS), "temperatures": list(DEFAULT_TEMPERATURES),
                "epochs": 5, "objective": "KL", "init_mode": "optimal_teacher",
                "kl_direction": "teacher_student"},
}

# Leaf types; a tuple lists the accepted alternatives.
_TYPES = {
    "seed": int, "repetitions": int, "workers": int, "output_dir": (str, type(None)),
    "dataset.source": str,
    "dataset.synthetic.num_classes": int, "dataset.synthetic.per_class": int,
    "dataset.synthetic.dim": int, "dataset.synthetic.spread": (int, float),
    "dataset.idx.images": (str, type(None)), "dataset.idx.labels": (str, type(None)),
    "dataset.idx.normalize": bool, "dataset.idx.num_classes": (int, type(None)),
    "dataset.idx.limit": (int, type(None)),
    "split.strategy": str, "split.K": int, "split.k_overlap": int,
    "split.alpha": (int, float), "split.mu": (int, float), "split.sigma": (int, float),
    "split.seed": (int, type(None)),
    "model.hidden": list,
    "fedavg.rounds": int, "fedavg.eta": (int, float), "fedavg.batch_size": int,
    "fedavg.local_epochs": int, "fedavg.snapshot_policy": str, "fedavg.weighted": bool,
    "distill.lambdas": list, "distill.temperatures": list, "distill.epochs": int,
    "distill.objective": str, "distill.init_mode": str, "distill.kl_direction": str,
}


def _line_map(text):
    """Map dotted key paths to 1-based line numbers in the YAML source."""
    lines = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                lines[path] = key.start_mark.line + 1
                walk(value, path)

    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return lines


def _merge(base, override, prefix, lines):
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in base:
            raise ConfigError(_where(f"unknown key {path!r}", path, lines))
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(_where(f"{path!r} must be a mapping", path, lines))
            out[key] = _merge(base[key], value, path, lines)
        else:
            expected = _TYPES[path]
            ok = isinstance(value, expected) and not (
                isinstance(value, bool) and expected in (int, (int, float)))
            if not ok:
                raise ConfigError(_where(
                    f"{path!r} has type {type(value).__name__}, expected "
                    f"{_type_name(expected)}", path, lines))
            out[key] = value
    return out


def _type_name(t):
    if isinstance(t, tuple):
        return " or ".join("null" if x is type(None) else x.__name__ for x in t)
    return t.__name__


def _where(message, path, lines):
    line = lines.get(path)
    return f"{message} (line {line})" if line else message


@dataclass
class RunConfig:
    tree: dict
    source: str = "<defaults>"

    @classmethod
    def from_text(cls, text, source="<string>"):
        try:
            raw = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
            raise ConfigError(f"{source}: invalid YAML{where}: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{source}: top level must be a mapping")
        lines = _line_map(text)
        try:
            tree = _merge(DEFAULTS, raw, "", lines)
            cfg = cls(tree, source)
            cfg.validate(lines)
        except ConfigError as exc:
            raise ConfigError(f"{source}: {exc}") from exc
        return cfg

    @classmethod
    def load(cls, path):
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text, source=str(path))

    @classmethod
    def defaults(cls):
        return cls(copy.deepcopy(DEFAULTS))

    def with_seed(self, seed):
        tree = copy.deepcopy(self.tree)
        tree["seed"] = int(seed)
        return RunConfig(tree, self.source)

    def validate(self, lines=None):
        lines = lines or {}
        t = self.tree
        if t["repetitions"] < 1:
            raise ConfigError(_where("repetitions must be >= 1", "repetitions", lines))
        if t["workers"] < 1:
            raise ConfigError(_where("workers must be >= 1", "workers", lines))
        if t["dataset"]["source"] not in ("synthetic", "idx"):
            raise ConfigError(_where("dataset.source must be 'synthetic' or 'idx'",
                                     "dataset.source", lines))
        if t["dataset"]["source"] == "idx":
            for key in ("images", "labels"):
                if not t["dataset"]["idx"][key]:
                    raise ConfigError(f"dataset.idx.{key} is required when source is 'idx'")
        if not all(isinstance(h, int) and h > 0 for h in t["model"]["hidden"]):
            raise ConfigError(_where("model.hidden must be a list of positive integers",
                                     "model.hidden", lines))
        for key in ("lambdas", "temperatures"):
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                       for v in t["distill"][key]):
                raise ConfigError(_where(f"distill.{key} must be a list of numbers",
                                         f"distill.{key}", lines))
        # Constructing the component configs runs their own invariant checks.
        try:
            self.split_spec()
            self.fed_config(0)
            self.distill_config()
            if t["dataset"]["source"] == "synthetic":
                s = t["dataset"]["synthetic"]
                if min(s["num_classes"], s["per_class"], s["dim"]) < 1 or s["spread"] <= 0:
                    raise ConfigError("dataset.synthetic values must be positive")
        except ConfigError:
            raise
        except PersFLError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def seed(self):
        return int(self.tree["seed"])

    @property
    def repetitions(self):
        return int(self.tree["repetitions"])

    def split_spec(self):
        s = self.tree["split"]
        return SplitSpec(strategy=s["strategy"], K=s["K"], k_overlap=s["k_overlap"],
                         alpha=float(s["alpha"]), mu=float(s["mu"]), sigma=float(s["sigma"]),
                         seed=self.seed if s["seed"] is None else s["seed"])

    def hyper(self):
        f = self.tree["fedavg"]
        return Hyper(eta=float(f["eta"]), batch_size=f["batch_size"],
                     local_epochs=f["local_epochs"])

    def fed_config(self, seed):
        f = self.tree["fedavg"]
        return FedConfig(E_G=f["rounds"], hyper=self.hyper(), K=self.tree["split"]["K"],
                         seed=int(seed), snapshot_policy=f["snapshot_policy"],
                         hidden=tuple(self.tree["model"]["hidden"]), weighted=f["weighted"],
                         workers=self.tree["workers"])

    def distill_config(self):
        d = self.tree["distill"]
        return DistillConfig(lambda_grid=tuple(d["lambdas"]), T_grid=tuple(d["temperatures"]),
                             E=d["epochs"], objective=d["objective"], init_mode=d["init_mode"],
                             hyper=self.hyper(), kl_direction=d["kl_direction"],
                             workers=self.tree["workers"])

    def repetition_seed(self, rep):
        return repetition_seed(self.seed, rep)

    def load_dataset(self):
        d = self.tree["dataset"]
        if d["source"] == "synthetic":
            s = d["synthetic"]
            return synth_gaussian(s["num_classes"], s["per_class"], s["dim"], float(s["spread"]),
                                  self.seed)
        i = d["idx"]
        base = Path(self.source).parent if self.source not in ("<string>", "<defaults>") else Path()
        ds = load_idx(base / i["images"], base / i["labels"], num_classes=i["num_classes"],
                      normalize=i["normalize"])
        if i["limit"]:
            from .datasets import Dataset
            ds = Dataset(ds.features[:i["limit"]], ds.labels[:i["limit"]], ds.num_classes)
        return ds


def repetition_seed(run_seed, rep):
    """Independent seed for one repetition, derived from the master seed."""
    return int(np.random.SeedSequence([int(run_seed), int(rep), 0x5EED]).generate_state(1)[0])
