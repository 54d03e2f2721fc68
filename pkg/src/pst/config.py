"""Experiment configuration: YAML in, validated ``RunConfig`` out.

A resolved copy (every default filled in) is written next to each run so the
exact settings behind a metrics file stay auditable.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .datasets import LabeledDataset, TaskStream, load_image_dataset, make_stream, synth_gaussians
from .errors import ConfigError
from .model import REFERENCE_LAYERS, LayerSpec, build_network
from .rehearsal import MixSchedule
from .training import STRATEGIES, TrainConfig, validate

OUTPUT_ROOT_ENV = "PST_OUTPUT_ROOT"

SYNTHETIC_DEFAULTS = {"kind": "synthetic", "num_classes": 10, "dim": 16, "per_class": 100,
                      "separation": 6.0, "seed": 0}
IMAGE_KEYS = {"kind", "path", "test_path", "image_shape", "downsample", "mean", "std"}


@dataclass
class RunConfig:
    dataset: dict[str, Any]
    classes_per_task: int
    seeds: list[int]
    strategy: str
    train: TrainConfig
    output: Path
    name: str = "run"
    source: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def train_for(self, seed: int) -> TrainConfig:
        from dataclasses import replace
        return replace(self.train, seed=seed)

    def load_dataset(self) -> tuple[LabeledDataset, LabeledDataset | None]:
        if "data" not in self._cache:
            self._cache["data"] = _load_dataset(self.dataset, self.source)
        return self._cache["data"]

    def stream(self, seed: int) -> TaskStream:
        train, test = self.load_dataset()
        return make_stream(train, self.classes_per_task, seed, test)

    def stream_spec(self) -> dict:
        """What must match for two runs' metrics to be comparable."""
        return {"dataset": self.dataset, "classes_per_task": self.classes_per_task,
                "seeds": list(self.seeds)}

    def to_dict(self) -> dict:
        t = self.train
        return {
            "name": self.name,
            "dataset": dict(self.dataset),
            "stream": {"classes_per_task": self.classes_per_task, "seeds": list(self.seeds)},
            "model": {"layers": [s.to_dict() for s in t.layers],
                      "input_shape": list(t.input_shape) if t.input_shape else None},
            "strategy": self.strategy,
            "train": {
                "epochs": t.epochs, "reinforce_epochs": t.reinforce_epochs,
                "batch_size": t.batch_size, "score_batch_size": t.score_batch_size,
                "base_lr": t.base_lr, "momentum": t.momentum, "weight_decay": t.weight_decay,
                "beta": list(t.beta) if isinstance(t.beta, (list, tuple)) else t.beta,
                "memory": t.memory,
                "schedule": {"head": t.schedule.head, "period": t.schedule.period,
                             "tail": t.schedule.tail},
            },
            "output": str(self.output),
        }


def _load_dataset(spec: dict, source: Path | None):
    kind = spec["kind"]
    if kind == "synthetic":
        ds = synth_gaussians(spec["num_classes"], spec["dim"], spec["per_class"],
                             spec["separation"], seed=spec["seed"])
        return ds, None
    base = source.parent if source is not None else Path.cwd()
    kw = {k: spec[k] for k in ("downsample", "mean", "std") if spec.get(k) is not None}
    if kind == "raw" and spec.get("image_shape"):
        kw["image_shape"] = tuple(spec["image_shape"])
    train = load_image_dataset(base / spec["path"], kind, **kw)
    test = None
    if spec.get("test_path"):
        # the test split reuses the training normalization constants
        kw.update(mean=train.meta["mean"], std=train.meta["std"])
        if kind == "raw":
            kw["id_offset"] = len(train)
        test = load_image_dataset(base / spec["test_path"], kind, **kw)
    return train, test


def _section(raw: dict, key: str, problems: list[str]) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, dict):
        problems.append(f"{key}: expected a mapping")
        return {}
    return value


def _unknown(section: dict, allowed: set[str], prefix: str, problems: list[str]) -> None:
    for k in sorted(set(section) - allowed):
        problems.append(f"{prefix}.{k}: unknown field")


def parse_config(raw: dict, source: Path | None = None, output_root: str | None = None) -> RunConfig:
    """Build a ``RunConfig`` from a parsed mapping, collecting every problem before failing."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    problems: list[str] = []
    _unknown(raw, {"name", "dataset", "stream", "model", "strategy", "train", "output"}, "config", problems)

    dataset = dict(_section(raw, "dataset", problems))
    kind = dataset.setdefault("kind", "synthetic")
    if kind == "synthetic":
        _unknown(dataset, set(SYNTHETIC_DEFAULTS), "dataset", problems)
        dataset = {**SYNTHETIC_DEFAULTS, **dataset}
        if not (isinstance(dataset["separation"], (int, float)) and dataset["separation"] > 0):
            problems.append("dataset.separation: must be > 0")
        for k in ("num_classes", "dim", "per_class"):
            if not (isinstance(dataset[k], int) and dataset[k] > 0):
                problems.append(f"dataset.{k}: must be a positive integer")
    elif kind in ("raw", "png"):
        _unknown(dataset, IMAGE_KEYS, "dataset", problems)
        if not dataset.get("path"):
            problems.append("dataset.path: required for image datasets")
        dataset.setdefault("downsample", 1)
    else:
        problems.append(f"dataset.kind: unknown kind {kind!r}")

    stream = _section(raw, "stream", problems)
    _unknown(stream, {"classes_per_task", "seeds"}, "stream", problems)
    cpt = stream.get("classes_per_task", 5)
    seeds = stream.get("seeds", [0, 1, 2])
    if not (isinstance(cpt, int) and cpt > 0):
        problems.append("stream.classes_per_task: must be a positive integer")
    if not (isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds)):
        problems.append("stream.seeds: must be a non-empty list of non-negative integers")
    elif len(set(seeds)) != len(seeds):
        problems.append("stream.seeds: duplicate seeds")

    model = _section(raw, "model", problems)
    _unknown(model, {"layers", "input_shape"}, "model", problems)
    layers = REFERENCE_LAYERS
    if "layers" in model:
        try:
            layers = tuple(LayerSpec.from_dict(d) for d in model["layers"])
        except (ConfigError, TypeError, KeyError, AttributeError) as exc:
            problems.append(f"model.layers: {exc}")
    input_shape = model.get("input_shape")

    strategy = raw.get("strategy", "pst")
    if strategy not in STRATEGIES:
        problems.append(f"strategy: unknown {strategy!r} (expected one of {', '.join(STRATEGIES)})")

    tr = _section(raw, "train", problems)
    allowed = {"epochs", "reinforce_epochs", "batch_size", "score_batch_size", "base_lr",
               "momentum", "weight_decay", "beta", "memory", "schedule"}
    _unknown(tr, allowed, "train", problems)
    defaults = TrainConfig()
    kw = {k: tr.get(k, getattr(defaults, k)) for k in allowed - {"schedule"}}
    for k in ("epochs", "batch_size", "score_batch_size"):
        if not (isinstance(kw[k], int) and kw[k] > 0):
            problems.append(f"train.{k}: must be a positive integer")
    if not (isinstance(kw["reinforce_epochs"], int) and kw["reinforce_epochs"] >= 0):
        problems.append("train.reinforce_epochs: must be a non-negative integer")
    if not (isinstance(kw["memory"], int) and kw["memory"] >= 0):
        problems.append("train.memory: must be a non-negative integer")
    for k in ("base_lr", "momentum", "weight_decay"):
        if not isinstance(kw[k], (int, float)) or kw[k] < 0:
            problems.append(f"train.{k}: must be a non-negative number")
    if isinstance(kw["beta"], list):
        kw["beta"] = tuple(kw["beta"])
    schedule = MixSchedule()
    try:
        schedule = MixSchedule(**tr.get("schedule", {}))
    except (ConfigError, TypeError) as exc:
        problems.append(f"train.schedule: {exc}")

    output = raw.get("output", "runs/" + str(raw.get("name", "run")))
    root = output_root if output_root is not None else os.environ.get(OUTPUT_ROOT_ENV)
    out_path = Path(output)
    if root and not out_path.is_absolute():
        out_path = Path(root) / out_path

    if problems:
        raise ConfigError(problems)
    train = TrainConfig(layers=layers, schedule=schedule, seed=seeds[0],
                        input_shape=tuple(input_shape) if input_shape else None, **kw)
    cfg = RunConfig(dataset, cpt, list(seeds), strategy, train, out_path,
                    str(raw.get("name", "run")), source)
    check_feasible(cfg)
    return cfg


def check_feasible(cfg: RunConfig) -> None:
    """Validate hyperparameters against the network and stream they will run on."""
    if cfg.dataset["kind"] == "synthetic":
        num_classes = cfg.dataset["num_classes"]
        shape = cfg.train.input_shape or (cfg.dataset["dim"],)
    else:
        train, _ = cfg.load_dataset()
        num_classes = len(train.classes)
        shape = cfg.train.input_shape or train.features.shape[1:]
    if cfg.classes_per_task > num_classes:
        raise ConfigError([f"stream.classes_per_task: {cfg.classes_per_task} exceeds "
                           f"{num_classes} classes"])
    num_tasks = -(-num_classes // cfg.classes_per_task)
    net, _ = build_network(cfg.train.layers, shape, num_classes, seed=0)
    validate(cfg.train, net, num_tasks, num_classes)


def load_config(path, output_root: str | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(raw or {}, path, output_root)


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
