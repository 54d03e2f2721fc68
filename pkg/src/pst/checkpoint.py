"""Bit-exact save/restore of a run in progress.

One ``.npz`` archive: every array under a path-like key plus a JSON document
under ``meta`` for the scalars, records and RNG states. No pickling, so files
are safe to load from untrusted sources.
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datasets import LabeledDataset
from .errors import ContractError
from .flops import FlopsLedger
from .model import LayerSpec, SegmentMap, build_network
from .rehearsal import MemoryBuffer, MixSchedule
from .training import RunState, TrainConfig

FORMAT = "pst-checkpoint/1"


def train_config_to_dict(cfg: TrainConfig) -> dict:
    return {
        "layers": [s.to_dict() for s in cfg.layers],
        "epochs": cfg.epochs, "reinforce_epochs": cfg.reinforce_epochs,
        "batch_size": cfg.batch_size, "score_batch_size": cfg.score_batch_size,
        "base_lr": cfg.base_lr, "momentum": cfg.momentum, "weight_decay": cfg.weight_decay,
        "beta": list(cfg.beta) if isinstance(cfg.beta, (list, tuple)) else cfg.beta,
        "memory": cfg.memory,
        "schedule": [cfg.schedule.head, cfg.schedule.period, cfg.schedule.tail],
        "seed": cfg.seed,
        "input_shape": list(cfg.input_shape) if cfg.input_shape else None,
    }


def train_config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    d["layers"] = tuple(LayerSpec.from_dict(s) for s in d["layers"])
    d["schedule"] = MixSchedule(*d["schedule"])
    if isinstance(d["beta"], list):
        d["beta"] = tuple(d["beta"])
    if d["input_shape"] is not None:
        d["input_shape"] = tuple(d["input_shape"])
    return TrainConfig(**d)


def save_checkpoint(state: RunState, path) -> Path:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.net.parameters().items():
        arrays[f"param/{name}"] = p.data
    for li, layer in enumerate(state.net.layers):
        if layer.stats is not None:
            arrays[f"bn/{li}/mean"] = layer.stats.mean
            arrays[f"bn/{li}/var"] = layer.stats.var
    for li, owners in state.segmap.owners.items():
        arrays[f"segmap/{li}"] = owners
    for name, buf in state.opt.buffers.items():
        arrays[f"opt/{name}"] = buf
    memory = {}
    for c, ds in state.memory.store.items():
        arrays[f"memory/{c}/features"] = ds.features
        arrays[f"memory/{c}/labels"] = ds.labels
        arrays[f"memory/{c}/ids"] = ds.ids
        memory[str(c)] = {"classes": list(ds.classes), "meta": ds.meta}

    meta = {
        "format": FORMAT,
        "strategy": state.strategy,
        "config": train_config_to_dict(state.config),
        "input_shape": list(state.net.input_shape),
        "planned_total_classes": state.net.planned_total_classes,
        "optimizer": [state.opt.base_lr, state.opt.momentum, state.opt.weight_decay],
        "rng": {k: g.bit_generator.state for k, g in state.rngs.items()},
        "memory_budget": state.memory.budget,
        "memory": memory,
        "next_task": state.next_task,
        "seen_classes": state.seen_classes,
        "global_epoch": state.global_epoch,
        "records": state.records,
        "summaries": state.summaries,
        "ledger": [state.ledger.forward, state.ledger.backward, state.ledger.update, state.ledger.steps],
        "acc_at_freeze": {str(k): v for k, v in state.acc_at_freeze.items()},
    }
    arrays["meta"] = np.array(json.dumps(meta))
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> RunState:
    with np.load(Path(path), allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(str(arrays.pop("meta")[()]))
    if meta.get("format") != FORMAT:
        raise ContractError(f"{path}: not a {FORMAT} file")

    config = train_config_from_dict(meta["config"])
    net, _ = build_network(config.layers, meta["input_shape"], meta["planned_total_classes"], seed=0)
    for name, p in net.parameters().items():
        p.data[...] = arrays[f"param/{name}"]
    for li, layer in enumerate(net.layers):
        if layer.stats is not None:
            layer.stats.mean[...] = arrays[f"bn/{li}/mean"]
            layer.stats.var[...] = arrays[f"bn/{li}/var"]
    segmap = SegmentMap({li: arrays[f"segmap/{li}"].copy() for li in net.unit_layers()})

    opt = nx.OptimizerState(*meta["optimizer"])
    opt.buffers = {k[4:]: v.copy() for k, v in arrays.items() if k.startswith("opt/")}

    rngs = {}
    for k, st in meta["rng"].items():
        g = np.random.Generator(getattr(np.random, st["bit_generator"])())
        g.bit_generator.state = st
        rngs[k] = g
    memory = MemoryBuffer(meta["memory_budget"], rngs["memory"])
    for c, info in meta["memory"].items():
        memory.store[int(c)] = LabeledDataset(arrays[f"memory/{c}/features"], arrays[f"memory/{c}/labels"],
                                              arrays[f"memory/{c}/ids"], tuple(info["classes"]), info["meta"])
    fwd, bwd, upd, steps = meta["ledger"]
    return RunState(
        meta["strategy"], config, net, segmap, memory, opt, rngs,
        next_task=meta["next_task"], seen_classes=list(meta["seen_classes"]),
        global_epoch=meta["global_epoch"], records=meta["records"], summaries=meta["summaries"],
        ledger=FlopsLedger(fwd, bwd, upd, steps),
        acc_at_freeze={int(k): v for k, v in meta["acc_at_freeze"].items()},
    )
