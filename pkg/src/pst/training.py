"""Progressive segmented training of one network over a task stream.

Per task: memory-assisted training of the free units, one importance-scoring
pass, re-initialization and retraining of the selected units, then freezing
them for good. Baselines and ablations reuse the same loop with pieces
switched off.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .datasets import LabeledDataset, Task, TaskStream
from .errors import CapacityError, ConfigError, ContractError
from .flops import FlopsLedger, flops_step
from .model import (
    REFERENCE_LAYERS, LayerSpec, Network, SegmentMap, UnitRef, all_units, build_freeze_mask,
    build_network, check_rows_available, forward, merge_masks, reinit_units, trainable_only,
    unit_ref,
)
from .rehearsal import (
    BALANCED, CLASSIFIER_FINETUNE, CURRENT_ONLY, MemoryBuffer, MixSchedule, balanced_mix,
    epochs_using_memory, round_half_up, update_memory,
)

log = logging.getLogger(__name__)

STRATEGIES = ("pst", "finetune", "fixed_representation", "hybrid1", "hybrid2", "hybrid3",
              "hybrid3_current_only")
REINFORCE = "reinforce"


@dataclass
class TrainConfig:
    layers: Sequence[LayerSpec] = REFERENCE_LAYERS
    epochs: int = 30
    reinforce_epochs: int = 20
    batch_size: int = 32
    score_batch_size: int = 64
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    beta: float | Sequence[float] = 0.5
    memory: int = 200
    schedule: MixSchedule = field(default_factory=MixSchedule)
    seed: int = 0
    input_shape: tuple[int, ...] | None = None  # reshape flat features, e.g. (1, 4, 4)

    def beta_for(self, task_id: int) -> float:
        if isinstance(self.beta, (int, float)):
            return float(self.beta)
        if task_id >= len(self.beta):
            raise ConfigError(f"beta schedule has no entry for task {task_id}")
        return float(self.beta[task_id])


def validate(config: TrainConfig, net: Network, num_tasks: int, num_classes: int) -> None:
    """Reject configs that would run out of units or classifier rows mid-stream."""
    problems = []
    if config.epochs < 1:
        problems.append("epochs must be > 0")
    if config.reinforce_epochs < 0:
        problems.append("reinforce_epochs must be >= 0")
    if config.batch_size < 1 or config.score_batch_size < 1:
        problems.append("batch sizes must be positive")
    if config.memory < 0:
        problems.append("memory budget must be >= 0")
    elif 0 < config.memory < num_classes:
        problems.append(f"memory budget {config.memory} smaller than class count {num_classes}")
    try:
        betas = [config.beta_for(t) for t in range(num_tasks)]
    except ConfigError as exc:
        problems.extend(exc.problems)
        betas = []
    if any(not 0 < b <= 1 for b in betas):
        problems.append("every beta must lie in (0, 1]")
    if sum(betas) > 1 + 1e-12:
        problems.append(f"cumulative beta {sum(betas):.4g} exceeds 1")
    for li in net.unit_layers():
        if li == net.classifier_index:
            continue
        units = net.layers[li].units
        need = sum(round_half_up(b * units) for b in betas)
        if need > units:
            problems.append(f"layer {li}: beta schedule freezes {need} of {units} units")
    if num_classes > net.num_outputs:
        problems.append(f"{num_classes} classes exceed {net.num_outputs} classifier rows")
    if problems:
        raise ConfigError(problems)


# ---------------------------------------------------------------------------
# evaluation


def predict_logits(net: Network, features: np.ndarray, chunk: int = 1024) -> np.ndarray:
    out = [forward(net, features[i:i + chunk], "eval").data for i in range(0, len(features), chunk)]
    return np.concatenate(out) if out else np.zeros((0, net.num_outputs))


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray, classes) -> float:
    """Fraction of rows whose argmax over ``classes`` hits the label."""
    if len(labels) == 0:
        raise ContractError("cannot score an empty test set")
    classes = np.array(sorted(int(c) for c in classes))
    pred = classes[np.argmax(logits[:, classes], axis=1)]
    return float(np.mean(pred == labels))


def evaluate_single_head(net: Network, testset: LabeledDataset, seen_classes) -> float:
    return accuracy_from_logits(predict_logits(net, testset.features), testset.labels, seen_classes)


def evaluate_multi_head(net: Network, testset: LabeledDataset, task_classes) -> float:
    return accuracy_from_logits(predict_logits(net, testset.features), testset.labels, task_classes)


# ---------------------------------------------------------------------------
# importance


@dataclass
class ImportanceReport:
    """Mean per-unit Taylor scores; frozen units hold NaN (no score)."""

    scores: dict[int, np.ndarray]
    batches: int
    examples: int

    def score(self, unit: UnitRef) -> float:
        return float(self.scores[unit.layer_index][unit.unit_index])


def unit_taylor_scores(net: Network, tape: nx.GradTape) -> dict[int, np.ndarray]:
    """Per unit, the sum over its weight elements of ``|dL/dw * w|``."""
    out = {}
    for li in net.unit_layers():
        w = net.layers[li].params[f"{li}.weight"]
        prod = np.abs(tape[w] * w.data)
        out[li] = prod.reshape(prod.shape[0], -1).sum(axis=1)
    return out


def importance_scores(net: Network, segmap: SegmentMap, data: LabeledDataset,
                      batch_size: int, active_classes=None) -> ImportanceReport:
    """One ordered pass over ``data``; per-minibatch unit scores are averaged.

    The network runs in eval mode so scoring changes no state.
    """
    if len(data) == 0:
        raise ContractError("importance scoring needs a non-empty dataset")
    active = sorted(active_classes) if active_classes is not None else list(data.classes)
    total = {li: np.zeros(net.layers[li].units) for li in net.unit_layers()}
    batches = 0
    for start in range(0, len(data), batch_size):
        xb = data.features[start:start + batch_size]
        yb = data.labels[start:start + batch_size]
        loss = nx.softmax_xent(forward(net, xb, "eval"), yb, active)
        tape = nx.backward(loss)
        for li, s in unit_taylor_scores(net, tape).items():
            total[li] += s
        batches += 1
    scores = {}
    for li, s in total.items():
        s = s / batches
        s[segmap.frozen(li)] = np.nan
        scores[li] = s
    return ImportanceReport(scores, batches, len(data))


def select_count(beta: float, units: int) -> int:
    return round_half_up(beta * units)


def select_top_beta(report: ImportanceReport, beta: float, segmap: SegmentMap,
                    layers=None, net: Network | None = None) -> set[UnitRef]:
    """Per layer, the ``round(beta*O)`` highest-scoring free units (ties: lower index)."""
    if not 0 < beta <= 1:
        raise ContractError("beta must lie in (0, 1]")
    layers = sorted(report.scores) if layers is None else layers
    chosen: set[UnitRef] = set()
    for li in layers:
        scores = report.scores[li]
        k = select_count(beta, scores.size)
        free = segmap.free_units(li)
        if free.size < k:
            raise CapacityError(f"layer {li}: need {k} free units, only {free.size} left")
        order = free[np.argsort(-scores[free], kind="stable")]
        kind = "filter" if net is not None and net.layers[li].spec.kind == "conv" else "neuron"
        chosen.update(UnitRef(li, int(u), kind) for u in order[:k])
    return chosen


def select_random(rng: np.random.Generator, beta: float, segmap: SegmentMap, layers,
                  net: Network | None = None) -> set[UnitRef]:
    chosen: set[UnitRef] = set()
    for li in layers:
        k = select_count(beta, segmap.owners[li].size)
        free = segmap.free_units(li)
        if free.size < k:
            raise CapacityError(f"layer {li}: need {k} free units, only {free.size} left")
        kind = "filter" if net is not None and net.layers[li].spec.kind == "conv" else "neuron"
        chosen.update(UnitRef(li, int(u), kind) for u in np.sort(rng.choice(free, size=k, replace=False)))
    return chosen


# ---------------------------------------------------------------------------
# run state and the training loop


@dataclass
class RunState:
    strategy: str
    config: TrainConfig
    net: Network
    segmap: SegmentMap
    memory: MemoryBuffer
    opt: nx.OptimizerState
    rngs: dict[str, np.random.Generator]
    next_task: int = 0
    seen_classes: list[int] = field(default_factory=list)
    global_epoch: int = 0
    records: list[dict] = field(default_factory=list)
    summaries: list[dict] = field(default_factory=list)
    ledger: FlopsLedger = field(default_factory=FlopsLedger)
    acc_at_freeze: dict[int, float] = field(default_factory=dict)


def new_run_state(strategy: str, config: TrainConfig, input_shape, planned_total_classes: int) -> RunState:
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {strategy!r}; expected one of {', '.join(STRATEGIES)}")
    init, data, mem, select = (np.random.default_rng(s)
                               for s in np.random.SeedSequence(config.seed).spawn(4))
    net, segmap = build_network(config.layers, input_shape, planned_total_classes, init)
    opt = nx.OptimizerState(config.base_lr, config.momentum, config.weight_decay)
    memory = MemoryBuffer(config.memory, mem)
    return RunState(strategy, config, net, segmap, memory, opt,
                    {"init": init, "data": data, "memory": mem, "select": select})


def _train_epoch(state: RunState, data: LabeledDataset, active, lr: float,
                 mask: dict[str, np.ndarray], bn_mode: str) -> float:
    net, cfg = state.net, state.config
    params = net.parameters()
    order = state.rngs["data"].permutation(len(data))
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        logits = forward(net, data.features[idx], bn_mode, state.segmap)
        loss = nx.softmax_xent(logits, data.labels[idx], active)
        tape = nx.backward(loss)
        nx.sgd_step(params, tape, state.opt, lr, mask)
        state.ledger.add(*flops_step(net, state.segmap, len(idx), mask))
        losses.append(float(loss.data) * len(idx))
    return sum(losses) / max(len(order), 1)


def _classifier_only(net: Network) -> dict[str, np.ndarray]:
    ci = net.classifier_index
    return {name: np.full(p.shape, not name.startswith(f"{ci}."), dtype=bool)
            for name, p in net.parameters().items()}


def _record_epoch(state: RunState, task: Task, stream: TaskStream, epoch: int, phase: str,
                  lr: float, loss: float) -> None:
    seen = state.seen_classes
    tasks = stream.tasks[:task.task_id + 1]
    test_all = LabeledDataset.concat([t.test for t in tasks])
    logits = predict_logits(state.net, test_all.features)
    single = accuracy_from_logits(logits, test_all.labels, seen)
    multi = []
    for t in tasks:
        sel = np.isin(test_all.labels, t.classes)
        multi.append(accuracy_from_logits(logits[sel], test_all.labels[sel], t.classes))
    state.records.append({
        "record": "epoch", "task_id": task.task_id, "epoch": state.global_epoch,
        "phase": phase, "lr": lr, "loss": loss, "single_head_acc": single,
        "multi_head_acc": multi, **state.ledger.epoch_totals(),
    })
    state.global_epoch += 1


def _task_mode(strategy: str) -> dict:
    return {
        "memory": strategy in ("pst", "hybrid1", "hybrid2"),
        "plain_rehearsal": strategy == "hybrid3",
        "segment": strategy in ("pst", "hybrid1", "hybrid2", "hybrid3", "hybrid3_current_only"),
        "select": "random" if strategy == "hybrid1" else "importance",
        "reinforce": strategy in ("pst", "hybrid1", "hybrid3", "hybrid3_current_only"),
    }


def _data_for(state: RunState, task: Task, use_memory: bool) -> LabeledDataset:
    if state.strategy == "hybrid3":
        mem = state.memory.as_dataset()
        return task.train if mem is None else LabeledDataset.concat([mem, task.train])
    if use_memory:
        return balanced_mix(state.memory, task.train, state.rngs["memory"])
    return task.train


def segment_and_reinforce(state: RunState, task: Task, important: set[UnitRef], stream: TaskStream,
                          use_memory: bool, reinforce: bool = True) -> None:
    """Re-initialize ``important``, retrain only those units, then freeze them."""
    net, cfg = state.net, state.config
    for u in important:
        if state.segmap.owner(u) != -1:
            raise ContractError(f"unit {u} is already frozen")
    if reinforce:
        reinit_units(net, important, state.rngs["init"])
        mask = trainable_only(net, important)
        state.opt.reset()
        for e in range(cfg.reinforce_epochs):
            lr = nx.lr_at(e, cfg.reinforce_epochs, cfg.base_lr)
            data = _data_for(state, task, use_memory)
            loss = _train_epoch(state, data, state.seen_classes, lr, mask, "train")
            _record_epoch(state, task, stream, e, REINFORCE, lr, loss)
    state.segmap.freeze(important, task.task_id)


def pst_train_task(state: RunState, task: Task, stream: TaskStream) -> dict:
    """Run one task through the strategy's routine and return its summary row."""
    net, cfg, strategy = state.net, state.config, state.strategy
    if set(task.classes) & set(state.seen_classes):
        raise ContractError(f"task {task.task_id} repeats already-seen classes")
    check_rows_available(net, task.classes)
    state.seen_classes = sorted(state.seen_classes + list(task.classes))
    mode = _task_mode(strategy)
    ledger_start = state.ledger.snapshot()

    # memory-assisted training of the free units
    state.opt.reset()
    base_mask = build_freeze_mask(state.segmap, net)
    head_only = merge_masks(base_mask, _classifier_only(net))
    for e in range(cfg.epochs):
        lr = nx.lr_at(e, cfg.epochs, cfg.base_lr)
        if strategy == "fixed_representation" and task.task_id > 0:
            phase, mask, bn_mode = CURRENT_ONLY, head_only, "eval"
        elif mode["memory"]:
            phase = epochs_using_memory(e, cfg.epochs, cfg.schedule)
            mask, bn_mode = (head_only, "eval") if phase == CLASSIFIER_FINETUNE else (base_mask, "train")
        elif mode["plain_rehearsal"]:
            phase, mask, bn_mode = "rehearsal", base_mask, "train"
        else:
            phase, mask, bn_mode = CURRENT_ONLY, base_mask, "train"
        data = task.train if phase == CURRENT_ONLY else _data_for(state, task, True)
        loss = _train_epoch(state, data, state.seen_classes, lr, mask, bn_mode)
        _record_epoch(state, task, stream, e, phase, lr, loss)

    # importance sampling and segmentation
    if mode["segment"]:
        feature_layers = [li for li in net.unit_layers() if li != net.classifier_index]
        beta = cfg.beta_for(task.task_id)
        scoring = _data_for(state, task, mode["memory"] or mode["plain_rehearsal"])
        if mode["select"] == "random":
            important = select_random(state.rngs["select"], beta, state.segmap, feature_layers, net)
        else:
            report = importance_scores(net, state.segmap, scoring, cfg.score_batch_size,
                                       state.seen_classes)
            state.ledger.add_scoring(net, len(scoring))
            important = select_top_beta(report, beta, state.segmap, feature_layers, net)
        ci = net.classifier_index
        important |= {unit_ref(net, ci, c) for c in task.classes}
        segment_and_reinforce(state, task, important, stream, mode["memory"] or mode["plain_rehearsal"], mode["reinforce"])
    elif strategy == "fixed_representation" and task.task_id == 0:
        feature = [u for u in all_units(net) if u.layer_index != net.classifier_index]
        state.segmap.freeze(feature, 0)

    if (mode["memory"] or mode["plain_rehearsal"]) and cfg.memory > 0:
        update_memory(state.memory, task.train, state.seen_classes)

    summary = _summarize(state, task, stream, ledger_start)
    state.summaries.append(summary)
    state.next_task = task.task_id + 1
    return summary


def _summarize(state: RunState, task: Task, stream: TaskStream, ledger_start) -> dict:
    net = state.net
    tasks = stream.tasks[:task.task_id + 1]
    test_all = LabeledDataset.concat([t.test for t in tasks])
    logits = predict_logits(net, test_all.features)
    single = accuracy_from_logits(logits, test_all.labels, state.seen_classes)
    per_single, per_multi = [], []
    for t in tasks:
        sel = np.isin(test_all.labels, t.classes)
        per_single.append(accuracy_from_logits(logits[sel], test_all.labels[sel], state.seen_classes))
        per_multi.append(accuracy_from_logits(logits[sel], test_all.labels[sel], t.classes))
    state.acc_at_freeze[task.task_id] = per_single[-1]
    prev = [state.acc_at_freeze[t.task_id] - per_single[t.task_id] for t in tasks[:-1]]
    fwd, bwd, upd = state.ledger.since(ledger_start)
    _, _, upd_step = flops_step(net, state.segmap, 1)
    feature_layers = [li for li in net.unit_layers() if li != net.classifier_index]
    return {
        "record": "task", "task_id": task.task_id, "classes": list(task.classes),
        "single_head_acc": single,
        "first_task_single_head": per_single[0], "first_task_multi_head": per_multi[0],
        "task_single_head_acc": per_single, "multi_head_acc": per_multi,
        "forgetting": float(np.mean(prev)) if prev else 0.0,
        "frozen_fraction": float(np.mean([state.segmap.frozen_fraction(li) for li in feature_layers])),
        "frozen_units": len(state.segmap.units_of(task.task_id)),
        "fwd_flops": fwd, "bwd_flops": bwd, "upd_flops": upd, "upd_flops_per_step": upd_step,
    }


@dataclass
class RunMetrics:
    strategy: str
    seed: int
    records: list[dict]
    summaries: list[dict]

    @property
    def final_accuracy(self) -> float:
        return self.summaries[-1]["single_head_acc"]


def run_strategy(stream: TaskStream, strategy: str, config: TrainConfig,
                 state: RunState | None = None,
                 on_task_end: Callable[[RunState], None] | None = None,
                 stop_after: int | None = None) -> RunMetrics:
    """Train ``strategy`` over every task of ``stream`` (resuming ``state`` if given)."""
    if state is None:
        input_shape = stream.tasks[0].train.features.shape[1:]
        shape = tuple(config.input_shape) if config.input_shape else tuple(input_shape)
        state = new_run_state(strategy, config, shape, stream.num_classes)
        validate(config, state.net, len(stream), stream.num_classes)
    elif state.strategy != strategy:
        raise ContractError("resumed state belongs to a different strategy")
    for task in stream.tasks[state.next_task:]:
        if stop_after is not None and task.task_id >= stop_after:
            break
        s = pst_train_task(state, task, stream)
        log.info("%s seed=%d task=%d acc=%.4f", strategy, config.seed, task.task_id, s["single_head_acc"])
        if on_task_end is not None:
            on_task_end(state)
    return RunMetrics(strategy, config.seed, state.records, state.summaries)

