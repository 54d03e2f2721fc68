import numpy as np
import pytest

from pst import numerics as nx
from pst.datasets import LabeledDataset, make_stream, synth_gaussians
from pst.errors import CapacityError, ConfigError, ContractError
from pst.flops import UPDATE_FLOPS_PER_PARAM, flops_step, forward_flops_per_example
from pst.model import LayerSpec, UnitRef, build_network, forward, unit_parameters, unit_size
from pst.training import (
    ImportanceReport, TrainConfig, accuracy_from_logits, evaluate_multi_head, evaluate_single_head,
    importance_scores, new_run_state, pst_train_task, run_strategy, select_top_beta,
)

from conftest import numeric_grad, rel_err

SMALL = (LayerSpec("conv", out=4), LayerSpec("batchnorm"), LayerSpec("relu"),
         LayerSpec("pool", size=2), LayerSpec("dense", out=12), LayerSpec("relu"),
         LayerSpec("classifier"))


def tiny_stream(classes=6, per_task=2, seed=0, sep=6.0):
    return make_stream(synth_gaussians(classes, 16, 40, sep, seed=0), per_task, seed=seed)


def tiny_config(**kw):
    base = dict(layers=SMALL, epochs=6, reinforce_epochs=3, batch_size=16, beta=0.3, memory=30,
                input_shape=(1, 4, 4), seed=0)
    base.update(kw)
    return TrainConfig(**base)


# --- evaluation -------------------------------------------------------------

def test_accuracy_from_logit_table():
    logits = np.array([[3.0, 1.0, 0.0], [0.0, 2.0, 1.0], [0.2, 0.1, 0.9], [5.0, 4.0, 0.0]])
    labels = np.array([0, 1, 2, 1])
    assert accuracy_from_logits(logits, labels, [0, 1, 2]) == 0.75
    assert accuracy_from_logits(np.eye(3)[labels], labels, [0, 1, 2]) == 1.0
    with pytest.raises(ContractError):
        accuracy_from_logits(logits[:0], labels[:0], [0, 1])


def test_multi_head_dominates_single_head():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((200, 6))
    labels = rng.integers(0, 2, 200)
    assert accuracy_from_logits(logits, labels, [0, 1]) >= accuracy_from_logits(logits, labels, range(6))


# --- importance -------------------------------------------------------------

def _dense_toy():
    net, segmap = build_network([LayerSpec("dense", out=2), LayerSpec("relu"),
                                 LayerSpec("classifier")], (2,), 2, seed=4)
    rng = np.random.default_rng(5)
    data = LabeledDataset(rng.standard_normal((10, 2)), rng.integers(0, 2, 10), np.arange(10), (0, 1))
    return net, segmap, data


def test_importance_matches_finite_difference_taylor():
    net, segmap, data = _dense_toy()
    report = importance_scores(net, segmap, data, batch_size=10, active_classes=[0, 1])

    def loss():
        return float(nx.softmax_xent(forward(net, data.features, "eval"), data.labels, [0, 1]).data)

    for li in net.unit_layers():
        w = net.layers[li].params[f"{li}.weight"]
        g = numeric_grad(loss, w.data)
        expect = np.abs(g * w.data).sum(axis=1)
        assert rel_err(report.scores[li], expect) < 1e-3


def test_zero_unit_scores_zero_and_flat_loss_scores_zero():
    net, segmap, data = _dense_toy()
    unit_parameters(net, UnitRef(0, 1))["weight"][...] = 0.0
    report = importance_scores(net, segmap, data, 4, [0, 1])
    assert report.scores[0][1] == 0.0
    # one active class -> zero loss everywhere -> zero gradient
    one = LabeledDataset(data.features, np.zeros(10, dtype=int), data.ids, (0,))
    flat = importance_scores(net, segmap, one, 4, [0])
    assert all(not s.any() for s in flat.scores.values())


def test_importance_averages_minibatches():
    net, segmap, data = _dense_toy()
    full = importance_scores(net, segmap, data, 5, [0, 1])
    a = importance_scores(net, segmap, data.subset(slice(0, 5)), 5, [0, 1])
    b = importance_scores(net, segmap, data.subset(slice(5, 10)), 5, [0, 1])
    for li in full.scores:
        np.testing.assert_allclose(full.scores[li], (a.scores[li] + b.scores[li]) / 2, rtol=1e-12)


def test_frozen_units_carry_no_score():
    net, segmap, data = _dense_toy()
    segmap.freeze([UnitRef(0, 0)], 0)
    report = importance_scores(net, segmap, data, 5, [0, 1])
    assert np.isnan(report.scores[0][0]) and report.scores[0][1] >= 0
    with pytest.raises(ContractError):
        importance_scores(net, segmap, data.subset(slice(0, 0)), 5, [0, 1])


def test_lowest_score_unit_matters_least():
    stream = tiny_stream(4, 4)
    state = new_run_state("pst", tiny_config(epochs=8, beta=0.5), (1, 4, 4), 4)
    task = stream.tasks[0]
    state.seen_classes = list(task.classes)
    from pst.training import _train_epoch
    mask = {k: np.zeros(p.shape, bool) for k, p in state.net.parameters().items()}
    for _ in range(8):
        _train_epoch(state, task.train, task.classes, 0.05, mask, "train")
    net = state.net
    report = importance_scores(net, state.segmap, task.train, 32, task.classes)

    def loss():
        return float(nx.softmax_xent(forward(net, task.train.features, "eval"),
                                     task.train.labels, task.classes).data)

    base = loss()
    for li in (0, 4):
        s = report.scores[li]
        deltas = []
        for u in (int(np.argmin(s)), int(np.argmax(s))):
            view = unit_parameters(net, UnitRef(li, u))
            saved = view["weight"].copy()
            view["weight"][...] = 0
            deltas.append(abs(loss() - base))
            view["weight"][...] = saved
        assert deltas[0] <= deltas[1]


# --- selection --------------------------------------------------------------

def test_select_top_beta_cases():
    net, segmap = build_network([LayerSpec("dense", out=3), LayerSpec("classifier")], (2,), 2)
    report = ImportanceReport({0: np.array([3.0, 1.0, 2.0])}, 1, 1)
    assert select_top_beta(report, 1 / 3, segmap, [0]) == {UnitRef(0, 0)}
    assert {u.unit_index for u in select_top_beta(report, 1.0, segmap, [0])} == {0, 1, 2}
    ties = ImportanceReport({0: np.array([1.0, 1.0, 1.0])}, 1, 1)
    assert select_top_beta(ties, 1 / 3, segmap, [0]) == {UnitRef(0, 0)}


def test_select_skips_frozen_and_reports_exhaustion():
    net, segmap = build_network([LayerSpec("dense", out=4), LayerSpec("classifier")], (2,), 2)
    segmap.freeze([UnitRef(0, 0), UnitRef(0, 1), UnitRef(0, 2)], 0)
    report = ImportanceReport({0: np.array([np.nan, np.nan, np.nan, 0.5])}, 1, 1)
    assert select_top_beta(report, 0.25, segmap, [0]) == {UnitRef(0, 3)}
    with pytest.raises(CapacityError, match="layer 0"):
        select_top_beta(report, 0.5, segmap, [0])


def test_selection_count_is_exact():
    from pst.training import select_count
    assert select_count(0.5, 16) == 8 and select_count(0.19, 128) == 24 and select_count(0.1, 5) == 1


# --- task routine -----------------------------------------------------------

def _snapshot(net, segmap, task_id):
    out = {}
    for li, u in segmap.units_of(task_id):
        out[(li, u)] = {k: v.copy() for k, v in unit_parameters(net, UnitRef(li, u)).items()}
    return out


def test_pst_task_freezes_expected_fraction_and_preserves_task_one():
    stream = tiny_stream(6, 2)
    cfg = tiny_config()
    state = new_run_state("pst", cfg, (1, 4, 4), stream.num_classes)
    pst_train_task(state, stream.tasks[0], stream)
    frozen_t0 = _snapshot(state.net, state.segmap, 0)
    assert state.segmap.frozen(0).sum() == round(0.3 * 4)
    assert state.segmap.frozen(4).sum() == round(0.3 * 12)
    ci = state.net.classifier_index
    assert set(np.flatnonzero(state.segmap.frozen(ci))) == set(stream.tasks[0].classes)
    pst_train_task(state, stream.tasks[1], stream)
    assert state.segmap.frozen(4).sum() == 2 * round(0.3 * 12)
    for key, views in frozen_t0.items():
        now = unit_parameters(state.net, UnitRef(*key))
        for k, v in views.items():
            assert np.array_equal(now[k], v), (key, k)


def test_reinforcement_leaves_secondary_units_alone():
    from pst.training import segment_and_reinforce
    stream = tiny_stream(4, 2)
    state = new_run_state("pst", tiny_config(), (1, 4, 4), 4)
    task = stream.tasks[0]
    state.seen_classes = list(task.classes)
    important = {UnitRef(4, 0), UnitRef(4, 5), UnitRef(0, 1, "filter")}
    secondary = {k: v.data.copy() for k, v in state.net.parameters().items()}
    segment_and_reinforce(state, task, important, stream, use_memory=False)
    imp_mask = {(u.layer_index, u.unit_index) for u in important}
    for name, before in secondary.items():
        now = state.net.parameters()[name].data
        li = int(name.split(".")[0])
        owner = li if state.net.layers[li].spec.kind != "batchnorm" else state.net.layers[li].owner
        rows = [u for (l, u) in imp_mask if l == owner]
        keep = np.ones(before.shape[0], bool)
        keep[rows] = False
        assert np.array_equal(now[keep], before[keep]), name
    assert all(state.segmap.owner(u) == 0 for u in important)


def test_zero_reinforce_epochs_freezes_fresh_init():
    from pst.training import segment_and_reinforce
    stream = tiny_stream(4, 2)
    state = new_run_state("pst", tiny_config(reinforce_epochs=0), (1, 4, 4), 4)
    state.seen_classes = list(stream.tasks[0].classes)
    u = UnitRef(4, 2)
    old = unit_parameters(state.net, u)["weight"].copy()
    segment_and_reinforce(state, stream.tasks[0], {u}, stream, use_memory=False)
    view = unit_parameters(state.net, u)
    assert not np.array_equal(view["weight"], old) and view["bias"][0] == 0.0
    assert state.segmap.owner(u) == 0


def test_config_validation():
    net, _ = build_network(SMALL, (1, 4, 4), 6)
    from pst.training import validate
    with pytest.raises(ConfigError, match="cumulative beta"):
        validate(tiny_config(beta=0.6), net, 2, 6)
    with pytest.raises(ConfigError):
        validate(tiny_config(memory=3), net, 3, 6)
    validate(tiny_config(memory=0, beta=0.3), net, 3, 6)


def test_unknown_strategy():
    with pytest.raises(ConfigError):
        run_strategy(tiny_stream(), "ewc", tiny_config())


def test_seen_classes_must_be_new():
    stream = tiny_stream(4, 2)
    state = new_run_state("pst", tiny_config(), (1, 4, 4), 4)
    pst_train_task(state, stream.tasks[0], stream)
    with pytest.raises(ContractError):
        pst_train_task(state, stream.tasks[0], stream)


@pytest.mark.parametrize("strategy", ["finetune", "fixed_representation", "hybrid1", "hybrid2",
                                      "hybrid3", "hybrid3_current_only"])
def test_strategies_run(strategy):
    m = run_strategy(tiny_stream(6, 2), strategy, tiny_config())
    assert len(m.summaries) == 3
    for s in m.summaries:
        assert s["first_task_multi_head"] >= s["first_task_single_head"]


def test_fixed_representation_feature_extractor_constant():
    stream = tiny_stream(6, 2)
    cfg = tiny_config()
    state = new_run_state("fixed_representation", cfg, (1, 4, 4), 6)
    pst_train_task(state, stream.tasks[0], stream)
    ci = state.net.classifier_index
    before = {k: p.data.copy() for k, p in state.net.parameters().items() if not k.startswith(f"{ci}.")}
    stats = [l.stats.mean.copy() for l in state.net.layers if l.stats is not None]
    for t in stream.tasks[1:]:
        pst_train_task(state, t, stream)
    for k, v in before.items():
        assert np.array_equal(state.net.parameters()[k].data, v), k
    assert all(np.array_equal(a, l.stats.mean) for a, l in
               zip(stats, [l for l in state.net.layers if l.stats is not None]))


def test_run_is_deterministic():
    a = run_strategy(tiny_stream(4, 2), "pst", tiny_config())
    b = run_strategy(tiny_stream(4, 2), "pst", tiny_config())
    assert a.records == b.records and a.summaries == b.summaries


# --- flops ------------------------------------------------------------------

def test_forward_flops_by_hand():
    net, _ = build_network([LayerSpec("conv", out=4, kernel=3), LayerSpec("relu"),
                            LayerSpec("dense", out=5), LayerSpec("classifier")], (2, 3, 3), 5)
    expect = 2 * 4 * 2 * 9 * 3 * 3 + 2 * 5 * 36 + 2 * 6 * 5
    assert forward_flops_per_example(net) == expect
    fwd, bwd, upd = flops_step(net, _, batch_size=3)
    assert fwd == 3 * expect and bwd == 2 * fwd
    assert upd == UPDATE_FLOPS_PER_PARAM * net.param_count()


def test_update_flops_follow_free_fraction():
    net, segmap = build_network(SMALL, (1, 4, 4), 10)
    full = flops_step(net, segmap)[2]
    for li in net.unit_layers():
        n = net.layers[li].units
        segmap.freeze([UnitRef(li, u) for u in range(int(0.9 * n))], 0)
    free = sum(unit_size(net, li) * segmap.free_count(li) for li in net.unit_layers())
    ratio = flops_step(net, segmap)[2] / full
    assert ratio == pytest.approx(free / net.param_count(), rel=0.01)


def test_update_flops_shrink_over_tasks():
    m = run_strategy(tiny_stream(6, 2), "pst", tiny_config())
    per_step = [s["upd_flops_per_step"] for s in m.summaries]
    assert all(b < a for a, b in zip(per_step, per_step[1:]))
