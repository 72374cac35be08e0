import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mops.config import TaskConfig, TrainConfig
from mops.core_math import is_on_simplex
from mops.errors import BarrierViolation, ContractViolation, InvalidArgument, NumericFailure
from mops.model import apply_scheme, default_mlp, forward, backward, init_params, mse_loss_and_grad
from mops.protocol import EmbeddingRecord, GradientRecord, SampleTag, round_bytes
from mops.reference import monolithic_grad, monolithic_sgd
from mops.rng import STREAM_PARAMS, STREAM_SAMPLING, RngState, stream_id
from mops.training import (Controller, RoundInbox, build_problem, collaborative_inference,
                           make_agents, make_controller, run_training, weight_directions,
                           weight_step)

from oracles import grid_project


def ts_config(**kw) -> TrainConfig:
    task = kw.pop("task", TaskConfig(train_size=60))
    base = dict(T=20, beta=0.01, seed=3, metrics_every=5, n_pop_factor=2, task=task)
    base.update(kw)
    return TrainConfig(**base)


# -- weight update -------------------------------------------------------------------

def test_weight_step_hand_example():
    # products (1, 0): pre-projection (0.4, 0.5), projected (0.45, 0.55)
    np.testing.assert_allclose(np.array([0.5, 0.5]) - 0.1 * np.array([1.0, 0.0]), [0.4, 0.5])
    np.testing.assert_allclose(weight_step([0.5, 0.5], [1.0, 0.0], 0.1), [0.45, 0.55], atol=1e-15)


def test_weight_step_eta_zero_and_uniform_shift():
    g = np.array([0.2, 0.3, 0.5])
    assert weight_step(g, [5.0, -1.0, 2.0], 0.0).tolist() == g.tolist()
    np.testing.assert_allclose(weight_step(g, [0.7, 0.7, 0.7], 0.1), g, atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=3, max_size=3), st.floats(0, 2))
def test_weight_step_stays_on_simplex_and_matches_grid(d, eta):
    gamma = np.array([0.2, 0.3, 0.5])
    new = weight_step(gamma, d, eta)
    assert is_on_simplex(new, 1e-12)
    assert np.abs(new - grid_project(gamma - eta * np.array(d), 5e-3)).max() <= 5e-3


def test_weight_directions_rules():
    g1 = [np.array([1.0, 0.0]), np.array([0.0, 2.0])]
    g2 = [np.array([3.0, 1.0]), np.array([1.0, 1.0])]
    gamma = np.array([0.25, 0.75])
    np.testing.assert_allclose(weight_directions(g1, g2, gamma, "literal"), [3.0, 2.0])
    mix = 0.25 * g2[0] + 0.75 * g2[1]
    np.testing.assert_allclose(weight_directions(g1, g2, gamma, "coupled"), [g1[0] @ mix, g1[1] @ mix])
    np.testing.assert_allclose(weight_directions(g1, g2, gamma, "coupled", [1.0, 2.0]),
                               [g1[0] @ mix + 0.25, g1[1] @ mix + 1.5])
    with pytest.raises(InvalidArgument):
        weight_directions(g1, g2, gamma, "other")


# -- controller ---------------------------------------------------------------------

def _controller(dynamic=False, gamma=(0.5, 0.5)):
    spec = apply_scheme(default_mlp(), "share_top")
    params = init_params(spec, "shared", RngState(1, 7))
    return spec, Controller(spec, params, gamma, 0.1, 0.1, dynamic)


def _emb(agent, rnd, tag=SampleTag.PRIMARY, seed=0):
    rng = np.random.default_rng(seed + 10 * agent + int(tag))
    return EmbeddingRecord(agent, rnd, tag, rng.normal(size=32), rng.normal(size=5))


def test_shared_update_is_weighted_sum_of_reference_grads():
    spec, ctrl = _controller(gamma=(0.3, 0.7))
    recs = [_emb(0, 0), _emb(1, 0)]
    before = ctrl.params.copy()
    grads = []
    for r in recs:
        out, cache = forward(spec, before, "shared", r.z)
        _, up = mse_loss_and_grad(out, r.y)
        grads.append(backward(spec, before, cache, up, "shared")[0])
    ctrl.shared_update(recs)
    np.testing.assert_allclose(ctrl.params, before - 0.1 * (0.3 * grads[0] + 0.7 * grads[1]),
                               atol=1e-15)


def test_shared_update_degenerate_weights_is_single_agent_step():
    spec, ctrl = _controller(gamma=(0.0, 1.0))
    _, solo = _controller(gamma=(1.0,))
    recs = [_emb(0, 0), _emb(1, 0)]
    ctrl.shared_update(recs)
    solo.shared_update([recs[1]])
    np.testing.assert_array_equal(ctrl.params, solo.params)


def test_barrier_and_static_contracts():
    _, ctrl = _controller()
    with pytest.raises(BarrierViolation):
        ctrl.check_round(RoundInbox(0, [_emb(0, 0)], []))
    with pytest.raises(BarrierViolation):
        ctrl.check_round(RoundInbox(0, [_emb(0, 0), _emb(1, 1)], []))
    with pytest.raises(BarrierViolation):
        ctrl.check_round(RoundInbox(0, [_emb(1, 0), _emb(0, 0)], []))
    ctrl.round = 5
    with pytest.raises(BarrierViolation):
        ctrl.check_round(RoundInbox(4, [_emb(0, 4), _emb(1, 4)], []))
    with pytest.raises(ContractViolation):
        ctrl.weight_update([0.0, 0.0])
    _, dyn = _controller(dynamic=True)
    with pytest.raises(BarrierViolation):
        dyn.check_round(RoundInbox(0, [_emb(0, 0), _emb(1, 0)], [(_emb(0, 0, SampleTag.EXTRA1),)] * 2))


# -- agent --------------------------------------------------------------------------

def _agents(cfg):
    return make_agents(build_problem(cfg, populations=False))


def test_agent_emit_counts_and_recomputation():
    static = _agents(ts_config())[0]
    recs = static.emit(0)
    assert [r.sample_tag for r in recs] == [SampleTag.PRIMARY]
    k = recs[0].sample_index
    z, _ = forward(static.spec, static.params, "agent", static.data.x[k])
    np.testing.assert_array_equal(recs[0].z, z)
    dyn = _agents(ts_config(algorithm="dynamic"))[0]
    recs = dyn.emit(0)
    assert [r.sample_tag for r in recs] == [SampleTag.PRIMARY, SampleTag.EXTRA1, SampleTag.EXTRA2]


def test_agent_update_contracts():
    agent = _agents(ts_config())[0]
    agent.emit(0)
    before = agent.params.copy()
    agent.local_update(None, 0)  # round 0 skips the update
    np.testing.assert_array_equal(agent.params, before)
    with pytest.raises(ContractViolation):
        agent.local_update(None, 1)
    with pytest.raises(ContractViolation):
        agent.local_update(GradientRecord(0, 5, np.zeros(32)), 1)  # stale round tag
    with pytest.raises(ContractViolation):
        agent.local_update(GradientRecord(0, 0, np.zeros(31)), 1)
    agent.local_update(GradientRecord(0, 0, np.zeros(32)), 1)
    np.testing.assert_array_equal(agent.params, before)


def test_agent_beta_zero_keeps_params():
    agent = _agents(ts_config(beta=0.0))[0]
    agent.emit(0)
    before = agent.params.copy()
    agent.local_update(GradientRecord(0, 0, np.ones(32)), 1)
    np.testing.assert_array_equal(agent.params, before)


# -- runs ---------------------------------------------------------------------------

def test_static_weights_never_change():
    res = run_training(ts_config(gamma_init=(0.2, 0.3, 0.5)))
    for r in res.records:
        assert r.gamma == (0.2, 0.3, 0.5)
    assert res.weights.tolist() == [0.2, 0.3, 0.5]


@pytest.mark.parametrize("rule", ["coupled", "literal"])
def test_dynamic_weights_on_simplex(rule):
    res = run_training(ts_config(algorithm="dynamic", eta=0.5, weight_rule=rule, metrics_every=1))
    for r in res.records:
        assert is_on_simplex(np.array(r.gamma), 1e-12)


@pytest.mark.parametrize("weight_grads", ["shared", "full"])
def test_symmetric_agents_keep_uniform_weights(weight_grads):
    task = TaskConfig(modalities=("csi", "csi", "csi"), train_size=60)
    res = run_training(ts_config(task=task, algorithm="dynamic", eta=0.5, replicate_agents=True,
                                 weight_grads=weight_grads, metrics_every=1, T=30))
    for r in res.records:
        np.testing.assert_allclose(r.gamma, [1 / 3] * 3, atol=1e-9)


def _manual_sgd(cfg):
    """Per-sample SGD on the full model with the agent's own init and sampling streams."""
    spec = apply_scheme(cfg.model_spec(), "none")
    data = build_problem(cfg, populations=False).datasets[0]
    w = init_params(spec, "agent", RngState(cfg.seed, stream_id(STREAM_PARAMS, 0)))
    rng = RngState(cfg.seed, stream_id(STREAM_SAMPLING, 0))
    losses, samples = [], []
    for _ in range(cfg.T):
        k = int(rng.integers(len(data), 1)[0])
        samples.append((data.x[k], data.y[k]))
        out, cache = forward(spec, w, "full", data.x[k])
        loss, up = mse_loss_and_grad(out, data.y[k])
        losses.append(loss)
        w = w - cfg.beta * backward(spec, w, cache, up, "full")[0]
    return spec, losses, w, samples


def test_unshared_run_equals_plain_sgd():
    cfg = ts_config(scheme="none", task=TaskConfig(modalities=("traffic",), train_size=80),
                    gamma_init=(1.0,), T=40)
    res = run_training(cfg)
    spec, losses, w, samples = _manual_sgd(cfg)
    assert res.losses[:, 0].tolist() == losses
    np.testing.assert_array_equal(res.agents[0].params, w)
    # the scalar reference agrees up to summation order
    w0 = init_params(spec, "agent", RngState(cfg.seed, stream_id(STREAM_PARAMS, 0)))
    np.testing.assert_allclose(monolithic_sgd(spec, w0, samples, cfg.beta), losses, rtol=1e-10)
    assert res.records[-1].bytes == 0


def test_one_split_round_matches_reference_gradients():
    cfg = ts_config(T=2, task=TaskConfig(modalities=("csi",), train_size=40), gamma_init=(1.0,))
    problem = build_problem(cfg, populations=False)
    agent = make_agents(problem)[0]
    ctrl = make_controller(problem)
    spec = problem.spec
    full0 = np.concatenate([agent.params, ctrl.params])
    rec = agent.emit(0)[0]
    x, y = agent.data.x[rec.sample_index], agent.data.y[rec.sample_index]
    (boundary,), _ = ctrl.shared_update([rec])
    agent.local_update(GradientRecord(0, 0, boundary), 1)
    stepped = full0 - cfg.beta * monolithic_grad(spec, full0, x, y)
    np.testing.assert_allclose(np.concatenate([agent.params, ctrl.params]), stepped, atol=1e-14)


def test_byte_counts_follow_message_sizes():
    for algorithm, extra in (("static", False), ("dynamic", True)):
        res = run_training(ts_config(algorithm=algorithm, T=7, metrics_every=7))
        assert res.records[-1].bytes == 7 * round_bytes(3, 32, 5, extra)


def test_run_length_and_determinism():
    assert len(run_training(ts_config(T=1)).records) == 1
    a = run_training(ts_config(algorithm="dynamic", T=12))
    b = run_training(ts_config(algorithm="dynamic", T=12))
    assert a.csv() == b.csv()
    assert np.array_equal(a.losses, b.losses)
    assert [r.round for r in a.records] == [5, 10, 12]


@pytest.mark.parametrize("kw", [dict(), dict(algorithm="dynamic"),
                                dict(algorithm="dynamic", weight_grads="full"),
                                dict(scheme="none"), dict(scheme="share_deep")])
def test_threaded_harness_is_bit_identical(kw):
    single = run_training(ts_config(T=15, **kw))
    threaded = run_training(ts_config(T=15, harness="threaded", **kw))
    assert single.csv() == threaded.csv()
    assert np.array_equal(single.losses, threaded.losses)


def test_metrics_do_not_perturb_training():
    on = run_training(ts_config(algorithm="dynamic", T=15, metrics_every=1))
    off = run_training(ts_config(algorithm="dynamic", T=15, metrics=False))
    assert np.array_equal(on.losses, off.losses)
    np.testing.assert_array_equal(on.controller.params, off.controller.params)
    assert off.records == []


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_reports_round():
    with pytest.raises(NumericFailure) as info:
        run_training(ts_config(beta=1e6, T=50, metrics=False))
    assert info.value.round_index is not None and 0 <= info.value.round_index < 50
    with pytest.raises(NumericFailure) as info:
        run_training(ts_config(beta=1e6, T=50, metrics=False, harness="threaded"))
    assert info.value.round_index is not None


def test_collaborative_inference():
    res = run_training(ts_config(T=5))
    agents, ctrl = res.agents, res.controller
    before = [a.params.copy() for a in agents] + [ctrl.params.copy()]
    inputs = [a.data.x[0] for a in agents]
    outs = collaborative_inference(agents, ctrl, inputs)
    after = [a.params for a in agents] + [ctrl.params]
    assert all(np.array_equal(p, q) for p, q in zip(before, after))
    spec = agents[0].spec
    for a, x, out in zip(agents, inputs, outs):
        ref, _ = forward(spec, np.concatenate([a.params, ctrl.params]), "full", x)
        np.testing.assert_allclose(out, ref, atol=1e-15)
    with pytest.raises(InvalidArgument):
        collaborative_inference(agents, ctrl, inputs[:2])
    local = run_training(ts_config(T=3, scheme="none"))
    outs = collaborative_inference(local.agents, None, [a.data.x[0] for a in local.agents])
    assert outs[0].shape == (5,)


def test_toy_runs():
    toy = TaskConfig(kind="toy", sigma=0.1, w0=(2.0, -1.0))
    static = run_training(TrainConfig(task=toy, T=200, beta=0.05, metrics_every=50,
                                      gamma_init=(1.0, 0.0, 0.0)))
    last = static.records[-1]
    assert last.g_err == 0.0 and last.gamma == (1.0, 0.0, 0.0)
    # agent 0 alone drives the parameters to its own optimum
    assert last.o_err_agents[0] < 0.05 < min(last.o_err_agents[1:])
    dyn = run_training(TrainConfig(task=toy, algorithm="dynamic", T=200, beta=0.05,
                                   metrics_every=50, gamma_init=(1.0, 0.0, 0.0)))
    assert dyn.records[-1].gamma[0] < 0.99
    assert is_on_simplex(np.array(dyn.records[-1].gamma), 1e-12)
