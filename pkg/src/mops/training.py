"""Agent and controller state machines for split training with static or dynamic weighting.

One coordination round ``t`` runs four steps:

1. every agent applies the boundary gradient it received for round ``t-1``
   to its private part (skipped at ``t = 0``);
2. every agent uploads the embedding of a fresh sample (plus two extra
   samples under dynamic weighting) together with its label;
3. the controller updates the agent weights (dynamic only) and then the
   shared part with the weighted sum of per-agent shared gradients;
4. the controller returns each agent's boundary gradient.

Agents and controller only talk through encoded protocol frames.  The
single-threaded scheduler and the threaded one call the same phase
functions, and the controller always folds agents in index order, so both
produce bit-identical trajectories.
"""

from __future__ import annotations

import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import metrics as M
from .config import TrainConfig
from .core_math import project_simplex
from .errors import BarrierViolation, ContractViolation, InvalidArgument, NumericFailure
from .model import (ModelSpec, apply_scheme, backward, flops, forward, init_params,
                    mse_batch, mse_loss_and_grad)
from .protocol import (ControlCode, ControlRecord, EmbeddingRecord, Endpoint,
                       GradientRecord, LoopbackTransport, SampleTag, decode, encode)
from .rng import (STREAM_PARAMS, STREAM_SAMPLING, STREAM_SHARED_INIT, STREAM_TOY_NOISE,
                  RngState, stream_id)
from .tasks import (Dataset, TimeSeriesTask, ToyLosses, ToyObjectiveSet, gen_timeseries,
                    population_sample, symmetric_toy)

CTRL = "ctrl"
_F64 = struct.Struct("<d")
_EXTRA_TAGS = (SampleTag.EXTRA1, SampleTag.EXTRA2)


def agent_name(i: int) -> str:
    return f"agent{i}"


# -- weight update ---------------------------------------------------------------

def weight_step(gamma, directions, eta: float) -> np.ndarray:
    """``project(gamma - eta * d)``."""
    gamma = np.asarray(gamma, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    if d.shape != gamma.shape:
        raise InvalidArgument("one direction per agent is required")
    if eta == 0.0:
        return gamma.copy()
    return project_simplex(gamma - eta * d)


def weight_directions(g1: Sequence[np.ndarray], g2: Sequence[np.ndarray], gamma, rule: str,
                      private_products: Sequence[float] | None = None) -> np.ndarray:
    """Per-agent descent directions for the weights from two independent gradient draws.

    ``literal``: ``d_i = <g1_i, g2_i>``.
    ``coupled``: ``d_i = <g1_i, sum_j gamma_j g2_j>``, an unbiased estimate of
    the partial derivative of ``||sum_j gamma_j grad_j||^2 / 2`` in ``gamma_i``.

    ``private_products`` adds the agent-private block: agents own disjoint
    coordinates, so the coupled form only picks up ``gamma_i`` times the
    agent's own product there.
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    a = np.vstack([np.asarray(g, dtype=np.float64) for g in g1])
    b = np.vstack([np.asarray(g, dtype=np.float64) for g in g2])
    if rule == "literal":
        d = np.einsum("ij,ij->i", a, b)
        if private_products is not None:
            d = d + np.asarray(private_products)
    elif rule == "coupled":
        d = a @ (gamma @ b)
        if private_products is not None:
            d = d + gamma * np.asarray(private_products)
    else:
        raise InvalidArgument(f"unknown weight rule {rule!r}")
    if not np.all(np.isfinite(d)):
        raise NumericFailure("non-finite weight direction")
    return d


# -- agent -----------------------------------------------------------------------

class Agent:
    """Owner of a private model part, a dataset and a sampling stream."""

    def __init__(self, agent_id: int, spec: ModelSpec, params: np.ndarray, data: Dataset,
                 rng: RngState, beta: float, n_extra: int = 0):
        if n_extra not in (0, 2):
            raise InvalidArgument("n_extra must be 0 or 2")
        self.agent_id = agent_id
        self.spec = spec
        self.params = np.array(params, dtype=np.float64)
        self.data = data
        self.rng = rng
        self.beta = beta
        self.n_extra = n_extra
        self.round = 0
        self.last_boundary_grad: GradientRecord | None = None
        self.flops = 0
        self._caches: dict[SampleTag, object] = {}
        self.snapshots: dict[int, np.ndarray] = {}
        self.flops_log: dict[int, int] = {}

    @property
    def local_only(self) -> bool:
        return self.spec.boundary == len(self.spec.layers)

    def _draw(self, n: int) -> np.ndarray:
        return self.rng.integers(len(self.data), n)

    def local_update(self, grad: GradientRecord | None, round: int) -> None:
        """Chain the previous round's boundary gradient through the private part."""
        if round == 0:
            self.round = 0
            return
        if grad is None:
            raise ContractViolation(f"agent {self.agent_id}: no boundary gradient for round {round}")
        if grad.round != round - 1:
            raise ContractViolation(
                f"agent {self.agent_id}: boundary gradient from round {grad.round} used at round {round}")
        if grad.g_boundary.size != self.spec.embedding_dim:
            raise ContractViolation(
                f"boundary gradient width {grad.g_boundary.size} != {self.spec.embedding_dim}")
        cache = self._caches.get(SampleTag.PRIMARY)
        if cache is None:
            raise ContractViolation("no cached forward pass for the primary sample")
        g, _ = backward(self.spec, self.params, cache, grad.g_boundary, "agent", round=round - 1)
        self.flops += flops(self.spec, "agent", "backward")
        self.last_boundary_grad = grad
        self.params = self.params - self.beta * g
        self.round = round

    def emit(self, round: int) -> list[EmbeddingRecord]:
        """Embeddings of one primary sample (and the extra samples) under the current params."""
        tags = (SampleTag.PRIMARY,) + _EXTRA_TAGS[: self.n_extra]
        records = []
        for tag, k in zip(tags, self._draw(len(tags))):
            z, cache = forward(self.spec, self.params, "agent", self.data.x[k], round)
            self._caches[tag] = cache
            records.append(EmbeddingRecord(self.agent_id, round, tag, z, self.data.y[k], int(k)))
        self.flops += len(tags) * flops(self.spec, "agent", "forward")
        self.round = round
        return records

    def private_product(self, g1: GradientRecord, g2: GradientRecord, round: int) -> float:
        """``<grad_private(sample 1), grad_private(sample 2)>`` for the full-gradient weight rule."""
        grads = []
        for tag, rec in zip(_EXTRA_TAGS, (g1, g2)):
            if rec.round != round or rec.sample_tag != tag:
                raise ContractViolation(f"unexpected extra gradient {rec.sample_tag!r} at round {rec.round}")
            g, _ = backward(self.spec, self.params, self._caches[tag], rec.g_boundary, "agent",
                            round=round)
            grads.append(g)
        self.flops += 2 * flops(self.spec, "agent", "backward")
        return float(grads[0] @ grads[1])

    def local_step(self, round: int) -> float:
        """Plain SGD on the whole (unshared) model; the only step when nothing is shared."""
        k = int(self._draw(1)[0])
        out, cache = forward(self.spec, self.params, "agent", self.data.x[k], round)
        loss, upstream = mse_loss_and_grad(out, self.data.y[k])
        g, _ = backward(self.spec, self.params, cache, upstream, "agent", round=round)
        self.flops += flops(self.spec, "agent", "forward") + flops(self.spec, "agent", "backward")
        self.params = self.params - self.beta * g
        self.round = round
        return loss


# -- controller ------------------------------------------------------------------

@dataclass
class RoundInbox:
    round: int
    primary: list[EmbeddingRecord]
    extras: list[tuple[EmbeddingRecord, ...]]
    bytes: int = 0


class Controller:
    """Holds the shared part and the agent weights."""

    def __init__(self, spec: ModelSpec, params: np.ndarray, gamma, beta: float, eta: float,
                 dynamic: bool, weight_rule: str = "coupled", weight_grads: str = "shared"):
        self.spec = spec
        self.params = np.array(params, dtype=np.float64)
        self.gamma = np.array(gamma, dtype=np.float64)
        self.beta = beta
        self.eta = eta
        self.dynamic = dynamic
        self.weight_rule = weight_rule
        self.weight_grads = weight_grads
        self.round = 0
        self.flops = 0
        self.bytes = 0

    @property
    def n_agents(self) -> int:
        return self.gamma.size

    def check_round(self, inbox: RoundInbox) -> None:
        """Round barrier: exactly the expected records of the current round, one set per agent."""
        if inbox.round < self.round:
            raise BarrierViolation(f"round {inbox.round} after round {self.round}")
        if len(inbox.primary) != self.n_agents:
            raise BarrierViolation(f"{len(inbox.primary)} primary records for {self.n_agents} agents")
        for i, rec in enumerate(inbox.primary):
            if rec is None or rec.agent_id != i or rec.round != inbox.round \
                    or rec.sample_tag != SampleTag.PRIMARY:
                raise BarrierViolation(f"missing or misplaced primary record for agent {i}")
        if self.dynamic:
            if len(inbox.extras) != self.n_agents:
                raise BarrierViolation("extra records missing")
            for i, recs in enumerate(inbox.extras):
                if tuple(r.sample_tag for r in recs) != _EXTRA_TAGS or any(
                        r.agent_id != i or r.round != inbox.round for r in recs):
                    raise BarrierViolation(f"bad extra records for agent {i}")

    def _shared_grad(self, rec: EmbeddingRecord) -> tuple[float, np.ndarray, np.ndarray]:
        out, cache = forward(self.spec, self.params, "shared", rec.z)
        loss, upstream = mse_loss_and_grad(out, rec.y)
        g, boundary = backward(self.spec, self.params, cache, upstream, "shared")
        self.flops += flops(self.spec, "shared", "forward") + flops(self.spec, "shared", "backward")
        return loss, g, boundary

    def extra_gradients(self, inbox: RoundInbox) -> list[list[tuple[np.ndarray, np.ndarray]]]:
        """Shared-part gradient and boundary gradient of both extra samples, per agent."""
        if not self.dynamic:
            raise ContractViolation("extra gradients are only used by dynamic weighting")
        return [[self._shared_grad(r)[1:] for r in recs] for recs in inbox.extras]

    def weight_update(self, directions) -> np.ndarray:
        if not self.dynamic:
            raise ContractViolation("weight update requested under static weighting")
        self.gamma = weight_step(self.gamma, directions, self.eta)
        return self.gamma

    def shared_update(self, primary: Sequence[EmbeddingRecord]) -> tuple[list[np.ndarray], list[float]]:
        """Weighted shared step; returns per-agent boundary gradients and sample losses."""
        if len(primary) != self.n_agents:
            raise BarrierViolation(f"{len(primary)} primary records for {self.n_agents} agents")
        total = np.zeros_like(self.params)
        boundaries, losses = [], []
        for i, rec in enumerate(primary):
            loss, g, boundary = self._shared_grad(rec)
            total += self.gamma[i] * g
            boundaries.append(boundary)
            losses.append(loss)
        self.params = self.params - self.beta * total
        return boundaries, losses


# -- phase functions shared by both schedulers -----------------------------------

def _recv(ep: Endpoint, src: str) -> tuple[object, int]:
    data = ep.recv(src)
    return decode(data), len(data)


def agent_phase_update_emit(agent: Agent, ep: Endpoint, t: int, snapshot: bool) -> None:
    grad = None
    if t > 0:
        grad, _ = _recv(ep, CTRL)
        if not isinstance(grad, GradientRecord) or grad.sample_tag != SampleTag.PRIMARY:
            raise ContractViolation(f"agent {agent.agent_id} expected a boundary gradient")
    agent.local_update(grad, t)
    if snapshot:
        agent.snapshots[t] = agent.params
    for rec in agent.emit(t):
        ep.send_record(CTRL, rec)


def agent_phase_private_product(agent: Agent, ep: Endpoint, t: int) -> None:
    g1, _ = _recv(ep, CTRL)
    g2, _ = _recv(ep, CTRL)
    ip = agent.private_product(g1, g2, t)
    ep.send_record(CTRL, ControlRecord(agent.agent_id, t, ControlCode.INNER_PRODUCT, _F64.pack(ip)))


def agent_phase_drain(agent: Agent, ep: Endpoint, last_round: int) -> None:
    grad, _ = _recv(ep, CTRL)
    if not isinstance(grad, GradientRecord) or grad.round != last_round:
        raise ContractViolation("final boundary gradient missing")
    agent.last_boundary_grad = grad


@dataclass
class _Pending:
    inbox: RoundInbox
    extras: list | None = None


def controller_phase_collect(ctrl: Controller, ep: Endpoint, t: int, full_grads: bool) -> _Pending:
    n_msgs = 3 if ctrl.dynamic else 1
    primary, extras = [], []
    nbytes = 0
    for i in range(ctrl.n_agents):
        recs = []
        for _ in range(n_msgs):
            rec, size = _recv(ep, agent_name(i))
            if not isinstance(rec, EmbeddingRecord):
                raise BarrierViolation(f"agent {i} sent {type(rec).__name__} instead of an embedding")
            recs.append(rec)
            nbytes += size
        primary.append(recs[0])
        extras.append(tuple(recs[1:]))
    inbox = RoundInbox(t, primary, extras if ctrl.dynamic else [], nbytes)
    ctrl.check_round(inbox)
    pending = _Pending(inbox)
    if ctrl.dynamic:
        pending.extras = ctrl.extra_gradients(inbox)
        if full_grads:
            for i, pair in enumerate(pending.extras):
                for tag, (_, boundary) in zip(_EXTRA_TAGS, pair):
                    inbox.bytes += ep.send_record(agent_name(i), GradientRecord(i, t, boundary, tag))
    return pending


def controller_phase_update(ctrl: Controller, ep: Endpoint, t: int, pending: _Pending,
                            full_grads: bool) -> list[float]:
    inbox = pending.inbox
    if ctrl.dynamic:
        products = None
        if full_grads:
            products = []
            for i in range(ctrl.n_agents):
                rec, size = _recv(ep, agent_name(i))
                if not (isinstance(rec, ControlRecord) and rec.code == ControlCode.INNER_PRODUCT
                        and rec.round == t and len(rec.body) == _F64.size):
                    raise BarrierViolation(f"agent {i} did not return its inner product")
                products.append(_F64.unpack(rec.body)[0])
                inbox.bytes += size
        g1 = [pair[0][0] for pair in pending.extras]
        g2 = [pair[1][0] for pair in pending.extras]
        ctrl.weight_update(weight_directions(g1, g2, ctrl.gamma, ctrl.weight_rule, products))
    boundaries, losses = ctrl.shared_update(inbox.primary)
    for i, b in enumerate(boundaries):
        inbox.bytes += ep.send_record(agent_name(i), GradientRecord(i, t, b))
    ctrl.bytes += inbox.bytes
    ctrl.round = t + 1
    return losses


# -- snapshots and metrics -------------------------------------------------------

@dataclass
class Snapshot:
    round: int
    shared: np.ndarray | None
    gamma: np.ndarray
    agents: list[np.ndarray]
    flops_agent: int
    flops_ctrl: int
    bytes: int


def is_eval_round(t: int, T: int, every: int) -> bool:
    return (t + 1) % every == 0 or t == T - 1


@dataclass
class Problem:
    """Everything a run needs besides its mutable state."""

    config: TrainConfig
    spec: ModelSpec | None
    datasets: list[Dataset]
    populations: list[Dataset]
    toy: ToyLosses | None = None


def build_problem(config: TrainConfig, populations: bool = True) -> Problem:
    task = config.task
    if task.kind == "toy":
        if task.centers is None:
            obj = symmetric_toy(task.sigma, task.w0)
        else:
            curv = task.curvatures if task.curvatures is not None else [np.eye(2)] * len(task.centers)
            obj = ToyObjectiveSet(np.array(task.centers), np.array(curv), task.sigma, task.w0)
        return Problem(config, None, [], [], ToyLosses(obj))
    spec = apply_scheme(config.model_spec(), config.scheme)
    datasets, pops = [], []
    for m in task.modalities:
        ts = TimeSeriesTask(m, task.train_size, config.seed, task.noise)
        data = gen_timeseries(ts)
        datasets.append(data)
        if populations and config.metrics:
            pops.append(population_sample(ts, config.n_pop_factor * len(data), data))
    return Problem(config, spec, datasets, pops)


def full_batch_gradients(spec: ModelSpec, shared: np.ndarray | None, agents: Sequence[np.ndarray],
                         datasets: Sequence[Dataset]) -> np.ndarray:
    """Per-agent dataset-average gradients in the joint ``[shared | agent_0 | ...]`` space."""
    n_sh = spec.n_params("shared")
    n_a = spec.n_params("agent")
    out = np.zeros((len(agents), n_sh + n_a * len(agents)))
    for i, (a, data) in enumerate(zip(agents, datasets)):
        z, acache = forward(spec, a, "agent", data.x)
        if spec.boundary < len(spec.layers):
            pred, scache = forward(spec, shared, "shared", z)
            _, up = mse_batch(pred, data.y)
            out[i, :n_sh], up = backward(spec, shared, scache, up, "shared")
        else:
            _, up = mse_batch(z, data.y)
        if spec.boundary > 0:
            ga, _ = backward(spec, a, acache, up, "agent")
            out[i, n_sh + i * n_a: n_sh + (i + 1) * n_a] = ga
    return out


def evaluate_snapshot(problem: Problem, snap: Snapshot) -> M.MetricsRecord:
    if problem.toy is not None:
        w = snap.shared
        grads = np.vstack([problem.toy.grad(i, w) for i in range(problem.toy.n_agents)])
        res = M.evaluate_errors(grads, snap.gamma)
    else:
        grads = full_batch_gradients(problem.spec, snap.shared, snap.agents, problem.datasets)
        pop = full_batch_gradients(problem.spec, snap.shared, snap.agents, problem.populations)
        res = M.evaluate_errors(grads, snap.gamma, pop)
    return M.MetricsRecord(
        round=snap.round + 1, o_err=res.o_err, o_err_agents=tuple(res.o_err_agents.tolist()),
        g_err=res.g_err, c_err=res.c_err, min_norm=res.min_norm,
        gamma=tuple(snap.gamma.tolist()), flops_agent=snap.flops_agent,
        flops_ctrl=snap.flops_ctrl, bytes=snap.bytes,
        g_err_agents=tuple(res.g_err_agents.tolist()))


# -- runs --------------------------------------------------------------------------

@dataclass
class TrainResult:
    config: TrainConfig
    records: list[M.MetricsRecord]
    losses: np.ndarray
    weights: np.ndarray
    agents: list[Agent] = field(default_factory=list)
    controller: Controller | None = None
    toy_params: np.ndarray | None = None
    snapshots: list[Snapshot] = field(default_factory=list)
    problem: Problem | None = None

    def csv(self) -> str:
        return M.records_to_csv(self.records)


def make_agents(problem: Problem) -> list[Agent]:
    cfg = problem.config
    spec = problem.spec
    agents = []
    for i, data in enumerate(problem.datasets):
        k = 0 if cfg.replicate_agents else i
        params = init_params(spec, "agent", RngState(cfg.seed, stream_id(STREAM_PARAMS, k)))
        rng = RngState(cfg.seed, stream_id(STREAM_SAMPLING, k))
        n_extra = 2 if cfg.dynamic and spec.boundary < len(spec.layers) else 0
        agents.append(Agent(i, spec, params, data, rng, cfg.beta, n_extra))
    return agents


def make_controller(problem: Problem) -> Controller:
    cfg = problem.config
    params = init_params(problem.spec, "shared", RngState(cfg.seed, stream_id(STREAM_SHARED_INIT)))
    return Controller(problem.spec, params, cfg.initial_weights(), cfg.beta, cfg.eta, cfg.dynamic,
                      cfg.weight_rule, cfg.weight_grads)


def _with_round(exc: NumericFailure, t: int) -> NumericFailure:
    if exc.round_index is not None:
        return exc
    return NumericFailure(str(exc), round_index=t)


def _run_toy(problem: Problem) -> TrainResult:
    cfg = problem.config
    toy = problem.toy
    n = toy.n_agents
    w = np.array(toy.objectives.w0, dtype=np.float64)
    gamma = cfg.initial_weights()
    rngs = [RngState(cfg.seed, stream_id(STREAM_TOY_NOISE, 0 if cfg.replicate_agents else i))
            for i in range(n)]
    losses = np.empty((cfg.T, n))
    snaps = []
    for t in range(cfg.T):
        try:
            losses[t] = [toy.loss(i, w) for i in range(n)]
            draws = [[toy.stochastic_grad(i, w, rngs[i]) for _ in range(3 if cfg.dynamic else 1)]
                     for i in range(n)]
            if cfg.dynamic:
                d = weight_directions([g[1] for g in draws], [g[2] for g in draws], gamma,
                                      cfg.weight_rule)
                gamma = weight_step(gamma, d, cfg.eta)
            step = np.zeros(2)
            for i in range(n):
                step += gamma[i] * draws[i][0]
            w = w - cfg.beta * step
            if not np.all(np.isfinite(w)):
                raise NumericFailure("toy parameters diverged")
        except NumericFailure as exc:
            raise _with_round(exc, t) from exc
        if cfg.metrics and is_eval_round(t, cfg.T, cfg.metrics_every):
            snaps.append(Snapshot(t, w.copy(), gamma.copy(), [], 0, 0, 0))
    records = [evaluate_snapshot(problem, s) for s in snaps]
    return TrainResult(cfg, records, losses, gamma, toy_params=w, snapshots=snaps, problem=problem)


def _run_local(problem: Problem, agents: list[Agent], threaded: bool) -> tuple[np.ndarray, list]:
    """Nothing is shared: agents train independently, no messages are exchanged."""
    cfg = problem.config
    losses = np.empty((cfg.T, len(agents)))

    def work(agent: Agent) -> None:
        for t in range(cfg.T):
            try:
                losses[t, agent.agent_id] = agent.local_step(t)
            except NumericFailure as exc:
                raise _with_round(exc, t) from exc
            if is_eval_round(t, cfg.T, cfg.metrics_every):
                agent.snapshots[t] = agent.params
                agent.flops_log[t] = agent.flops

    if threaded:
        _run_threads([lambda a=a: work(a) for a in agents], [])
    else:
        for a in agents:
            work(a)
    return losses, []


def _run_threads(workers: list[Callable[[], None]], on_error_close: list[Callable[[], None]]) -> None:
    errors: list[BaseException] = []
    lock = threading.Lock()

    def wrap(fn):
        def run():
            try:
                fn()
            except BaseException as exc:  # noqa: BLE001  (re-raised by the joiner)
                with lock:
                    errors.append(exc)
                for close in on_error_close:
                    close()
        return run

    threads = [threading.Thread(target=wrap(fn), daemon=True) for fn in workers]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        # prefer the root cause over the ChannelClosed it triggered elsewhere
        primary = [e for e in errors if not isinstance(e, ConnectionError)]
        raise (primary or errors)[0]


def _run_split(problem: Problem, agents: list[Agent], ctrl: Controller, threaded: bool):
    cfg = problem.config
    T = cfg.T
    full = cfg.dynamic and cfg.weight_grads == "full"
    transport = LoopbackTransport()
    ctrl_ep = transport.register(CTRL)
    agent_eps = [transport.register(agent_name(a.agent_id)) for a in agents]
    losses = np.empty((T, len(agents)))
    ctrl_log: dict[int, tuple[np.ndarray, np.ndarray, int, int]] = {}

    def agent_round(a: Agent, ep: Endpoint, t: int) -> None:
        try:
            agent_phase_update_emit(a, ep, t, cfg.metrics and is_eval_round(t, T, cfg.metrics_every))
            if full:
                agent_phase_private_product(a, ep, t)
        except NumericFailure as exc:
            raise _with_round(exc, t) from exc
        if is_eval_round(t, T, cfg.metrics_every):
            a.flops_log[t] = a.flops

    def ctrl_round(t: int, pending: _Pending | None = None) -> None:
        try:
            if pending is None:
                pending = controller_phase_collect(ctrl, ctrl_ep, t, full)
            losses[t] = controller_phase_update(ctrl, ctrl_ep, t, pending, full)
        except NumericFailure as exc:
            raise _with_round(exc, t) from exc
        if is_eval_round(t, T, cfg.metrics_every):
            ctrl_log[t] = (ctrl.params, ctrl.gamma.copy(), ctrl.flops, ctrl.bytes)

    if threaded:
        def agent_loop(a: Agent, ep: Endpoint) -> None:
            for t in range(T):
                agent_round(a, ep, t)
            agent_phase_drain(a, ep, T - 1)

        def ctrl_loop() -> None:
            for t in range(T):
                ctrl_round(t)

        closers = [lambda: transport.close(CTRL)] + [
            (lambda name=agent_name(a.agent_id): transport.close(name)) for a in agents]
        _run_threads([ctrl_loop] + [lambda a=a, ep=ep: agent_loop(a, ep)
                                    for a, ep in zip(agents, agent_eps)], closers)
    else:
        for t in range(T):
            for a, ep in zip(agents, agent_eps):
                try:
                    agent_phase_update_emit(a, ep, t, cfg.metrics and is_eval_round(t, T, cfg.metrics_every))
                except NumericFailure as exc:
                    raise _with_round(exc, t) from exc
            try:
                pending = controller_phase_collect(ctrl, ctrl_ep, t, full)
                if full:
                    for a, ep in zip(agents, agent_eps):
                        agent_phase_private_product(a, ep, t)
            except NumericFailure as exc:
                raise _with_round(exc, t) from exc
            if is_eval_round(t, T, cfg.metrics_every):
                for a in agents:
                    a.flops_log[t] = a.flops
            ctrl_round(t, pending)
        for a, ep in zip(agents, agent_eps):
            agent_phase_drain(a, ep, T - 1)
    return losses, ctrl_log


def run_training(config: TrainConfig, problem: Problem | None = None) -> TrainResult:
    """Run ``config.T`` coordination rounds and evaluate metrics at the configured cadence."""
    if problem is None:
        problem = build_problem(config)
    elif problem.config is not config:
        problem = Problem(config, problem.spec, problem.datasets, problem.populations, problem.toy)
    if problem.toy is not None:
        return _run_toy(problem)
    threaded = config.harness == "threaded"
    agents = make_agents(problem)
    spec = problem.spec
    if agents[0].local_only:
        ctrl = None
        losses, ctrl_log = _run_local(problem, agents, threaded)
        gamma = config.initial_weights()
    else:
        ctrl = make_controller(problem)
        losses, ctrl_log = _run_split(problem, agents, ctrl, threaded)
        gamma = ctrl.gamma

    snaps = []
    if config.metrics:
        for t in range(config.T):
            if not is_eval_round(t, config.T, config.metrics_every):
                continue
            if ctrl is None:
                shared, g, fc, nb = np.zeros(0), config.initial_weights(), 0, 0
            else:
                shared, g, fc, nb = ctrl_log[t]
            snaps.append(Snapshot(t, shared, g, [a.snapshots[t] for a in agents],
                                  max(a.flops_log[t] for a in agents), fc, nb))
    records = [evaluate_snapshot(problem, s) for s in snaps]
    return TrainResult(config, records, losses, np.array(gamma), agents, ctrl,
                       snapshots=snaps, problem=problem)


def collaborative_inference(agents: Sequence[Agent], ctrl: Controller | None,
                            inputs: Sequence) -> list[np.ndarray]:
    """Per-agent predictions: the agent part followed by the shared part; no state changes."""
    if len(inputs) != len(agents):
        raise InvalidArgument(f"{len(inputs)} inputs for {len(agents)} agents")
    outputs = []
    for agent, x in zip(agents, inputs):
        z, _ = forward(agent.spec, agent.params, "agent", x)
        if agent.local_only:
            outputs.append(z)
        else:
            if ctrl is None:
                raise InvalidArgument("shared part required for split inference")
            out, _ = forward(ctrl.spec, ctrl.params, "shared", z)
            outputs.append(out)
    return outputs
