"""End-to-end acceptance checks with their measured values.

Each ``check_*`` function runs one experiment at the stated tolerances and
returns a :class:`CheckResult`; nothing here is tuned to force a pass.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import metrics as M
from .config import TaskConfig, TrainConfig
from .core_math import finite_diff_grad, min_norm_weights
from .model import apply_scheme, backward, default_mlp, flops, forward, mse_loss_and_grad
from .model import LayerSpec, ModelSpec
from .protocol import (EmbeddingRecord, GradientRecord, SampleTag, decode, encode,
                       round_bytes)
from .reference import instrumented_pass
from .rng import STREAM_TEST, RngState, stream_id
from .training import run_training


@dataclass
class CheckResult:
    id: int
    name: str
    passed: bool
    measured: dict = field(default_factory=dict)
    seconds: float = 0.0
    budget: float = math.inf

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        parts = ", ".join(f"{k}={_fmt(v)}" for k, v in self.measured.items())
        return f"[{status}] {self.id:>2} {self.name}: {parts} ({self.seconds:.1f}s)"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _timed(fn: Callable[[], tuple[bool, dict]], cid: int, name: str, budget: float) -> CheckResult:
    t0 = time.perf_counter()
    ok, measured = fn()
    dt = time.perf_counter() - t0
    measured["within_budget"] = dt < budget
    return CheckResult(cid, name, bool(ok and dt < budget), measured, dt, budget)


def _test_rng(k: int) -> np.random.Generator:
    # acceptance cases draw from numpy's generator seeded by our counter stream
    return np.random.default_rng(int(RngState(k, stream_id(STREAM_TEST)).integers(2**31)))


# -- 1: split-gradient exactness -------------------------------------------------------

def _random_split_spec(rng: np.random.Generator) -> ModelSpec:
    n_dense = int(rng.integers(3, 5))
    dims = [int(d) for d in rng.integers(2, 7, n_dense + 1)]
    layers = []
    for k in range(n_dense):
        layers.append(LayerSpec.dense(dims[k], dims[k + 1]))
        if k < n_dense - 1 and rng.random() < 0.7:
            layers.append(LayerSpec.act(dims[k + 1], "tanh"))
    return ModelSpec(tuple(layers))


def split_gradient(spec: ModelSpec, params: np.ndarray, x, y) -> np.ndarray:
    """Full-parameter gradient assembled over encoded E- and G-interface frames."""
    na = spec.n_params("agent")
    pa, ps = params[:na], params[na:]
    z, acache = forward(spec, pa, "agent", x, round=0)
    emb = decode(encode(EmbeddingRecord(0, 0, SampleTag.PRIMARY, z, y)))
    out, scache = forward(spec, ps, "shared", emb.z)
    _, up = mse_loss_and_grad(out, emb.y)
    gs, boundary = backward(spec, ps, scache, up, "shared")
    grad = decode(encode(GradientRecord(0, 0, boundary)))
    ga, _ = backward(spec, pa, acache, grad.g_boundary, "agent", round=0)
    return np.concatenate([ga, gs])


def check_split_gradients(n_cases: int = 120) -> CheckResult:
    def run():
        rng = _test_rng(1)
        exact = 0
        worst_rel = 0.0
        for case in range(n_cases):
            scheme = ("share_top", "share_deep")[case % 2]
            spec = apply_scheme(_random_split_spec(rng) if case % 4 < 3 else default_mlp(), scheme)
            params = rng.normal(0, 0.6, spec.n_params())
            x = rng.normal(size=spec.in_dim)
            y = rng.normal(size=spec.out_dim)
            g = split_gradient(spec, params, x, y)
            out, cache = forward(spec, params, "full", x)
            _, up = mse_loss_and_grad(out, y)
            mono, _ = backward(spec, params, cache, up, "full")
            exact += int(np.array_equal(g, mono))
            if spec.n_params() <= 400:
                f = lambda p: mse_loss_and_grad(forward(spec, p, "full", x)[0], y)[0]
                fd = finite_diff_grad(f, params)
                rel = float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-8))
                worst_rel = max(worst_rel, rel)
        ok = exact == n_cases and worst_rel <= 1e-5
        return ok, {"cases": n_cases, "bit_exact": exact, "max_rel_fd_err": worst_rel}
    return _timed(run, 1, "split-gradient exactness", 10.0)


# -- 2: min-norm oracle --------------------------------------------------------------

def grid_min_norm(grads, step: float = 1e-3) -> tuple[np.ndarray, float]:
    mat = np.asarray(grads, dtype=np.float64)
    k = int(round(1 / step))
    if mat.shape[0] == 2:
        a = np.arange(k + 1) / k
        grid = np.stack([a, 1 - a], axis=1)
    else:
        i, j = np.meshgrid(np.arange(k + 1), np.arange(k + 1), indexing="ij")
        keep = i + j <= k
        grid = np.stack([i[keep] / k, j[keep] / k, (k - i[keep] - j[keep]) / k], axis=1)
    norms = np.linalg.norm(grid @ mat, axis=1)
    best = int(np.argmin(norms))
    return grid[best], float(norms[best])


def check_min_norm(n_sets: int = 50) -> CheckResult:
    def run():
        rng = _test_rng(2)
        worst = 0.0
        worst_w = 0.0
        for case in range(n_sets):
            n = 2 + case % 2
            grads = rng.uniform(-1, 1, (n, int(rng.integers(1, 5))))
            w, norm = min_norm_weights(grads)
            gw, gnorm = grid_min_norm(grads)
            worst = max(worst, abs(norm - gnorm))
            worst_w = max(worst_w, float(np.max(np.abs(w - gw))))
        return worst <= 1e-3, {"sets": n_sets, "max_norm_diff": worst, "max_weight_diff": worst_w}
    return _timed(run, 2, "min-norm oracle equivalence", 30.0)


# -- toy helpers -----------------------------------------------------------------------

def toy_config(**kw) -> TrainConfig:
    task = TaskConfig(kind="toy", sigma=kw.pop("sigma", 0.1))
    return TrainConfig(task=task, **kw)


def time_average(records, field_name: str, last_rounds: int | None = None) -> float:
    if last_rounds is not None:
        final = records[-1].round
        records = [r for r in records if r.round > final - last_rounds]
    return float(np.mean([getattr(r, field_name) for r in records]))


# -- 3: conflict resolution ------------------------------------------------------------

def check_conflict(T: int = 1000, seed: int = 0) -> CheckResult:
    def run():
        base = toy_config(T=T, seed=seed, gamma_init=(1.0, 0.0, 0.0), metrics_every=1)
        static = time_average(run_training(base).records, "c_err", 200)
        dynamic = time_average(run_training(base.with_(algorithm="dynamic")).records, "c_err", 200)
        reduction = 1 - dynamic / static if static > 0 else 0.0
        ok = static >= 0.5 and reduction >= 0.5
        return ok, {"static_c_err": static, "dynamic_c_err": dynamic, "reduction": reduction}
    return _timed(run, 3, "conflict resolution", 60.0)


# -- 4: O-error rate -------------------------------------------------------------------

RATE_TS = (250, 500, 1000, 2000, 4000)


def rate_schedule(T: int, c: float = 0.5) -> float:
    return c / math.sqrt(T)


def check_o_rate(seeds: int = 10) -> CheckResult:
    def run():
        series = []
        for T in RATE_TS:
            vals = [time_average(run_training(toy_config(T=T, beta=rate_schedule(T), seed=s,
                                                         metrics_every=10)).records, "o_err")
                    for s in range(seeds)]
            series.append((T, float(np.mean(vals))))
        slope = M.fit_rate_slope(series)
        return -0.45 <= slope <= -0.10, {"slope": slope, "errors": [e for _, e in series]}
    return _timed(run, 4, "O-error rate", 300.0)


# -- 5: G-error shape ------------------------------------------------------------------

# step size large enough for the model to move within the shortest horizon
G_SHAPE_BETA = 0.005


def _g_avg(T: int, D: int, seed: int) -> float:
    cfg = TrainConfig(T=T, beta=G_SHAPE_BETA, seed=seed, scheme="share_top",
                      task=TaskConfig(modalities=("csi",), train_size=D),
                      metrics_every=max(1, T // 10))
    return time_average(run_training(cfg).records, "g_err")


def check_g_shape(seeds: int = 10) -> CheckResult:
    def run():
        t_grid = [(T, 500) for T in (100, 300, 1000)]
        d_grid = [(500, D) for D in (200, 800, 3200)]
        mean = {p: float(np.mean([_g_avg(*p, s) for s in range(seeds)])) for p in t_grid + d_grid}
        rho_t = stats.spearmanr([p[0] for p in t_grid], [mean[p] for p in t_grid]).statistic
        rho_d = stats.spearmanr([p[1] for p in d_grid], [mean[p] for p in d_grid]).statistic
        ratios = [mean[p] / math.sqrt(p[0] / p[1]) for p in t_grid + d_grid]
        spread = max(ratios) / min(ratios)
        ok = rho_t >= 0.8 and rho_d <= -0.8 and spread < 3.0
        return ok, {"spearman_T": float(rho_t), "spearman_D": float(rho_d), "ratio_spread": spread,
                    "g_err_T": [mean[p] for p in t_grid], "g_err_D": [mean[p] for p in d_grid]}
    return _timed(run, 5, "G-error shape", 600.0)


# -- 6: dynamic-weighting overhead -----------------------------------------------------

# fixed step sizes crossed with T: under beta ~ T^-1/2 both O-bound terms scale
# as T^-1/4 and the constants would not be separable
OVERHEAD_TS = (250, 1000)
OVERHEAD_BETAS = (0.01, 0.04)
OVERHEAD_ETAS = (0.05, 0.1, 0.2)


def check_dynamic_overhead(seeds: int = 5) -> CheckResult:
    def run():
        obs = []
        static = {}
        dynamic = {}
        for T in OVERHEAD_TS:
            for beta in OVERHEAD_BETAS:
                static[T, beta] = float(np.mean([time_average(run_training(
                    toy_config(T=T, beta=beta, seed=s)).records, "o_err") for s in range(seeds)]))
                obs.append(M.Observation("O-static", T, beta, 0.0, 0.0, static[T, beta]))
                for eta in OVERHEAD_ETAS:
                    dynamic[T, beta, eta] = float(np.mean([time_average(run_training(
                        toy_config(T=T, beta=beta, eta=eta, seed=s, algorithm="dynamic")).records,
                        "o_err") for s in range(seeds)]))
                    obs.append(M.Observation("O-dynamic", T, beta, eta, 0.0, dynamic[T, beta, eta]))
        fit = M.fit_constants(obs)
        mu_l = fit.constants.mu_l
        worst = -math.inf
        for (T, beta, eta), dyn in dynamic.items():
            extra = 3 * math.sqrt(eta * mu_l**4 / 2)
            worst = max(worst, (dyn - static[T, beta]) - 2 * extra)
        return worst <= 0, {"mu_l": mu_l, "worst_excess_minus_2x_term": worst,
                            "fit_residual": fit.residual, "c_I": fit.constants.c_I,
                            "mu_g": fit.constants.mu_g}
    return _timed(run, 6, "dynamic-weighting overhead", 120.0)


# -- 7: resource accounting ------------------------------------------------------------

def scheme_flops_table() -> dict:
    out = {}
    for scheme in ("none", "share_top", "share_deep"):
        spec = apply_scheme(default_mlp(), scheme)
        train = flops(spec, "agent", "forward") + flops(spec, "agent", "backward")
        out[scheme] = {
            "agent_train_per_round": train,
            "agent_inference": flops(spec, "agent", "inference"),
            "ctrl_train_per_agent_round": flops(spec, "shared", "forward") + flops(spec, "shared", "backward"),
            "inference_ratio": flops(spec, "agent", "inference") / train,
            "embedding_dim": spec.embedding_dim,
        }
    return out


def check_resources() -> CheckResult:
    def run():
        table = scheme_flops_table()
        ordered = (table["share_top"]["agent_train_per_round"]
                   < table["share_deep"]["agent_train_per_round"]
                   < table["none"]["agent_train_per_round"])
        counted = True
        for scheme in table:
            spec = apply_scheme(default_mlp(), scheme)
            p = np.zeros(spec.n_params("agent"))
            res = instrumented_pass(spec, "agent", p, np.zeros(spec.in_dim),
                                    np.zeros(spec.embedding_dim))
            counted &= flops(spec, "agent", "forward") == 2 * res.forward_macs
            counted &= flops(spec, "agent", "backward") == 2 * res.backward_macs
        cheaper = all(v["agent_inference"] < v["agent_train_per_round"] for v in table.values())
        return ordered and counted and cheaper, {
            "flops_per_agent": [table[s]["agent_train_per_round"] for s in table],
            "inference_ratio": [table[s]["inference_ratio"] for s in table],
            "matches_counter": counted}
    return _timed(run, 7, "partition resource accounting", math.inf)


# -- 8: sharing helps ------------------------------------------------------------------

def check_sharing(seeds: int = 10, T: int = 1000) -> CheckResult:
    def run():
        diffs = []
        for s in range(seeds):
            final = {}
            for scheme in ("none", "share_top"):
                r = run_training(TrainConfig(T=T, seed=s, scheme=scheme, metrics_every=T))
                final[scheme] = float(np.mean(r.records[-1].o_err_agents))
            diffs.append(final["none"] - final["share_top"])
        wins = sum(d > 0 for d in diffs)
        p = stats.binomtest(wins, seeds, 0.5, alternative="greater").pvalue
        improvement = float(np.mean(diffs))
        return improvement > 0 and p < 0.1, {"mean_improvement": improvement, "wins": wins,
                                              "sign_test_p": float(p)}
    return _timed(run, 8, "sharing helps", math.inf)


# -- 9: protocol conformance -----------------------------------------------------------

GOLDEN_GRAD = bytes.fromhex("4d4f5053 01 02 0100 00000000 0d000000 00 01000000 000000000000f03f")


def check_protocol(n_fuzz: int = 10_000) -> CheckResult:
    def run():
        golden = encode(GradientRecord(1, 0, [1.0])) == GOLDEN_GRAD
        rng = _test_rng(9)
        roundtrip = 0
        for _ in range(n_fuzz):
            kind = rng.integers(2)
            if kind == 0:
                rec = EmbeddingRecord(int(rng.integers(2**16)), int(rng.integers(2**32)),
                                      int(rng.integers(3)), rng.normal(size=rng.integers(0, 40)),
                                      rng.normal(size=rng.integers(0, 8)), int(rng.integers(2**32)))
            else:
                rec = GradientRecord(int(rng.integers(2**16)), int(rng.integers(2**32)),
                                     rng.normal(size=rng.integers(0, 40)) * 10.0 ** rng.integers(-300, 300),
                                     int(rng.integers(3)))
            data = encode(rec)
            roundtrip += int(decode(data) == rec and encode(decode(data)) == data)
        counts_ok = True
        for scheme, algorithm in (("share_top", "static"), ("share_deep", "dynamic")):
            cfg = TrainConfig(T=5, scheme=scheme, algorithm=algorithm, metrics_every=1,
                              task=TaskConfig(train_size=40), n_pop_factor=1)
            res = run_training(cfg)
            spec = apply_scheme(default_mlp(), scheme)
            per_round = round_bytes(3, spec.embedding_dim, spec.out_dim, cfg.dynamic)
            counts_ok &= all(r.bytes == r.round * per_round for r in res.records)
        ok = golden and roundtrip == n_fuzz and counts_ok
        return ok, {"golden": golden, "roundtrips": roundtrip, "byte_counts": counts_ok}
    return _timed(run, 9, "protocol conformance", math.inf)


# -- 10: determinism -------------------------------------------------------------------

def check_determinism() -> CheckResult:
    def run():
        same = True
        for cfg in (TrainConfig(T=60, algorithm="dynamic", metrics_every=5, n_pop_factor=4),
                    TrainConfig(T=60, algorithm="dynamic", scheme="share_deep", weight_grads="full",
                                metrics_every=5, n_pop_factor=4),
                    TrainConfig(T=40, scheme="none", metrics_every=5, n_pop_factor=4)):
            a = run_training(cfg.with_(harness="single")).csv()
            b = run_training(cfg.with_(harness="threaded")).csv()
            c = run_training(cfg.with_(harness="threaded")).csv()
            same &= a == b == c
        return same, {"byte_identical": same}
    return _timed(run, 10, "determinism across harness modes", math.inf)


CHECKS: dict[int, Callable[[], CheckResult]] = {
    1: check_split_gradients,
    2: check_min_norm,
    3: check_conflict,
    4: check_o_rate,
    5: check_g_shape,
    6: check_dynamic_overhead,
    7: check_resources,
    8: check_sharing,
    9: check_protocol,
    10: check_determinism,
}


def run_all(ids=None, echo: Callable[[str], None] | None = None) -> list[CheckResult]:
    results = []
    for cid in ids or sorted(CHECKS):
        res = CHECKS[cid]()
        if echo is not None:
            echo(res.line())
        results.append(res)
    return results
