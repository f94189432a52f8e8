"""Maximization-bias Monte Carlo, the lower-bound falsification harness and
estimation-error summaries over run directories."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .qsim_target import SimilarityWeights, candidate_actions, softmax_weights, survival_mask, weighted_value

DEFAULT_CAP = 10**7
CHUNK_ELEMENTS = 1 << 21
BIAS_COLUMNS = ("N", "A", "sigma", "trials", "empirical_bias", "std_err", "bound", "ratio")


class AnalysisError(ValueError):
    pass


def thread_cap() -> int:
    """Worker limit from ``QSIM_LAB_THREADS`` (default: CPU count)."""
    raw = os.environ.get("QSIM_LAB_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as exc:
        raise AnalysisError(f"QSIM_LAB_THREADS must be an integer, got {raw!r}") from exc
    return max(n, 1)


# ---------------------------------------------------------------------------
# maximization bias


@dataclass(frozen=True)
class BiasEstimate:
    n_agents: int
    n_actions: int
    sigma: float
    trials: int
    empirical_bias: float
    std_err: float
    bound: float

    @property
    def ratio(self) -> float:
        return self.empirical_bias / self.bound if self.bound > 0 else float("nan")

    def row(self) -> dict:
        return {
            "N": self.n_agents, "A": self.n_actions, "sigma": self.sigma, "trials": self.trials,
            "empirical_bias": self.empirical_bias, "std_err": self.std_err, "bound": self.bound, "ratio": self.ratio,
        }


def max_bias_bound(n_agents: int, n_actions: int, sigma: float) -> float:
    """``sigma * sqrt(2 N ln|A|)``."""
    return sigma * math.sqrt(2.0 * n_agents * math.log(n_actions))


def _chunk_sums(ss: np.random.SeedSequence, rows: int, width: int, sigma: float) -> tuple[float, float]:
    rng = np.random.default_rng(ss)
    z = rng.standard_normal((rows, width)).max(axis=1)
    return math.fsum(z), math.fsum(z * z)


def mc_max_bias(n_agents: int, n_actions: int, sigma: float, trials: int, seed: int = 0,
                cap: int = DEFAULT_CAP, workers: int | None = None) -> BiasEstimate:
    """Mean of the max over ``|A|^N`` iid ``N(0, sigma^2)`` estimates whose
    true values are all equal (zero), i.e. the overestimation of the max.

    Trials are split into fixed chunks with their own seed substreams, so
    the estimate does not depend on the worker count.
    """
    if n_agents < 1 or n_actions < 1:
        raise AnalysisError("agent and action counts must be positive")
    if trials < 1:
        raise AnalysisError("trials must be at least 1")
    if sigma < 0:
        raise AnalysisError("sigma must be non-negative")
    width = n_actions**n_agents
    if width > cap:
        raise AnalysisError(f"|A|^N = {n_actions}^{n_agents} = {width} exceeds the cap {cap}; lower N or |A| or raise the cap")
    bound = max_bias_bound(n_agents, n_actions, sigma)
    if sigma == 0:
        return BiasEstimate(n_agents, n_actions, 0.0, trials, 0.0, 0.0, bound)

    rows_per_chunk = max(1, CHUNK_ELEMENTS // width)
    sizes = [min(rows_per_chunk, trials - start) for start in range(0, trials, rows_per_chunk)]
    seqs = np.random.SeedSequence([seed, n_agents, n_actions]).spawn(len(sizes))
    workers = min(thread_cap() if workers is None else workers, len(sizes))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda a: _chunk_sums(a[0], a[1], width, sigma), zip(seqs, sizes)))
    else:
        parts = [_chunk_sums(ss, k, width, sigma) for ss, k in zip(seqs, sizes)]
    s1 = math.fsum(p[0] for p in parts)
    s2 = math.fsum(p[1] for p in parts)
    mean_z = s1 / trials
    var_z = max(s2 / trials - mean_z * mean_z, 0.0) * (trials / (trials - 1) if trials > 1 else 0.0)
    return BiasEstimate(n_agents, n_actions, float(sigma), trials, sigma * mean_z,
                        sigma * math.sqrt(var_z / trials), bound)


@dataclass(frozen=True)
class BiasSweepConfig:
    agent_counts: tuple[int, ...] = (1, 2, 3, 4, 5)
    action_sizes: tuple[int, ...] = (5,)
    sigma: float = 1.0
    trials: int = 100_000
    seed: int = 0
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        if not self.agent_counts or min(self.agent_counts) < 1:
            raise AnalysisError("agent counts must be positive")
        if not self.action_sizes or min(self.action_sizes) < 1:
            raise AnalysisError("action sizes must be positive")
        if self.sigma < 0:
            raise AnalysisError("sigma must be non-negative")
        if self.trials < 1:
            raise AnalysisError("trials must be at least 1")
        for a in self.action_sizes:
            if a ** max(self.agent_counts) > self.cap:
                raise AnalysisError(f"|A|^N = {a}^{max(self.agent_counts)} exceeds the cap {self.cap}")


@dataclass
class TrendReport:
    rows: list[BiasEstimate]
    bound_ok: bool
    increasing: bool
    failures: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.bound_ok and self.increasing


def verify_theorem1_trend(sweep: BiasSweepConfig, workers: int | None = None) -> TrendReport:
    """Run the sweep; check bound dominance and growth in N, both with 3
    standard-error margins."""
    rows = [
        mc_max_bias(n, a, sweep.sigma, sweep.trials, sweep.seed, sweep.cap, workers)
        for a in sweep.action_sizes
        for n in sorted(sweep.agent_counts)
    ]
    failures = []
    for r in rows:
        if r.empirical_bias > r.bound + 3 * r.std_err:
            failures.append(f"N={r.n_agents} A={r.n_actions}: empirical {r.empirical_bias:.6g} above bound {r.bound:.6g}")
    bound_ok = not failures
    increasing = True
    for a in sweep.action_sizes:
        group = [r for r in rows if r.n_actions == a]
        for prev, cur in zip(group, group[1:]):
            # Growth must be visible beyond the combined noise; at |A| = 1 or
            # sigma = 0 every row is identically zero, which counts as flat.
            margin = 3 * math.hypot(prev.std_err, cur.std_err)
            if a > 1 and sweep.sigma > 0 and not cur.empirical_bias - prev.empirical_bias > margin:
                increasing = False
                failures.append(f"A={a}: bias not increasing from N={prev.n_agents} to N={cur.n_agents}")
    return TrendReport(rows, bound_ok, increasing, failures)


def bias_csv(rows: list[BiasEstimate]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(BIAS_COLUMNS)
    for r in rows:
        d = r.row()
        writer.writerow([d[c] if isinstance(d[c], int) else repr(float(d[c])) for c in BIAS_COLUMNS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# lower-bound property of the weighted target


@dataclass
class Theorem2Instance:
    q_table: np.ndarray  # shape (A,) * N
    anchor: np.ndarray  # (N,)
    S: np.ndarray  # (N, A), anchor entries equal 1
    kappa: float
    threshold: float
    top_n: int | None

    def to_json(self) -> dict:
        return {
            "n_agents": int(self.anchor.size),
            "n_actions": int(self.S.shape[1]),
            "q_table": self.q_table.tolist(),
            "anchor": self.anchor.tolist(),
            "similarity": self.S.tolist(),
            "kappa": self.kappa,
            "threshold": self.threshold,
            "top_n": self.top_n,
        }


def random_instance(rng: np.random.Generator) -> Theorem2Instance:
    n = int(rng.integers(1, 5))
    a = int(rng.integers(2, 6))
    q = rng.normal(0.0, 1.0, size=(a,) * n) + rng.uniform(-5, 5)
    anchor = np.array(np.unravel_index(int(np.argmax(q)), q.shape), dtype=np.int64)
    S = rng.uniform(-1.0, 1.0, size=(n, a))
    S[np.arange(n), anchor] = 1.0
    kappa = float(rng.uniform(0.0, 10.0))
    threshold = float(rng.uniform(-1.0, 1.0))
    top_n = None if rng.random() < 0.5 else int(rng.integers(1, a + 1))
    return Theorem2Instance(q, anchor, S, kappa, threshold, top_n)


def instance_values(inst: Theorem2Instance, weight_fn=None) -> tuple[float, float]:
    """``(V_QSIM, V_Greedy)`` for one tabular instance.

    Candidates, survival and softmax come from the target-construction code;
    ``weight_fn`` swaps in a different global weighting (harness self-test).
    """
    n, a = inst.S.shape
    cand = candidate_actions(inst.anchor, a)  # (N, A, N)
    cq = inst.q_table[tuple(np.moveaxis(cand, -1, 0))]  # (N, A)
    keep = survival_mask(inst.S, np.ones((n, a), dtype=bool), inst.anchor, inst.threshold, inst.top_n)
    sim = SimilarityWeights(inst.S, softmax_weights(inst.S, keep, inst.kappa), inst.kappa, inst.threshold, inst.top_n)
    W = sim.global_weights if weight_fn is None else weight_fn(sim)
    return float(weighted_value(W, cq)), float(inst.q_table[tuple(inst.anchor)])


@dataclass
class Theorem2Report:
    samples: int
    violations: int
    worst_margin: float  # max over samples of V_QSIM - V_Greedy
    counterexamples: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"samples": self.samples, "violations": self.violations, "worst_margin": self.worst_margin,
                "counterexamples": self.counterexamples}


def verify_theorem2(samples: int, seed: int = 0, weight_fn=None, tol: float = 1e-9, keep_examples: int = 5) -> Theorem2Report:
    """Falsification run: ``V_QSIM <= V_Greedy + tol`` on random instances."""
    if samples < 1:
        raise AnalysisError("samples must be at least 1")
    rng = np.random.default_rng(seed)
    violations, worst, examples = 0, -math.inf, []
    for _ in range(samples):
        inst = random_instance(rng)
        v_qsim, v_greedy = instance_values(inst, weight_fn)
        margin = v_qsim - v_greedy
        worst = max(worst, margin)
        if margin > tol:
            violations += 1
            if len(examples) < keep_examples:
                examples.append({**inst.to_json(), "v_qsim": v_qsim, "v_greedy": v_greedy})
    return Theorem2Report(samples, violations, worst, examples)


def unnormalized_weights(sim: SimilarityWeights) -> np.ndarray:
    """Deliberately wrong weighting (per-agent weights without the 1/N
    factor), used to check that the harness can fail."""
    return sim.w


# ---------------------------------------------------------------------------
# estimation error


def delta_q(q_hat: float, rewards, gamma: float) -> float:
    """Predicted value minus the realised discounted return of the suffix."""
    acc = 0.0
    for r in reversed(list(rewards)):
        acc = float(r) + gamma * acc
    return float(q_hat) - acc


@dataclass
class DeltaQRecord:
    step: int
    values: list[float]

    @property
    def median(self) -> float:
        return float(np.median(self.values))

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


# Config keys allowed to differ between the two sides of a comparison.
COMPARE_FREE_KEYS = ("variant", "double_q", "seeds", "output_dir")


def load_run(run_dir) -> tuple[dict, list[dict]]:
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text())
        with open(run_dir / "metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise AnalysisError(f"cannot read run directory {run_dir}: {exc}") from exc
    return manifest, rows


def _comparable(config: dict) -> dict:
    return {k: v for k, v in config.items() if k not in COMPARE_FREE_KEYS}


def _quantiles(values) -> tuple[float, float, float]:
    q1, med, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 50, 75])
    return float(med), float(q1), float(q3)


@dataclass
class DeltaQComparison:
    steps: list[int]
    baseline: list[tuple[float, float, float]]  # (median, q1, q3) per step
    qsim: list[tuple[float, float, float]]
    final_baseline_median: float
    final_qsim_median: float

    @property
    def final_gap(self) -> float:
        """QSIM median minus baseline median over the final quarter."""
        return self.final_qsim_median - self.final_baseline_median

    def gap_signs(self) -> list[int]:
        return [int(np.sign(q[0] - b[0])) for b, q in zip(self.baseline, self.qsim)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("step", "baseline_median", "baseline_q1", "baseline_q3",
                         "qsim_median", "qsim_q1", "qsim_q3", "gap_sign"))
        for step, b, q, s in zip(self.steps, self.baseline, self.qsim, self.gap_signs()):
            writer.writerow([step, *map(repr, b), *map(repr, q), s])
        return buf.getvalue()


def _per_step(runs: list[list[dict]]) -> dict[int, list[float]]:
    out: dict[int, list[float]] = {}
    for rows in runs:
        for r in rows:
            v = float(r["delta_q"])
            if not math.isfinite(v):
                raise AnalysisError(f"non-finite delta_q at step {r['step']}")
            out.setdefault(int(r["step"]), []).append(v)
    return out


def compare_delta_q(baseline_dirs, qsim_dirs) -> DeltaQComparison:
    """Per-step medians/IQRs of delta_q for two sets of runs and the medians
    over the final quarter of training (steps after 75% of the last step)."""
    baseline_dirs, qsim_dirs = list(baseline_dirs), list(qsim_dirs)
    if not baseline_dirs or not qsim_dirs:
        raise AnalysisError("both sides need at least one run directory")
    loaded_b = [load_run(d) for d in baseline_dirs]
    loaded_q = [load_run(d) for d in qsim_dirs]
    reference = _comparable(loaded_b[0][0]["config"])
    for d, (manifest, _) in zip(baseline_dirs + qsim_dirs, loaded_b + loaded_q):
        cfg = _comparable(manifest["config"])
        if cfg != reference:
            diff = sorted(k for k in set(cfg) | set(reference) if cfg.get(k) != reference.get(k))
            raise AnalysisError(f"run {d} does not match the reference config (differs in {', '.join(diff)})")
    b_steps = _per_step([rows for _, rows in loaded_b])
    q_steps = _per_step([rows for _, rows in loaded_q])
    steps = sorted(set(b_steps) & set(q_steps))
    if not steps:
        raise AnalysisError("the runs share no evaluation steps")
    cutoff = 0.75 * steps[-1]
    final = [s for s in steps if s > cutoff] or steps[-1:]
    return DeltaQComparison(
        steps=steps,
        baseline=[_quantiles(b_steps[s]) for s in steps],
        qsim=[_quantiles(q_steps[s]) for s in steps],
        final_baseline_median=float(np.median([v for s in final for v in b_steps[s]])),
        final_qsim_median=float(np.median([v for s in final for v in q_steps[s]])),
    )


# ---------------------------------------------------------------------------
# property suites run by ``verify``


@dataclass
class SuiteReport:
    name: str
    draws: int
    violations: int
    worst: float
    counterexamples: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"draws": self.draws, "violations": self.violations, "worst": self.worst,
                "counterexamples": self.counterexamples}


def _small_model(rng: np.random.Generator, mixer: str):
    from .vd_core import VDModel

    n, a, o, s = int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
    model = VDModel.create(n, o, a, s, rng, mixer, agent_hidden=(int(rng.integers(2, 6)),), embed_dim=4, hypernet_hidden=5)
    return model, n, a, o, s


def gradient_check_suite(draws: int = 100, seed: int = 0, h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-5) -> SuiteReport:
    """Reverse-mode gradients of a TD loss on small random QMIX models versus
    central differences.

    The relative error is ``|g - fd| / max(|g|, |fd|, floor)``; the floor
    keeps entries whose true gradient is essentially zero from turning
    round-off into a spurious failure.
    """
    from .batch import TransitionBatch
    from .tensor_nn import backward, no_grad, zero_grads
    from .vd_core import td_loss

    rng = np.random.default_rng(seed)
    violations, worst, examples = 0, 0.0, []
    for draw in range(draws):
        model, n, a, o, s = _small_model(rng, "QMIX")
        m = int(rng.integers(1, 5))
        avail = rng.random((m, n, a)) < 0.8
        avail[..., 0] = True
        actions = np.argmax(np.where(avail, rng.random((m, n, a)), -1.0), axis=-1)
        batch = TransitionBatch(
            state=rng.normal(size=(m, s)), obs=rng.normal(size=(m, n, o)), avail=avail, actions=actions,
            reward=np.zeros(m), next_state=np.zeros((m, s)), next_obs=np.zeros((m, n, o)),
            next_avail=np.ones((m, n, a), dtype=bool), terminal=np.ones(m, dtype=bool),
        )
        targets = rng.normal(size=m)
        params = model.params()
        zero_grads(params)
        loss, _ = td_loss(model, batch, targets)
        backward(loss)
        draw_worst = 0.0
        for name, p in params.items():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            for j in range(flat.size):
                orig = flat[j]
                with no_grad():
                    flat[j] = orig + h
                    up = float(td_loss(model, batch, targets)[0].data)
                    flat[j] = orig - h
                    down = float(td_loss(model, batch, targets)[0].data)
                flat[j] = orig
                fd = (up - down) / (2 * h)
                g = float(analytic.reshape(-1)[j])
                rel = abs(g - fd) / max(abs(g), abs(fd), floor)
                if rel > draw_worst:
                    draw_worst = rel
                    if rel >= tol and len(examples) < 5:
                        examples.append({"draw": draw, "param": name, "index": j, "analytic": g, "numeric": fd})
        zero_grads(params)
        worst = max(worst, draw_worst)
        violations += draw_worst >= tol
    return SuiteReport("gradient_check", draws, int(violations), worst, examples)


def monotonicity_suite(draws: int = 1000, seed: int = 0) -> SuiteReport:
    """``Q_tot`` must not decrease when one agent's utility increases."""
    from .vd_core import Mixer

    rng = np.random.default_rng(seed)
    violations, worst, examples = 0, -math.inf, []
    for draw in range(draws):
        n, s = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        mixer = Mixer("QMIX", n, s, rng, embed_dim=int(rng.integers(2, 9)), hypernet_hidden=int(rng.integers(2, 9)))
        state = rng.normal(size=(1, s)) * rng.uniform(0.1, 5)
        q = rng.normal(size=(1, n)) * rng.uniform(0.1, 5)
        i = int(rng.integers(n))
        bumped = q.copy()
        bumped[0, i] += rng.exponential(1.0) + 1e-9
        from .tensor_nn import no_grad

        with no_grad():
            before = float(mixer(q, state).data[0])
            after = float(mixer(bumped, state).data[0])
        drop = before - after
        worst = max(worst, drop)
        if drop > 0:
            violations += 1
            if len(examples) < 5:
                examples.append({"draw": draw, "q": q.tolist(), "agent": i, "before": before, "after": after})
    return SuiteReport("qmix_monotonicity", draws, violations, worst, examples)


def igm_suite(draws: int = 500, seed: int = 0, max_joint: int = 10**4) -> SuiteReport:
    """Per-agent argmax against brute-force joint argmax of an additive
    mixture, with random availability masks."""
    from itertools import product

    from .vd_core import igm_argmax

    rng = np.random.default_rng(seed)
    violations, examples = 0, []
    for draw in range(draws):
        while True:
            n, a = int(rng.integers(1, 6)), int(rng.integers(1, 11))
            if a**n <= max_joint:
                break
        util = rng.normal(size=(n, a))
        avail = rng.random((n, a)) < 0.7
        avail[np.arange(n), rng.integers(a, size=n)] = True
        best, best_u = -math.inf, None
        for u in product(*[np.flatnonzero(avail[i]) for i in range(n)]):
            v = sum(util[i, u[i]] for i in range(n))
            if v > best:
                best, best_u = v, u
        got = igm_argmax(util, avail)
        if tuple(int(x) for x in got) != tuple(int(x) for x in best_u):
            violations += 1
            if len(examples) < 5:
                examples.append({"draw": draw, "igm": got.tolist(), "brute_force": [int(x) for x in best_u]})
    return SuiteReport("igm_vdn", draws, violations, 0.0, examples)
