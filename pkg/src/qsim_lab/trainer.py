"""Training loop: epsilon-greedy collection, episode replay, interleaved
autoencoder and TD updates, target synchronisation and greedy evaluation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor_nn
from .batch import Episode, TransitionBatch
from .config import ExperimentConfig
from .envs import make_env
from .qsim_target import ActionEncoder, ae_loss, kappa_schedule, qsim_target
from .tensor_nn import OptimizerState, backward, no_grad, optimizer_step, zero_grads
from .vd_core import NetworkPair, VDModel, greedy_td_target, igm_argmax, td_loss, update_target

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "step", "variant", "seed", "eval_return", "td_loss", "ae_loss",
    "mean_target", "mean_qtot", "delta_q", "epsilon", "kappa",
)
STREAMS = ("init", "env", "explore", "sample", "eval")


def spawn_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent named generators derived from one master seed."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.05
    anneal_steps: int = 50_000


def epsilon(schedule: EpsilonSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if step >= schedule.anneal_steps:
        return schedule.end
    return schedule.start + (schedule.end - schedule.start) * (step / schedule.anneal_steps)


class ReplayBuffer:
    """FIFO ring of whole episodes; sampling is uniform without replacement.

    Episodes are padded into preallocated ``(capacity, max_len, ...)`` arrays
    so a sample is a handful of fancy-index operations.
    """

    def __init__(self, capacity: int, rng: np.random.Generator, max_len: int | None = None):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.rng = rng
        self.max_len = max_len
        self._store: dict[str, np.ndarray] | None = None
        self._lengths = np.zeros(capacity, dtype=np.int64)
        self._next = 0
        self._size = 0
        self.added = 0

    def __len__(self) -> int:
        return self._size

    def _allocate(self, episode: Episode) -> None:
        t = self.max_len or len(episode)
        self.max_len = t
        self._store = {
            f.name: np.zeros((self.capacity, t) + getattr(episode, f.name).shape[1:], dtype=getattr(episode, f.name).dtype)
            for f in fields(TransitionBatch)
        }

    def add(self, episode: Episode) -> None:
        if self._store is None:
            self._allocate(episode)
        n = len(episode)
        if n > self.max_len:
            raise ValueError(f"episode length {n} exceeds buffer max_len {self.max_len}")
        slot = self._next
        for name, arr in self._store.items():
            arr[slot, :n] = getattr(episode, name)
        self._lengths[slot] = n
        self._next = (slot + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)
        self.added += 1

    def _slot_order(self) -> np.ndarray:
        """Slots from oldest to newest."""
        start = self._next if self._size == self.capacity else 0
        return (start + np.arange(self._size)) % self.capacity

    def episode(self, k: int) -> Episode:
        """The k-th stored episode, oldest first."""
        slot = self._slot_order()[k]
        n = self._lengths[slot]
        return TransitionBatch(**{name: arr[slot, :n].copy() for name, arr in self._store.items()})

    def sample(self, k: int) -> TransitionBatch:
        if k > self._size:
            raise ValueError(f"buffer holds {self._size} episodes, cannot sample {k}")
        idx = self._slot_order()[self.rng.choice(self._size, size=k, replace=False)]
        lengths = self._lengths[idx]
        valid = np.arange(self.max_len)[None, :] < lengths[:, None]
        full = bool(valid.all())
        out = {}
        for name, arr in self._store.items():
            sel = arr[idx]
            out[name] = sel.reshape((-1,) + sel.shape[2:]) if full else sel[valid]
        return TransitionBatch(**out)


class RunningMeanStd:
    """Running reward mean/variance (parallel Welford merge per batch)."""

    def __init__(self, eps: float = 1e-4):
        self.mean = 0.0
        self.var = 1.0
        self.count = eps

    def update(self, x: np.ndarray) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.size == 0:
            return
        b_mean, b_var, b_n = float(x.mean()), float(x.var()), x.size
        delta = b_mean - self.mean
        total = self.count + b_n
        self.mean += delta * b_n / total
        m2 = self.var * self.count + b_var * b_n + delta * delta * self.count * b_n / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / math.sqrt(max(self.var, 1e-12))


@dataclass
class TrainState:
    config: ExperimentConfig
    seed: int
    env: object
    pair: NetworkPair
    encoder: ActionEncoder | None
    buffer: ReplayBuffer
    opt_theta: OptimizerState
    opt_phi: OptimizerState | None
    rngs: dict[str, np.random.Generator]
    reward_stats: RunningMeanStd | None
    t_env: int = 0
    episodes: int = 0
    train_steps: int = 0
    history: list[dict] = field(default_factory=list)

    @property
    def eps_schedule(self) -> EpsilonSchedule:
        e = self.config.epsilon
        return EpsilonSchedule(e.start, e.end, e.anneal_steps)

    def kappa(self) -> float:
        if self.config.variant == "QSIM-Mean":
            return 0.0
        return kappa_schedule(self.t_env, self.config.kappa)


def build_train_state(config: ExperimentConfig, seed: int) -> TrainState:
    rngs = spawn_streams(seed)
    env_cfg = config.env
    if env_cfg.name == "gridworld":
        env = make_env("gridworld", width=env_cfg.width, height=env_cfg.height, n_agents=env_cfg.n_agents, horizon=env_cfg.horizon)
    else:
        env = make_env("climbing")
    net = config.network
    main = VDModel.create(env.n_agents, env.obs_dim, env.n_actions, env.state_dim, rngs["init"], config.mixer,
                          net.agent_hidden, net.mixer_embed, net.hypernet_hidden)
    encoder = opt_phi = None
    if config.variant != "GreedyBaseline":
        encoder = ActionEncoder(env.n_agents, env.obs_dim, env.state_dim, env.n_actions, rngs["init"],
                                net.ae_hidden, net.embed_dim, config.use_state)
        opt_phi = OptimizerState(config.ae_lr, config.optimizer, grad_clip=config.grad_clip)
    return TrainState(
        config=config,
        seed=seed,
        env=env,
        pair=NetworkPair.from_main(main),
        encoder=encoder,
        buffer=ReplayBuffer(config.buffer_size, rngs["sample"], env.horizon),
        opt_theta=OptimizerState(config.lr, config.optimizer, grad_clip=config.grad_clip),
        opt_phi=opt_phi,
        rngs=rngs,
        reward_stats=RunningMeanStd() if config.reward_standardization else None,
    )


def _episode_from_steps(rows: list[dict]) -> Episode:
    return TransitionBatch(**{k: np.stack([r[k] for r in rows]) for k in rows[0]})


def collect_episode(model: VDModel, env, eps: float, rng: np.random.Generator, env_seed=None) -> Episode:
    """Roll out one episode; each agent flips its own exploration coin."""
    state, obs, avail = env.reset(env_seed)
    rows = []
    terminal = False
    while not terminal:
        with no_grad():
            util = model.utilities(obs[None], avail[None]).data[0]
        actions = igm_argmax(util, avail)
        for i in range(len(actions)):
            if eps > 0 and rng.random() < eps:
                actions[i] = rng.choice(np.flatnonzero(avail[i]))
        out = env.step(actions)
        terminal = out.terminal
        rows.append(dict(state=state, obs=obs, avail=avail, actions=actions.astype(np.int64),
                         reward=np.float64(out.reward), next_state=out.next_state, next_obs=out.next_obs,
                         next_avail=out.avail_actions, terminal=np.bool_(terminal)))
        state, obs, avail = out.next_state, out.next_obs, out.avail_actions
    return _episode_from_steps(rows)


def train_step(state: TrainState, batch_size: int | None = None, algo: str | None = None, kappa: float | None = None) -> dict:
    """One autoencoder update, one target construction, one TD update."""
    cfg = state.config
    batch_size = cfg.batch_size if batch_size is None else batch_size
    algo = cfg.variant if algo is None else algo
    if len(state.buffer) < batch_size:
        raise ValueError(f"buffer holds {len(state.buffer)} episodes, need {batch_size}")
    batch = state.buffer.sample(batch_size)
    if state.reward_stats is not None:
        state.reward_stats.update(batch.reward)
        batch = batch.with_reward(state.reward_stats.normalize(batch.reward))

    ae_value = float("nan")
    if algo != "GreedyBaseline":
        enc_params = state.encoder.params
        loss_ae = ae_loss(state.encoder, batch)
        backward(loss_ae)
        optimizer_step(state.opt_phi, enc_params)
        zero_grads(enc_params)
        ae_value = float(loss_ae.data)

    if algo == "GreedyBaseline":
        targets = greedy_td_target(state.pair, batch, cfg.gamma, cfg.double_q)
    else:
        if kappa is None:
            kappa = 0.0 if algo == "QSIM-Mean" else state.kappa()
        top_n = cfg.top_n if algo == "QSIM-TopN" else None
        targets, _ = qsim_target(state.pair, state.encoder, batch, cfg.gamma, kappa, cfg.threshold, top_n, cfg.double_q)

    theta = state.pair.main.params()
    loss, qtot = td_loss(state.pair.main, batch, targets)
    backward(loss)
    optimizer_step(state.opt_theta, theta)
    zero_grads(theta)

    state.train_steps += 1
    tu = cfg.target_update
    if tu.mode == "soft":
        update_target(state.pair, "soft", tu.tau)
    elif state.train_steps % tu.interval == 0:
        update_target(state.pair, "hard")
    return {
        "td_loss": float(loss.data),
        "ae_loss": ae_value,
        "mean_target": float(np.mean(targets)),
        "mean_qtot": float(np.mean(qtot)),
    }


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards))
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def evaluate(state: TrainState, n_episodes: int | None = None) -> dict:
    """Greedy episodes (epsilon 0, never stored): mean return and mean delta_q.

    delta_q of an episode is the mean over its steps of predicted ``Q_tot``
    minus the realised discounted return, both on the scale the learner
    trains on (standardised rewards when standardisation is on).
    """
    cfg = state.config
    n_episodes = cfg.eval_episodes if n_episodes is None else n_episodes
    model = state.pair.main
    returns, deltas = [], []
    for _ in range(n_episodes):
        seed = int(state.rngs["eval"].integers(2**31))
        ep = collect_episode(model, state.env, 0.0, state.rngs["eval"], seed)
        with no_grad():
            q = model.q_tot(ep.obs, ep.avail, ep.actions, ep.state).data
        rewards = ep.reward if state.reward_stats is None else state.reward_stats.normalize(ep.reward)
        deltas.append(float(np.mean(q - discounted_returns(rewards, cfg.gamma))))
        returns.append(float(np.sum(ep.reward)))
    return {"eval_return": float(np.mean(returns)), "delta_q": float(np.mean(deltas)), "delta_q_episodes": deltas}


def greedy_joint_action(state: TrainState) -> tuple[int, ...]:
    """Greedy joint action at the environment's reset state."""
    _, obs, avail = state.env.reset(0)
    with no_grad():
        util = state.pair.main.utilities(obs[None], avail[None]).data[0]
    return tuple(int(a) for a in igm_argmax(util, avail))


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def metrics_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
    return buf.getvalue()


@dataclass
class RunResult:
    rows: list[dict]
    state: TrainState
    final_joint_action: tuple[int, ...]
    final_return: float


def run(config: ExperimentConfig, seed: int | None = None, out_dir=None, progress: bool = False) -> RunResult:
    """Algorithm loop for one seed.  Writes artifacts when ``out_dir`` is given."""
    seed = config.seeds[0] if seed is None else seed
    state = build_train_state(config, seed)
    rows: list[dict] = []
    pending: list[dict] = []
    next_eval = 0

    def emit(step):
        ev = evaluate(state)
        agg = {k: (float(np.mean([p[k] for p in pending])) if pending else float("nan"))
               for k in ("td_loss", "ae_loss", "mean_target", "mean_qtot")}
        rows.append({"step": step, "variant": config.variant, "seed": seed, "eval_return": ev["eval_return"],
                     **agg, "delta_q": ev["delta_q"], "epsilon": epsilon(state.eps_schedule, state.t_env),
                     "kappa": state.kappa()})
        pending.clear()
        if progress:
            log.info("seed %d step %d return %.3f delta_q %.3f", seed, step, ev["eval_return"], ev["delta_q"])

    if config.step_max > 0:
        while True:
            while next_eval <= min(state.t_env, config.step_max):
                emit(next_eval)
                next_eval += config.eval_interval
            if state.t_env >= config.step_max:
                break
            eps = epsilon(state.eps_schedule, state.t_env)
            env_seed = int(state.rngs["env"].integers(2**31))
            ep = collect_episode(state.pair.main, state.env, eps, state.rngs["explore"], env_seed)
            state.buffer.add(ep)
            state.t_env += len(ep)
            state.episodes += 1
            if len(state.buffer) >= config.batch_size:
                pending.append(train_step(state))

    final = evaluate(state, 1)["eval_return"] if config.step_max > 0 else float("nan")
    result = RunResult(rows, state, greedy_joint_action(state), final)
    if out_dir is not None:
        write_artifacts(result, Path(out_dir))
    return result


def write_artifacts(result: RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.state.config
    (out_dir / "metrics.csv").write_text(metrics_csv(result.rows))
    manifest = {
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "seed": result.state.seed,
        "variant": cfg.variant,
        "rows": len(result.rows),
        "final_joint_action": list(result.final_joint_action),
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    params = {f"theta.{k}": v for k, v in result.state.pair.main.params().items()}
    params.update({f"target.{k}": v for k, v in result.state.pair.target.params().items()})
    if result.state.encoder is not None:
        params.update({f"phi.{k}": v for k, v in result.state.encoder.params.items()})
    tensor_nn.save(params, out_dir / "checkpoint.bin")
