"""Similarity-weighted TD targets over the near-greedy joint action space.

An autoencoder learns action embeddings by predicting next observations.
At the next state, every single-agent deviation ``(a_i, u*_-i)`` from the
greedy joint action ``u*`` becomes a candidate; its weight is a softmax
(inverse temperature ``kappa``) over the cosine similarity between the
deviating action's embedding and the greedy action's embedding.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .batch import TransitionBatch
from .tensor_nn import (
    Activation,
    MlpSpec,
    ParamSet,
    Tensor,
    concat,
    init_mlp,
    mlp_forward,
    no_grad,
    reshape,
    square,
    sub,
    tsum,
)
from .vd_core import NetworkPair, select_anchor

# ---------------------------------------------------------------------------
# action representation autoencoder


class ActionEncoder:
    """Encoder ``E(o_i, s, a_i) -> f_i`` and predictor ``P(f_1..f_N) -> o'``.

    The context ``[o_i, s]`` (or just ``o_i`` without state) and the one-hot
    action go through separate ReLU layers of width ``hidden``; the two
    results are concatenated and fused by a two-layer MLP into an embedding
    of width ``embed_dim``.  The predictor is a two-layer MLP from the
    concatenated embeddings to the concatenated next observations.
    """

    def __init__(self, n_agents, obs_dim, state_dim, n_actions, rng, hidden=128, embed_dim=16, use_state=True):
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.state_dim = state_dim
        self.n_actions = n_actions
        self.embed_dim = embed_dim
        self.use_state = use_state
        ctx = obs_dim + (state_dim if use_state else 0)
        relu = Activation.RELU
        self.specs = {
            "enc.ctx.": MlpSpec((ctx, hidden), relu, relu),
            "enc.act.": MlpSpec((n_actions, hidden), relu, relu),
            "enc.fuse.": MlpSpec((2 * hidden, hidden, embed_dim), relu, Activation.IDENTITY),
            "pred.": MlpSpec((n_agents * embed_dim, hidden, n_agents * obs_dim), relu, Activation.IDENTITY),
        }
        self.params: ParamSet = {}
        for name, spec in self.specs.items():
            self.params.update(init_mlp(spec, rng, name))

    def _mlp(self, name, x) -> Tensor:
        return mlp_forward(self.specs[name], self.params, x, prefix=name, check=False)

    def context(self, obs, state) -> np.ndarray:
        obs = np.asarray(obs, dtype=np.float64)
        if obs.shape[-1] != self.obs_dim:
            raise ValueError(f"observation width {obs.shape[-1]} != {self.obs_dim}")
        if not self.use_state:
            return obs
        state = np.asarray(state, dtype=np.float64)
        if state.shape[-1] != self.state_dim:
            raise ValueError(f"state width {state.shape[-1]} != {self.state_dim}")
        return np.concatenate([obs, state], axis=-1)

    def embed(self, obs, state, actions) -> Tensor:
        """Embeddings ``(M, d)`` for rows of observations, states and action indices."""
        actions = np.asarray(actions, dtype=np.int64)
        if (actions < 0).any() or (actions >= self.n_actions).any():
            raise ValueError("action index out of range")
        onehot = np.eye(self.n_actions)[actions]
        h_ctx = self._mlp("enc.ctx.", self.context(obs, state))
        h_act = self._mlp("enc.act.", onehot)
        return self._mlp("enc.fuse.", concat([h_ctx, h_act], axis=-1))

    def predict(self, joint_embedding) -> Tensor:
        return self._mlp("pred.", joint_embedding)


def encode(enc: ActionEncoder, obs, state, action_index: int) -> np.ndarray:
    """Embedding of one (observation, state, action) triple."""
    with no_grad():
        f = enc.embed(np.asarray(obs)[None], np.asarray(state)[None], [action_index])
    return f.data[0].copy()


def ae_loss(enc: ActionEncoder, batch: TransitionBatch) -> Tensor:
    """Batch mean of the summed squared next-observation prediction error."""
    m, n = len(batch), batch.n_agents
    if m == 0:
        raise ValueError("empty batch")
    obs = batch.obs.reshape(m * n, -1)
    state = np.repeat(batch.state, n, axis=0)
    f = enc.embed(obs, state, batch.actions.reshape(-1))
    pred = enc.predict(reshape(f, (m, n * enc.embed_dim)))
    target = batch.next_obs.reshape(m, -1)
    return tsum(square(sub(pred, target))) * (1.0 / m)


# ---------------------------------------------------------------------------
# near-greedy joint action space


@dataclass
class NearGreedySet:
    anchor: tuple[int, ...]
    entries: list[tuple[int, int, tuple[int, ...]]]

    def __len__(self) -> int:
        return len(self.entries)


def build_near_greedy(u_star, avail_masks) -> NearGreedySet:
    """All single-agent deviations from ``u_star``, agent-major then action-minor.

    The anchor itself appears once per agent (as that agent's greedy entry).
    """
    anchor = tuple(int(a) for a in u_star)
    entries = []
    for i, mask in enumerate(avail_masks):
        mask = np.asarray(mask, dtype=bool)
        if not mask[anchor[i]]:
            raise ValueError(f"greedy action {anchor[i]} of agent {i} is unavailable")
        for j in np.flatnonzero(mask):
            c = list(anchor)
            c[i] = int(j)
            entries.append((i, int(j), tuple(c)))
    return NearGreedySet(anchor, entries)


def candidate_actions(u_star: np.ndarray, n_actions: int) -> np.ndarray:
    """Vectorised near-greedy space: ``(..., N) -> (..., N, A, N)`` joint actions."""
    u_star = np.asarray(u_star, dtype=np.int64)
    n = u_star.shape[-1]
    cand = np.broadcast_to(u_star[..., None, None, :], u_star.shape[:-1] + (n, n_actions, n)).copy()
    idx = np.arange(n)
    cand[..., idx, :, idx] = np.arange(n_actions)
    return cand


# ---------------------------------------------------------------------------
# similarity weights


@dataclass
class SimilarityWeights:
    S: np.ndarray  # (..., N, A) cosine similarity to the greedy action
    w: np.ndarray  # (..., N, A) per-agent softmax weights
    kappa: float
    threshold: float
    top_n: int | None

    @property
    def global_weights(self) -> np.ndarray:
        """Weights over the whole multiset; they sum to one."""
        return self.w / self.w.shape[-2]


def cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine similarity along the last axis; 0 where either vector is zero."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    denom = na * nb
    safe = denom > 0
    dot = np.sum(a * b, axis=-1)
    return np.clip(np.where(safe, dot / np.where(safe, denom, 1.0), 0.0), -1.0, 1.0)


def survival_mask(S, valid, anchor, threshold=0.0, top_n=None) -> np.ndarray:
    """Entries that enter the softmax.

    Drops unavailable actions and similarities below ``threshold``; with
    ``top_n`` keeps the ``top_n`` most similar survivors (anchor first on
    ties, then lowest index).  The anchor entry always survives.
    """
    S = np.asarray(S, dtype=np.float64)
    anchor_hot = np.zeros(S.shape, dtype=bool)
    np.put_along_axis(anchor_hot, np.asarray(anchor, dtype=np.int64)[..., None], True, axis=-1)
    keep = np.asarray(valid, dtype=bool) & (S >= threshold)
    keep |= anchor_hot
    if top_n is not None:
        a = S.shape[-1]
        # lexsort keys: index (last resort), non-anchor, -S (primary)
        key = np.where(keep, -S, np.inf)
        order = np.lexsort((np.broadcast_to(np.arange(a), S.shape), ~anchor_hot, key), axis=-1)
        rank = np.empty_like(order)
        np.put_along_axis(rank, order, np.broadcast_to(np.arange(a), S.shape), axis=-1)
        keep &= rank < top_n
    return keep


def softmax_weights(S, keep, kappa: float) -> np.ndarray:
    """Per-agent ``softmax(kappa * S)`` restricted to ``keep``; zeros elsewhere."""
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    logits = np.where(keep, kappa * np.asarray(S, dtype=np.float64), -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.where(keep, np.exp(logits), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def similarity_weights(enc: ActionEncoder, next_obs, next_state, u_star, avail, kappa, threshold=0.0, top_n=None) -> SimilarityWeights:
    """Weights for a batch: ``next_obs (M,N,O)``, ``next_state (M,S)``, ``u_star (M,N)``."""
    next_obs = np.asarray(next_obs, dtype=np.float64)
    u_star = np.asarray(u_star, dtype=np.int64)
    avail = np.asarray(avail, dtype=bool)
    m, n, _ = next_obs.shape
    a = enc.n_actions
    obs_rows = np.repeat(next_obs.reshape(m * n, -1), a, axis=0)
    state_rows = np.repeat(np.asarray(next_state, dtype=np.float64), n * a, axis=0)
    act_rows = np.tile(np.arange(a), m * n)
    with no_grad():
        f = enc.embed(obs_rows, state_rows, act_rows).data.reshape(m, n, a, -1)
    f_star = np.take_along_axis(f, u_star[:, :, None, None], axis=2)
    S = cosine_rows(f, f_star)
    np.put_along_axis(S, u_star[..., None], 1.0, axis=-1)
    keep = survival_mask(S, avail, u_star, threshold, top_n)
    return SimilarityWeights(S, softmax_weights(S, keep, kappa), float(kappa), float(threshold), top_n)


# ---------------------------------------------------------------------------
# weighted target


def candidate_values(model, next_obs, next_avail, next_state, u_star) -> np.ndarray:
    """``Q_tot`` of ``model`` at every near-greedy candidate: ``(M, N, A)``."""
    with no_grad():
        util = model.utilities(next_obs, next_avail).data  # (M, N, A)
        m, n, a = util.shape
        base = np.take_along_axis(util, u_star[..., None], axis=-1)[..., 0]  # (M, N)
        cq = np.broadcast_to(base[:, None, None, :], (m, n, a, n)).copy()
        idx = np.arange(n)
        cq[:, idx, :, idx] = np.transpose(util, (1, 0, 2))
        states = np.repeat(np.asarray(next_state, dtype=np.float64), n * a, axis=0)
        q = model.mixer(cq.reshape(m * n * a, n), states).data
    return q.reshape(m, n, a)


def weighted_value(W, candidate_q) -> np.ndarray:
    """``sum_ij W_ij q_ij`` over the trailing ``(N, A)`` axes; zero-weight
    entries (pinned ``SENTINEL`` values included) contribute nothing."""
    W = np.asarray(W, dtype=np.float64)
    return np.sum(np.where(W > 0, W * candidate_q, 0.0), axis=(-2, -1))


def qsim_target(pair: NetworkPair, enc: ActionEncoder, batch: TransitionBatch, gamma: float, kappa: float,
                threshold: float = 0.0, top_n: int | None = None, double_q: bool = True, weight_fn=None):
    """``Y = r + gamma * sum_ij (w_ij / N) Q_tar(c_ij)``; ``Y = r`` on terminal rows.

    Returns ``(targets, info)`` where ``info`` carries the anchor, the
    similarity weights and the greedy value at the anchor for live rows.
    ``weight_fn`` replaces the global weight computation (test hook).
    """
    y = np.asarray(batch.reward, dtype=np.float64).copy()
    live = np.flatnonzero(~np.asarray(batch.terminal, dtype=bool))
    info = {"rows": live}
    if live.size == 0:
        return y, info
    nobs, navail, nstate = batch.next_obs[live], batch.next_avail[live], batch.next_state[live]
    u_star = select_anchor(pair, nobs, navail, double_q)
    sim = similarity_weights(enc, nobs, nstate, u_star, navail, kappa, threshold, top_n)
    W = sim.global_weights if weight_fn is None else weight_fn(sim)
    q = candidate_values(pair.target, nobs, navail, nstate, u_star)
    value = weighted_value(W, q)
    y[live] += gamma * value
    info.update(anchor=u_star, weights=sim, candidate_q=q, value=value)
    return y, info


# ---------------------------------------------------------------------------
# inverse temperature schedule


@dataclass(frozen=True)
class KappaSchedule:
    mode: str = "constant"
    value: float = 3.0
    start: float = 1.0
    end: float = 10.0
    horizon: int = 50_000


def kappa_schedule(step: int, schedule: KappaSchedule) -> float:
    if step < 0:
        raise ValueError("step must be non-negative")
    if schedule.mode == "constant":
        return float(schedule.value)
    if schedule.mode == "linear":
        if step >= schedule.horizon:
            return float(schedule.end)
        return float(schedule.start + (schedule.end - schedule.start) * (step / schedule.horizon))
    raise ValueError(f"unknown kappa schedule {schedule.mode!r}")


def export_embeddings(enc: ActionEncoder, obs, state, path) -> Path:
    """Write ``agent, action, e0..e{d-1}`` rows for every agent and action."""
    obs = np.asarray(obs, dtype=np.float64)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["agent", "action"] + [f"e{k}" for k in range(enc.embed_dim)])
        for i in range(obs.shape[0]):
            for j in range(enc.n_actions):
                writer.writerow([i, j] + [repr(float(v)) for v in encode(enc, obs[i], state, j)])
    return path
