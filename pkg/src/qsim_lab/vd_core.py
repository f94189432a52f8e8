"""Per-agent utilities, VDN/QMIX mixers and the greedy TD machinery."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .batch import TransitionBatch
from .tensor_nn import (
    Activation,
    MlpSpec,
    ParamSet,
    Tensor,
    add,
    as_tensor,
    clone_params,
    concat,
    elu,
    gather_last,
    init_mlp,
    masked_fill,
    matmul,
    mean,
    mlp_forward,
    no_grad,
    reshape,
    square,
    sub,
    tabs,
    tsum,
)

# Stand-in for -inf on unavailable actions; keeps arithmetic finite.
SENTINEL = -1e9


class MixerKind(str, enum.Enum):
    VDN = "VDN"
    QMIX = "QMIX"


class AgentNet:
    """FC utility network for one agent: observation -> |A_i| utilities."""

    def __init__(self, spec: MlpSpec, params: ParamSet, prefix: str):
        self.spec = spec
        self.params = params
        self.prefix = prefix

    @classmethod
    def create(cls, obs_dim: int, n_actions: int, hidden, rng, prefix: str) -> "AgentNet":
        spec = MlpSpec((obs_dim, *hidden, n_actions), Activation.RELU, Activation.IDENTITY)
        return cls(spec, init_mlp(spec, rng, prefix), prefix)

    @property
    def n_actions(self) -> int:
        return self.spec.out_width

    def forward(self, obs, check: bool = False) -> Tensor:
        return mlp_forward(self.spec, self.params, obs, prefix=self.prefix, check=check)


def agent_q_values(net: AgentNet, obs, avail_mask, check: bool = True) -> Tensor:
    """Utilities with unavailable actions pinned to ``SENTINEL``."""
    avail_mask = np.asarray(avail_mask, dtype=bool)
    if not avail_mask.any(axis=-1).all():
        raise ValueError("every action of an agent is masked")
    return masked_fill(net.forward(obs, check=check), avail_mask, SENTINEL)


def igm_argmax(utilities, avail_masks=None) -> np.ndarray:
    """Per-agent greedy actions over the last axis; ties go to the lowest index.

    ``utilities`` is ``(..., N, A)``; the result is ``(..., N)`` ints.
    """
    q = np.asarray(utilities.data if isinstance(utilities, Tensor) else utilities, dtype=np.float64)
    if avail_masks is not None:
        avail_masks = np.asarray(avail_masks, dtype=bool)
        if not avail_masks.any(axis=-1).all():
            raise ValueError("every action of an agent is masked")
        q = np.where(avail_masks, q, -np.inf)
    return np.argmax(q, axis=-1)


class Mixer:
    """Maps per-agent utilities ``(M, N)`` and states ``(M, S)`` to ``Q_tot`` ``(M,)``.

    QMIX: hidden = ELU(q @ |W1(s)| + b1(s)); Q_tot = hidden @ |W2(s)| + V(s), with
    W1, W2 and V produced by one-hidden-layer hypernetworks on the state.
    """

    def __init__(self, kind, n_agents: int, state_dim: int, rng=None, embed_dim: int = 32, hypernet_hidden: int = 64):
        self.kind = MixerKind(kind)
        self.n_agents = n_agents
        self.state_dim = state_dim
        self.embed_dim = embed_dim
        self.hypernet_hidden = hypernet_hidden
        self.forced: tuple[float, float] | None = None
        self.params: ParamSet = {}
        self.specs: dict[str, MlpSpec] = {}
        if self.kind is MixerKind.QMIX:
            e, h, n, s = embed_dim, hypernet_hidden, n_agents, state_dim
            self.specs = {
                "hyper_w1.": MlpSpec((s, h, n * e)),
                "hyper_b1.": MlpSpec((s, e)),
                "hyper_w2.": MlpSpec((s, h, e)),
                "hyper_v.": MlpSpec((s, e, 1)),
            }
            if rng is None:
                rng = np.random.default_rng(0)
            for name, spec in self.specs.items():
                self.params.update(init_mlp(spec, rng, "mixer." + name))

    def force(self, weight: float = 1.0, bias: float = 0.0) -> None:
        """Test hook: replace every hypernetwork output by constants."""
        self.forced = (weight, bias)

    def _hyper(self, name: str, states: np.ndarray) -> Tensor:
        return mlp_forward(self.specs[name], self.params, states, prefix="mixer." + name, check=False)

    def __call__(self, qs, states) -> Tensor:
        qs = as_tensor(qs)
        if qs.ndim != 2 or qs.shape[1] != self.n_agents:
            raise ValueError(f"expected utilities of shape (M, {self.n_agents}), got {qs.shape}")
        if self.kind is MixerKind.VDN:
            return tsum(qs, axis=1)
        states = np.asarray(states, dtype=np.float64)
        if states.ndim != 2 or states.shape[1] != self.state_dim:
            raise ValueError(f"expected states of shape (M, {self.state_dim}), got {states.shape}")
        m, n, e = qs.shape[0], self.n_agents, self.embed_dim
        if self.forced is not None:
            w, b = self.forced
            w1 = Tensor(np.full((m, n, e), abs(w)))
            b1 = Tensor(np.full((m, 1, e), b))
            w2 = Tensor(np.full((m, e, 1), abs(w)))
            v = Tensor(np.full((m, 1, 1), b))
        else:
            w1 = reshape(tabs(self._hyper("hyper_w1.", states)), (m, n, e))
            b1 = reshape(self._hyper("hyper_b1.", states), (m, 1, e))
            w2 = reshape(tabs(self._hyper("hyper_w2.", states)), (m, e, 1))
            v = reshape(self._hyper("hyper_v.", states), (m, 1, 1))
        hidden = elu(add(matmul(reshape(qs, (m, 1, n)), w1), b1))
        return reshape(add(matmul(hidden, w2), v), (m,))


def mix(mixer: Mixer, per_agent_q, state) -> float:
    q = np.asarray(per_agent_q, dtype=np.float64).reshape(1, -1)
    s = np.asarray(state, dtype=np.float64).reshape(1, -1)
    with no_grad():
        return float(mixer(q, s).data[0])


class VDModel:
    """Agent networks plus mixer; one full parameter set (theta or theta-minus)."""

    def __init__(self, agents: list[AgentNet], mixer: Mixer):
        self.agents = agents
        self.mixer = mixer

    @classmethod
    def create(cls, n_agents, obs_dim, n_actions, state_dim, rng, mixer_kind="QMIX", agent_hidden=(64,), embed_dim=32, hypernet_hidden=64):
        agents = [AgentNet.create(obs_dim, n_actions, agent_hidden, rng, f"agent{i}.") for i in range(n_agents)]
        mixer = Mixer(mixer_kind, n_agents, state_dim, rng, embed_dim, hypernet_hidden)
        return cls(agents, mixer)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def params(self) -> ParamSet:
        out: ParamSet = {}
        for a in self.agents:
            out.update(a.params)
        out.update(self.mixer.params)
        return out

    def load_params(self, params: ParamSet) -> None:
        own = self.params()
        if own.keys() != params.keys():
            raise ValueError("parameter names do not match this model")
        for k, t in params.items():
            if own[k].data.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {k}")
            own[k].data = t.data.copy()

    def clone(self) -> "VDModel":
        agents = [AgentNet(a.spec, clone_params(a.params), a.prefix) for a in self.agents]
        mixer = Mixer(self.mixer.kind, self.mixer.n_agents, self.mixer.state_dim, None, self.mixer.embed_dim, self.mixer.hypernet_hidden)
        mixer.params = clone_params(self.mixer.params)
        mixer.forced = self.mixer.forced
        return VDModel(agents, mixer)

    def utilities(self, obs, avail) -> Tensor:
        """Masked utilities ``(M, N, A)`` for joint observations ``(M, N, O)``."""
        obs = np.asarray(obs, dtype=np.float64)
        avail = np.asarray(avail, dtype=bool)
        per_agent = [agent_q_values(a, obs[:, i], avail[:, i], check=False) for i, a in enumerate(self.agents)]
        m, a = obs.shape[0], per_agent[0].shape[-1]
        return reshape(_stack_agents(per_agent), (m, self.n_agents, a))

    def q_tot(self, obs, avail, actions, states) -> Tensor:
        chosen = gather_last(self.utilities(obs, avail), np.asarray(actions))
        return self.mixer(chosen, states)


def _stack_agents(ts: list[Tensor]) -> Tensor:
    m = ts[0].shape[0]
    return concat([reshape(t, (m, 1, t.shape[-1])) for t in ts], axis=1)


@dataclass
class NetworkPair:
    main: VDModel
    target: VDModel

    @classmethod
    def from_main(cls, main: VDModel) -> "NetworkPair":
        return cls(main, main.clone())


def select_anchor(pair: NetworkPair, next_obs, next_avail, double_q: bool = True) -> np.ndarray:
    """Greedy next joint action: chosen by the main network when ``double_q``."""
    net = pair.main if double_q else pair.target
    with no_grad():
        return igm_argmax(net.utilities(next_obs, next_avail).data, next_avail)


def greedy_td_target(pair: NetworkPair, batch: TransitionBatch, gamma: float, double_q: bool = True) -> np.ndarray:
    """``r + gamma * Q_tar(s', u*)`` per row, ``r`` on terminal rows."""
    u_star = select_anchor(pair, batch.next_obs, batch.next_avail, double_q)
    with no_grad():
        value = pair.target.q_tot(batch.next_obs, batch.next_avail, u_star, batch.next_state).data
    return batch.reward + gamma * np.where(batch.terminal, 0.0, value)


def td_loss(model: VDModel, batch: TransitionBatch, targets) -> tuple[Tensor, np.ndarray]:
    """Mean squared TD error and the predicted ``Q_tot`` values."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    targets = np.asarray(targets, dtype=np.float64)
    qtot = model.q_tot(batch.obs, batch.avail, batch.actions, batch.state)
    return mean(square(sub(qtot, targets))), qtot.data.copy()


def update_target(pair: NetworkPair, mode: str = "soft", tau: float = 0.01) -> None:
    """``hard``: theta- <- theta.  ``soft``: theta- <- tau*theta + (1-tau)*theta-."""
    main, target = pair.main.params(), pair.target.params()
    if mode == "hard":
        for k, p in main.items():
            target[k].data = p.data.copy()
    elif mode == "soft":
        for k, p in main.items():
            target[k].data = tau * p.data + (1.0 - tau) * target[k].data
    else:
        raise ValueError(f"unknown target update mode {mode!r}")
