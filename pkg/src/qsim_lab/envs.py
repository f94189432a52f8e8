"""Desk-scale cooperative environments.

Both environments expose the same surface: ``reset(seed)`` returns
``(state, obs, avail)`` and ``step(actions)`` returns an :class:`EnvStep`.
Observations are ``(n_agents, obs_dim)`` arrays, availability masks are
``(n_agents, n_actions)`` boolean arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EnvError(RuntimeError):
    pass


@dataclass
class EnvStep:
    next_obs: np.ndarray
    next_state: np.ndarray
    reward: float
    terminal: bool
    avail_actions: np.ndarray


CLIMBING_PAYOFF = np.array(
    [
        [0.0, 6.0, 5.0],
        [-30.0, 7.0, 0.0],
        [11.0, -30.0, 0.0],
    ]
)


class ClimbingGame:
    """Two agents, three actions (A, B, C), one simultaneous move.

    Observation layout per agent (width 5)::

        [episode_start, onehot(own action) x3, terminal]

    The reset observation is ``[1, 0, 0, 0, 0]``; after the move agent i sees
    ``[0, onehot(a_i), 1]``.  The state is both observations concatenated.
    """

    n_agents = 2
    n_actions = 3
    obs_dim = 5
    state_dim = 10
    horizon = 1

    def __init__(self, payoff: np.ndarray | None = None):
        self.payoff = CLIMBING_PAYOFF.copy() if payoff is None else np.asarray(payoff, dtype=np.float64)
        self.step_count = 0
        self._done = True

    def reset(self, seed: int | None = None):
        self.step_count = 0
        self._done = False
        obs = np.zeros((2, 5))
        obs[:, 0] = 1.0
        return obs.reshape(-1).copy(), obs, np.ones((2, 3), dtype=bool)

    def avail_actions(self) -> np.ndarray:
        return np.ones((2, 3), dtype=bool)

    def step(self, actions) -> EnvStep:
        if self._done:
            raise EnvError("step called on a finished episode; call reset first")
        a = [int(x) for x in actions]
        if len(a) != 2 or not all(0 <= x < 3 for x in a):
            raise EnvError(f"invalid joint action {actions!r}")
        obs = np.zeros((2, 5))
        for i, ai in enumerate(a):
            obs[i, 1 + ai] = 1.0
            obs[i, 4] = 1.0
        self.step_count += 1
        self._done = True
        return EnvStep(obs, obs.reshape(-1).copy(), float(self.payoff[a[0], a[1]]), True, np.ones((2, 3), dtype=bool))


# up, down, left, right, stay as (dx, dy); y grows downward
MOVES = np.array([[0, -1], [0, 1], [-1, 0], [1, 0], [0, 0]])


class CoopGridworld:
    """N agents on a ``width x height`` grid with N fixed goal cells.

    Each step the shared reward is the number of distinct goal cells covered
    by at least one agent, minus 0.01.  Moves that would leave the grid are
    unavailable; ``stay`` always is.  Episodes end after ``horizon`` steps.

    State layout (width 4N): agent coordinates ``x/(width-1), y/(height-1)``
    for agents 0..N-1, followed by goal coordinates in the same form.
    Observation of agent i (width 5N): the state followed by ``onehot(i)``.
    Agents start on distinct uniformly drawn cells; goals default to the
    first N of the corners (top-left, bottom-right, top-right, bottom-left).
    """

    n_actions = 5
    step_penalty = 0.01

    def __init__(self, width: int = 4, height: int = 4, n_agents: int = 2, horizon: int = 25, goals=None):
        if width < 2 or height < 2:
            raise ValueError("grid must be at least 2x2")
        if n_agents < 2:
            raise ValueError("gridworld needs at least 2 agents")
        if n_agents > width * height:
            raise ValueError("more agents than cells")
        if horizon < 1:
            raise ValueError("horizon must be positive")
        self.width, self.height, self.n_agents, self.horizon = width, height, n_agents, horizon
        if goals is None:
            corners = [(0, 0), (width - 1, height - 1), (width - 1, 0), (0, height - 1)]
            if n_agents > 4:
                raise ValueError("pass explicit goals for more than 4 agents")
            goals = corners[:n_agents]
        self.goal_positions = np.array(goals, dtype=np.int64).reshape(-1, 2)
        if len({tuple(g) for g in self.goal_positions}) != len(self.goal_positions):
            raise ValueError("goal cells must be distinct")
        self._check_bounds(self.goal_positions)
        self.agent_positions = np.zeros((n_agents, 2), dtype=np.int64)
        self.t = 0
        self._done = True

    @property
    def state_dim(self) -> int:
        return 4 * self.n_agents

    @property
    def obs_dim(self) -> int:
        return 5 * self.n_agents

    def _check_bounds(self, pos):
        if (pos < 0).any() or (pos[:, 0] >= self.width).any() or (pos[:, 1] >= self.height).any():
            raise ValueError("positions out of bounds")

    def _norm(self, pos: np.ndarray) -> np.ndarray:
        scale = np.array([self.width - 1, self.height - 1], dtype=np.float64)
        return (pos / scale).reshape(-1)

    def state(self) -> np.ndarray:
        return np.concatenate([self._norm(self.agent_positions), self._norm(self.goal_positions)])

    def observations(self) -> np.ndarray:
        s = self.state()
        eye = np.eye(self.n_agents)
        return np.stack([np.concatenate([s, eye[i]]) for i in range(self.n_agents)])

    def avail_actions(self) -> np.ndarray:
        nxt = self.agent_positions[:, None, :] + MOVES[None, :, :]
        ok = (nxt[..., 0] >= 0) & (nxt[..., 0] < self.width) & (nxt[..., 1] >= 0) & (nxt[..., 1] < self.height)
        return ok

    def reset(self, seed: int | None = None):
        rng = np.random.default_rng(seed)
        cells = rng.choice(self.width * self.height, size=self.n_agents, replace=False)
        self.agent_positions = np.stack([cells % self.width, cells // self.width], axis=1).astype(np.int64)
        self.t = 0
        self._done = False
        return self.state(), self.observations(), self.avail_actions()

    def covered_goals(self) -> int:
        occupied = {tuple(p) for p in self.agent_positions}
        return sum(tuple(g) in occupied for g in self.goal_positions)

    def step(self, actions) -> EnvStep:
        if self._done:
            raise EnvError("step called on a finished episode; call reset first")
        a = np.asarray(actions, dtype=np.int64)
        if a.shape != (self.n_agents,) or (a < 0).any() or (a >= self.n_actions).any():
            raise EnvError(f"invalid joint action {actions!r}")
        avail = self.avail_actions()
        if not avail[np.arange(self.n_agents), a].all():
            raise EnvError(f"unavailable action in joint action {a.tolist()}")
        self.agent_positions = self.agent_positions + MOVES[a]
        self.t += 1
        reward = float(self.covered_goals()) - self.step_penalty
        terminal = self.t >= self.horizon
        self._done = terminal
        return EnvStep(self.observations(), self.state(), reward, terminal, self.avail_actions())


def make_env(name: str, **params):
    if name == "climbing":
        return ClimbingGame()
    if name == "gridworld":
        return CoopGridworld(**params)
    raise ValueError(f"unknown environment {name!r}")
