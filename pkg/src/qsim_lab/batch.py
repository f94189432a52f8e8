from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np


@dataclass
class TransitionBatch:
    """A flat batch of M transitions (rows are independent; agents are FC)."""

    state: np.ndarray  # (M, S)
    obs: np.ndarray  # (M, N, O)
    avail: np.ndarray  # (M, N, A) bool
    actions: np.ndarray  # (M, N) int
    reward: np.ndarray  # (M,)
    next_state: np.ndarray  # (M, S)
    next_obs: np.ndarray  # (M, N, O)
    next_avail: np.ndarray  # (M, N, A) bool
    terminal: np.ndarray  # (M,) bool

    def __len__(self) -> int:
        return len(self.reward)

    @property
    def n_agents(self) -> int:
        return self.obs.shape[1]

    @classmethod
    def concat(cls, parts: list["TransitionBatch"]) -> "TransitionBatch":
        return cls(**{f.name: np.concatenate([getattr(p, f.name) for p in parts]) for f in fields(cls)})

    def with_reward(self, reward: np.ndarray) -> "TransitionBatch":
        kw = {f.name: getattr(self, f.name) for f in fields(self)}
        kw["reward"] = np.asarray(reward, dtype=np.float64)
        return TransitionBatch(**kw)


Episode = TransitionBatch
