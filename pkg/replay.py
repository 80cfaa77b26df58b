"""
Elite trajectory replay: a capacity-bounded priority queue of the highest-return
trajectories, used as the self-imitation "expert" data.
"""

import heapq
import itertools
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

import jsonlog
from autodiff import ContractViolation

logger = jsonlog.setup_logger("replay")


class EmptyReplayError(RuntimeError):
    """Raised when pairs are requested from a replay that holds no trajectory."""


@dataclass
class Trajectory:
    """One episode: per-step state, action, emitted env reward and done flag."""
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: Optional[np.ndarray] = None
    info: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        self.actions = np.atleast_2d(np.asarray(self.actions, dtype=np.float64))
        self.rewards = np.asarray(self.rewards, dtype=np.float64).reshape(-1)
        self.dones = np.asarray(self.dones, dtype=bool).reshape(-1)
        n = len(self.rewards)
        if n < 1:
            raise ContractViolation("trajectory must contain at least one transition")
        if self.states.shape[0] != n or self.actions.shape[0] != n or self.dones.shape[0] != n:
            raise ContractViolation("trajectory fields have inconsistent lengths")
        self.total_return = float(np.sum(self.rewards))

    @property
    def length(self) -> int:
        return len(self.rewards)

    def pairs(self) -> np.ndarray:
        """Concatenated (state, action) rows."""
        return np.concatenate([self.states, self.actions], axis=1)

    def to_dict(self, include_transitions: bool = False) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            'total_return': self.total_return,
            'length': self.length,
        }
        if 'true_return' in self.info:
            out['true_return'] = float(self.info['true_return'])
        if include_transitions:
            out['states'] = self.states.tolist()
            out['actions'] = self.actions.tolist()
            out['rewards'] = self.rewards.tolist()
            out['dones'] = self.dones.tolist()
        return out


class PriorityReplay:
    """
    Return-sorted store of at most ``capacity`` trajectories.

    A full replay admits a trajectory only when its return strictly exceeds
    the current minimum, which is then evicted.
    """

    def __init__(self, capacity: int = 10):
        if capacity < 1:
            raise ContractViolation(f"replay capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        # min-heap of (return, insertion counter, trajectory)
        self._heap: List[Tuple[float, int, Trajectory]] = []
        self._counter = itertools.count()
        self.offers = 0
        self.accepted = 0
        self.evictions = 0

    def __len__(self) -> int:
        return len(self._heap)

    @property
    def full(self) -> bool:
        return len(self._heap) >= self.capacity

    @property
    def admission_threshold(self) -> float:
        return self._heap[0][0] if self.full else float("-inf")

    @property
    def entries(self) -> List[Trajectory]:
        """Stored trajectories, highest return first."""
        return [item[2] for item in sorted(self._heap, key=lambda item: (-item[0], item[1]))]

    @property
    def returns(self) -> List[float]:
        return [t.total_return for t in self.entries]

    @property
    def transition_count(self) -> int:
        return sum(item[2].length for item in self._heap)

    def offer(self, trajectory: Trajectory) -> bool:
        self.offers += 1
        item = (trajectory.total_return, next(self._counter), trajectory)
        if not self.full:
            heapq.heappush(self._heap, item)
            self.accepted += 1
            return True
        if trajectory.total_return > self._heap[0][0]:
            heapq.heapreplace(self._heap, item)
            self.accepted += 1
            self.evictions += 1
            return True
        return False

    def sample_pairs(self, batch_size: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
        """Uniform draw (with replacement) over every stored transition."""
        if not self._heap:
            raise EmptyReplayError("replay memory is empty")
        trajectories = self.entries
        states = np.concatenate([t.states for t in trajectories])
        actions = np.concatenate([t.actions for t in trajectories])
        if batch_size <= 0:
            return states[:0], actions[:0]
        idx = rng.integers(0, states.shape[0], size=batch_size)
        return states[idx], actions[idx]

    def dump_jsonl(self, path: str, include_transitions: bool = False) -> None:
        with open(path, 'w', encoding='utf-8') as fh:
            for trajectory in self.entries:
                fh.write(json.dumps(trajectory.to_dict(include_transitions)) + "\n")
        logger.info(f"Replay dumped: {len(self)} trajectories to {path}")
