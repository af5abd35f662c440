"""Goal-conditioned replay: proportional prioritized sampling, hindsight
relabeling, and the bad-sample filter for relabeled successes."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .envs import sparse_reward

STRATEGIES = ("final", "future", "episode")


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    achieved_goal: np.ndarray
    next_achieved_goal: np.ndarray
    desired_goal: np.ndarray
    done: bool
    virtual: bool = False
    object_moved: bool = False
    initial_achieved_goal: Optional[np.ndarray] = None


class SumTree:
    """Array-backed binary sum tree; leaves live at ``[n_leaves, 2*n_leaves)``."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        n = 1
        while n < capacity:
            n *= 2
        self.n_leaves = n
        self.depth = n.bit_length() - 1
        self.tree = np.zeros(2 * n)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def leaves(self) -> np.ndarray:
        return self.tree[self.n_leaves:self.n_leaves + self.capacity]

    def get(self, idx):
        return self.tree[np.asarray(idx) + self.n_leaves]

    def set(self, idx, values) -> None:
        idx = np.atleast_1d(np.asarray(idx, dtype=np.int64)) + self.n_leaves
        self.tree[idx] = np.broadcast_to(np.asarray(values, dtype=float), idx.shape)
        # parents are recomputed from their children, so duplicates are harmless
        nodes = np.unique(idx // 2)
        while nodes.size and nodes[0] >= 1:
            self.tree[nodes] = self.tree[2 * nodes] + self.tree[2 * nodes + 1]
            if nodes[0] == 1:
                break
            nodes = np.unique(nodes // 2)

    def clear(self) -> None:
        self.tree[:] = 0.0

    def find(self, mass: np.ndarray) -> np.ndarray:
        """Leaf index for each prefix-sum query in ``mass``."""
        u = np.array(mass, dtype=float)
        idx = np.ones(u.shape, dtype=np.int64)
        for _ in range(self.depth):
            left = 2 * idx
            lv = self.tree[left]
            right = u > lv
            u = np.where(right, u - lv, u)
            idx = left + right
        return idx - self.n_leaves


_FIELDS = ("state", "action", "next_state", "achieved_goal", "next_achieved_goal", "desired_goal")


class PrioritizedBuffer:
    """Ring buffer of transitions with proportional prioritized sampling.

    Storage is columnar and allocated on the first store, so one buffer can
    be cleared and refilled with transitions of a different width.
    Indices handed out by :meth:`sample` are insertion serial numbers; an
    index whose slot has since been overwritten (or cleared) is stale.
    """

    def __init__(self, capacity: int = 1_000_000, alpha: float = 0.6, beta: float = 0.4,
                 eps_priority: float = 1e-3):
        self.capacity = int(capacity)
        self.alpha = alpha
        self.beta = beta
        self.eps_priority = eps_priority
        self.tree = SumTree(self.capacity)
        self.max_priority = 1.0
        self.size = 0
        self.n_inserted = 0
        self.stale_skipped = 0
        self._cols: Optional[dict] = None
        self._priority = np.zeros(self.capacity)

    def __len__(self) -> int:
        return self.size

    def clear(self) -> None:
        self.size = 0
        self.tree.clear()
        self._priority[:] = 0.0
        self.max_priority = 1.0
        self._cols = None

    def _allocate(self, t: Transition) -> None:
        cap = self.capacity
        cols = {name: np.zeros((cap, np.asarray(getattr(t, name)).size)) for name in _FIELDS}
        cols["reward"] = np.zeros(cap)
        cols["done"] = np.zeros(cap, dtype=bool)
        cols["virtual"] = np.zeros(cap, dtype=bool)
        cols["object_moved"] = np.zeros(cap, dtype=bool)
        self._cols = cols

    def store(self, t: Transition) -> None:
        self.store_many([t])

    def store_many(self, transitions: Sequence[Transition]) -> None:
        if not transitions:
            return
        for t in transitions:
            if t.reward not in (0.0, -1.0):
                raise ValueError(f"reward must be 0 or -1, got {t.reward}")
        arrays = {name: np.array([np.ravel(getattr(t, name)) for t in transitions], dtype=float)
                  for name in _FIELDS}
        if not all(np.all(np.isfinite(a)) for a in arrays.values()):
            raise ValueError("transition contains non-finite values")
        if self._cols is None:
            self._allocate(transitions[0])
        n = len(transitions)
        if n > self.capacity:
            # only the newest ``capacity`` survive anyway
            self.n_inserted += n - self.capacity
            transitions = transitions[-self.capacity:]
            arrays = {k: v[-self.capacity:] for k, v in arrays.items()}
            n = self.capacity
        slots = (self.n_inserted + np.arange(n)) % self.capacity
        for name, a in arrays.items():
            if a.shape[1] != self._cols[name].shape[1]:
                raise ValueError(f"{name} width {a.shape[1]} != buffer width {self._cols[name].shape[1]}")
            self._cols[name][slots] = a
        self._cols["reward"][slots] = [t.reward for t in transitions]
        self._cols["done"][slots] = [t.done for t in transitions]
        self._cols["virtual"][slots] = [t.virtual for t in transitions]
        self._cols["object_moved"][slots] = [t.object_moved for t in transitions]
        self._priority[slots] = self.max_priority
        self.tree.set(slots, self.max_priority ** self.alpha)
        self.n_inserted += n
        self.size = min(self.capacity, self.size + n)

    def _live_slots(self) -> np.ndarray:
        """Slots of the live transitions, oldest first."""
        return np.arange(self.n_inserted - self.size, self.n_inserted) % self.capacity

    def _live(self, serials: np.ndarray) -> np.ndarray:
        return (serials >= self.n_inserted - self.size) & (serials < self.n_inserted)

    def _slots_to_serials(self, slots: np.ndarray) -> np.ndarray:
        # newest serial occupying each slot
        last = self.n_inserted - 1
        return last - ((last - slots) % self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Stratified proportional sample.

        Returns ``(batch, weights, indices)``; ``batch`` maps field names to
        arrays, ``weights`` are importance weights normalized by their max.
        """
        if self.size < batch_size or batch_size < 1:
            raise ValueError(f"cannot sample {batch_size} from buffer of size {self.size}")
        total = self.tree.total
        seg = total / batch_size
        mass = (np.arange(batch_size) + rng.uniform(size=batch_size)) * seg
        mass = np.minimum(mass, np.nextafter(total, 0.0))
        slots = self.tree.find(mass)
        # float edge cases can land on an empty leaf; redraw those queries
        bad = self._empty_leaf(slots)
        while np.any(bad):
            slots[bad] = self.tree.find(rng.uniform(0.0, total, size=int(bad.sum())))
            bad = self._empty_leaf(slots)
        probs = self.tree.get(slots) / total
        weights = (self.size * probs) ** (-self.beta)
        weights = weights / weights.max()
        batch = {name: col[slots] for name, col in self._cols.items()}
        return batch, weights, self._slots_to_serials(slots)

    def _empty_leaf(self, slots: np.ndarray) -> np.ndarray:
        return (slots >= self.capacity) | (self.tree.get(np.minimum(slots, self.capacity - 1)) <= 0)

    def update_priorities(self, indices, td_errors) -> None:
        serials = np.asarray(indices, dtype=np.int64)
        td = np.abs(np.asarray(td_errors, dtype=float)).ravel()
        live = self._live(serials)
        self.stale_skipped += int((~live).sum())
        if not np.any(live):
            return
        slots = serials[live] % self.capacity
        pr = td[live] + self.eps_priority
        self._priority[slots] = pr
        self.tree.set(slots, pr ** self.alpha)
        self.max_priority = max(self.max_priority, float(pr.max()))

    def priorities(self) -> np.ndarray:
        return self._priority[self._live_slots()]

    def column(self, name: str) -> np.ndarray:
        if self._cols is None:
            return np.zeros(0)
        return self._cols[name][self._live_slots()]

    def count_bad_virtual(self) -> int:
        """Stored virtual successes whose object never moved."""
        if self._cols is None:
            return 0
        v = self.column("virtual")
        r = self.column("reward")
        m = self.column("object_moved")
        return int(np.sum(v & (r == 0.0) & ~m))

    def priority_histogram(self, bins: Sequence[float] = (1e-3, 1e-2, 1e-1, 1, 10, 100)) -> list:
        edges = np.concatenate([[0.0], np.asarray(bins, dtype=float), [np.inf]])
        counts, _ = np.histogram(self.priorities(), bins=edges)
        return counts.tolist()


def relabel_episode(episode: Sequence[Transition], strategy: str = "future", n_virtual: int = 4,
                    threshold: float = 0.1, rng: Optional[np.random.Generator] = None) -> list:
    """Hindsight copies of an episode's transitions with achieved goals as targets.

    ``future`` draws up to ``n_virtual`` distinct goals from the achieved goals
    at later times (the next achieved goals of steps ``t..T-1``), ``final``
    uses the last achieved goal, ``episode`` draws from the whole episode.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if not episode:
        raise ValueError("empty episode")
    if n_virtual <= 0:
        return []
    rng = rng if rng is not None else np.random.default_rng()
    T = len(episode)
    achieved = [t.next_achieved_goal for t in episode]
    out = []
    for i, t in enumerate(episode):
        if strategy == "final":
            picks = [T - 1]
        elif strategy == "future":
            avail = T - i
            picks = rng.choice(np.arange(i, T), size=min(n_virtual, avail), replace=False)
        else:
            picks = rng.choice(T, size=min(n_virtual, T), replace=False)
        for j in picks:
            g = np.array(achieved[int(j)], dtype=float)
            r = sparse_reward(t.next_achieved_goal, g, threshold)
            out.append(replace(t, desired_goal=g, reward=r, done=(r == 0.0), virtual=True))
    return out


def filter_virtual(t: Transition, eps_move: float = 1e-4) -> bool:
    """Keep a relabeled transition unless it is a success with an unmoved object."""
    if not t.virtual:
        raise ValueError("filter_virtual applies to relabeled transitions only")
    moved = t.object_moved
    if t.initial_achieved_goal is not None:
        moved = bool(np.linalg.norm(np.asarray(t.next_achieved_goal)
                                    - np.asarray(t.initial_achieved_goal)) > eps_move)
    return not (t.reward == 0.0 and not moved)
