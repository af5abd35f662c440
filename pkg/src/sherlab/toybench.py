"""Reset-state chain games for checking episodes-to-success scaling.

A chain has states ``s_0..s_n``. From every state the agent's random
policy moves forward with probability ``p``; any wrong move ends the
episode (reset to ``s_0``). The three agents differ only in what they
remember between episodes:

* random: nothing, so an episode succeeds with probability ``p**n``;
* HER: the furthest state ever reached. Every episode replays the known
  prefix deterministically and then makes one exploratory move from the
  frontier. Each state therefore costs a geometric ``1/p`` episodes;
* sequential: the chain is split into subtasks. ``sher`` learns them one
  by one like the HER agent. ``her_target_only`` only gets hindsight
  credit inside the last subtask, so each episode must first cross all
  earlier subtasks by random walking.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

AGENT_KINDS = ("random", "her", "her_target_only", "sher")
DEFAULT_MAX_EPISODES = 1_000_000


@dataclass(frozen=True)
class ChainMDP:
    n: int
    p: float
    reset_state: bool = True
    subtask_lengths: Optional[tuple] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError(f"p must be in (0, 1], got {self.p}")
        if self.subtask_lengths is not None:
            lengths = tuple(int(x) for x in self.subtask_lengths)
            if any(x < 1 for x in lengths) or sum(lengths) != self.n:
                raise ValueError(f"subtask lengths {lengths} must be positive and sum to n={self.n}")
            object.__setattr__(self, "subtask_lengths", lengths)

    @classmethod
    def sequential(cls, lengths: Sequence[int], p: float) -> "ChainMDP":
        lengths = tuple(int(x) for x in lengths)
        return cls(n=sum(lengths), p=p, subtask_lengths=lengths)


def _require_reset(mdp: ChainMDP) -> None:
    if not mdp.reset_state:
        raise ValueError("toy agents are defined for reset-state chains only")


def _first_success(rng: np.random.Generator, prob: float, max_episodes: int,
                   block: int = 256) -> int:
    """1-based index of the first success among Bernoulli(prob) episodes."""
    done = 0
    while done < max_episodes:
        m = min(block, max_episodes - done)
        hits = np.flatnonzero(rng.random(m) < prob)
        if hits.size:
            return done + int(hits[0]) + 1
        done += m
        block *= 2
    return max_episodes + 1


def _walk(rng: np.random.Generator, p: float, steps: int, episodes: int) -> np.ndarray:
    """Success mask of ``episodes`` random walks over ``steps`` forward moves."""
    if steps == 0:
        return np.ones(episodes, dtype=bool)
    return np.all(rng.random((episodes, steps)) < p, axis=1)


def run_random_agent(mdp: ChainMDP, rng: np.random.Generator,
                     max_episodes: int = DEFAULT_MAX_EPISODES) -> int:
    """Episodes until a memoryless random walk first reaches ``s_n``."""
    _require_reset(mdp)
    done, block = 0, 64
    while done < max_episodes:
        m = min(block, max_episodes - done)
        hits = np.flatnonzero(_walk(rng, mdp.p, mdp.n, m))
        if hits.size:
            return done + int(hits[0]) + 1
        done += m
        block *= 2
    return max_episodes + 1


def run_her_agent(mdp: ChainMDP, rng: np.random.Generator,
                  max_episodes: int = DEFAULT_MAX_EPISODES, trace: Optional[list] = None) -> int:
    """Episodes until the frontier agent reaches ``s_n``.

    If ``trace`` is given, the best-known state after every episode is
    appended to it.
    """
    _require_reset(mdp)
    best = 0
    for episode in range(1, max_episodes + 1):
        # the known prefix is replayed exactly; one random move from the frontier
        if rng.random() < mdp.p:
            best += 1
        if trace is not None:
            trace.append(best)
        if best == mdp.n:
            return episode
    return max_episodes + 1


def run_sequential(mdp: ChainMDP, agent_kind: str, rng: np.random.Generator,
                   max_episodes: int = DEFAULT_MAX_EPISODES) -> dict:
    """Episodes to solve a chain of subtasks.

    Returns ``{"per_subtask": [...], "total": int}``; ``total`` is
    ``max_episodes + 1`` if the budget ran out.
    """
    _require_reset(mdp)
    if mdp.subtask_lengths is None:
        raise ValueError("run_sequential needs subtask_lengths")
    if agent_kind not in ("her_target_only", "sher"):
        raise ValueError(f"agent_kind must be her_target_only or sher, got {agent_kind!r}")
    lengths = mdp.subtask_lengths
    per = []
    used = 0
    if agent_kind == "sher" or len(lengths) == 1:
        for n_i in lengths:
            sub = run_her_agent(ChainMDP(n_i, mdp.p), rng, max_episodes - used)
            if sub > max_episodes - used:
                per.append(sub)
                return {"per_subtask": per, "total": max_episodes + 1}
            per.append(sub)
            used += sub
        return {"per_subtask": per, "total": used}

    # earlier subtasks must be crossed by a random walk in every episode
    prefix = sum(lengths[:-1])
    p_prefix = mdp.p ** prefix
    best = 0
    for episode in range(1, max_episodes + 1):
        if rng.random() < p_prefix:
            if best == 0:
                per.append(episode)
            if rng.random() < mdp.p:
                best += 1
        if best == lengths[-1]:
            per.append(episode - per[0])
            return {"per_subtask": per, "total": episode}
    return {"per_subtask": per, "total": max_episodes + 1}


def run_stream(run_index: int, seed: int = 0) -> np.random.Generator:
    """Independent generator for one Monte Carlo run."""
    return np.random.default_rng(np.random.SeedSequence([seed, run_index]))


def simulate(mdp: ChainMDP, agent_kind: str, runs: int, seed: int = 0,
             max_episodes: int = DEFAULT_MAX_EPISODES) -> np.ndarray:
    """Episodes-to-success for ``runs`` independent runs of one agent."""
    if agent_kind not in AGENT_KINDS:
        raise ValueError(f"unknown agent kind {agent_kind!r}")
    out = np.empty(runs, dtype=np.int64)
    for r in range(runs):
        rng = run_stream(r, seed)
        if agent_kind == "random":
            out[r] = run_random_agent(mdp, rng, max_episodes)
        elif agent_kind == "her":
            out[r] = run_her_agent(mdp, rng, max_episodes)
        else:
            out[r] = run_sequential(mdp, agent_kind, rng, max_episodes)["total"]
    return out


def _linfit(x: np.ndarray, y: np.ndarray) -> dict:
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss_tot if ss_tot > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": r2}


def fit_complexity(ns: Sequence[float], means: Sequence[float]) -> dict:
    """Classify growth of ``means`` in ``ns`` as exponential or polynomial.

    Fits ``log(mean) ~ n`` and ``log(mean) ~ log(n)`` by least squares and
    picks the model with the higher R^2. The report carries both fits plus
    ``base`` (exponential) and ``degree`` (power law).
    """
    ns = np.asarray(ns, dtype=float)
    means = np.asarray(means, dtype=float)
    if ns.shape != means.shape or ns.size < 4:
        raise ValueError("need at least 4 matching (n, mean) points")
    if np.any(means <= 0) or np.any(ns <= 0):
        raise ValueError("ns and means must be positive")
    log_m = np.log(means)
    exp_fit = _linfit(ns, log_m)
    pow_fit = _linfit(np.log(ns), log_m)
    kind = "exponential" if exp_fit["r2"] > pow_fit["r2"] else "polynomial"
    return {
        "classification": kind,
        "exponential": {**exp_fit, "base": float(np.exp(exp_fit["slope"]))},
        "polynomial": {**pow_fit, "degree": pow_fit["slope"]},
    }


def sweep(agent_kind: str, ns: Sequence[int], p: float, runs: int, seed: int = 0,
          max_episodes: int = DEFAULT_MAX_EPISODES) -> dict:
    """Run ``simulate`` for every chain length; returns samples and the fit."""
    samples = {int(n): simulate(ChainMDP(int(n), p), agent_kind, runs, seed, max_episodes)
               for n in ns}
    means = [float(samples[int(n)].mean()) for n in ns]
    return {"samples": samples, "means": means, "fit": fit_complexity(list(ns), means)}
