"""Sequential-HER: source-task observations, curriculum gating, knowledge
transfer between stages, and the training loop that ties them together."""

from __future__ import annotations

import logging
import time
from fractions import Fraction
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import agent as ag
from . import envs, nn
from .envs import EnvConfig, ObservationDict
from .replay import PrioritizedBuffer, Transition, filter_virtual, relabel_episode
from .runlog import RunLog

log = logging.getLogger(__name__)

MODES = ("vanilla_her", "filtered_her", "unfiltered_sher", "sher")


class SpecError(ValueError):
    pass


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class SourceTaskSpec:
    obs_idx: tuple
    achieved_idx: tuple
    desired_idx: tuple
    rft: float
    pad: np.ndarray
    name: str = ""

    def __post_init__(self):
        if len(self.achieved_idx) != 2 or len(self.desired_idx) != 2:
            raise SpecError("achieved and desired goals must select exactly 2 components")

    @property
    def input_sources(self) -> list:
        """Index into ``S`` of every non-pad network input, in input order."""
        return list(self.obs_idx) + list(self.desired_idx)

    @property
    def input_width(self) -> int:
        return len(self.obs_idx) + len(self.desired_idx) + len(self.pad)


def state_to_obs(spec: SourceTaskSpec, S) -> ObservationDict:
    S = np.asarray(S, dtype=float)
    idx = list(spec.obs_idx) + list(spec.achieved_idx) + list(spec.desired_idx)
    if idx and (max(idx) >= S.size or min(idx) < -S.size):
        raise SpecError(f"index out of range for state of size {S.size}")
    return ObservationDict(
        observation=S[list(spec.obs_idx)],
        achieved_goal=S[list(spec.achieved_idx)],
        desired_goal=S[list(spec.desired_idx)],
    )


def source_tasks(kind: str, config: Optional[EnvConfig] = None) -> list:
    """Reach-then-throw stages for a throwing task."""
    config = config if config is not None else envs.preset(kind)
    L = envs.state_layout(kind)
    base = list(L.joint_angles) + list(L.joint_vels) + list(L.hand_pos) + list(L.hand_vel)
    full = base + list(L.ball_pos) + list(L.ball_vel) + list(L.grasped)
    width = len(full) + len(L.goal)
    reach_pad = width - len(base) - len(L.ball_pos)
    reach = SourceTaskSpec(tuple(base), L.hand_pos, L.ball_pos, config.ball_radius,
                           np.zeros(reach_pad), "reach")
    throw = SourceTaskSpec(tuple(full), L.ball_pos, L.goal, config.hole_radius, np.zeros(0), "throw")
    return [reach, throw]


def get_curriculum(env_kind: str, config: Optional[EnvConfig] = None) -> list:
    """List of ``{"sto", "rft", "pad"}`` task dictionaries ending in the target task."""
    if env_kind not in envs.KINDS:
        raise envs.ConfigError(f"unknown env kind {env_kind!r}")
    curriculum = []
    for spec in source_tasks(env_kind, config):
        curriculum.append({"sto": spec, "rft": spec.rft, "pad": spec.pad})
    return curriculum


@dataclass
class SuccessHistory:
    H: list = field(default_factory=list)
    k: int = 30
    c: float = 0.9

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("window size k must be >= 1")

    def append(self, rate: float) -> None:
        if not 0.0 <= rate <= 1.0:
            raise ValueError("success rate must lie in [0, 1]")
        self.H.append(rate)


def learned_task(history: SuccessHistory) -> bool:
    if len(history.H) < history.k:
        return False
    # exact rational comparison on the decimal values, so c=0.9 means 9/10 and a
    # window of 27 successes in 30 passes despite binary rounding
    window = history.H[-history.k:]
    return sum(Fraction(repr(h)) for h in window) >= Fraction(repr(history.c)) * history.k


def first_switch_cycle(H: Sequence[float], k: int = 30, c: float = 0.9) -> Optional[int]:
    """0-based cycle at which :func:`learned_task` first fires on a prefix of ``H``."""
    hist = SuccessHistory(k=k, c=c)
    for i, h in enumerate(H):
        hist.append(h)
        if learned_task(hist):
            return i
    return None


def _column_plan(from_spec: SourceTaskSpec, to_spec: SourceTaskSpec):
    src_f, src_t = from_spec.input_sources, to_spec.input_sources
    if not set(from_spec.obs_idx) <= set(to_spec.obs_idx) or not set(src_f) <= set(src_t):
        raise TransferError("target stage must observe a superset of the source stage")
    if from_spec.input_width != to_spec.input_width:
        raise TransferError("stages must share one network input width")
    old_pos = [src_t.index(s) for s in src_f]
    if old_pos != sorted(old_pos):
        raise TransferError("stage input layouts must keep shared inputs in the same order")
    new_pos = [j for j in range(len(src_t)) if j not in set(old_pos)]
    pad_from = list(range(len(src_f), from_spec.input_width))
    return pad_from, new_pos, len(to_spec.pad)


def _retarget_first_layer(params: nn.MLPParams, pad_from, new_pos, pad_to, alpha, seed):
    if np.any(params.layers[0].W[:, pad_from] != 0.0):
        raise nn.NetworkStateError("padding columns carry non-zero weights")
    p = nn.drop_input_columns(params, pad_from)
    p = nn.expand_input_layer(p, len(new_pos), alpha, seed, new_pos)
    return nn.expand_input_layer(p, pad_to, 0.0, seed)


def _retarget_adam(state: nn.AdamState, pad_from, new_pos, pad_to) -> nn.AdamState:
    s = nn.drop_adam_columns(state, pad_from)
    s = nn.expand_adam_state(s, len(new_pos), new_pos)
    return nn.expand_adam_state(s, pad_to)


def transfer_knowledge(agent: ag.DDPGAgent, from_spec: SourceTaskSpec, to_spec: SourceTaskSpec,
                       critic_alpha: float = 0.0, seed: int = 0,
                       buffer: Optional[PrioritizedBuffer] = None) -> ag.DDPGAgent:
    """Carry the agent into the next stage.

    Inputs that become active get zero actor weights and ``critic_alpha``
    times freshly initialized critic weights; everything else is kept bit
    for bit. Targets are re-copied, exploration restarts at 1 and the replay
    buffer (if given) is emptied.
    """
    if critic_alpha < 0:
        raise ValueError("critic_alpha must be >= 0")
    pad_from, new_pos, pad_to = _column_plan(from_spec, to_spec)
    actor = _retarget_first_layer(agent.actor, pad_from, new_pos, pad_to, 0.0, seed)
    head = _retarget_first_layer(agent.critic.head, pad_from, new_pos, pad_to, critic_alpha, seed + 1)
    critic = ag.Critic(head, agent.critic.body)
    new = replace(
        agent,
        actor=actor,
        critic=critic,
        actor_opt=_retarget_adam(agent.actor_opt, pad_from, new_pos, pad_to),
        critic_opt=_retarget_adam(agent.critic_opt, pad_from, new_pos, pad_to),
        pad=np.asarray(to_spec.pad, dtype=float).copy(),
        epsilon=agent.epsilon_start,
        epochs=0,
    )
    new = ag.hard_sync(new)
    if buffer is not None:
        buffer.clear()
    return new


@dataclass
class SherConfig:
    env: EnvConfig = field(default_factory=lambda: envs.preset("hand"))
    mode: str = "sher"
    seed: int = 0
    max_cycles: int = 3000
    episodes_per_cycle: int = 16
    train_steps_per_cycle: int = 40
    cycles_per_epoch: int = 50
    batch_size: int = 64
    k: int = 30
    c: float = 0.9
    critic_alpha: float = 0.0
    strategy: str = "future"
    n_virtual: int = 4
    eps_move: float = 1e-4
    buffer_capacity: int = 1_000_000
    per_alpha: float = 0.6
    per_beta_start: float = 0.4
    per_beta_end: float = 1.0
    eps_priority: float = 1e-3
    hidden: tuple = (64, 64, 64)
    gamma: float = 0.98
    lr: float = 1e-3
    clip_norm: float = 3.0
    target_sync: str = "hard"
    sync_period: int = 7
    polyak_tau: float = 0.05
    actor_step_bn: str = "eval"
    epsilon_decay: float = 0.95
    epsilon_floor: float = 0.05
    debug_checks: bool = False
    # stop after the final stage is learned (otherwise keep training until max_cycles)
    stop_when_learned: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.max_cycles < 1 or self.episodes_per_cycle < 1:
            raise ValueError("max_cycles and episodes_per_cycle must be >= 1")

    @property
    def filtered(self) -> bool:
        return self.mode in ("filtered_her", "sher")

    @property
    def uses_curriculum(self) -> bool:
        return self.mode in ("unfiltered_sher", "sher")


@dataclass
class CycleResult:
    transitions: list
    successes: int
    episodes: list
    virtual_kept: int
    virtual_discarded: int
    steps: int


def collect_cycle(agent: ag.DDPGAgent, config: SherConfig, spec: SourceTaskSpec, final: bool,
                  rng_env, rng_act, rng_her) -> CycleResult:
    """Roll out ``episodes_per_cycle`` episodes in lockstep and relabel them."""
    env_cfg = config.env
    M = config.episodes_per_cycle
    states, obs = [], []
    for _ in range(M):
        st, S = envs.reset(env_cfg, rng_env)
        states.append(st)
        obs.append(state_to_obs(spec, S))
    initial = [o.achieved_goal.copy() for o in obs]
    episodes = [[] for _ in range(M)]
    success = [False] * M
    for _ in range(env_cfg.max_steps):
        X = np.stack([o.observation for o in obs])
        G = np.stack([o.desired_goal for o in obs])
        A = ag.select_actions(agent, X, G, True, rng_act)
        for i in range(M):
            st = envs.step(states[i], A[i], env_cfg)
            o2 = state_to_obs(spec, envs.full_state_vector(st))
            r = envs.sparse_reward(o2.achieved_goal, obs[i].desired_goal, spec.rft)
            moved = bool(np.linalg.norm(o2.achieved_goal - initial[i]) > config.eps_move)
            episodes[i].append(Transition(
                state=obs[i].observation, action=A[i], reward=r, next_state=o2.observation,
                achieved_goal=obs[i].achieved_goal, next_achieved_goal=o2.achieved_goal,
                desired_goal=obs[i].desired_goal, done=(r == 0.0), virtual=False,
                object_moved=moved, initial_achieved_goal=initial[i],
            ))
            if r == 0.0 or (final and st.hit):
                success[i] = True
            states[i], obs[i] = st, o2

    stored, kept, discarded = [], 0, 0
    ledger = []
    for i, ep in enumerate(episodes):
        stored.extend(ep)
        virtual = relabel_episode(ep, config.strategy, config.n_virtual, spec.rft, rng_her)
        if config.filtered:
            good = [v for v in virtual if filter_virtual(v, config.eps_move)]
        else:
            good = virtual
        kept += len(good)
        discarded += len(virtual) - len(good)
        stored.extend(good)
        ledger.append({"success": success[i], "object_moved": ep[-1].object_moved,
                       "ever_grasped": states[i].ever_grasped})
    return CycleResult(stored, sum(success), ledger, kept, discarded, M * env_cfg.max_steps)


def count_nonneg(transitions: Sequence[Transition]) -> int:
    """Transitions with reward 0 whose object actually moved."""
    return sum(1 for t in transitions if t.reward == 0.0 and t.object_moved)


def _seeds(seed: int):
    ss = np.random.SeedSequence(seed)
    env_ss, act_ss, her_ss, buf_ss = ss.spawn(4)
    net_seed = int(ss.generate_state(1)[0])
    return (np.random.default_rng(env_ss), np.random.default_rng(act_ss),
            np.random.default_rng(her_ss), np.random.default_rng(buf_ss), net_seed)


def build_agent(config: SherConfig, first: SourceTaskSpec, net_seed: int) -> ag.DDPGAgent:
    active = len(first.input_sources)
    return ag.make_agent(
        active, config.env.action_dim, seed=net_seed, hidden=config.hidden,
        pad_dims=len(first.pad), gamma=config.gamma, lr=config.lr, clip_norm=config.clip_norm,
        target_sync=config.target_sync, sync_period=config.sync_period,
        polyak_tau=config.polyak_tau, actor_step_bn=config.actor_step_bn,
        epsilon_decay=config.epsilon_decay,
        epsilon_floor=config.epsilon_floor,
    )


def run_sher(config: SherConfig, agent_hook=None) -> RunLog:
    """Train through the curriculum (or directly on the target task for the
    non-curriculum modes) and return the per-cycle log.

    ``agent_hook(event, agent, buffer, cycle)`` is called after every cycle
    (``event="cycle"``) and just before/after each stage switch
    (``"pre_switch"``/``"post_switch"``); it is meant for inspection only.
    """
    stages = source_tasks(config.env.kind, config.env)
    if not config.uses_curriculum:
        stages = stages[-1:]
    rng_env, rng_act, rng_her, rng_buf, net_seed = _seeds(config.seed)
    agent = build_agent(config, stages[0], net_seed)
    buffer = PrioritizedBuffer(config.buffer_capacity, config.per_alpha, config.per_beta_start,
                               config.eps_priority)
    runlog = RunLog(meta={"mode": config.mode, "seed": config.seed, "k": config.k, "c": config.c,
                          "stages": [s.name for s in stages]})
    nonneg = 0
    samples = 0
    episodes_total = 0
    cycle = 0
    task_index = 0
    history = SuccessHistory(k=config.k, c=config.c)
    cycle_in_task = 0
    while cycle < config.max_cycles:
        t0 = time.perf_counter()
        spec = stages[task_index]
        final = task_index == len(stages) - 1
        agent = ag.set_epoch(agent, cycle_in_task // config.cycles_per_epoch)
        frac = cycle / max(1, config.max_cycles - 1)
        buffer.beta = config.per_beta_start + (config.per_beta_end - config.per_beta_start) * frac

        res = collect_cycle(agent, config, spec, final, rng_env, rng_act, rng_her)
        buffer.store_many(res.transitions)
        nonneg += count_nonneg(res.transitions)
        samples += res.steps
        if config.debug_checks and config.filtered and buffer.count_bad_virtual():
            raise AssertionError("filtered buffer holds virtual successes with an unmoved object")

        if len(buffer) >= config.batch_size:
            for _ in range(config.train_steps_per_cycle):
                batch, weights, idx = buffer.sample(config.batch_size, rng_buf)
                td, _, _, agent = ag.train_batch(agent, batch, weights)
                buffer.update_priorities(idx, td)
        agent = ag.sync_targets(agent)

        rate = res.successes / config.episodes_per_cycle
        history.append(rate)
        for e_i, e in enumerate(res.episodes):
            runlog.episodes.append({"cycle": cycle, "task_index": task_index,
                                    "episode": episodes_total + e_i, **e})
        episodes_total += len(res.episodes)
        runlog.rows.append({
            "cycle": cycle, "task_index": task_index, "success_rate": rate,
            "nonneg_reward_cum": nonneg, "buffer_size": len(buffer),
            "virtual_kept": res.virtual_kept, "virtual_discarded": res.virtual_discarded,
            "epsilon": agent.epsilon, "samples": samples, "episodes": episodes_total,
        })
        runlog.priority_hist.append(buffer.priority_histogram())
        runlog.wall_ms.append((time.perf_counter() - t0) * 1000.0)
        if agent_hook is not None:
            agent_hook("cycle", agent, buffer, cycle)
        if cycle % 25 == 0:
            log.info("cycle %d task %d success %.3f eps %.3f buffer %d", cycle, task_index,
                     rate, agent.epsilon, len(buffer))
        cycle += 1
        cycle_in_task += 1

        if learned_task(history):
            if final:
                runlog.complete = True
                if config.stop_when_learned:
                    break
                continue
            if agent_hook is not None:
                agent_hook("pre_switch", agent, buffer, cycle - 1)
            nxt = stages[task_index + 1]
            agent = transfer_knowledge(agent, spec, nxt, config.critic_alpha,
                                       seed=net_seed + 7 + task_index, buffer=buffer)
            runlog.switches.append({"cycle": cycle - 1, "from_task": task_index,
                                    "to_task": task_index + 1,
                                    "trailing_mean": sum(history.H[-config.k:]) / config.k})
            task_index += 1
            history = SuccessHistory(k=config.k, c=config.c)
            cycle_in_task = 0
            if agent_hook is not None:
                agent_hook("post_switch", agent, buffer, cycle - 1)
    return runlog
