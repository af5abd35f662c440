"""DDPG actor-critic for goal-conditioned control.

The critic is split at the action junction: ``head`` maps the state-goal
input to the first hidden layer, the action is concatenated to that
layer's output, and ``body`` maps the result to a scalar value.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn
from .nn import LayerSpec, MLPParams


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Critic:
    head: MLPParams
    body: MLPParams

    def arrays(self) -> list:
        return self.head.arrays() + self.body.arrays()

    def with_arrays(self, arrays) -> "Critic":
        n = len(self.head.arrays())
        return Critic(self.head.with_arrays(arrays[:n]), self.body.with_arrays(arrays[n:]))

    @property
    def in_dim(self) -> int:
        return self.head.in_dim


def actor_specs(in_dim: int, action_dim: int, hidden=(64, 64, 64)) -> list:
    dims = [in_dim, *hidden]
    specs = [LayerSpec(a, b, "relu") for a, b in zip(dims, dims[1:])]
    return specs + [LayerSpec(dims[-1], action_dim, "tanh")]


def critic_init(in_dim: int, action_dim: int, hidden=(64, 64, 64), seed: int = 0,
                batch_norm: bool = True) -> Critic:
    head = nn.mlp_init([LayerSpec(in_dim, hidden[0], "relu", batch_norm)], seed)
    dims = [hidden[0] + action_dim, *hidden[1:]]
    body_specs = [LayerSpec(a, b, "relu", batch_norm) for a, b in zip(dims, dims[1:])]
    body_specs.append(LayerSpec(dims[-1], 1, "linear"))
    body = nn.mlp_init(body_specs, seed + 1)
    return Critic(head, body)


@dataclass
class CriticCache:
    head: nn.ForwardCache
    body: nn.ForwardCache
    head_width: int


def critic_forward(critic: Critic, x: np.ndarray, a: np.ndarray, mode: str = "train"):
    h, hc = nn.mlp_forward(critic.head, x, mode)
    q, bc = nn.mlp_forward(critic.body, np.concatenate([h, a], axis=1), mode)
    return q, CriticCache(hc, bc, h.shape[1])


def critic_backward(critic: Critic, cache: CriticCache, dq: np.ndarray):
    """Returns ``(grads, dx, da)`` with grads in :meth:`Critic.arrays` order."""
    body_grads, dz = nn.mlp_backward(critic.body, cache.body, dq)
    dh, da = dz[:, :cache.head_width], dz[:, cache.head_width:]
    head_grads, dx = nn.mlp_backward(critic.head, cache.head, dh)
    return head_grads + body_grads, dx, da


def critic_apply_bn_stats(critic: Critic, cache: CriticCache) -> Critic:
    return Critic(nn.apply_bn_stats(critic.head, cache.head), nn.apply_bn_stats(critic.body, cache.body))


def _copy_critic(c: Critic) -> Critic:
    return Critic(nn.copy_params(c.head), nn.copy_params(c.body))


@dataclass
class DDPGAgent:
    actor: MLPParams
    critic: Critic
    target_actor: MLPParams
    target_critic: Critic
    actor_opt: nn.AdamState
    critic_opt: nn.AdamState
    pad: np.ndarray = field(default_factory=lambda: np.zeros(0))
    gamma: float = 0.98
    lr: float = 1e-3
    clip_norm: float = 3.0
    target_sync: str = "hard"          # "hard" or "polyak"
    sync_period: int = 7
    polyak_tau: float = 0.05
    # batch-norm mode of the critic inside the actor step; in train mode the
    # batch statistics cancel any action change shared by the whole batch
    actor_step_bn: str = "eval"
    epsilon: float = 1.0
    epsilon_start: float = 1.0
    epsilon_decay: float = 0.95
    epsilon_floor: float = 0.05
    epochs: int = 0
    sync_ticks: int = 0
    action_low: np.ndarray = field(default_factory=lambda: -np.ones(2))
    action_high: np.ndarray = field(default_factory=lambda: np.ones(2))

    @property
    def action_dim(self) -> int:
        return self.actor.out_dim

    @property
    def input_dim(self) -> int:
        return self.actor.in_dim

    def inputs(self, obs: np.ndarray, goal: np.ndarray) -> np.ndarray:
        obs = np.atleast_2d(obs)
        goal = np.atleast_2d(goal)
        pad = np.broadcast_to(self.pad, (obs.shape[0], self.pad.size))
        x = np.concatenate([obs, goal, pad], axis=1)
        if x.shape[1] != self.input_dim:
            raise nn.ShapeError(f"observation+goal+pad width {x.shape[1]} != actor input {self.input_dim}")
        return x

    @property
    def value_floor(self) -> float:
        return -1.0 / (1.0 - self.gamma)


def make_agent(input_dim: int, action_dim: int, seed: int = 0, hidden=(64, 64, 64),
               pad_dims: int = 0, pad_positions=None, critic_batch_norm: bool = True,
               **hyper) -> DDPGAgent:
    """Build an agent whose networks have ``input_dim`` active inputs plus
    ``pad_dims`` zero-weight inputs at ``pad_positions`` (default: the end)."""
    actor = nn.mlp_init(actor_specs(input_dim, action_dim, hidden), seed)
    critic = critic_init(input_dim, action_dim, hidden, seed + 100, critic_batch_norm)
    if pad_dims:
        actor = nn.expand_input_layer(actor, pad_dims, 0.0, seed, pad_positions)
        critic = Critic(nn.expand_input_layer(critic.head, pad_dims, 0.0, seed, pad_positions),
                        critic.body)
    agent = DDPGAgent(
        actor=actor,
        critic=critic,
        target_actor=nn.copy_params(actor),
        target_critic=_copy_critic(critic),
        actor_opt=nn.AdamState.zeros_like(actor),
        critic_opt=nn.AdamState.zeros_like(critic),
        pad=np.zeros(pad_dims),
        action_low=-np.ones(action_dim),
        action_high=np.ones(action_dim),
        **hyper,
    )
    return agent


def greedy_action(agent: DDPGAgent, obs, goal) -> np.ndarray:
    out, _ = nn.mlp_forward(agent.actor, agent.inputs(obs, goal), "eval")
    return out


def select_actions(agent: DDPGAgent, obs: np.ndarray, goal: np.ndarray, training: bool,
                   rng: np.random.Generator, return_branch: bool = False):
    """Behavior policy for a batch of rows.

    Each row is greedy with probability ``1 - eps``, greedy plus Gaussian
    noise (``sigma = 0.05 * action_range``) with probability ``0.8 * eps``,
    and uniform random with probability ``0.2 * eps``.
    Branch codes: 0 greedy, 1 noisy, 2 uniform.
    """
    a_star = greedy_action(agent, obs, goal)
    n, d = a_star.shape
    branch = np.zeros(n, dtype=int)
    if training and agent.epsilon > 0:
        lo, hi = agent.action_low, agent.action_high
        u = rng.uniform(size=n)
        eps = agent.epsilon
        branch = np.where(u < 0.8 * eps, 1, np.where(u < eps, 2, 0))
        sigma = 0.05 * (hi - lo)
        noise = rng.normal(size=(n, d)) * sigma
        uniform = rng.uniform(lo, hi, size=(n, d))
        a = np.where((branch == 1)[:, None], a_star + noise, a_star)
        a = np.where((branch == 2)[:, None], uniform, a)
        a = np.clip(a, lo, hi)
    else:
        a = np.clip(a_star, agent.action_low, agent.action_high)
    return (a, branch) if return_branch else a


def select_action(agent: DDPGAgent, obs, pad=None, training: bool = True,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Single-observation behavior policy; ``obs`` is an ObservationDict."""
    if pad is not None and np.asarray(pad).size != agent.pad.size:
        raise nn.ShapeError("pad does not match the agent's pad width")
    rng = rng if rng is not None else np.random.default_rng()
    return select_actions(agent, obs.observation, obs.desired_goal, training, rng)[0]


def critic_targets(agent: DDPGAgent, batch: dict) -> np.ndarray:
    x2 = agent.inputs(batch["next_state"], batch["desired_goal"])
    a2, _ = nn.mlp_forward(agent.target_actor, x2, "eval")
    q2, _ = critic_forward(agent.target_critic, x2, a2, "train")
    done = batch["done"].astype(float)[:, None]
    y = batch["reward"][:, None] + agent.gamma * (1.0 - done) * q2
    return np.clip(y, agent.value_floor, 0.0)


def actor_loss_and_grads(agent: DDPGAgent, x: np.ndarray, critic: Optional[Critic] = None):
    """``-mean Q(x, pi(x))`` and its gradient w.r.t. the actor (critic frozen)."""
    critic = agent.critic if critic is None else critic
    a_pi, cache_a = nn.mlp_forward(agent.actor, x, "train")
    q_pi, cache_q = critic_forward(critic, x, a_pi, agent.actor_step_bn)
    b = x.shape[0]
    loss = -float(q_pi.mean())
    _, _, da = critic_backward(critic, cache_q, np.full_like(q_pi, -1.0 / b))
    grads, _ = nn.mlp_backward(agent.actor, cache_a, da)
    return loss, grads


def train_batch(agent: DDPGAgent, batch: dict, weights: Optional[np.ndarray] = None):
    """One critic step and one actor step.

    Returns ``(td_errors, critic_loss, actor_loss, agent)``; the returned agent
    is a new object sharing no mutable arrays with the input.
    """
    n = batch["reward"].shape[0]
    if n == 0:
        raise ValueError("empty batch")
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    y = critic_targets(agent, batch)
    if not (np.all(y >= agent.value_floor) and np.all(y <= 0.0)):
        raise TrainingError("critic target outside the sparse-reward value range")
    x = agent.inputs(batch["state"], batch["desired_goal"])
    q, cache = critic_forward(agent.critic, x, batch["action"], "train")
    td = (y - q)[:, 0]
    critic_loss = float(np.mean(w * td * td))
    if not np.isfinite(critic_loss):
        raise TrainingError(f"non-finite critic loss; |q| max {np.abs(q).max()}, |y| max {np.abs(y).max()}")
    dq = (-2.0 / n) * (w * td)[:, None]
    grads, _, _ = critic_backward(agent.critic, cache, dq)
    critic, critic_opt = nn.adam_step(agent.critic, grads, agent.critic_opt, agent.lr, agent.clip_norm)
    critic = critic_apply_bn_stats(critic, cache)

    actor_loss, a_grads = actor_loss_and_grads(agent, x, critic)
    if not np.isfinite(actor_loss):
        raise TrainingError("non-finite actor loss")
    actor, actor_opt = nn.adam_step(agent.actor, a_grads, agent.actor_opt, agent.lr, agent.clip_norm)
    new = replace(agent, actor=actor, critic=critic, actor_opt=actor_opt, critic_opt=critic_opt)
    return td, critic_loss, actor_loss, new


def sync_targets(agent: DDPGAgent) -> DDPGAgent:
    """Advance the target-sync clock by one cycle."""
    ticks = agent.sync_ticks + 1
    if agent.target_sync == "hard":
        if ticks % agent.sync_period == 0:
            return replace(agent, target_actor=nn.copy_params(agent.actor),
                           target_critic=_copy_critic(agent.critic), sync_ticks=ticks)
        return replace(agent, sync_ticks=ticks)
    if agent.target_sync == "polyak":
        tau = agent.polyak_tau
        tc = Critic(nn.polyak_blend(agent.target_critic.head, agent.critic.head, tau),
                    nn.polyak_blend(agent.target_critic.body, agent.critic.body, tau))
        return replace(agent, target_actor=nn.polyak_blend(agent.target_actor, agent.actor, tau),
                       target_critic=tc, sync_ticks=ticks)
    raise ValueError(f"unknown target_sync {agent.target_sync!r}")


def hard_sync(agent: DDPGAgent) -> DDPGAgent:
    return replace(agent, target_actor=nn.copy_params(agent.actor),
                   target_critic=_copy_critic(agent.critic))


def set_epoch(agent: DDPGAgent, epochs: int) -> DDPGAgent:
    """Exploration rate after ``epochs`` decays, computed in closed form."""
    eps = max(agent.epsilon_floor, agent.epsilon_start * agent.epsilon_decay ** epochs)
    return replace(agent, epochs=epochs, epsilon=eps)


# -- checkpoints ------------------------------------------------------------

_AGENT_MAGIC = b"SHAG"
_AGENT_VERSION = 1
_SCALARS = ("gamma", "lr", "clip_norm", "target_sync", "sync_period", "polyak_tau", "actor_step_bn",
            "epsilon", "epsilon_start", "epsilon_decay", "epsilon_floor", "epochs", "sync_ticks")


def agent_to_bytes(agent: DDPGAgent) -> bytes:
    scalars = {k: getattr(agent, k) for k in _SCALARS}
    scalars["pad"] = agent.pad.tolist()
    scalars["action_low"] = agent.action_low.tolist()
    scalars["action_high"] = agent.action_high.tolist()
    meta = json.dumps(scalars, sort_keys=True).encode()
    nets = [agent.actor, agent.critic.head, agent.critic.body,
            agent.target_actor, agent.target_critic.head, agent.target_critic.body]
    blobs = [nn.params_to_bytes(p) for p in nets]
    return b"".join([struct.pack("<4sII", _AGENT_MAGIC, _AGENT_VERSION, len(meta)), meta, *blobs])


def agent_from_bytes(data: bytes) -> DDPGAgent:
    magic, version, meta_len = struct.unpack_from("<4sII", data, 0)
    if magic != _AGENT_MAGIC or version != _AGENT_VERSION:
        raise ValueError("not a supported agent checkpoint")
    off = struct.calcsize("<4sII")
    scalars = json.loads(data[off:off + meta_len])
    off += meta_len
    nets = []
    for _ in range(6):
        p, off = nn.params_from_bytes(data, off)
        nets.append(p)
    actor, ch, cb, ta, tch, tcb = nets
    critic = Critic(ch, cb)
    pad = np.asarray(scalars.pop("pad"), dtype=float)
    lo = np.asarray(scalars.pop("action_low"), dtype=float)
    hi = np.asarray(scalars.pop("action_high"), dtype=float)
    return DDPGAgent(actor=actor, critic=critic, target_actor=ta, target_critic=Critic(tch, tcb),
                     actor_opt=nn.AdamState.zeros_like(actor), critic_opt=nn.AdamState.zeros_like(critic),
                     pad=pad, action_low=lo, action_high=hi, **scalars)


def save_agent(agent: DDPGAgent, path) -> None:
    with open(path, "wb") as fh:
        fh.write(agent_to_bytes(agent))


def load_agent(path) -> DDPGAgent:
    with open(path, "rb") as fh:
        return agent_from_bytes(fh.read())
