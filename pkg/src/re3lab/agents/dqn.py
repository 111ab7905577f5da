"""Off-policy loop with a state-entropy bonus, instantiated with double DQN.

Per environment step ``t``: act, encode ``s_t`` once, store the transition
with its latent, then (after the warm-up) sample a minibatch, score every
sampled latent against the entire buffer, weight by ``beta_t`` and take one
TD step on ``r_e + beta_t * r_i``. Intrinsic rewards are always recomputed at
sampling time, never stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..encoder import RandomEncoder, ReplayBuffer, Transition
from ..entropy import BetaSchedule, IntrinsicConfig, batch_intrinsic_rewards, combine
from ..gridworld import NUM_ACTIONS, GridWorld
from ..nn import DivergenceError, RMSprop
from .policy import QNetwork


@dataclass
class DQNConfig:
    gamma: float = 0.99
    batch_size: int = 512
    initial_steps: int = 1000
    target_sync: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_steps: int = 50000
    lr: float = 1e-4
    rms_alpha: float = 0.95
    rms_eps: float = 0.01
    max_grad_norm: float = 10.0
    buffer_capacity: int = 100000

    def epsilon(self, t: int) -> float:
        frac = min(1.0, t / max(1, self.eps_decay_steps))
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def huber(x, delta: float = 1.0):
    """Value and derivative of the Huber loss."""
    a = np.abs(x)
    quad = a <= delta
    val = np.where(quad, 0.5 * x * x, delta * (a - 0.5 * delta))
    grad = np.where(quad, x, delta * np.sign(x))
    return val, grad


class DoubleDQN:
    def __init__(self, cfg: DQNConfig, seed: int = 0, ledger=None, init_gain: float = 1.0,
                 input_mode: str = "raw"):
        self.cfg = cfg
        self.q = QNetwork(seed, ledger=ledger, init_gain=init_gain, input_mode=input_mode)
        self.target = QNetwork(seed, ledger=ledger, role="q_target", init_gain=init_gain, input_mode=input_mode)
        self.target.net.copy_from(self.q.net)
        self.opt = RMSprop(cfg.lr, cfg.rms_alpha, cfg.rms_eps, cfg.max_grad_norm)
        self.updates = 0

    def act(self, obs, eps: float, rng) -> int:
        if rng.random() < eps:
            return int(rng.integers(NUM_ACTIONS))
        return int(self.q.predict(obs[None])[0].argmax())

    def update(self, obs, actions, rewards, next_obs, dones) -> float:
        """One double-DQN step on the given (already reward-combined) batch."""
        n = len(actions)
        q_next_online = self.q.predict(next_obs)
        a_star = q_next_online.argmax(axis=1)
        q_next_target = self.target.predict(next_obs)[np.arange(n), a_star]
        y = rewards + self.cfg.gamma * (1.0 - dones) * q_next_target
        q = self.q.forward(obs)
        td = q[np.arange(n), actions].astype(np.float64) - y
        val, g = huber(td)
        loss = float(val.mean())
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite TD loss at update {self.updates}")
        gq = np.zeros_like(q)
        gq[np.arange(n), actions] = g / n
        self.q.backward(gq)
        self.opt.step(self.q.net.flat, self.q.net.grad)
        self.updates += 1
        if self.updates % self.cfg.target_sync == 0:
            self.target.net.copy_from(self.q.net)
        return loss


@dataclass
class OffPolicyLog:
    betas: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    episode_returns: list = field(default_factory=list)
    last_batch_indices: np.ndarray | None = None
    last_intrinsic: np.ndarray | None = None
    last_total: np.ndarray | None = None


class OffPolicyRunner:
    """Resumable form of the loop; ``run(n)`` advances ``n`` environment steps."""

    def __init__(self, env: GridWorld, agent: DoubleDQN, encoder: RandomEncoder | None, buffer: ReplayBuffer,
                 sched: BetaSchedule, icfg: IntrinsicConfig | None = None, seed: int = 0,
                 use_extrinsic: bool = True):
        self.env, self.agent, self.encoder, self.buffer, self.sched = env, agent, encoder, buffer, sched
        self.icfg = icfg or IntrinsicConfig()
        self.use_extrinsic = use_extrinsic
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xD01]))
        self.log = OffPolicyLog()
        self._zero_latent = np.zeros(buffer.latent_dim, dtype=np.float32)
        self.obs = env.reset(seed=int(self.rng.integers(2**31)))
        self.ep_ret = 0.0
        self.t = 0

    @property
    def env_steps(self) -> int:
        return self.t

    def step(self):
        agent, cfg, buffer, log, t = self.agent, self.agent.cfg, self.buffer, self.log, self.t
        # collect
        a = agent.act(self.obs, cfg.epsilon(t), self.rng)
        res = self.env.step(a)
        # no encoder means no intrinsic term: nothing is embedded and r_i is 0
        y = self.encoder.encode(self.obs) if self.encoder is not None else self._zero_latent
        buffer.push(Transition(self.obs, a, res.observation, res.reward, res.done, y))
        self.ep_ret += res.reward
        if res.done:
            log.episode_returns.append(self.ep_ret)
            self.ep_ret = 0.0
            self.obs = self.env.reset()
        else:
            self.obs = res.observation
        self.t += 1

        beta = self.sched.value(t)
        log.betas.append(beta)
        if t + 1 < cfg.initial_steps or len(buffer) < cfg.batch_size:
            return

        # intrinsic reward against the whole buffer, fresh for this minibatch
        b = buffer.sample_batch(cfg.batch_size, self.rng)
        if self.encoder is None:
            r_i = np.zeros(len(b))
        else:
            r_i = batch_intrinsic_rewards(b.latents, buffer.latent_pool(), self.icfg, self_index=b.indices)
        r_e = b.rewards.astype(np.float64) if self.use_extrinsic else np.zeros(len(b))
        r_total = combine(r_e, r_i, beta)
        log.last_batch_indices, log.last_intrinsic, log.last_total = b.indices, r_i, r_total

        # policy update
        loss = agent.update(b.obs, b.actions, r_total, b.next_obs, b.dones.astype(np.float64))
        log.losses.append(loss)

    def run(self, n_steps: int) -> OffPolicyLog:
        for _ in range(n_steps):
            self.step()
        self.sched.t = self.t
        return self.log


def offpolicy_loop(env: GridWorld, agent: DoubleDQN, encoder: RandomEncoder, buffer: ReplayBuffer,
                   sched: BetaSchedule, total_steps: int, icfg: IntrinsicConfig | None = None,
                   seed: int = 0) -> OffPolicyLog:
    """Run ``total_steps`` environment steps of the off-policy loop."""
    return OffPolicyRunner(env, agent, encoder, buffer, sched, icfg, seed).run(total_steps)
