"""Synchronous advantage actor-critic with GAE, generic over the intrinsic provider.

One iteration: every worker takes ``rollout_len`` steps, the provider stores
and scores the fresh transitions, total rewards ``r_e + beta_t * r_i`` feed
GAE, and one RMSprop step is taken on the whole batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..entropy import BetaSchedule, combine
from ..gridworld import VecEnv, parse_task, GridWorld
from ..intrinsic import IntrinsicProvider, NoIntrinsic
from ..nn import DivergenceError, RMSprop, log_softmax, softmax
from .policy import ActorCritic, sample_actions


@dataclass
class A2CConfig:
    n_workers: int = 16
    rollout_len: int = 5
    gamma: float = 0.99
    gae_lambda: float = 0.95
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    lr: float = 1e-3
    rms_alpha: float = 0.99
    rms_eps: float = 1e-5

    @property
    def batch_size(self) -> int:
        return self.n_workers * self.rollout_len


def compute_gae(rewards, values, dones, last_values, gamma: float, lam: float):
    """Generalized advantage estimates for (T, W) arrays.

    ``dones[t]`` marks that the transition at step t ended its episode, which
    cuts both the bootstrap and the advantage recursion. ``last_values`` (W,)
    bootstraps the state after the final step.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    if rewards.shape != values.shape or rewards.shape != dones.shape:
        raise ValueError(f"shape mismatch: rewards {rewards.shape}, values {values.shape}, dones {dones.shape}")
    last_values = np.asarray(last_values, dtype=np.float64).reshape(rewards.shape[1:])
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    next_adv = np.zeros_like(last_values)
    next_val = last_values
    for t in reversed(range(T)):
        live = 1.0 - dones[t]
        delta = rewards[t] + gamma * next_val * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_val = values[t]
    return adv, adv + values


@dataclass
class RolloutBatch:
    obs: np.ndarray          # (T, W, 7, 7, 3)
    actions: np.ndarray      # (T, W)
    logprobs: np.ndarray
    values: np.ndarray
    next_obs: np.ndarray     # true successor states
    r_e: np.ndarray
    r_i: np.ndarray
    r_total: np.ndarray
    dones: np.ndarray
    last_values: np.ndarray  # (W,)
    beta: float
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def flat(self, name):
        a = getattr(self, name)
        return a.reshape(-1, *a.shape[2:])


class A2C:
    def __init__(self, env: VecEnv, model: ActorCritic, cfg: A2CConfig | None = None,
                 provider: IntrinsicProvider | None = None, beta: BetaSchedule | None = None,
                 seed: int = 0, use_extrinsic: bool = True):
        self.env = env
        self.model = model
        self.cfg = cfg or A2CConfig()
        if env.n != self.cfg.n_workers:
            raise ValueError(f"config wants {self.cfg.n_workers} workers, env has {env.n}")
        self.provider = provider or NoIntrinsic()
        self.beta = beta or BetaSchedule(0.0)
        self.rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA2C]))
        self.opt = RMSprop(self.cfg.lr, self.cfg.rms_alpha, self.cfg.rms_eps, self.cfg.max_grad_norm)
        self.use_extrinsic = use_extrinsic  # False: reward-free pretraining
        self.env_steps = 0
        self.updates = 0
        self.finished_returns: list[float] = []

    def collect_rollout(self) -> RolloutBatch:
        T, W = self.cfg.rollout_len, self.env.n
        obs = np.zeros((T, W, *self.env.obs.shape[1:]), dtype=np.uint8)
        next_obs = np.zeros_like(obs)
        actions = np.zeros((T, W), dtype=np.int64)
        logprobs = np.zeros((T, W))
        values = np.zeros((T, W))
        r_e = np.zeros((T, W))
        dones = np.zeros((T, W), dtype=bool)
        beta = self.beta.value(self.env_steps)
        for t in range(T):
            o = self.env.obs.copy()
            logits, v = self.model.predict(o)
            logp = log_softmax(logits.astype(np.float64))
            a = sample_actions(np.exp(logp), self.rng)
            succ, _, rew, done, finished = self.env.step(a)
            self.provider.observe(o, a, succ, rew, done)
            obs[t], next_obs[t], actions[t] = o, succ, a
            logprobs[t] = logp[np.arange(W), a]
            values[t], r_e[t], dones[t] = v, rew, done
            self.finished_returns.extend(finished)
        self.env_steps += T * W
        self.beta.t = self.env_steps
        r_i = np.asarray(
            self.provider.compute(obs.reshape(-1, *obs.shape[2:]), actions.reshape(-1),
                                  next_obs.reshape(-1, *obs.shape[2:])),
            dtype=np.float64,
        ).reshape(T, W)
        _, last_values = self.model.predict(self.env.obs)
        r_total = combine(r_e if self.use_extrinsic else np.zeros_like(r_e), r_i, beta)
        return RolloutBatch(obs, actions, logprobs, values, next_obs, r_e, r_i,
                            r_total, dones, last_values.astype(np.float64), beta)

    def update(self, batch: RolloutBatch) -> dict:
        cfg = self.cfg
        adv, ret = compute_gae(batch.r_total, batch.values, batch.dones, batch.last_values,
                               cfg.gamma, cfg.gae_lambda)
        batch.advantages, batch.returns = adv, ret
        obs = batch.flat("obs")
        acts = batch.actions.reshape(-1)
        adv, ret = adv.reshape(-1), ret.reshape(-1)
        n = len(acts)

        logits, values = self.model.forward(obs)
        logits = logits.astype(np.float64)
        values = values.astype(np.float64)
        logp = log_softmax(logits)
        p = np.exp(logp)
        ent = -(p * logp).sum(axis=1)
        policy_loss = -(logp[np.arange(n), acts] * adv).mean()
        value_loss = ((values - ret) ** 2).mean()
        loss = policy_loss - cfg.entropy_coef * ent.mean() + cfg.value_coef * value_loss
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite A2C loss at update {self.updates}")

        onehot = np.zeros_like(p)
        onehot[np.arange(n), acts] = 1.0
        g_logits = -(onehot - p) * adv[:, None] / n
        g_logits += cfg.entropy_coef * p * (logp + ent[:, None]) / n
        g_values = cfg.value_coef * 2.0 * (values - ret) / n
        dt = self.model.encoder.dtype
        self.model.backward(g_logits.astype(dt), g_values.astype(dt))
        grad_norm = self.opt.step(self.model.flats, self.model.grads)

        stats = self.provider.update(obs, acts, batch.flat("next_obs")) or {}
        self.updates += 1
        stats.update(
            loss=float(loss), policy_loss=float(policy_loss), value_loss=float(value_loss),
            entropy=float(ent.mean()), grad_norm=grad_norm,
        )
        return stats

    def train_iteration(self) -> tuple[RolloutBatch, dict]:
        batch = self.collect_rollout()
        return batch, self.update(batch)


def evaluate(model, task, episodes: int = 100, seed: int = 0, greedy: bool = True,
             max_steps: int | None = None) -> np.ndarray:
    """Run ``episodes`` episodes in lockstep and return their returns.

    ``model`` is an actor-critic (acting on the logits) or a Q-network.
    Layouts come from a dedicated seed stream so evaluation never perturbs
    training randomness. Forward passes here are not charged to the ledger.
    """
    task = parse_task(task)
    ss = np.random.SeedSequence([int(seed), 0xE7A1]).spawn(episodes + 1)
    envs = [GridWorld(task, max_steps) for _ in range(episodes)]
    obs = np.stack([e.reset(seed=int(s.generate_state(1)[0])) for e, s in zip(envs, ss[:-1])])
    rng = np.random.default_rng(ss[-1])
    returns = np.zeros(episodes)
    live = np.ones(episodes, dtype=bool)
    ledger, model.ledger = model.ledger, None
    try:
        while live.any():
            idx = np.flatnonzero(live)
            logits = model.predict(obs[idx])
            if isinstance(logits, tuple):
                logits = logits[0]
            if greedy:
                acts = logits.argmax(axis=1)
            else:
                acts = sample_actions(softmax(logits.astype(np.float64)), rng)
            for j, a in zip(idx, acts):
                res = envs[j].step(a)
                returns[j] += res.reward
                obs[j] = res.observation
                if res.done:
                    live[j] = False
    finally:
        model.ledger = ledger
    return returns
