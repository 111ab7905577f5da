"""Intrinsic-reward providers that plug into the training loops.

Every provider answers the same three calls, so the agents never need to
know which one they hold:

``observe(obs, actions, next_obs, rewards, dones)``
    once per environment step with the per-worker arrays;
``compute(obs, actions, next_obs)``
    once per batch, returning one intrinsic reward per transition, in the
    order the transitions were observed;
``update(obs, actions, next_obs)``
    once per learner update (a no-op for providers without trainable parts).
"""

from __future__ import annotations

import numpy as np

from .encoder import RandomEncoder, ReplayBuffer
from .entropy import IntrinsicConfig, RunningStd, batch_intrinsic_rewards, normalize


class IntrinsicProvider:
    name = "none"

    def observe(self, obs, actions, next_obs, rewards, dones):
        pass

    def compute(self, obs, actions, next_obs) -> np.ndarray:
        return np.zeros(len(actions))

    def update(self, obs, actions, next_obs) -> dict:
        return {}

    def state_dict(self) -> dict:
        return {}

    def load_state_dict(self, state: dict):
        pass

    def networks(self) -> dict:
        return {}


class NoIntrinsic(IntrinsicProvider):
    pass


class RE3(IntrinsicProvider):
    """k-NN distance reward in the latent space of a frozen random encoder.

    Each observed state is encoded once and stored, with its latent, in a
    FIFO buffer. A batch is scored against every latent in the buffer.
    """

    name = "re3"

    def __init__(self, cfg: IntrinsicConfig | None = None, capacity: int = 10000,
                 encoder_seed: int = 0, ledger=None, encoder_head: str = "none", init_gain: float = 1.0):
        self.cfg = cfg or IntrinsicConfig()
        self.encoder = RandomEncoder(encoder_seed, head=encoder_head, ledger=ledger, init_gain=init_gain)
        if ledger is not None:
            ledger.register(self.encoder.role, self.encoder.macs)
        self.buffer = ReplayBuffer(capacity, self.encoder.latent_dim)
        self.running_std = RunningStd()
        self._pending: list[np.ndarray] = []
        self.last_raw = np.zeros(0)

    def observe(self, obs, actions, next_obs, rewards, dones):
        latents = self.encoder.encode(obs)
        slots = self.buffer.push_batch(obs, actions, next_obs, rewards, dones, latents)
        self._pending.append(slots)

    def compute(self, obs, actions, next_obs) -> np.ndarray:
        slots = np.concatenate(self._pending) if self._pending else np.zeros(0, dtype=np.int64)
        self._pending = []
        if len(slots) != len(actions):
            raise RuntimeError(
                f"worker desync: {len(slots)} transitions observed but {len(actions)} to score"
            )
        if len(np.unique(slots)) != len(slots):
            raise RuntimeError("buffer capacity is smaller than one batch")
        r = batch_intrinsic_rewards(
            self.buffer.latents[slots], self.buffer.latent_pool(), self.cfg, self_index=slots
        )
        self.last_raw = r
        if self.cfg.normalize:
            return normalize(r, self.running_std)
        self.running_std.update(r)
        return r

    def state_dict(self) -> dict:
        return {"running_std": self.running_std.state_dict(), "encoder_seed": self.encoder.seed}

    def load_state_dict(self, state: dict):
        if "running_std" in state:
            self.running_std = RunningStd.from_state(state["running_std"])
