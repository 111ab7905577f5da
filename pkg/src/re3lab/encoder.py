"""Frozen random encoder and the latent-carrying replay buffer."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .gridworld import CHANNEL_MAX, VIEW
from .nn import Network

OBS_SHAPE = (VIEW, VIEW, 3)


def conv_stack_specs(in_channels: int = 3) -> list[dict]:
    """16/32/64-filter conv stack (kernel 2, stride 1, no padding), max-pool after the first ReLU."""
    return [
        {"kind": "conv2d", "in_channels": in_channels, "filters": 16, "kernel": 2, "stride": 1, "padding": 0},
        {"kind": "relu"},
        {"kind": "maxpool2d", "kernel": 2},
        {"kind": "conv2d", "in_channels": 16, "filters": 32, "kernel": 2, "stride": 1, "padding": 0},
        {"kind": "relu"},
        {"kind": "conv2d", "in_channels": 32, "filters": 64, "kernel": 2, "stride": 1, "padding": 0},
        {"kind": "relu"},
        {"kind": "flatten"},
    ]


def projection_head_specs(in_dim: int = 64, out_dim: int = 50) -> list[dict]:
    """Dense + LayerNorm + tanh head used by the image-control encoders."""
    return [
        {"kind": "dense", "in_dim": in_dim, "out_dim": out_dim},
        {"kind": "layernorm", "dim": out_dim},
        {"kind": "tanh"},
    ]


def preprocess(obs) -> np.ndarray:
    """Scale integer (object, color, state) channels into [0, 1]."""
    return np.asarray(obs, dtype=np.float32) / CHANNEL_MAX


INPUT_MODES = ("raw", "scaled")


def network_input(obs, mode: str = "raw") -> np.ndarray:
    """Input for learned networks: the integer channels as floats, or scaled like the encoder's."""
    if mode == "raw":
        return np.asarray(obs, dtype=np.float32)
    if mode == "scaled":
        return preprocess(obs)
    raise ValueError(f"unknown input mode {mode!r}")


class RandomEncoder:
    """Randomly initialized conv encoder whose weights never change.

    The parameter vector is marked read-only, so any accidental in-place
    update raises instead of silently drifting.
    """

    def __init__(self, seed: int = 0, head: str = "none", ledger=None, role: str = "random_encoder",
                 init_gain: float = 1.0):
        specs = conv_stack_specs()
        if head == "projection":
            specs = specs + projection_head_specs()
        elif head != "none":
            raise ValueError(f"unknown encoder head {head!r}")
        self.head = head
        self.net = Network(specs, OBS_SHAPE, seed=seed, init_gain=init_gain)
        self.net.freeze()
        self.seed = int(seed)
        self.latent_dim = int(self.net.output_shape[0])
        self.ledger = ledger
        self.role = role
        self._initial_digest = self.net.digest()

    def encode(self, obs) -> np.ndarray:
        """Latent for a single observation or a batch of them."""
        obs = np.asarray(obs)
        single = obs.ndim == 3
        batch = obs[None] if single else obs
        y = self.net.predict(preprocess(batch))
        if self.ledger is not None:
            self.ledger.forward(self.role, len(batch))
        return y[0] if single else y

    def digest(self) -> str:
        return self.net.digest()

    def is_unchanged(self) -> bool:
        return self.net.digest() == self._initial_digest

    @property
    def macs(self) -> int:
        return self.net.macs()


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------


@dataclass
class Transition:
    obs: np.ndarray
    action: int
    next_obs: np.ndarray
    reward: float
    done: bool
    latent: np.ndarray


@dataclass
class TransitionBatch:
    obs: np.ndarray
    actions: np.ndarray
    next_obs: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    latents: np.ndarray
    indices: np.ndarray

    def __len__(self):
        return len(self.actions)


class BufferUnderfullError(RuntimeError):
    pass


class ReplayBuffer:
    """Fixed-capacity FIFO ring of transitions, each stored with its latent."""

    def __init__(self, capacity: int, latent_dim: int, obs_shape=OBS_SHAPE):
        self.capacity = int(capacity)
        self.latent_dim = int(latent_dim)
        self.obs_shape = tuple(obs_shape)
        self.obs = np.zeros((self.capacity, *self.obs_shape), dtype=np.uint8)
        self.next_obs = np.zeros_like(self.obs)
        self.actions = np.zeros(self.capacity, dtype=np.int64)
        self.rewards = np.zeros(self.capacity, dtype=np.float32)
        self.dones = np.zeros(self.capacity, dtype=bool)
        self.latents = np.zeros((self.capacity, self.latent_dim), dtype=np.float32)
        self.cursor = 0
        self.size = 0

    def __len__(self):
        return self.size

    def push(self, t: Transition):
        """Store one transition; returns its slot index."""
        if t.latent is None or np.shape(t.latent) != (self.latent_dim,):
            raise ValueError(f"transition needs a latent of shape ({self.latent_dim},)")
        i = self.cursor
        self.obs[i] = t.obs
        self.next_obs[i] = t.next_obs
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.dones[i] = t.done
        self.latents[i] = t.latent
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def push_batch(self, obs, actions, next_obs, rewards, dones, latents) -> np.ndarray:
        """Vectorized ``push`` of n transitions (in order); returns their slots."""
        n = len(actions)
        if np.shape(latents) != (n, self.latent_dim):
            raise ValueError(f"expected latents of shape ({n}, {self.latent_dim})")
        if n > self.capacity:
            raise ValueError("batch larger than buffer capacity")
        idx = (self.cursor + np.arange(n)) % self.capacity
        self.obs[idx] = obs
        self.next_obs[idx] = next_obs
        self.actions[idx] = actions
        self.rewards[idx] = rewards
        self.dones[idx] = dones
        self.latents[idx] = latents
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)
        return idx

    def ordered_indices(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        start = (self.cursor - self.size) % self.capacity
        return (start + np.arange(self.size)) % self.capacity

    def __getitem__(self, i) -> Transition:
        """The ``i``-th oldest stored transition."""
        if not -self.size <= i < self.size:
            raise IndexError(i)
        slot = int(self.ordered_indices()[i])
        return self._transition(slot)

    def _transition(self, slot) -> Transition:
        return Transition(
            self.obs[slot].copy(), int(self.actions[slot]), self.next_obs[slot].copy(),
            float(self.rewards[slot]), bool(self.dones[slot]), self.latents[slot].copy(),
        )

    def latent_pool(self) -> np.ndarray:
        """All stored latents (slot order, not insertion order)."""
        return self.latents[: self.size] if self.size < self.capacity else self.latents

    def _check(self, batch):
        if batch > self.size:
            raise BufferUnderfullError(
                f"buffer holds {self.size} transitions but {batch} were requested; "
                "keep collecting (initial steps) before sampling"
            )

    def sample_batch(self, batch: int, rng) -> TransitionBatch:
        """Uniform sample without replacement, as arrays."""
        self._check(batch)
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        idx = rng.choice(self.size, size=batch, replace=False)
        return self.gather(idx)

    def gather(self, idx) -> TransitionBatch:
        idx = np.asarray(idx)
        return TransitionBatch(
            self.obs[idx], self.actions[idx], self.next_obs[idx], self.rewards[idx],
            self.dones[idx], self.latents[idx], idx,
        )

    def sample(self, batch: int, seed) -> list[Transition]:
        b = self.sample_batch(batch, seed)
        return [self._transition(int(s)) for s in b.indices]

    # -- binary dump ------------------------------------------------------

    _MAGIC = b"RE3BUF\x00\x00"

    def dump(self, path):
        """Manifest + transitions (oldest first) in little-endian binary."""
        order = self.ordered_indices()
        manifest = {
            "format_version": 1,
            "capacity": self.capacity,
            "size": self.size,
            "latent_dim": self.latent_dim,
            "obs_shape": list(self.obs_shape),
            "fields": ["obs:u1", "next_obs:u1", "action:<i8", "reward:<f4", "done:u1", "latent:<f4"],
        }
        header = json.dumps(manifest, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            fh.write(self.obs[order].tobytes())
            fh.write(self.next_obs[order].tobytes())
            fh.write(self.actions[order].astype("<i8").tobytes())
            fh.write(self.rewards[order].astype("<f4").tobytes())
            fh.write(self.dones[order].astype(np.uint8).tobytes())
            fh.write(self.latents[order].astype("<f4").tobytes())

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with open(path, "rb") as fh:
            data = fh.read()
        if not data.startswith(cls._MAGIC):
            raise ValueError(f"{path}: not a buffer dump")
        off = len(cls._MAGIC)
        (hlen,) = struct.unpack_from("<I", data, off)
        off += 4
        m = json.loads(data[off : off + hlen])
        off += hlen
        buf = cls(m["capacity"], m["latent_dim"], m["obs_shape"])
        n = m["size"]
        shp = (n, *buf.obs_shape)
        obs_bytes = int(np.prod(shp))

        def take(dtype, count, shape):
            nonlocal off
            arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(shape)
            off += arr.nbytes
            return arr

        obs = take(np.uint8, obs_bytes, shp)
        nxt = take(np.uint8, obs_bytes, shp)
        act = take("<i8", n, (n,))
        rew = take("<f4", n, (n,))
        done = take(np.uint8, n, (n,)).astype(bool)
        lat = take("<f4", n * buf.latent_dim, (n, buf.latent_dim))
        if n:
            buf.push_batch(obs, act, nxt, rew, done, lat)
        return buf
