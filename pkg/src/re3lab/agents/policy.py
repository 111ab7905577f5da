"""Policy and value networks for the gridworld agents."""

from __future__ import annotations

import numpy as np

from ..encoder import INPUT_MODES, OBS_SHAPE, conv_stack_specs, network_input
from ..gridworld import NUM_ACTIONS
from ..nn import ConfigurationError, Network, softmax

EMBED_DIM = 64


def head_specs(in_dim: int, hidden: int, out_dim: int) -> list[dict]:
    return [
        {"kind": "dense", "in_dim": in_dim, "out_dim": hidden},
        {"kind": "tanh"},
        {"kind": "dense", "in_dim": hidden, "out_dim": out_dim},
    ]


class ActorCritic:
    """Shared conv encoder feeding an actor head (logits) and a critic head (value)."""

    ROLES = ("policy_encoder", "policy_mlp")

    def __init__(self, seed: int = 0, n_actions: int = NUM_ACTIONS, hidden: int = 64, ledger=None,
                 dtype=np.float32, init_gain: float = 1.0, input_mode: str = "raw"):
        if input_mode not in INPUT_MODES:
            raise ConfigurationError(f"unknown input mode {input_mode!r}")
        self.input_mode = input_mode
        ss = np.random.SeedSequence([int(seed), 0xAC])
        s_enc, s_act, s_crit = (int(s.generate_state(1)[0]) for s in ss.spawn(3))
        self.seed = int(seed)
        self.encoder = Network(conv_stack_specs(), OBS_SHAPE, seed=s_enc, dtype=dtype, init_gain=init_gain)
        self.actor = Network(head_specs(EMBED_DIM, hidden, n_actions), (EMBED_DIM,), seed=s_act, dtype=dtype,
                             init_gain=init_gain)
        self.critic = Network(head_specs(EMBED_DIM, hidden, 1), (EMBED_DIM,), seed=s_crit, dtype=dtype,
                              init_gain=init_gain)
        self.n_actions = n_actions
        self.ledger = ledger
        if ledger is not None:
            ledger.register("policy_encoder", self.encoder.macs())
            ledger.register("policy_mlp", self.actor.macs() + self.critic.macs())

    def networks(self) -> dict[str, Network]:
        return {"actor": self.actor, "critic": self.critic, "policy_encoder": self.encoder}

    def load_networks(self, nets: dict[str, Network]):
        for name, net in self.networks().items():
            if name not in nets:
                raise ConfigurationError(f"checkpoint has no {name!r} network")
            net.copy_from(nets[name])

    @property
    def flats(self):
        return [n.flat for n in (self.encoder, self.actor, self.critic)]

    @property
    def grads(self):
        return [n.grad for n in (self.encoder, self.actor, self.critic)]

    def _count(self, n, backward=False):
        if self.ledger is not None:
            fn = self.ledger.backward if backward else self.ledger.forward
            fn("policy_encoder", n)
            fn("policy_mlp", n)

    def predict(self, obs):
        """``(logits, values)`` without recording activations."""
        z = self.encoder.predict(network_input(obs, self.input_mode))
        self._count(len(z))
        return self.actor.predict(z), self.critic.predict(z)[:, 0]

    def forward(self, obs):
        z = self.encoder.forward(network_input(obs, self.input_mode))
        self._count(len(z))
        return self.actor.forward(z), self.critic.forward(z)[:, 0]

    def backward(self, g_logits, g_values):
        g_z = self.actor.backward(g_logits) + self.critic.backward(np.asarray(g_values)[:, None])
        self.encoder.backward(g_z)
        self._count(len(g_z), backward=True)

    def probs(self, obs):
        return softmax(self.predict(obs)[0].astype(np.float64))

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for f in self.flats:
            h.update(f.tobytes())
        return h.hexdigest()


class QNetwork:
    """Conv encoder + MLP producing one Q-value per action."""

    def __init__(self, seed: int = 0, n_actions: int = NUM_ACTIONS, hidden: int = 64, ledger=None,
                 role: str = "q_network", init_gain: float = 1.0, input_mode: str = "raw"):
        if input_mode not in INPUT_MODES:
            raise ConfigurationError(f"unknown input mode {input_mode!r}")
        self.input_mode = input_mode
        specs = conv_stack_specs() + [
            {"kind": "dense", "in_dim": EMBED_DIM, "out_dim": hidden},
            {"kind": "relu"},
            {"kind": "dense", "in_dim": hidden, "out_dim": n_actions},
        ]
        self.net = Network(specs, OBS_SHAPE, seed=seed, init_gain=init_gain)
        self.ledger = ledger
        self.role = role
        if ledger is not None:
            ledger.register(role, self.net.macs())

    def _count(self, n, backward=False):
        if self.ledger is not None:
            (self.ledger.backward if backward else self.ledger.forward)(self.role, n)

    def predict(self, obs):
        self._count(len(obs))
        return self.net.predict(network_input(obs, self.input_mode))

    def forward(self, obs):
        self._count(len(obs))
        return self.net.forward(network_input(obs, self.input_mode))

    def backward(self, g):
        self._count(len(g), backward=True)
        self.net.backward(g)


def sample_actions(probs, rng) -> np.ndarray:
    """Inverse-CDF sampling, one uniform draw per row."""
    u = rng.random(len(probs))
    cdf = np.cumsum(probs, axis=1)
    a = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(a, probs.shape[1] - 1)
