"""RND and ICM intrinsic-reward providers.

Both reuse the gridworld conv stack as their encoder and follow the same
provider interface as :class:`re3lab.intrinsic.RE3`.
"""

from __future__ import annotations

import numpy as np

from .encoder import OBS_SHAPE, conv_stack_specs, preprocess
from .entropy import RunningStd, normalize
from .gridworld import NUM_ACTIONS
from .intrinsic import IntrinsicProvider
from .nn import Network, RMSprop, cross_entropy, log_softmax

LATENT_DIM = 64


def mlp_specs(in_dim: int, hidden: int, out_dim: int) -> list[dict]:
    return [
        {"kind": "dense", "in_dim": in_dim, "out_dim": hidden},
        {"kind": "relu"},
        {"kind": "dense", "in_dim": hidden, "out_dim": out_dim},
    ]


def _register(ledger, role, net):
    if ledger is not None:
        ledger.register(role, net.macs())


def _count(ledger, role, n, backward=False):
    if ledger is not None:
        (ledger.backward if backward else ledger.forward)(role, n)


class RND(IntrinsicProvider):
    """Reward = ``||f(s) - g(s)||`` between a frozen random target and a trained predictor."""

    name = "rnd"

    def __init__(self, seed: int = 0, hidden: int = 1024, lr: float = 1e-3, normalize: bool = False,
                 ledger=None, init_gain: float = 1.0):
        self.target = Network(conv_stack_specs(), OBS_SHAPE, seed=seed, init_gain=init_gain)
        self.target.freeze()
        self.predictor = Network(conv_stack_specs() + mlp_specs(LATENT_DIM, hidden, LATENT_DIM),
                                 OBS_SHAPE, seed=seed + 1, init_gain=init_gain)
        self.opt = RMSprop(lr=lr, alpha=0.99, eps=1e-8, max_grad_norm=None)
        self.normalize = normalize
        self.running_std = RunningStd()
        self.ledger = ledger
        _register(ledger, "rnd_target", self.target)
        _register(ledger, "rnd_predictor", self.predictor)

    def prediction_error(self, obs) -> np.ndarray:
        x = preprocess(obs)
        diff = self.predictor.predict(x) - self.target.predict(x)
        _count(self.ledger, "rnd_target", len(x))
        _count(self.ledger, "rnd_predictor", len(x))
        return np.sqrt((diff.astype(np.float64) ** 2).sum(axis=1))

    def compute(self, obs, actions, next_obs) -> np.ndarray:
        r = self.prediction_error(obs)
        if self.normalize:
            return normalize(r, self.running_std)
        self.running_std.update(r)
        return r

    def update(self, obs, actions=None, next_obs=None) -> dict:
        """One descent step on the batch mean of ``||f(s) - g(s)||^2``."""
        x = preprocess(obs)
        n = len(x)
        target = self.target.predict(x)
        diff = self.predictor.forward(x) - target
        loss = float((diff.astype(np.float64) ** 2).sum(axis=1).mean())
        self.predictor.backward(2.0 * diff / n)
        self.opt.step(self.predictor.flat, self.predictor.grad)
        _count(self.ledger, "rnd_target", n)
        _count(self.ledger, "rnd_predictor", n)
        _count(self.ledger, "rnd_predictor", n, backward=True)
        return {"rnd_loss": loss}

    def networks(self) -> dict:
        return {"rnd_target": self.target, "rnd_predictor": self.predictor}

    def state_dict(self) -> dict:
        return {"running_std": self.running_std.state_dict()}

    def load_state_dict(self, state: dict):
        if "running_std" in state:
            self.running_std = RunningStd.from_state(state["running_std"])


def icm_joint_loss(forward_loss, inverse_loss, forward_weight: float = 0.2):
    """``0.2 * L_forward + 0.8 * L_inverse`` (weights configurable)."""
    return forward_weight * forward_loss + (1.0 - forward_weight) * inverse_loss


class ICM(IntrinsicProvider):
    """Curiosity: reward is the forward-model error in a learned embedding.

    The embedding is trained by the joint forward/inverse objective. The
    inverse head classifies the taken action with softmax cross-entropy.
    """

    name = "icm"

    def __init__(self, seed: int = 0, hidden: int = 1024, lr: float = 1e-3,
                 forward_weight: float = 0.2, normalize: bool = False, ledger=None, init_gain: float = 1.0):
        self.encoder = Network(conv_stack_specs(), OBS_SHAPE, seed=seed, init_gain=init_gain)
        self.inverse = Network(mlp_specs(2 * LATENT_DIM, hidden, NUM_ACTIONS), (2 * LATENT_DIM,),
                               seed=seed + 1, init_gain=init_gain)
        self.forward_model = Network(mlp_specs(LATENT_DIM + NUM_ACTIONS, hidden, LATENT_DIM),
                                     (LATENT_DIM + NUM_ACTIONS,), seed=seed + 2, init_gain=init_gain)
        self.opt = RMSprop(lr=lr, alpha=0.99, eps=1e-8, max_grad_norm=None)
        self.forward_weight = forward_weight
        self.normalize = normalize
        self.running_std = RunningStd()
        self.ledger = ledger
        for role, net in self.networks().items():
            _register(ledger, role, net)

    @staticmethod
    def _one_hot(actions):
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        out = np.zeros((len(a), NUM_ACTIONS), dtype=np.float32)
        out[np.arange(len(a)), a] = 1.0
        return out

    def forward_errors(self, obs, actions, next_obs) -> np.ndarray:
        """Per-sample ``0.5 * ||g(s') - f(g(s), a)||^2``."""
        n = len(actions)
        z = self.encoder.predict(preprocess(np.concatenate([obs, next_obs])))
        z0, z1 = z[:n], z[n:]
        pred = self.forward_model.predict(np.concatenate([z0, self._one_hot(actions)], axis=1))
        _count(self.ledger, "icm_encoder", 2 * n)
        _count(self.ledger, "icm_forward", n)
        diff = (z1 - pred).astype(np.float64)
        return 0.5 * (diff * diff).sum(axis=1)

    def compute(self, obs, actions, next_obs) -> np.ndarray:
        r = self.forward_errors(obs, actions, next_obs)
        if self.normalize:
            return normalize(r, self.running_std)
        self.running_std.update(r)
        return r

    def update(self, obs, actions, next_obs) -> dict:
        n = len(actions)
        a = np.asarray(actions, dtype=np.int64).reshape(-1)
        z = self.encoder.forward(preprocess(np.concatenate([obs, next_obs])))
        z0, z1 = z[:n], z[n:]

        pred = self.forward_model.forward(np.concatenate([z0, self._one_hot(a)], axis=1))
        diff = pred - z1
        l_fwd = float(0.5 * (diff.astype(np.float64) ** 2).sum(axis=1).mean())
        logits = self.inverse.forward(np.concatenate([z0, z1], axis=1))
        l_inv, g_logits = cross_entropy(logits.astype(np.float64), a)

        w = self.forward_weight
        g_pred = w * diff / n
        g_in_fwd = self.forward_model.backward(g_pred)
        g_in_inv = self.inverse.backward(((1.0 - w) * g_logits).astype(np.float32))
        g_z0 = g_in_fwd[:, :LATENT_DIM] + g_in_inv[:, :LATENT_DIM]
        g_z1 = -g_pred + g_in_inv[:, LATENT_DIM:]
        self.encoder.backward(np.concatenate([g_z0, g_z1]))
        nets = [self.encoder, self.inverse, self.forward_model]
        self.opt.step([m.flat for m in nets], [m.grad for m in nets])

        for role, cnt in (("icm_encoder", 2 * n), ("icm_inverse", n), ("icm_forward", n)):
            _count(self.ledger, role, cnt)
            _count(self.ledger, role, cnt, backward=True)
        acc = float((log_softmax(logits).argmax(axis=1) == a).mean())
        return {"icm_forward_loss": l_fwd, "icm_inverse_loss": l_inv,
                "icm_loss": icm_joint_loss(l_fwd, l_inv, w), "icm_inverse_acc": acc}

    def networks(self) -> dict:
        return {"icm_encoder": self.encoder, "icm_inverse": self.inverse, "icm_forward": self.forward_model}

    def state_dict(self) -> dict:
        return {"running_std": self.running_std.state_dict()}

    def load_state_dict(self, state: dict):
        if "running_std" in state:
            self.running_std = RunningStd.from_state(state["running_std"])
