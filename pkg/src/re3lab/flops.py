"""FLOP accounting for network passes and k-NN distance work.

Conventions: a forward pass costs one multiply-add per weight use, and a
backward pass costs twice its forward pass. The ledger only counts network
passes; k-NN distance work is reported separately by ``distance_flops``.
"""

from __future__ import annotations

from collections import defaultdict


def flops_per_iteration(E: int, M: int, b: int, F: int, B: int) -> int:
    """Cost of one training iteration: ``bF(E+M) + 2bB(E+M) + (E+M)``.

    ``E``/``M`` are per-sample forward costs of the encoder and MLP layers,
    ``b`` the batch size, ``F``/``B`` forward/backward passes per update. The
    trailing ``E+M`` is the single forward pass that picks the action.
    """
    for name, v in (("E", E), ("M", M), ("b", b), ("F", F), ("B", B)):
        if v < 0:
            raise ValueError(f"{name} must be >= 0")
    em = E + M
    return b * F * em + 2 * b * B * em + em


def distance_flops(m: int, buffer_cap: int, d: int, start: int = 1000, stop: int = 250000) -> int:
    """FLOPs for distances between a size-``m`` batch and the whole buffer.

    Sums ``d(2m + 2c + 3mc) + 2mc`` with ``c = min(n, buffer_cap)`` over
    training steps ``n`` in ``[start, stop]`` (inclusive); empty if
    ``start > stop``.
    """
    total = 0
    for n in range(start, stop + 1):
        c = min(n, buffer_cap)
        total += d * (2 * m + 2 * c + 3 * m * c) + 2 * m * c
    return total


REFERENCE_SCHEDULE = {"m": 512, "buffer_cap": 100000, "d": 50, "start": 1000, "stop": 250000}


class FlopLedger:
    """Counts forward/backward samples per network role.

    ``register(role, cost)`` sets the per-sample forward cost of a role;
    ``forward(role, n)`` / ``backward(role, n)`` record ``n`` samples.
    """

    def __init__(self):
        self.costs: dict[str, int] = {}
        self.fwd: dict[str, int] = defaultdict(int)
        self.bwd: dict[str, int] = defaultdict(int)

    def register(self, role: str, cost: int):
        if role in self.costs and self.costs[role] != cost:
            raise ValueError(f"role {role!r} already registered with a different cost")
        self.costs[role] = int(cost)

    def forward(self, role: str, n: int = 1):
        if role not in self.costs:
            raise KeyError(f"unregistered role {role!r}")
        self.fwd[role] += int(n)

    def backward(self, role: str, n: int = 1):
        if role not in self.costs:
            raise KeyError(f"unregistered role {role!r}")
        self.bwd[role] += int(n)

    def role_total(self, role: str) -> int:
        c = self.costs[role]
        return c * self.fwd[role] + 2 * c * self.bwd[role]

    @property
    def total(self) -> int:
        return sum(self.role_total(r) for r in self.costs)

    def counts(self) -> dict:
        return {r: {"cost": self.costs[r], "forward": self.fwd[r], "backward": self.bwd[r]}
                for r in sorted(self.costs)}

    def state_dict(self) -> dict:
        return self.counts()

    @classmethod
    def from_state(cls, state: dict) -> "FlopLedger":
        led = cls()
        for role, c in state.items():
            led.register(role, c["cost"])
            led.fwd[role] = c["forward"]
            led.bwd[role] = c["backward"]
        return led
