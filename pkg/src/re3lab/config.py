"""Run configuration: dataclass sections plus a plain-text ``key = value`` format.

Grammar (one statement per line)::

    # comment            blank lines and lines starting with '#' are ignored
    key = value          top-level key, e.g. ``task = DoorKey8``
    section.key = value  sectioned key, e.g. ``intrinsic.provider = re3``

Values are parsed by the declared field type: ints, floats (``1e-5`` is
fine), booleans (``true``/``false``), strings, and ``auto`` for fields whose
default is chosen from the task/provider tables at build time. Unknown keys
and duplicated keys are rejected. ``serialize`` writes every field in a fixed
order, so parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field

from .agents.a2c import A2CConfig
from .agents.dqn import DQNConfig
from .entropy import IntrinsicVariant
from .gridworld import Task, parse_task
from .nn import ConfigurationError

AUTO = "auto"
PROVIDERS = ("re3", "rnd", "icm", "none")
ALGOS = ("a2c", "dqn")

# Exploration weight beta_0 per (task, method); "pt" is fine-tuning after pretraining.
BETA_TABLE = {
    Task.Empty16: {"re3": 0.1, "pt": 0.1, "icm": 1e-5, "rnd": 5e-5},
    Task.DoorKey6: {"re3": 0.005, "pt": 0.05, "icm": 1e-4, "rnd": 1e-4},
    Task.DoorKey8: {"re3": 0.01, "pt": 0.05, "icm": 1e-3, "rnd": 5e-5},
}
EVAL_EVERY = {Task.Empty16: 6400, Task.DoorKey6: 12800, Task.DoorKey8: 64000}
TOTAL_STEPS = {Task.Empty16: 500_000, Task.DoorKey6: 600_000, Task.DoorKey8: 2_400_000}
BETA_GRID = (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 0.1)


@dataclass
class IntrinsicSection:
    provider: str = "re3"
    variant: str = IntrinsicVariant.log1p_avg_k.value
    k: int = 3
    normalize: bool = False
    exclude_self: bool = True
    avg_from: int = 1
    beta0: float | None = None      # auto: per-task table
    rho: float = 0.0
    capacity: int = 10000
    encoder_seed: int | None = None  # auto: derived from the master seed
    encoder_head: str = "none"
    hidden: int = 1024              # RND/ICM MLP width
    lr: float = 1e-3                # RND/ICM optimizer
    pretrained: bool = False        # selects the fine-tuning beta column


@dataclass
class EvalSection:
    every: int | None = None        # auto: per-task table
    episodes: int = 100
    greedy: bool = True


@dataclass
class PretrainSection:
    task: str = "Empty16"
    steps: int = 100_000
    beta0: float = 1.0


@dataclass
class CheckpointSection:
    init: str = ""                  # checkpoint to start from (finetune)
    name: str = "final.ckpt"


@dataclass
class RunConfig:
    task: str = "Empty16"
    algo: str = "a2c"
    seed: int = 0
    env_seed: int | None = None     # auto: master seed
    net_seed: int | None = None     # auto: master seed
    total_steps: int | None = None  # auto: per-task budget
    step_unit: str = "summed"       # or "per_worker"
    max_steps: int | None = None    # episode limit; auto: task default
    deterministic: bool = True
    init_gain: float = 1.0          # weights ~ U(+-init_gain/sqrt(fan_in)) in every network
    policy_input: str = "raw"       # policy/Q-network input: raw integer channels or "scaled" to [0, 1]
    out_dir: str = "runs/default"
    intrinsic: IntrinsicSection = field(default_factory=IntrinsicSection)
    a2c: A2CConfig = field(default_factory=A2CConfig)
    dqn: DQNConfig = field(default_factory=DQNConfig)
    eval: EvalSection = field(default_factory=EvalSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    checkpoint: CheckpointSection = field(default_factory=CheckpointSection)

    # ---- resolved views -------------------------------------------------
    @property
    def task_enum(self) -> Task:
        return parse_task(self.task)

    def resolved_beta0(self) -> float:
        if self.intrinsic.beta0 is not None:
            return self.intrinsic.beta0
        if self.intrinsic.provider == "none":
            return 0.0
        col = "pt" if self.intrinsic.pretrained and self.intrinsic.provider == "re3" else self.intrinsic.provider
        return BETA_TABLE[self.task_enum][col]

    def resolved_eval_every(self) -> int:
        return self.eval.every if self.eval.every is not None else EVAL_EVERY[self.task_enum]

    def step_budget(self) -> int:
        """Total environment steps, summed over workers."""
        n = self.total_steps if self.total_steps is not None else TOTAL_STEPS[self.task_enum]
        if self.step_unit == "per_worker" and self.algo == "a2c":
            n *= self.a2c.n_workers
        return n

    @property
    def env_seed_value(self) -> int:
        return self.seed if self.env_seed is None else self.env_seed

    @property
    def net_seed_value(self) -> int:
        return self.seed if self.net_seed is None else self.net_seed

    @property
    def encoder_seed_value(self) -> int:
        return self.net_seed_value + 7919 if self.intrinsic.encoder_seed is None else self.intrinsic.encoder_seed

    def validate(self) -> "RunConfig":
        def bad(key, msg):
            raise ConfigurationError(f"{key}: {msg}")

        try:
            parse_task(self.task)
        except ValueError as e:
            bad("task", str(e))
        try:
            parse_task(self.pretrain.task)
        except ValueError as e:
            bad("pretrain.task", str(e))
        if self.algo not in ALGOS:
            bad("algo", f"expected one of {ALGOS}, got {self.algo!r}")
        if self.intrinsic.provider not in PROVIDERS:
            bad("intrinsic.provider", f"expected one of {PROVIDERS}, got {self.intrinsic.provider!r}")
        if self.algo == "dqn" and self.intrinsic.provider not in ("re3", "none"):
            bad("intrinsic.provider", "the off-policy loop supports re3 or none")
        if self.step_unit not in ("summed", "per_worker"):
            bad("step_unit", "expected summed or per_worker")
        try:
            IntrinsicVariant(self.intrinsic.variant)
        except ValueError:
            bad("intrinsic.variant", f"unknown variant {self.intrinsic.variant!r}")
        if self.intrinsic.k < 1:
            bad("intrinsic.k", "must be >= 1")
        if self.intrinsic.avg_from not in (1, 2):
            bad("intrinsic.avg_from", "must be 1 or 2")
        if self.intrinsic.encoder_head not in ("none", "projection"):
            bad("intrinsic.encoder_head", "expected none or projection")
        if self.intrinsic.beta0 is not None and self.intrinsic.beta0 < 0:
            bad("intrinsic.beta0", "must be >= 0")
        if not 0.0 <= self.intrinsic.rho < 1.0:
            bad("intrinsic.rho", "must be in [0, 1)")
        if self.intrinsic.capacity < 1:
            bad("intrinsic.capacity", "must be >= 1")
        if self.algo == "a2c" and self.intrinsic.provider == "re3" and self.intrinsic.capacity < self.a2c.batch_size:
            bad("intrinsic.capacity", f"must hold one rollout batch ({self.a2c.batch_size})")
        for key in ("a2c.n_workers", "a2c.rollout_len", "eval.episodes", "dqn.batch_size"):
            if _get(self, key) < 1:
                bad(key, "must be >= 1")
        if self.a2c.lr <= 0 or self.dqn.lr <= 0:
            bad("a2c.lr" if self.a2c.lr <= 0 else "dqn.lr", "must be > 0")
        if self.eval.every is not None and self.eval.every < 1:
            bad("eval.every", "must be >= 1")
        if self.policy_input not in ("raw", "scaled"):
            bad("policy_input", "expected raw or scaled")
        if not self.init_gain > 0:
            bad("init_gain", "must be > 0")
        if self.total_steps is not None and self.total_steps < 0:
            bad("total_steps", "must be >= 0")
        return self


# ---- text format ---------------------------------------------------------

SECTIONS = ("intrinsic", "a2c", "dqn", "eval", "pretrain", "checkpoint")


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def keys() -> list[str]:
    """Every accepted key, in serialization order."""
    out = []
    for f in dataclasses.fields(RunConfig):
        if f.name in SECTIONS:
            out.extend(f"{f.name}.{g.name}" for g in dataclasses.fields(_hints(RunConfig)[f.name]))
        else:
            out.append(f.name)
    return out


def _owner(cfg, key):
    parts = key.split(".")
    if len(parts) == 1:
        return cfg, parts[0]
    if len(parts) == 2 and parts[0] in SECTIONS:
        return getattr(cfg, parts[0]), parts[1]
    raise ConfigurationError(f"{key}: unknown key")


def _get(cfg, key):
    obj, name = _owner(cfg, key)
    return getattr(obj, name)


def _coerce(key: str, raw: str, hint):
    raw = raw.strip()
    optional = typing.get_origin(hint) in (typing.Union, types.UnionType) and type(None) in typing.get_args(hint)
    base = next(a for a in typing.get_args(hint) if a is not type(None)) if optional else hint
    if optional and raw == AUTO:
        return None
    try:
        if base is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if base is int:
            v = float(raw) if any(c in raw for c in ".eE") else int(raw)
            if isinstance(v, float):
                if not v.is_integer():
                    raise ValueError(raw)
                v = int(v)
            return v
        if base is float:
            return float(raw)
        if base is str:
            return raw
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {raw!r} as {base.__name__}") from None
    raise ConfigurationError(f"{key}: unsupported field type {hint}")


def set_value(cfg: RunConfig, key: str, raw: str):
    obj, name = _owner(cfg, key)
    hints = _hints(type(obj))
    if name not in hints or name in SECTIONS:
        raise ConfigurationError(f"{key}: unknown key")
    setattr(obj, name, _coerce(key, raw, hints[name]))


def _format(v) -> str:
    if v is None:
        return AUTO
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse(text: str, overrides: typing.Iterable[str] = ()) -> RunConfig:
    """Parse config text, then apply ``key=value`` overrides in order."""
    cfg = RunConfig()
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {s!r}")
        key, val = (p.strip() for p in s.split("=", 1))
        if key in seen:
            raise ConfigurationError(f"{key}: duplicated on line {lineno}")
        seen.add(key)
        set_value(cfg, key, val)
    for ov in overrides:
        if "=" not in ov:
            raise ConfigurationError(f"override {ov!r}: expected key=value")
        key, val = ov.split("=", 1)
        set_value(cfg, key.strip(), val)
    return cfg.validate()


def serialize(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(_get(cfg, k))}\n" for k in keys())


def load(path, overrides=()) -> RunConfig:
    with open(path) as fh:
        return parse(fh.read(), overrides)
