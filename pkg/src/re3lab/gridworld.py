"""Partially observable gridworlds: Empty-16x16, DoorKey-6x6, DoorKey-8x8.

Cells are stored in a ``(width, height, 3)`` uint8 array holding the same
(object, color, state) triples the observation uses. ``x`` indexes columns and
``y`` rows, with ``y`` growing downward. Headings: 0 east, 1 south, 2 west,
3 north.

Integer encodings (stable; observations depend on them):

========  ==  ========  ==  ======  ==
object    id  color     id  state   id
========  ==  ========  ==  ======  ==
unseen    0   red       0   open    0
empty     1   green     1   closed  1
wall      2   blue      2   locked  2
floor     3   purple    3
door      4   yellow    4
key       5   grey      5
ball      6
box       7
goal      8
lava      9
agent     10
========  ==  ========  ==  ======  ==
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .nn import UsageError

OBJECT_TO_IDX = {
    "unseen": 0, "empty": 1, "wall": 2, "floor": 3, "door": 4, "key": 5,
    "ball": 6, "box": 7, "goal": 8, "lava": 9, "agent": 10,
}
COLOR_TO_IDX = {"red": 0, "green": 1, "blue": 2, "purple": 3, "yellow": 4, "grey": 5}
STATE_TO_IDX = {"open": 0, "closed": 1, "locked": 2}

UNSEEN, EMPTY, WALL, DOOR, KEY, GOAL = 0, 1, 2, 4, 5, 8
OPEN, CLOSED, LOCKED = 0, 1, 2
YELLOW, GREEN, GREY = 4, 1, 5

# Largest id per channel; used to scale observations into [0, 1].
CHANNEL_MAX = np.array([10, 5, 2], dtype=np.float32)

VIEW = 7
NUM_ACTIONS = 7

DIR_TO_VEC = ((1, 0), (0, 1), (-1, 0), (0, -1))


class Action(enum.IntEnum):
    turn_left = 0
    turn_right = 1
    forward = 2
    pickup = 3
    drop = 4
    toggle = 5
    done_noop = 6


class Task(str, enum.Enum):
    Empty16 = "Empty16"
    DoorKey6 = "DoorKey6"
    DoorKey8 = "DoorKey8"

    @property
    def size(self) -> int:
        return {"Empty16": 16, "DoorKey6": 6, "DoorKey8": 8}[self.value]

    @property
    def max_steps(self) -> int:
        n = self.size
        return 4 * n * n if self is Task.Empty16 else 10 * n * n


TASK_ALIASES = {
    "Empty16": Task.Empty16, "Empty-16x16": Task.Empty16, "empty16": Task.Empty16,
    "DoorKey6": Task.DoorKey6, "DoorKey-6x6": Task.DoorKey6, "doorkey6": Task.DoorKey6,
    "DoorKey8": Task.DoorKey8, "DoorKey-8x8": Task.DoorKey8, "doorkey8": Task.DoorKey8,
}


def parse_task(name) -> Task:
    if isinstance(name, Task):
        return name
    try:
        return TASK_ALIASES[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; expected one of {sorted(t.value for t in Task)}") from None


def _view_offsets():
    # For heading d, view cell (i, j) sits at agent + f*(6 - j) + r*(i - 3),
    # where f is the heading vector and r points to the agent's right.
    out = []
    ii, jj = np.meshgrid(np.arange(VIEW), np.arange(VIEW), indexing="ij")
    for fx, fy in DIR_TO_VEC:
        rx, ry = -fy, fx
        dx = fx * (VIEW - 1 - jj) + rx * (ii - VIEW // 2)
        dy = fy * (VIEW - 1 - jj) + ry * (ii - VIEW // 2)
        out.append((dx, dy))
    return out


_VIEW_OFFSETS = _view_offsets()


@lru_cache(maxsize=1 << 16)
def _visibility(opaque_bits: bytes) -> np.ndarray:
    """Visible-cell mask for a 7x7 view given its packed opacity bits."""
    opaque = np.unpackbits(np.frombuffer(opaque_bits, dtype=np.uint8))[: VIEW * VIEW]
    opaque = opaque.reshape(VIEW, VIEW).astype(bool).tolist()
    mask = [[False] * VIEW for _ in range(VIEW)]
    mask[VIEW // 2][VIEW - 1] = True
    for j in reversed(range(VIEW)):
        for i in range(VIEW - 1):
            if not mask[i][j] or opaque[i][j]:
                continue
            mask[i + 1][j] = True
            if j > 0:
                mask[i + 1][j - 1] = True
                mask[i][j - 1] = True
        for i in reversed(range(1, VIEW)):
            if not mask[i][j] or opaque[i][j]:
                continue
            mask[i - 1][j] = True
            if j > 0:
                mask[i - 1][j - 1] = True
                mask[i][j - 1] = True
    res = np.array(mask, dtype=bool)
    res.setflags(write=False)
    return res


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    done: bool
    step_count: int
    success: bool = False


class GridWorld:
    """One environment instance. Not thread-safe; use one per worker."""

    def __init__(self, task="Empty16", max_steps: int | None = None):
        self.task = parse_task(task)
        self.width = self.height = self.task.size
        self.max_steps = int(max_steps) if max_steps is not None else self.task.max_steps
        self.rng = np.random.default_rng()
        self.cells = np.zeros((self.width, self.height, 3), dtype=np.uint8)
        self.agent_pos = (1, 1)
        self.agent_dir = 0
        self.carrying: tuple[int, int, int] | None = None
        self.step_count = 0
        self.done = True

    # -- layout -----------------------------------------------------------

    def _empty_grid(self):
        c = self.cells
        c[...] = (EMPTY, 0, 0)
        c[0, :] = c[-1, :] = (WALL, GREY, 0)
        c[:, 0] = c[:, -1] = (WALL, GREY, 0)

    def _free(self, x, y):
        return self.cells[x, y, 0] == EMPTY and (x, y) != self.agent_pos

    def _place_random(self, x0, y0, w, h):
        while True:
            x = int(self.rng.integers(x0, x0 + w))
            y = int(self.rng.integers(y0, y0 + h))
            if self._free(x, y):
                return x, y

    def _gen_grid(self):
        w, h = self.width, self.height
        self._empty_grid()
        self.cells[w - 2, h - 2] = (GOAL, GREEN, 0)
        if self.task is Task.Empty16:
            self.agent_pos, self.agent_dir = (1, 1), 0
            return
        split = int(self.rng.integers(2, w - 2))
        self.cells[split, :] = (WALL, GREY, 0)
        self.agent_pos = (-1, -1)
        self.agent_pos = self._place_random(0, 0, split, h)
        self.agent_dir = int(self.rng.integers(0, 4))
        door = int(self.rng.integers(1, w - 2))
        self.cells[split, door] = (DOOR, YELLOW, LOCKED)
        kx, ky = self._place_random(0, 0, split, h)
        self.cells[kx, ky] = (KEY, YELLOW, 0)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self.rng = np.random.default_rng(seed)
        self.carrying = None
        self.step_count = 0
        self.done = False
        self._gen_grid()
        return self.observation()

    # -- observation --------------------------------------------------------

    def observation(self) -> np.ndarray:
        dx, dy = _VIEW_OFFSETS[self.agent_dir]
        xs = dx + self.agent_pos[0]
        ys = dy + self.agent_pos[1]
        inside = (xs >= 0) & (xs < self.width) & (ys >= 0) & (ys < self.height)
        view = np.zeros((VIEW, VIEW, 3), dtype=np.uint8)
        view[inside] = self.cells[xs[inside], ys[inside]]
        t = view[..., 0]
        opaque = (t == WALL) | (t == UNSEEN) | ((t == DOOR) & (view[..., 2] != OPEN))
        vis = _visibility(np.packbits(opaque).tobytes())
        view[~vis] = 0
        agent_cell = self.carrying if self.carrying is not None else (EMPTY, 0, 0)
        view[VIEW // 2, VIEW - 1] = agent_cell
        return view

    # -- dynamics -----------------------------------------------------------

    @property
    def front_pos(self):
        fx, fy = DIR_TO_VEC[self.agent_dir]
        return self.agent_pos[0] + fx, self.agent_pos[1] + fy

    def step(self, action) -> StepResult:
        if self.done:
            raise UsageError("step called on a finished episode; call reset first")
        action = int(action)
        self.step_count += 1
        reward = 0.0
        success = False
        x, y = self.front_pos
        cell = self.cells[x, y]
        kind = int(cell[0])

        if action == Action.turn_left:
            self.agent_dir = (self.agent_dir - 1) % 4
        elif action == Action.turn_right:
            self.agent_dir = (self.agent_dir + 1) % 4
        elif action == Action.forward:
            if kind in (EMPTY, GOAL) or (kind == DOOR and cell[2] == OPEN):
                self.agent_pos = (x, y)
                if kind == GOAL:
                    success = True
                    reward = 1.0 - 0.9 * (self.step_count / self.max_steps)
        elif action == Action.pickup:
            if kind == KEY and self.carrying is None:
                self.carrying = tuple(int(v) for v in cell)
                self.cells[x, y] = (EMPTY, 0, 0)
        elif action == Action.drop:
            if kind == EMPTY and self.carrying is not None:
                self.cells[x, y] = self.carrying
                self.carrying = None
        elif action == Action.toggle:
            if kind == DOOR:
                state = int(cell[2])
                if state == LOCKED:
                    c = self.carrying
                    if c is not None and c[0] == KEY and c[1] == cell[1]:
                        cell[2] = OPEN
                else:
                    cell[2] = CLOSED if state == OPEN else OPEN
        elif action == Action.done_noop:
            pass
        else:
            raise ValueError(f"invalid action {action}")

        self.done = success or self.step_count >= self.max_steps
        return StepResult(self.observation(), reward, self.done, self.step_count, success)

    # -- text I/O -------------------------------------------------------------

    def render(self) -> str:
        """ASCII picture, one character per cell."""
        rows = []
        for y in range(self.height):
            row = []
            for x in range(self.width):
                if (x, y) == self.agent_pos:
                    row.append(">v<^"[self.agent_dir])
                else:
                    row.append(_cell_char(self.cells[x, y]))
            rows.append("".join(row))
        return "\n".join(rows)

    def dump_layout(self) -> str:
        """Plain-text snapshot that ``load_layout`` restores exactly."""
        under = _cell_char(self.cells[self.agent_pos])
        carry = _cell_char(self.carrying) if self.carrying is not None else "-"
        header = (
            f"task={self.task.value} step={self.step_count} max_steps={self.max_steps} "
            f"carrying={carry} under={under}"
        )
        return header + "\n" + self.render() + "\n"

    @classmethod
    def load_layout(cls, text: str) -> "GridWorld":
        lines = text.rstrip("\n").split("\n")
        meta = dict(tok.split("=", 1) for tok in lines[0].split())
        env = cls(meta["task"], max_steps=int(meta["max_steps"]))
        rows = lines[1:]
        if len(rows) != env.height or any(len(r) != env.width for r in rows):
            raise ValueError("layout size does not match task")
        for y, row in enumerate(rows):
            for x, ch in enumerate(row):
                if ch in ">v<^":
                    env.agent_pos = (x, y)
                    env.agent_dir = ">v<^".index(ch)
                    env.cells[x, y] = _char_cell(meta.get("under", "."))
                else:
                    env.cells[x, y] = _char_cell(ch)
        carry = meta.get("carrying", "-")
        env.carrying = None if carry == "-" else tuple(int(v) for v in _char_cell(carry))
        env.step_count = int(meta.get("step", 0))
        env.done = False
        return env


_CHARS = {
    (EMPTY, 0, 0): ".",
    (WALL, GREY, 0): "#",
    (GOAL, GREEN, 0): "G",
    (KEY, YELLOW, 0): "K",
    (DOOR, YELLOW, LOCKED): "L",
    (DOOR, YELLOW, CLOSED): "D",
    (DOOR, YELLOW, OPEN): "O",
}
_FROM_CHARS = {v: k for k, v in _CHARS.items()}


def _cell_char(cell) -> str:
    return _CHARS.get(tuple(int(v) for v in cell), "?")


def _char_cell(ch: str):
    try:
        return _FROM_CHARS[ch]
    except KeyError:
        raise ValueError(f"unknown layout character {ch!r}") from None


class VecEnv:
    """``n`` independent environments stepped in lockstep, auto-resetting.

    Worker ``i`` draws its layouts from its own RNG stream, seeded from
    ``(seed, i)``, so results do not depend on how workers are scheduled.
    """

    def __init__(self, task, n: int, seed: int, max_steps: int | None = None):
        self.task = parse_task(task)
        self.envs = [GridWorld(self.task, max_steps) for _ in range(n)]
        seeds = np.random.SeedSequence([int(seed), 0x6772]).spawn(n)
        self.obs = np.stack([env.reset(seed=s.generate_state(1)[0]) for env, s in zip(self.envs, seeds)])
        self.episode_returns = np.zeros(n)

    @property
    def n(self):
        return len(self.envs)

    def step(self, actions):
        """Returns ``(obs_before_reset, next_obs, rewards, dones, finished_returns)``.

        ``obs_before_reset`` is the true successor state; ``next_obs`` is what
        the policy sees next (a fresh reset for workers that just finished).
        """
        n = self.n
        succ = np.empty_like(self.obs)
        rewards = np.zeros(n)
        dones = np.zeros(n, dtype=bool)
        finished = []
        for i, (env, a) in enumerate(zip(self.envs, actions)):
            res = env.step(a)
            succ[i] = res.observation
            rewards[i] = res.reward
            dones[i] = res.done
            self.episode_returns[i] += res.reward
            if res.done:
                finished.append(self.episode_returns[i])
                self.episode_returns[i] = 0.0
                self.obs[i] = env.reset()
            else:
                self.obs[i] = res.observation
        return succ, self.obs.copy(), rewards, dones, finished
