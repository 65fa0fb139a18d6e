"""Transfer-Maze and Transfer-CartPole environments, target and sources.

Both environments follow the same small protocol: ``reset() -> state`` and
``step(action) -> (state, reward, terminal, truncated)``. ``terminal`` marks
a true end of the task, ``truncated`` marks the roll-out cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from importlib import resources
from typing import Callable

import numpy as np

from .core import BadAction, grid_one_hot, make_rng

# ---------------------------------------------------------------------------
# Transfer-Maze
# ---------------------------------------------------------------------------

LEFT, UP, RIGHT, DOWN = range(4)
MOVES = {LEFT: (0, -1), UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0)}

WALL_PENALTY = -0.02
STEP_PENALTY = -0.01
GOAL_REWARD = 1.0

MAZE_LAYOUTS = {"maze": ("maze30.txt", "quadrants"), "maze-2room": ("maze10.txt", "halves")}


@dataclass
class MazeSpec:
    """Grid layout with a fixed start and goal.

    ``rooms`` holds a room id per cell. ``skeleton`` marks the walls shared
    by every source task: the outer boundary and the room partitions.
    """

    walls: np.ndarray
    start: int
    goal: int
    rooms: np.ndarray
    skeleton: np.ndarray
    max_steps: int = 300

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    @property
    def n_states(self) -> int:
        return self.walls.size

    @property
    def n_rooms(self) -> int:
        return int(self.rooms.max()) + 1

    def cell(self, row: int, col: int) -> int:
        return row * self.width + col

    def coords(self, cell: int) -> tuple[int, int]:
        return divmod(int(cell), self.width)

    def is_wall(self, cell: int) -> bool:
        return bool(self.walls.flat[cell])

    def free_cells(self) -> np.ndarray:
        return np.flatnonzero(~self.walls)

    def room_cells(self, room: int) -> np.ndarray:
        """Free interior cells of one room."""
        mask = (self.rooms == room) & ~self.walls & ~self.skeleton
        return np.flatnonzero(mask)

    def encode(self, cell: int) -> np.ndarray:
        return grid_one_hot(cell, self.width, self.height)

    def to_text(self) -> str:
        rows = []
        for r in range(self.height):
            line = []
            for c in range(self.width):
                k = self.cell(r, c)
                line.append("S" if k == self.start else "G" if k == self.goal
                            else "#" if self.walls[r, c] else ".")
            rows.append("".join(line))
        return "\n".join(rows) + "\n"

    def reachable(self, src: int | None = None) -> np.ndarray:
        """Cells reachable from ``src`` (default start) by breadth-first search."""
        seen = np.zeros(self.n_states, dtype=bool)
        src = self.start if src is None else src
        frontier = [src]
        seen[src] = True
        while frontier:
            nxt = []
            for k in frontier:
                for a in MOVES:
                    j, _, _ = maze_step(self, k, a)
                    if not seen[j]:
                        seen[j] = True
                        nxt.append(j)
            frontier = nxt
        return seen

    def shortest_path(self) -> int:
        """Length of the shortest start-to-goal path, or -1 when unreachable."""
        dist = {self.start: 0}
        frontier = [self.start]
        while frontier:
            nxt = []
            for k in frontier:
                if k == self.goal:
                    return dist[k]
                for a in MOVES:
                    j = _move(self, k, a)
                    if j not in dist:
                        dist[j] = dist[k] + 1
                        nxt.append(j)
            frontier = nxt
        return -1


def room_ids(height: int, width: int, partition: str) -> np.ndarray:
    rows, cols = np.indices((height, width))
    if partition == "quadrants":
        return (rows >= height // 2).astype(int) * 2 + (cols >= width // 2).astype(int)
    if partition == "halves":
        return (cols >= width // 2).astype(int)
    raise ValueError(f"unknown partition {partition!r}")


def parse_maze(text: str, partition: str = "quadrants", max_steps: int = 300) -> MazeSpec:
    """Parse a ``#``/``.``/``S``/``G`` grid. Partition lines sit at the half indices."""
    lines = [ln.rstrip("\n") for ln in text.strip().splitlines()]
    height, width = len(lines), len(lines[0])
    if any(len(ln) != width for ln in lines):
        raise ValueError("ragged maze text")
    walls = np.zeros((height, width), dtype=bool)
    start = goal = None
    for r, line in enumerate(lines):
        for c, ch in enumerate(line):
            if ch == "#":
                walls[r, c] = True
            elif ch == "S":
                start = r * width + c
            elif ch == "G":
                goal = r * width + c
            elif ch != ".":
                raise ValueError(f"bad maze character {ch!r} at {r},{c}")
    if start is None or goal is None:
        raise ValueError("maze needs one S and one G")
    rows, cols = np.indices((height, width))
    lines_mask = (rows == 0) | (cols == 0) | (rows == height - 1) | (cols == width - 1)
    lines_mask |= cols == width // 2
    if partition == "quadrants":
        lines_mask |= rows == height // 2
    spec = MazeSpec(walls, start, goal, room_ids(height, width, partition),
                    walls & lines_mask, max_steps)
    if not walls[0].all() or not walls[-1].all() or not walls[:, 0].all() or not walls[:, -1].all():
        raise ValueError("outer boundary must be wall")
    if not spec.reachable()[goal]:
        raise ValueError("goal not reachable from start")
    return spec


def load_maze(name: str = "maze", max_steps: int = 300) -> MazeSpec:
    """Load a bundled layout: ``maze`` (30x30, four rooms) or ``maze-2room`` (10x10)."""
    fname, partition = MAZE_LAYOUTS[name]
    text = resources.files("ctxfer.data").joinpath(fname).read_text()
    return parse_maze(text, partition, max_steps)


def source_maze(target: MazeSpec, room: int) -> MazeSpec:
    """Source task that reproduces the target's obstacles in one room only."""
    walls = target.skeleton | (target.walls & (target.rooms == room))
    return replace(target, walls=walls)


def _move(spec: MazeSpec, s: int, a: int) -> int:
    r, c = divmod(s, spec.width)
    dr, dc = MOVES[a]
    r2, c2 = r + dr, c + dc
    if not (0 <= r2 < spec.height and 0 <= c2 < spec.width) or spec.walls[r2, c2]:
        return s
    return r2 * spec.width + c2


def maze_step(spec: MazeSpec, s: int, a: int) -> tuple[int, float, bool]:
    """Deterministic maze transition: ``(next cell, reward, reached goal)``."""
    if a not in MOVES:
        raise BadAction(f"action {a!r} not in {{0,1,2,3}}")
    s2 = _move(spec, int(s), int(a))
    if s2 == s:
        return s, WALL_PENALTY, False
    if s2 == spec.goal:
        return s2, GOAL_REWARD, True
    return s2, STEP_PENALTY, False


class MazeEnv:
    n_actions = 4
    discrete = True

    def __init__(self, spec: MazeSpec, name: str = "maze"):
        self.spec = spec
        self.name = name
        self.state = spec.start
        self.t = 0

    @property
    def n_states(self) -> int:
        return self.spec.n_states

    @property
    def max_steps(self) -> int:
        return self.spec.max_steps

    @property
    def obs_dim(self) -> int:
        return self.spec.width + self.spec.height

    def encode(self, s) -> np.ndarray:
        return self.spec.encode(s)

    def reset(self, rng: np.random.Generator | None = None) -> int:
        self.state = self.spec.start
        self.t = 0
        return self.state

    def step(self, a: int):
        s2, r, terminal = maze_step(self.spec, self.state, a)
        self.state = s2
        self.t += 1
        return s2, r, terminal, (not terminal) and self.t >= self.spec.max_steps


# ---------------------------------------------------------------------------
# Transfer-CartPole
# ---------------------------------------------------------------------------

THETA_LIMIT = 12 * 2 * math.pi / 360
X_LIMIT = 2.4


def transfer_force(x: float) -> float:
    """Position-dependent push: ~75 on slippery patches, ~5 on rough ones."""
    c = math.cos(5.0 * x)
    return 35.0 * math.sqrt((1.0 + 36.0) / (1.0 + 36.0 * c * c)) * c + 40.0


def constant_force(value: float) -> Callable[[float], float]:
    def force(x: float) -> float:
        return value
    force.constant = value  # type: ignore[attr-defined]
    return force


# action -> signed fraction of F(x): full/half left, half/full right
ACTION_SCALE = (-1.0, -0.5, 0.5, 1.0)


@dataclass
class CartPoleSpec:
    gravity: float = 9.8
    cart_mass: float = 1.0
    pole_mass: float = 0.1
    half_length: float = 0.5
    dt: float = 0.02
    force_profile: Callable[[float], float] = field(default=transfer_force)
    init_x: float = 1.5
    init_other: float = 0.05
    max_steps: int = 500


def cartpole_force(spec: CartPoleSpec, x: float) -> float:
    return spec.force_profile(x)


def cartpole_step(spec: CartPoleSpec, s, a: int):
    """One semi-implicit Euler step. Returns ``(next state, reward, failed)``."""
    if a not in (0, 1, 2, 3):
        raise BadAction(f"action {a!r} not in {{0,1,2,3}}")
    x, x_dot, theta, theta_dot = (float(v) for v in s)
    force = ACTION_SCALE[a] * spec.force_profile(x)
    total_mass = spec.cart_mass + spec.pole_mass
    pml = spec.pole_mass * spec.half_length
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    temp = (force + pml * theta_dot * theta_dot * sin_t) / total_mass
    theta_acc = (spec.gravity * sin_t - cos_t * temp) / (
        spec.half_length * (4.0 / 3.0 - spec.pole_mass * cos_t * cos_t / total_mass))
    x_acc = temp - pml * theta_acc * cos_t / total_mass
    x_dot += spec.dt * x_acc
    x += spec.dt * x_dot
    theta_dot += spec.dt * theta_acc
    theta += spec.dt * theta_dot
    failed = abs(x) > X_LIMIT or abs(theta) > THETA_LIMIT
    return np.array([x, x_dot, theta, theta_dot]), 1.0, failed


class CartPoleEnv:
    n_actions = 4
    discrete = False
    obs_dim = 4

    def __init__(self, spec: CartPoleSpec | None = None, name: str = "cartpole",
                 rng: np.random.Generator | None = None):
        self.spec = spec or CartPoleSpec()
        self.name = name
        self.rng = rng if rng is not None else make_rng(0)
        self.state = np.zeros(4)
        self.t = 0

    @property
    def max_steps(self) -> int:
        return self.spec.max_steps

    def encode(self, s) -> np.ndarray:
        return np.asarray(s, dtype=np.float64)

    def reset(self, rng: np.random.Generator | None = None) -> np.ndarray:
        rng = rng or self.rng
        spec = self.spec
        s = rng.uniform(-spec.init_other, spec.init_other, size=4)
        s[0] = rng.uniform(-spec.init_x, spec.init_x)
        self.state = s
        self.t = 0
        return s.copy()

    def step(self, a: int):
        s2, r, failed = cartpole_step(self.spec, self.state, a)
        self.state = s2
        self.t += 1
        return s2.copy(), r, failed, (not failed) and self.t >= self.spec.max_steps


# ---------------------------------------------------------------------------
# Factories
# ---------------------------------------------------------------------------

ENV_IDS = ("maze", "maze-2room", "cartpole")


def make_env(env_id: str, rng: np.random.Generator | None = None):
    if env_id in MAZE_LAYOUTS:
        return MazeEnv(load_maze(env_id), env_id)
    if env_id == "cartpole":
        return CartPoleEnv(CartPoleSpec(), "cartpole", rng)
    raise ValueError(f"unknown env {env_id!r}")


def make_source_envs(task: str, rng: np.random.Generator | None = None) -> list:
    """Source environments: one per maze room, or the three CartPole variants."""
    if task in MAZE_LAYOUTS:
        target = load_maze(task)
        return [MazeEnv(source_maze(target, i), f"{task}-source{i + 1}")
                for i in range(target.n_rooms)]
    if task == "cartpole":
        base = CartPoleSpec()
        specs = [
            replace(base, force_profile=constant_force(5.0)),
            replace(base, force_profile=constant_force(75.0)),
            replace(base, force_profile=constant_force(20.0), half_length=2 * base.half_length),
        ]
        return [CartPoleEnv(spec, f"cartpole-source{i + 1}", rng) for i, spec in enumerate(specs)]
    raise ValueError(f"unknown task {task!r}")
