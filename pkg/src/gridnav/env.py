"""Procedural grid scenes, egocentric observations and episode dynamics.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row; row 0 is
the top of the grid, so heading ``N`` decreases ``y``. Cells hold 1 when
blocked and 0 when walkable.

Actions are integers: ``STOP=0``, ``FORWARD=1``, ``TURN_LEFT=2``,
``TURN_RIGHT=3``. Headings are ``N=0, E=1, S=2, W=3`` so a right turn is
``+1 mod 4``.
"""
from __future__ import annotations

import json
import math
import random
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Iterator

import numpy as np

STOP, FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2, 3
ACTIONS = ("stop", "forward", "turn_left", "turn_right")
N_ACTIONS = 4

N, E, S, W = 0, 1, 2, 3
HEADINGS = "NESW"
# unit step per heading, (dx, dy)
DIRS = ((0, -1), (1, 0), (0, 1), (-1, 0))

STYLES = ("maze", "rooms", "open")
SCENE_FORMAT_VERSION = 1
MAX_GENERATION_ATTEMPTS = 16


class SceneError(ValueError):
    """Invalid scene construction request (dimensions, style, params)."""


class ConnectivityError(RuntimeError):
    """Generator could not produce a connected scene within its retry budget."""


class SpecMismatchError(ValueError):
    pass


class UnreachableGoalError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    patch_size: int = 5
    success_radius: float = 0.0
    max_steps: int = 200
    max_collisions: int = 40
    success_reward: float = 2.5
    time_penalty: float = -0.0001
    # 0 removes the d_{t-1} - d_t progress term (shaping ablation)
    shaping_weight: float = 1.0
    min_start_distance: int = 4

    def __post_init__(self) -> None:
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError(f"patch_size must be odd and positive, got {self.patch_size}")
        if self.max_steps < 1 or self.max_collisions < 1:
            raise ValueError("max_steps and max_collisions must be positive")


@dataclass(frozen=True, eq=False)
class Scene:
    scene_id: str
    seed: int
    width: int
    height: int
    cells: np.ndarray  # (height, width) uint8, 1 = blocked
    style: str = "maze"
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        cells = np.ascontiguousarray(self.cells, dtype=np.uint8)
        if cells.shape != (self.height, self.width):
            raise SceneError(f"cells shape {cells.shape} != {(self.height, self.width)}")
        cells.setflags(write=False)
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "_fields", {})

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Scene):
            return NotImplemented
        return (
            self.scene_id == other.scene_id
            and self.seed == other.seed
            and self.width == other.width
            and self.height == other.height
            and self.style == other.style
            and self.params == other.params
            and np.array_equal(self.cells, other.cells)
        )

    __hash__ = None  # type: ignore[assignment]

    def in_bounds(self, x: int, y: int) -> bool:
        return 0 <= x < self.width and 0 <= y < self.height

    def walkable(self, x: int, y: int) -> bool:
        return self.in_bounds(x, y) and self.cells[y, x] == 0

    def walkable_cells(self) -> list[tuple[int, int]]:
        ys, xs = np.nonzero(self.cells == 0)
        return sorted(zip(xs.tolist(), ys.tolist()), key=lambda c: (c[1], c[0]))

    @property
    def diameter(self) -> float:
        """Euclidean length of the grid diagonal; normalizes goal distances."""
        return math.hypot(self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "format": "gridnav.scene",
            "version": SCENE_FORMAT_VERSION,
            "scene_id": self.scene_id,
            "seed": self.seed,
            "width": self.width,
            "height": self.height,
            "style": self.style,
            "params": dict(self.params),
            "cells": "".join("#" if c else "." for c in self.cells.ravel()),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scene":
        if d.get("version") != SCENE_FORMAT_VERSION:
            raise SceneError(f"unsupported scene format version {d.get('version')!r}")
        w, h = int(d["width"]), int(d["height"])
        text = d["cells"]
        if len(text) != w * h or set(text) - {".", "#"}:
            raise SceneError("malformed cell string")
        cells = np.frombuffer(text.encode("ascii"), dtype=np.uint8).reshape(h, w) == ord("#")
        return cls(
            scene_id=d["scene_id"],
            seed=int(d["seed"]),
            width=w,
            height=h,
            cells=cells.astype(np.uint8),
            style=d.get("style", "maze"),
            params=dict(d.get("params", {})),
        )

    def render(self) -> str:
        return "\n".join("".join("#" if c else "." for c in row) for row in self.cells)


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int

    def __post_init__(self) -> None:
        if self.heading not in (N, E, S, W):
            raise ValueError(f"heading must be one of 0..3, got {self.heading!r}")

    @property
    def cell(self) -> tuple[int, int]:
        return (self.x, self.y)


@dataclass(frozen=True)
class EpisodeSpec:
    scene_id: str
    start: Pose
    goal: tuple[int, int]

    def key(self) -> tuple:
        """Identity of the (start, goal) pair used for split disjointness.

        Heading is deliberately excluded so that two specs differing only in
        initial orientation count as the same pair.
        """
        return (self.scene_id, self.start.x, self.start.y, self.goal[0], self.goal[1])

    def to_dict(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "start": [self.start.x, self.start.y, HEADINGS[self.start.heading]],
            "goal": [self.goal[0], self.goal[1]],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EpisodeSpec":
        x, y, h = d["start"]
        heading = HEADINGS.index(h) if isinstance(h, str) else int(h)
        return cls(d["scene_id"], Pose(int(x), int(y), heading), (int(d["goal"][0]), int(d["goal"][1])))


@dataclass(frozen=True, eq=False)
class Observation:
    patch: np.ndarray  # (k, k) uint8, row 0 is farthest ahead
    goal_distance: float
    goal_bearing: float  # radians, counter-clockwise (left) positive
    prev_action: np.ndarray  # (4,) one-hot, zeros at t=0

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Observation):
            return NotImplemented
        return (
            np.array_equal(self.patch, other.patch)
            and self.goal_distance == other.goal_distance
            and self.goal_bearing == other.goal_bearing
            and np.array_equal(self.prev_action, other.prev_action)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class EpisodeState:
    pose: Pose
    goal: tuple[int, int]
    step_count: int = 0
    collision_count: int = 0
    prev_geodesic: float = 0.0
    done: bool = False
    success: bool = False
    prev_action: int = -1
    path_length: int = 0


@dataclass(frozen=True)
class StepOutcome:
    observation: Observation
    reward: float
    done: bool
    info: dict


# ---------------------------------------------------------------- generation


def _derive_seed(seed: int, attempt: int) -> int:
    return (seed * 0x9E3779B97F4A7C15 + attempt * 0xBF58476D1CE4E5B9) % (1 << 64)


def _carve_maze(rng: random.Random, width: int, height: int, params: dict) -> np.ndarray:
    cells = np.ones((height, width), dtype=np.uint8)
    xs = range(1, width - 1, 2)
    ys = range(1, height - 1, 2)
    start = (rng.choice(list(xs)), rng.choice(list(ys)))
    cells[start[1], start[0]] = 0
    stack = [start]
    while stack:
        x, y = stack[-1]
        options = []
        for dx, dy in DIRS:
            nx, ny = x + 2 * dx, y + 2 * dy
            if 1 <= nx < width - 1 and 1 <= ny < height - 1 and cells[ny, nx]:
                options.append((nx, ny, dx, dy))
        if not options:
            stack.pop()
            continue
        nx, ny, dx, dy = rng.choice(options)
        cells[y + dy, x + dx] = 0
        cells[ny, nx] = 0
        stack.append((nx, ny))

    loop_prob = float(params.get("loop_prob", 0.0))
    if loop_prob > 0:
        # knock out walls between two carved cells to create cycles
        for y in range(1, height - 1):
            for x in range(1, width - 1):
                if not cells[y, x] or (x % 2) == (y % 2):
                    continue
                if x % 2 == 0:
                    a, b = (x - 1, y), (x + 1, y)
                else:
                    a, b = (x, y - 1), (x, y + 1)
                if all(0 < p[0] < width - 1 and 0 < p[1] < height - 1 and not cells[p[1], p[0]] for p in (a, b)):
                    if rng.random() < loop_prob:
                        cells[y, x] = 0
    return cells


def _carve_rooms(rng: random.Random, width: int, height: int, params: dict) -> np.ndarray:
    cells = np.ones((height, width), dtype=np.uint8)
    min_room = int(params.get("min_room", 2))
    max_room = int(params.get("max_room", 5))
    max_rooms = int(params.get("max_rooms", 6))
    inner_w, inner_h = width - 2, height - 2
    rooms: list[tuple[int, int, int, int]] = []
    for _ in range(40 * max_rooms):
        if len(rooms) >= max_rooms:
            break
        rw = rng.randint(min(min_room, inner_w), min(max_room, inner_w))
        rh = rng.randint(min(min_room, inner_h), min(max_room, inner_h))
        x0 = rng.randint(1, width - 1 - rw)
        y0 = rng.randint(1, height - 1 - rh)
        # keep a one-cell wall between rooms
        if any(x0 <= ox + ow and ox <= x0 + rw and y0 <= oy + oh and oy <= y0 + rh for ox, oy, ow, oh in rooms):
            continue
        rooms.append((x0, y0, rw, rh))
    for x0, y0, rw, rh in rooms:
        cells[y0 : y0 + rh, x0 : x0 + rw] = 0
    for (ax, ay, aw, ah), (bx, by, bw, bh) in zip(rooms, rooms[1:]):
        p = (rng.randint(ax, ax + aw - 1), rng.randint(ay, ay + ah - 1))
        q = (rng.randint(bx, bx + bw - 1), rng.randint(by, by + bh - 1))
        if rng.random() < 0.5:
            corner = (q[0], p[1])
        else:
            corner = (p[0], q[1])
        for (x1, y1), (x2, y2) in ((p, corner), (corner, q)):
            cells[min(y1, y2) : max(y1, y2) + 1, min(x1, x2) : max(x1, x2) + 1] = 0
    return cells


def _is_single_component(cells: np.ndarray) -> bool:
    ys, xs = np.nonzero(cells == 0)
    if len(xs) == 0:
        return False
    h, w = cells.shape
    seen = np.zeros_like(cells, dtype=bool)
    queue = deque([(int(xs[0]), int(ys[0]))])
    seen[ys[0], xs[0]] = True
    count = 1
    while queue:
        x, y = queue.popleft()
        for dx, dy in DIRS:
            nx, ny = x + dx, y + dy
            if 0 <= nx < w and 0 <= ny < h and not cells[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                count += 1
                queue.append((nx, ny))
    return count == len(xs)


def generate_scene(
    seed: int,
    width: int,
    height: int,
    style: str = "maze",
    params: dict | None = None,
    scene_id: str | None = None,
) -> Scene:
    """Generate a connected scene with a fully blocked border.

    ``maze`` carves a randomized depth-first spanning tree over odd cells
    (``params["loop_prob"]`` reopens walls to add cycles). ``rooms`` carves
    non-overlapping rectangles joined in sequence by L-shaped corridors.
    ``open`` is a single room filling the interior.
    """
    if width < 7 or height < 7:
        raise SceneError(f"scene must be at least 7x7, got {width}x{height}")
    if style not in STYLES:
        raise SceneError(f"unknown style {style!r}; expected one of {STYLES}")
    params = dict(params or {})
    seed = int(seed) % (1 << 64)
    for attempt in range(MAX_GENERATION_ATTEMPTS):
        rng = random.Random(_derive_seed(seed, attempt) if attempt else seed)
        if style == "maze":
            cells = _carve_maze(rng, width, height, params)
        elif style == "rooms":
            cells = _carve_rooms(rng, width, height, params)
        else:
            cells = np.ones((height, width), dtype=np.uint8)
            cells[1:-1, 1:-1] = 0
        if _is_single_component(cells):
            break
    else:
        raise ConnectivityError(
            f"no connected {style} scene for seed={seed} after {MAX_GENERATION_ATTEMPTS} attempts"
        )
    return Scene(
        scene_id=scene_id or f"{style}-{width}x{height}-{seed}",
        seed=seed,
        width=width,
        height=height,
        cells=cells,
        style=style,
        params=params,
    )


def scene_from_ascii(text: str, scene_id: str = "ascii", seed: int = 0) -> Scene:
    rows = [r for r in (line.strip() for line in text.strip().splitlines()) if r]
    cells = np.array([[1 if ch == "#" else 0 for ch in row] for row in rows], dtype=np.uint8)
    return Scene(scene_id, seed, cells.shape[1], cells.shape[0], cells, style="custom")


# ------------------------------------------------------------------ geodesics


def distance_field(scene: Scene, goal: tuple[int, int]) -> np.ndarray:
    """BFS distances (in cells) from every cell to ``goal``; inf where unreachable.

    Results are cached on the scene, which is immutable.
    """
    cache = scene._fields  # type: ignore[attr-defined]
    key = (int(goal[0]), int(goal[1]))
    hit = cache.get(key)
    if hit is not None:
        return hit
    dist = np.full((scene.height, scene.width), np.inf)
    gx, gy = key
    if scene.walkable(gx, gy):
        cells = scene.cells
        dist[gy, gx] = 0.0
        queue = deque([key])
        while queue:
            x, y = queue.popleft()
            d = dist[y, x] + 1.0
            for dx, dy in DIRS:
                nx, ny = x + dx, y + dy
                if 0 <= nx < scene.width and 0 <= ny < scene.height and not cells[ny, nx] and dist[ny, nx] == np.inf:
                    dist[ny, nx] = d
                    queue.append((nx, ny))
    dist.setflags(write=False)
    cache[key] = dist
    return dist


def geodesic_distance(scene: Scene, a: tuple[int, int], b: tuple[int, int]) -> float:
    if not (scene.in_bounds(*a) and scene.in_bounds(*b)):
        raise ValueError(f"cells {a}, {b} outside {scene.width}x{scene.height} grid")
    if not (scene.walkable(*a) and scene.walkable(*b)):
        return math.inf
    return float(distance_field(scene, b)[a[1], a[0]])


# --------------------------------------------------------------- observation


def compute_reward(
    d_prev: float,
    d_curr: float,
    goal_reached: bool,
    success_reward: float = 2.5,
    time_penalty: float = -0.0001,
    shaping_weight: float = 1.0,
) -> float:
    if not (math.isfinite(d_prev) and math.isfinite(d_curr)):
        raise ValueError(f"non-finite distance: d_prev={d_prev}, d_curr={d_curr}")
    if d_prev < 0 or d_curr < 0:
        raise ValueError("distances must be non-negative")
    r = shaping_weight * (d_prev - d_curr) + time_penalty
    if goal_reached:
        r += success_reward
    return r


def _goal_frame(pose: Pose, goal: tuple[int, int]) -> tuple[int, int]:
    """Goal offset as (ahead, left) integer components in the agent frame."""
    dx, dy = goal[0] - pose.x, goal[1] - pose.y
    fx, fy = DIRS[pose.heading]
    rx, ry = DIRS[(pose.heading + 1) % 4]
    return dx * fx + dy * fy, -(dx * rx + dy * ry)


def goal_bearing(pose: Pose, goal: tuple[int, int]) -> float:
    ahead, left = _goal_frame(pose, goal)
    return math.atan2(float(left), float(ahead))


def patch_offsets(patch_size: int) -> np.ndarray:
    """World (dx, dy) of every patch cell for each heading, shape (4, k, k, 2)."""
    c = patch_size // 2
    out = np.zeros((4, patch_size, patch_size, 2), dtype=np.int64)
    for h in range(4):
        fx, fy = DIRS[h]
        rx, ry = DIRS[(h + 1) % 4]
        for i in range(patch_size):
            for j in range(patch_size):
                ahead, right = c - i, j - c
                out[h, i, j] = (ahead * fx + right * rx, ahead * fy + right * ry)
    return out


def render_observation(
    scene: Scene,
    pose: Pose,
    goal: tuple[int, int],
    prev_action: int = -1,
    patch_size: int = 5,
) -> Observation:
    offsets = patch_offsets(patch_size)[pose.heading]
    xs = pose.x + offsets[..., 0]
    ys = pose.y + offsets[..., 1]
    inside = (xs >= 0) & (xs < scene.width) & (ys >= 0) & (ys < scene.height)
    patch = np.ones((patch_size, patch_size), dtype=np.uint8)
    patch[inside] = scene.cells[ys[inside], xs[inside]]
    onehot = np.zeros(N_ACTIONS)
    if prev_action >= 0:
        onehot[prev_action] = 1.0
    dist = math.hypot(goal[0] - pose.x, goal[1] - pose.y)
    return Observation(patch, dist, goal_bearing(pose, goal), onehot)


# ------------------------------------------------------------------- dynamics


def reset(scene: Scene, spec: EpisodeSpec, config: EnvConfig = EnvConfig()) -> tuple[EpisodeState, Observation]:
    if spec.scene_id != scene.scene_id:
        raise SpecMismatchError(f"spec for {spec.scene_id!r} used with scene {scene.scene_id!r}")
    if not scene.walkable(*spec.start.cell):
        raise SpecMismatchError(f"start {spec.start.cell} is not walkable in {scene.scene_id}")
    if not scene.in_bounds(*spec.goal):
        raise SpecMismatchError(f"goal {spec.goal} outside scene {scene.scene_id}")
    d0 = geodesic_distance(scene, spec.start.cell, spec.goal)
    if not math.isfinite(d0):
        raise UnreachableGoalError(f"goal {spec.goal} unreachable from {spec.start.cell}")
    state = EpisodeState(pose=spec.start, goal=spec.goal, prev_geodesic=d0)
    return state, render_observation(scene, spec.start, spec.goal, -1, config.patch_size)


def step(
    scene: Scene, state: EpisodeState, action: int, config: EnvConfig = EnvConfig()
) -> tuple[EpisodeState, StepOutcome]:
    if state.done:
        raise EpisodeDoneError("step() called on a finished episode")
    if action not in (STOP, FORWARD, TURN_LEFT, TURN_RIGHT):
        raise ValueError(f"invalid action {action!r}")
    pose = state.pose
    collided = False
    moved = False
    if action == FORWARD:
        dx, dy = DIRS[pose.heading]
        if scene.walkable(pose.x + dx, pose.y + dy):
            pose = Pose(pose.x + dx, pose.y + dy, pose.heading)
            moved = True
        else:
            collided = True
    elif action == TURN_LEFT:
        pose = Pose(pose.x, pose.y, (pose.heading + 3) % 4)
    elif action == TURN_RIGHT:
        pose = Pose(pose.x, pose.y, (pose.heading + 1) % 4)

    d_curr = geodesic_distance(scene, pose.cell, state.goal)
    success = action == STOP and d_curr <= config.success_radius
    reward = compute_reward(
        state.prev_geodesic,
        d_curr,
        success,
        config.success_reward,
        config.time_penalty,
        config.shaping_weight,
    )
    steps = state.step_count + 1
    collisions = state.collision_count + int(collided)
    done = action == STOP or steps >= config.max_steps or collisions >= config.max_collisions
    new_state = replace(
        state,
        pose=pose,
        step_count=steps,
        collision_count=collisions,
        prev_geodesic=d_curr,
        done=done,
        success=success,
        prev_action=action,
        path_length=state.path_length + int(moved),
    )
    obs = render_observation(scene, pose, state.goal, action, config.patch_size)
    info = {"collided": collided, "geodesic": d_curr, "success": success}
    return new_state, StepOutcome(obs, reward, done, info)


# ------------------------------------------------------------------------- io


def save_scenes(path, scenes: Iterable[Scene]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for scene in scenes:
            fh.write(json.dumps(scene.to_dict(), sort_keys=True) + "\n")


def load_scenes(path) -> list[Scene]:
    with open(path, encoding="utf-8") as fh:
        return [Scene.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_specs(path, specs: Iterable[EpisodeSpec]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for spec in specs:
            fh.write(json.dumps(spec.to_dict(), sort_keys=True) + "\n")


def read_specs(path) -> list[EpisodeSpec]:
    return list(iter_specs(path))


def iter_specs(path) -> Iterator[EpisodeSpec]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield EpisodeSpec.from_dict(json.loads(line))
