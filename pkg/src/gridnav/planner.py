"""Exact shortest-path planning and optimal demonstrations."""
from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from gridnav.env import (
    DIRS,
    FORWARD,
    STOP,
    TURN_LEFT,
    TURN_RIGHT,
    EnvConfig,
    EpisodeSpec,
    Observation,
    Pose,
    Scene,
    UnreachableGoalError,
    geodesic_distance,
    reset,
    step,
)

DEMO_FORMAT_VERSION = 1

# expansion order doubles as the tie-break order
_PLAN_ORDER = (FORWARD, TURN_LEFT, TURN_RIGHT)


class DisconnectedError(ValueError):
    pass


@dataclass(frozen=True)
class ActionPlan:
    actions: tuple[int, ...]

    @property
    def cost(self) -> int:
        return len(self.actions)


@dataclass(frozen=True, eq=False)
class TrajectoryStep:
    observation: Observation
    action: int
    reward: float
    info: dict


@dataclass(eq=False)
class Trajectory:
    scene_id: str
    start: Pose
    goal: tuple[int, int]
    steps: list[TrajectoryStep] = field(default_factory=list)
    success: bool = False
    path_length: int = 0

    @property
    def actions(self) -> list[int]:
        return [s.action for s in self.steps]

    @property
    def observations(self) -> list[Observation]:
        return [s.observation for s in self.steps]

    @property
    def spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.scene_id, self.start, self.goal)

    def to_dict(self, include_rewards: bool = True) -> dict:
        steps = []
        for s in self.steps:
            o = s.observation
            rec = {
                "patch": "".join(str(int(v)) for v in o.patch.ravel()),
                "k": int(o.patch.shape[0]),
                "goal_distance": o.goal_distance,
                "goal_bearing": o.goal_bearing,
                "prev_action": int(np.argmax(o.prev_action)) if o.prev_action.any() else -1,
                "action": s.action,
                "info": s.info,
            }
            if include_rewards:
                rec["reward"] = s.reward
            steps.append(rec)
        return {
            "scene_id": self.scene_id,
            "start": EpisodeSpec(self.scene_id, self.start, self.goal).to_dict()["start"],
            "goal": list(self.goal),
            "success": self.success,
            "path_length": self.path_length,
            "steps": steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        spec = EpisodeSpec.from_dict({"scene_id": d["scene_id"], "start": d["start"], "goal": d["goal"]})
        steps = []
        for s in d["steps"]:
            k = int(s["k"])
            patch = np.frombuffer(s["patch"].encode("ascii"), dtype=np.uint8).reshape(k, k) - ord("0")
            prev = np.zeros(4)
            if s["prev_action"] >= 0:
                prev[s["prev_action"]] = 1.0
            obs = Observation(patch.astype(np.uint8), s["goal_distance"], s["goal_bearing"], prev)
            steps.append(TrajectoryStep(obs, int(s["action"]), s.get("reward", math.nan), dict(s["info"])))
        return cls(spec.scene_id, spec.start, spec.goal, steps, bool(d["success"]), int(d["path_length"]))


def shortest_cell_path(scene: Scene, a: tuple[int, int], b: tuple[int, int]) -> list[tuple[int, int]]:
    """BFS cell path from ``a`` to ``b`` inclusive; neighbours tried N, E, S, W."""
    if not (scene.walkable(*a) and scene.walkable(*b)):
        raise DisconnectedError(f"{a} or {b} is not walkable")
    parent: dict[tuple[int, int], tuple[int, int] | None] = {a: None}
    queue = deque([a])
    while queue:
        cur = queue.popleft()
        if cur == b:
            break
        for dx, dy in DIRS:
            nxt = (cur[0] + dx, cur[1] + dy)
            if nxt not in parent and scene.walkable(*nxt):
                parent[nxt] = cur
                queue.append(nxt)
    if b not in parent:
        raise DisconnectedError(f"no path from {a} to {b} in {scene.scene_id}")
    path = [b]
    while parent[path[-1]] is not None:
        path.append(parent[path[-1]])
    return path[::-1]


def _apply(scene: Scene, state: tuple[int, int, int], action: int) -> tuple[int, int, int]:
    x, y, h = state
    if action == FORWARD:
        dx, dy = DIRS[h]
        return (x + dx, y + dy, h) if scene.walkable(x + dx, y + dy) else state
    if action == TURN_LEFT:
        return (x, y, (h + 3) % 4)
    return (x, y, (h + 1) % 4)


def optimal_action_plan(scene: Scene, start: Pose, goal: tuple[int, int]) -> ActionPlan:
    """Fewest-action plan ending in ``stop`` on ``goal``.

    Breadth-first search over (cell, heading); every action costs 1.
    """
    if not scene.in_bounds(*goal) or not math.isfinite(geodesic_distance(scene, start.cell, goal)):
        raise UnreachableGoalError(f"goal {goal} unreachable from {start.cell} in {scene.scene_id}")
    s0 = (start.x, start.y, start.heading)
    if start.cell == tuple(goal):
        return ActionPlan((STOP,))
    parent: dict[tuple[int, int, int], tuple[tuple[int, int, int], int] | None] = {s0: None}
    queue = deque([s0])
    found = None
    while queue and found is None:
        cur = queue.popleft()
        for action in _PLAN_ORDER:
            nxt = _apply(scene, cur, action)
            if nxt in parent:
                continue
            parent[nxt] = (cur, action)
            if (nxt[0], nxt[1]) == tuple(goal):
                found = nxt
                break
            queue.append(nxt)
    actions = [STOP]
    node = found
    while parent[node] is not None:
        node, action = parent[node]
        actions.append(action)
    return ActionPlan(tuple(reversed(actions)))


def replay(scene: Scene, spec: EpisodeSpec, actions, config: EnvConfig = EnvConfig()) -> Trajectory:
    """Execute ``actions`` from the spec's start and record every step."""
    state, obs = reset(scene, spec, config)
    traj = Trajectory(spec.scene_id, spec.start, spec.goal)
    for action in actions:
        state, out = step(scene, state, action, config)
        traj.steps.append(TrajectoryStep(obs, int(action), out.reward, out.info))
        obs = out.observation
        if out.done:
            break
    traj.success = state.success
    traj.path_length = state.path_length
    return traj


def generate_demo(scene: Scene, spec: EpisodeSpec, config: EnvConfig = EnvConfig()) -> Trajectory:
    plan = optimal_action_plan(scene, spec.start, spec.goal)
    traj = replay(scene, spec, plan.actions, config)
    if not traj.success:
        raise RuntimeError(f"optimal plan failed for {spec}; success radius or step cap too small")
    return traj


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def write_demos(path, trajectories, header: dict, include_rewards: bool = True) -> None:
    head = {"format": "gridnav.demos", "version": DEMO_FORMAT_VERSION, **header}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(head, sort_keys=True) + "\n")
        for t in trajectories:
            fh.write(json.dumps(t.to_dict(include_rewards), sort_keys=True) + "\n")


def read_demos(path) -> tuple[dict, list[Trajectory]]:
    with open(path, encoding="utf-8") as fh:
        lines = [line for line in fh if line.strip()]
    head = json.loads(lines[0])
    if head.get("format") != "gridnav.demos" or head.get("version") != DEMO_FORMAT_VERSION:
        raise ValueError(f"{path} is not a version-{DEMO_FORMAT_VERSION} demo file")
    return head, [Trajectory.from_dict(json.loads(line)) for line in lines[1:]]
