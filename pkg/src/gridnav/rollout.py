"""Vectorized episode execution shared by PPO collection and evaluation.

:class:`BatchEnv` advances many episodes at once with numpy and reproduces
:func:`gridnav.env.step` exactly; the scalar functions remain the reference
and the test-suite checks the two against each other.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from gridnav.env import (
    DIRS,
    FORWARD,
    N_ACTIONS,
    STOP,
    TURN_LEFT,
    TURN_RIGHT,
    EnvConfig,
    EpisodeSpec,
    Scene,
    SpecMismatchError,
    UnreachableGoalError,
    distance_field,
    patch_offsets,
)
from gridnav.features import GOAL_DIM, GOAL_MODES, distance_feature, input_dim
from gridnav.net import NetworkSpec, actions_from_uniform, forward, log_softmax
from gridnav.planner import optimal_action_plan

_DX = np.array([d[0] for d in DIRS])
_DY = np.array([d[1] for d in DIRS])


class BatchEnv:
    def __init__(self, scenes: Sequence[Scene], config: EnvConfig = EnvConfig(), goal_mode: str = "relative"):
        if goal_mode not in GOAL_MODES:
            raise ValueError(f"unknown goal mode {goal_mode!r}")
        self.config = config
        self.goal_mode = goal_mode
        self.scenes = list(scenes)
        self.index = {s.scene_id: i for i, s in enumerate(self.scenes)}
        k = config.patch_size
        self.pad = c = k // 2
        self.hmax = max(s.height for s in self.scenes)
        self.wmax = max(s.width for s in self.scenes)
        self.grid = np.ones((len(self.scenes), self.hmax + 2 * c, self.wmax + 2 * c), dtype=np.uint8)
        for i, s in enumerate(self.scenes):
            self.grid[i, c : c + s.height, c : c + s.width] = s.cells
        self.offsets = patch_offsets(k)
        self.diameter = np.array([s.diameter for s in self.scenes])
        self.widths = np.array([s.width for s in self.scenes])
        self.heights = np.array([s.height for s in self.scenes])
        self.dim = input_dim(k)
        self.n = 0

    def reset(self, specs: Sequence[EpisodeSpec]) -> np.ndarray:
        n = self.n = len(specs)
        try:
            self.sid = np.array([self.index[s.scene_id] for s in specs], dtype=np.int64)
        except KeyError as exc:
            raise SpecMismatchError(f"unknown scene {exc.args[0]!r}") from None
        self.x = np.array([s.start.x for s in specs], dtype=np.int64)
        self.y = np.array([s.start.y for s in specs], dtype=np.int64)
        self.h = np.array([s.start.heading for s in specs], dtype=np.int64)
        self.gx = np.array([s.goal[0] for s in specs], dtype=np.int64)
        self.gy = np.array([s.goal[1] for s in specs], dtype=np.int64)
        self.dist = np.full((n, self.hmax, self.wmax), np.inf)
        for b, s in enumerate(specs):
            scene = self.scenes[self.sid[b]]
            if not scene.walkable(*s.start.cell):
                raise SpecMismatchError(f"start {s.start.cell} is not walkable in {scene.scene_id}")
            f = distance_field(scene, s.goal)
            self.dist[b, : scene.height, : scene.width] = f
        b = np.arange(n)
        self.prev_geo = self.dist[b, self.y, self.x]
        if not np.all(np.isfinite(self.prev_geo)):
            bad = int(np.nonzero(~np.isfinite(self.prev_geo))[0][0])
            raise UnreachableGoalError(f"goal unreachable for spec {specs[bad]}")
        self.d0 = self.prev_geo.copy()
        self.steps = np.zeros(n, dtype=np.int64)
        self.collisions = np.zeros(n, dtype=np.int64)
        self.path_length = np.zeros(n, dtype=np.int64)
        self.prev_action = np.full(n, -1, dtype=np.int64)
        self.done = np.zeros(n, dtype=bool)
        self.success = np.zeros(n, dtype=bool)
        self.stopped = np.zeros(n, dtype=bool)
        self.init_goal = self._relative_goal(b)
        return self.features(b)

    def _relative_goal(self, idx: np.ndarray) -> np.ndarray:
        h = self.h[idx]
        dx = self.gx[idx] - self.x[idx]
        dy = self.gy[idx] - self.y[idx]
        hr = (h + 1) % 4
        ahead = dx * _DX[h] + dy * _DY[h]
        left = -(dx * _DX[hr] + dy * _DY[hr])
        bearing = np.arctan2(left.astype(np.float64), ahead.astype(np.float64))
        out = np.empty((len(idx), GOAL_DIM))
        out[:, 0] = distance_feature(np.hypot(dx, dy))
        out[:, 1] = np.sin(bearing)
        out[:, 2] = np.cos(bearing)
        return out

    def features(self, idx: np.ndarray) -> np.ndarray:
        k = self.config.patch_size
        c = self.pad
        m = len(idx)
        out = np.zeros((m, self.dim))
        off = self.offsets[self.h[idx]]
        ys = self.y[idx, None, None] + off[..., 1] + c
        xs = self.x[idx, None, None] + off[..., 0] + c
        out[:, : k * k] = self.grid[self.sid[idx, None, None], ys, xs].reshape(m, k * k)
        g = out[:, k * k : k * k + GOAL_DIM]
        if self.goal_mode == "relative":
            g[...] = self._relative_goal(idx)
        elif self.goal_mode == "relative_init":
            g[...] = self.init_goal[idx]
        elif self.goal_mode == "absolute":
            s = self.sid[idx]
            g[:, 0] = 2.0 * self.gx[idx] / (self.widths[s] - 1) - 1.0
            g[:, 1] = 2.0 * self.gy[idx] / (self.heights[s] - 1) - 1.0
        pa = self.prev_action[idx]
        has = pa >= 0
        out[np.nonzero(has)[0], k * k + GOAL_DIM + pa[has]] = 1.0
        return out

    def step(self, idx: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Advance episodes ``idx`` (all still running); returns (rewards, done)."""
        cfg = self.config
        actions = np.asarray(actions, dtype=np.int64)
        if np.any(self.done[idx]):
            raise RuntimeError("step on a finished episode")
        x, y, h, s = self.x[idx], self.y[idx], self.h[idx], self.sid[idx]
        fwd = actions == FORWARD
        tx, ty = x + _DX[h], y + _DY[h]
        blocked = self.grid[s, ty + self.pad, tx + self.pad].astype(bool)
        moved = fwd & ~blocked
        collided = fwd & blocked
        x = np.where(moved, tx, x)
        y = np.where(moved, ty, y)
        h = np.where(actions == TURN_LEFT, (h + 3) % 4, np.where(actions == TURN_RIGHT, (h + 1) % 4, h))
        self.x[idx], self.y[idx], self.h[idx] = x, y, h

        d_curr = self.dist[idx, y, x]
        stop = actions == STOP
        success = stop & (d_curr <= cfg.success_radius)
        rewards = cfg.shaping_weight * (self.prev_geo[idx] - d_curr) + cfg.time_penalty
        rewards = rewards + np.where(success, cfg.success_reward, 0.0)
        self.prev_geo[idx] = d_curr
        self.steps[idx] += 1
        self.collisions[idx] += collided
        self.path_length[idx] += moved
        self.prev_action[idx] = actions
        done = stop | (self.steps[idx] >= cfg.max_steps) | (self.collisions[idx] >= cfg.max_collisions)
        self.done[idx] = done
        self.success[idx] = success
        self.stopped[idx] = stop
        return rewards, done


# ------------------------------------------------------------------ policies


class Policy(Protocol):
    def begin(self, env: BatchEnv, specs: Sequence[EpisodeSpec]) -> None: ...

    def act(self, idx: np.ndarray, feats: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, dict]: ...


class NetworkPolicy:
    """Recurrent network policy; samples by inverse CDF or acts greedily."""

    def __init__(self, theta: np.ndarray, spec: NetworkSpec, greedy: bool = False):
        self.theta = theta
        self.spec = spec
        self.greedy = greedy

    def begin(self, env: BatchEnv, specs: Sequence[EpisodeSpec]) -> None:
        self.hidden = np.zeros((len(specs), self.spec.hidden_size), dtype=self.theta.dtype)

    def act(self, idx, feats, u):
        out = forward(self.theta, self.spec, feats, self.hidden[idx])
        if not np.all(np.isfinite(out.logits)):
            raise FloatingPointError("non-finite policy logits")
        self.hidden[idx] = out.next_hidden
        if self.greedy:
            actions = np.argmax(out.logits, axis=-1)
        else:
            actions = actions_from_uniform(out.logits, u)
        lp = log_softmax(out.logits)
        extra = {"logp": lp[np.arange(len(idx)), actions]}
        if out.value is not None:
            extra["value"] = out.value
        return actions, extra


class UniformPolicy:
    def begin(self, env, specs) -> None:
        pass

    def act(self, idx, feats, u):
        return np.minimum((u * N_ACTIONS).astype(np.int64), N_ACTIONS - 1), {}


class ConstantPolicy:
    def __init__(self, action: int):
        self.action = action

    def begin(self, env, specs) -> None:
        pass

    def act(self, idx, feats, u):
        return np.full(len(idx), self.action, dtype=np.int64), {}


class PlanPolicy:
    """Replays the optimal action plan of each episode's spec."""

    def begin(self, env: BatchEnv, specs) -> None:
        self.env = env
        self.plans = [optimal_action_plan(env.scenes[env.index[s.scene_id]], s.start, s.goal).actions for s in specs]

    def act(self, idx, feats, u):
        t = self.env.steps[idx]
        return np.array([self.plans[b][min(t_b, len(self.plans[b]) - 1)] for b, t_b in zip(idx, t)]), {}


# ------------------------------------------------------------------- running


@dataclass
class EpisodeRecord:
    spec: EpisodeSpec
    features: np.ndarray  # (T, D) inputs the policy acted on
    actions: np.ndarray  # (T,)
    rewards: np.ndarray  # (T,) reward after each action
    success: bool
    stopped: bool
    steps: int
    collisions: int
    path_length: int
    initial_geodesic: float
    final_geodesic: float
    extras: dict = field(default_factory=dict)  # per-step arrays, e.g. logp, value


def run_episodes(
    policy: Policy,
    env: BatchEnv,
    specs: Sequence[EpisodeSpec],
    uniforms: np.ndarray,
    record_features: bool = True,
) -> list[EpisodeRecord]:
    """Run one episode per spec to termination.

    ``uniforms`` has shape (len(specs), max_steps); row ``b`` drives every
    stochastic choice of episode ``b``, so outcomes do not depend on which
    other episodes share the batch.
    """
    n = len(specs)
    t_max = env.config.max_steps
    feats = env.reset(specs)
    policy.begin(env, specs)
    X = np.zeros((t_max, n, env.dim)) if record_features else None
    A = np.zeros((t_max, n), dtype=np.int64)
    R = np.zeros((t_max, n))
    extras: dict[str, np.ndarray] = {}
    active = np.arange(n)
    t = 0
    while len(active):
        f = feats[active]
        actions, extra = policy.act(active, f, uniforms[active, t])
        if X is not None:
            X[t, active] = f
        A[t, active] = actions
        for key, val in extra.items():
            if key not in extras:
                extras[key] = np.zeros((t_max, n))
            extras[key][t, active] = val
        rewards, done = env.step(active, actions)
        R[t, active] = rewards
        active = active[~done]
        if len(active):
            feats[active] = env.features(active)
        t += 1
    out = []
    for b, spec in enumerate(specs):
        T = int(env.steps[b])
        out.append(
            EpisodeRecord(
                spec=spec,
                features=X[:T, b].copy() if X is not None else np.zeros((0, env.dim)),
                actions=A[:T, b].copy(),
                rewards=R[:T, b].copy(),
                success=bool(env.success[b]),
                stopped=bool(env.stopped[b]),
                steps=T,
                collisions=int(env.collisions[b]),
                path_length=int(env.path_length[b]),
                initial_geodesic=float(env.d0[b]),
                final_geodesic=float(env.prev_geo[b]),
                extras={k: v[:T, b].copy() for k, v in extras.items()},
            )
        )
    return out


def episode_stream(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))
