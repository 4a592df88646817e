"""Flat network inputs built from observations.

Layout of one input row: ``patch (k*k) | goal (3) | previous action (4)``.
The three goal values depend on ``goal_mode``:

``relative``       distance in cells, sin(bearing), cos(bearing),
                   recomputed against the current pose every step
``relative_init``  the relative goal of the first step, frozen afterwards
``absolute``       goal cell scaled to [-1, 1] in x and y, then 0
``none``           zeros
"""
from __future__ import annotations

import math

import numpy as np

from gridnav.env import N_ACTIONS, Observation, Scene

GOAL_MODES = ("relative", "relative_init", "absolute", "none")
GOAL_DIM = 3


def input_dim(patch_size: int) -> int:
    return patch_size * patch_size + GOAL_DIM + N_ACTIONS


def distance_feature(distance):
    """Goal distance as fed to the network: plain Euclidean cells.

    Standing on the goal and standing next to it must differ by a full unit
    of input; dividing by the scene diameter shrinks that gap to ~0.05 and
    the stop decision then learns unreliably.
    """
    return np.asarray(distance, dtype=np.float64)


def relative_goal(distance: float, bearing: float) -> np.ndarray:
    return np.array([float(distance_feature(distance)), math.sin(bearing), math.cos(bearing)])


def absolute_goal(goal: tuple[int, int], width: int, height: int) -> np.ndarray:
    return np.array([2.0 * goal[0] / (width - 1) - 1.0, 2.0 * goal[1] / (height - 1) - 1.0, 0.0])


def goal_features(
    mode: str,
    obs: Observation,
    scene: Scene,
    goal: tuple[int, int],
    first_obs: Observation | None = None,
) -> np.ndarray:
    if mode == "relative":
        return relative_goal(obs.goal_distance, obs.goal_bearing)
    if mode == "relative_init":
        ref = first_obs if first_obs is not None else obs
        return relative_goal(ref.goal_distance, ref.goal_bearing)
    if mode == "absolute":
        return absolute_goal(goal, scene.width, scene.height)
    if mode == "none":
        return np.zeros(GOAL_DIM)
    raise ValueError(f"unknown goal mode {mode!r}; expected one of {GOAL_MODES}")


def encode_observation(
    obs: Observation,
    scene: Scene,
    goal: tuple[int, int],
    mode: str = "relative",
    first_obs: Observation | None = None,
) -> np.ndarray:
    return np.concatenate(
        [
            obs.patch.ravel().astype(np.float64),
            goal_features(mode, obs, scene, goal, first_obs),
            obs.prev_action.astype(np.float64),
        ]
    )


def encode_episode(
    observations: list[Observation],
    scene: Scene,
    goal: tuple[int, int],
    mode: str = "relative",
) -> np.ndarray:
    """Stack encodings for the observations an agent acted on, shape (T, D)."""
    first = observations[0]
    return np.stack([encode_observation(o, scene, goal, mode, first) for o in observations])
