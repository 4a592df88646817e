"""Goal-conditioned grid navigation benchmark: recurrent PPO vs. behavior cloning."""

from gridnav.env import (
    ACTIONS,
    FORWARD,
    STOP,
    TURN_LEFT,
    TURN_RIGHT,
    EnvConfig,
    EpisodeSpec,
    EpisodeState,
    Observation,
    Pose,
    Scene,
    StepOutcome,
    compute_reward,
    generate_scene,
    geodesic_distance,
    render_observation,
    reset,
    step,
)

__version__ = "0.1.0"

__all__ = [
    "ACTIONS",
    "FORWARD",
    "STOP",
    "TURN_LEFT",
    "TURN_RIGHT",
    "EnvConfig",
    "EpisodeSpec",
    "EpisodeState",
    "Observation",
    "Pose",
    "Scene",
    "StepOutcome",
    "compute_reward",
    "generate_scene",
    "geodesic_distance",
    "render_observation",
    "reset",
    "step",
]
