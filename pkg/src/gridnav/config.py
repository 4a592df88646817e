"""Experiment configuration: one INI-style key/value file drives every command.

Schema (all keys optional except ``version``)::

    [experiment]
    version = 1
    experiment = main_compare        ; main_compare | augment_bc | scene_ablation |
                                     ; goal_repr_ablation | reward_ablation | stitching_probe
    seed = 0                         ; split / scene-generation seed
    seeds = 0,1,2                    ; training seeds, one trained agent per seed
    output_dir = runs
    scene_style = rooms              ; maze | rooms | open
    scene_size = 15
    train_scenes = 4
    train_pairs = 200                ; K pairs per training scene
    seen_eval_pairs = 50             ; subset of the training pairs
    unseen_eval_pairs = 50           ; per training scene, disjoint from training
    augment_pairs = 200              ; per training scene, for augment_bc
    unseen_scenes = 8
    unseen_scene_pairs = 25
    eval_episodes = 3                ; sampled-action episodes per spec
    scene_counts = 1,4               ; scene_ablation only

    [scene_params]                   ; passed to the scene generator
    loop_prob = 0.1

    [env]      ; EnvConfig fields, e.g. max_steps = 200
    [ppo]      ; PPOConfig fields, e.g. total_steps = 1000000
    [bc]       ; BCConfig fields, e.g. epochs = 40
    [margins]  ; verdict margins, e.g. unseen_pairs_success = 0.10

Command-line ``--set section.key=value`` overrides any key.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from gridnav.bc import BCConfig
from gridnav.env import EnvConfig
from gridnav.planner import config_hash
from gridnav.ppo import PPOConfig

CONFIG_VERSION = 1
EXPERIMENTS = (
    "main_compare",
    "augment_bc",
    "scene_ablation",
    "goal_repr_ablation",
    "reward_ablation",
    "stitching_probe",
)

DEFAULT_MARGINS = {
    "seen_pairs_spl": 0.0,  # BC seen SPL - PPO seen SPL >= margin
    "unseen_pairs_success": 0.10,  # PPO - BC, absolute points
    "unseen_scenes_success": 0.05,
    "augment_spl_gap_ratio": 0.5,  # augmented gap <= ratio * base gap
    "augment_success_gap": 0.10,
    "bc_spl_success_tol": 0.05,
    "scene_count": 0.0,
    "goal_repr_gap": 0.20,
    "goal_repr_tol": 0.15,
    "reward_ablation_max": 0.20,
    "reward_full_min": 0.90,
    "stitching_gap": 0.30,
}


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "main_compare"
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2)
    output_dir: str = "runs"
    scene_style: str = "rooms"
    scene_size: int = 15
    scene_params: dict = field(default_factory=dict)
    train_scenes: int = 4
    train_pairs: int = 200
    seen_eval_pairs: int = 50
    unseen_eval_pairs: int = 50
    augment_pairs: int = 200
    unseen_scenes: int = 8
    unseen_scene_pairs: int = 25
    eval_episodes: int = 3
    scene_counts: tuple[int, ...] = (1, 4)
    env: EnvConfig = field(default_factory=EnvConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    bc: BCConfig = field(default_factory=BCConfig)
    margins: dict = field(default_factory=lambda: dict(DEFAULT_MARGINS))
    version: int = CONFIG_VERSION

    def __post_init__(self) -> None:
        self.seeds = tuple(int(s) for s in self.seeds)
        self.scene_counts = tuple(int(s) for s in self.scene_counts)
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if self.seen_eval_pairs > self.train_pairs:
            raise ConfigError("seen_eval_pairs cannot exceed train_pairs")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["env"] = dataclasses.asdict(self.env)
        d["ppo"] = self.ppo.to_dict()
        d["bc"] = self.bc.to_dict()
        d["seeds"] = list(self.seeds)
        d["scene_counts"] = list(self.scene_counts)
        d.pop("output_dir")  # location does not change results
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def data_hash(self) -> str:
        """Hash of the keys that determine scenes, splits and demos only."""
        d = self.to_dict()
        keys = ("seed", "scene_style", "scene_size", "scene_params", "train_scenes", "train_pairs",
                "seen_eval_pairs", "unseen_eval_pairs", "augment_pairs", "unseen_scenes",
                "unseen_scene_pairs", "env", "version")
        return config_hash({k: d[k] for k in keys})

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def _coerce(value: str, like):
    if isinstance(like, bool):
        v = value.strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if isinstance(like, int):
        return int(float(value)) if "e" in value.lower() else int(value)
    if isinstance(like, float):
        return float(value)
    if isinstance(like, tuple):
        return tuple(int(v) for v in value.replace(" ", "").split(",") if v)
    return value.strip()


def _parse_scalar(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value.strip()


def _update_dataclass(obj, items: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in items.items():
        if key not in fields:
            raise ConfigError(f"unknown key {section}.{key}")
        try:
            changes[key] = _coerce(value, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {section}.{key}: {exc}") from None
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from None


def from_sections(sections: dict[str, dict[str, str]], base: ExperimentConfig | None = None) -> ExperimentConfig:
    cfg = base or ExperimentConfig()
    top = dict(sections.get("experiment", {}))
    nested = {}
    for name in ("env", "ppo", "bc"):
        if sections.get(name):
            nested[name] = _update_dataclass(getattr(cfg, name), sections[name], name)
    scene_params = dict(cfg.scene_params)
    scene_params.update({k: _parse_scalar(v) for k, v in sections.get("scene_params", {}).items()})
    margins = dict(cfg.margins)
    for k, v in sections.get("margins", {}).items():
        if k not in DEFAULT_MARGINS:
            raise ConfigError(f"unknown margin {k!r}")
        margins[k] = float(v)
    unknown = set(sections) - {"experiment", "env", "ppo", "bc", "scene_params", "margins"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    fields = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"env", "ppo", "bc", "scene_params", "margins"}
    changes = {}
    for key, value in top.items():
        if key not in fields:
            raise ConfigError(f"unknown key experiment.{key}")
        try:
            changes[key] = _coerce(value, getattr(cfg, key))
        except ValueError as exc:
            raise ConfigError(f"bad value for experiment.{key}: {exc}") from None
    try:
        return dataclasses.replace(cfg, **changes, **nested, scene_params=scene_params, margins=margins)
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: str | Path | None, overrides: list[str] = (), base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Read an INI config file (or start from defaults) and apply overrides.

    Each override is ``section.key=value``; a bare ``key=value`` targets the
    ``[experiment]`` section.
    """
    sections: dict[str, dict[str, str]] = {}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        sections = {name: dict(parser[name]) for name in parser.sections()}
        if "version" not in sections.get("experiment", {}):
            raise ConfigError("config file must set [experiment] version")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        section, _, name = key.strip().rpartition(".")
        sections.setdefault(section or "experiment", {})[name] = value.strip()
    return from_sections(sections, base)


def dump_config(cfg: ExperimentConfig) -> str:
    """Render a config as a file :func:`load_config` reads back unchanged.

    ``output_dir`` is left out: it does not affect results, and omitting it
    keeps the file identical wherever a run is written.
    """
    d = cfg.to_dict()
    lines = ["[experiment]"]
    for key in ("version", "experiment", "seed", "seeds", "scene_style", "scene_size", "train_scenes",
                "train_pairs", "seen_eval_pairs", "unseen_eval_pairs", "augment_pairs", "unseen_scenes",
                "unseen_scene_pairs", "eval_episodes", "scene_counts"):
        v = d[key]
        lines.append(f"{key} = {','.join(map(str, v)) if isinstance(v, list) else v}")
    for section in ("scene_params", "env", "ppo", "bc", "margins"):
        lines.append(f"\n[{section}]")
        for key, v in d[section].items():
            if isinstance(v, list):
                v = ",".join(map(str, v))
            elif section == "scene_params":
                v = json.dumps(v)
            lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def preset(experiment: str) -> ExperimentConfig:
    """Desk-scale defaults for each study; config files and overrides apply on top."""
    base = ExperimentConfig(experiment=experiment)
    if experiment in ("goal_repr_ablation", "reward_ablation"):
        # one open room, the PPO smoke task
        return dataclasses.replace(
            base,
            scene_style="open",
            scene_size=11,
            train_scenes=1,
            train_pairs=20,
            seen_eval_pairs=20,
            unseen_eval_pairs=20,
            augment_pairs=0,
            unseen_scenes=0,
            eval_episodes=10,
            ppo=dataclasses.replace(base.ppo, total_steps=500_000),
        )
    if experiment == "stitching_probe":
        return dataclasses.replace(
            base,
            seeds=(0, 1, 2, 3, 4),
            train_scenes=4,
            eval_episodes=10,
            ppo=dataclasses.replace(base.ppo, total_steps=200_000),
        )
    # 5M PPO steps give ~37k gradient steps; 45 BC epochs over the 800 base
    # demonstrations give 36k, so the two agents get matched update budgets
    return dataclasses.replace(
        base,
        ppo=dataclasses.replace(base.ppo, total_steps=5_000_000),
        bc=dataclasses.replace(base.bc, epochs=45),
    )
