"""Seen-pair / unseen-pair / unseen-scene evaluation with success rate and SPL."""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from gridnav.env import EnvConfig, EpisodeSpec, Scene
from gridnav.rollout import BatchEnv, EpisodeRecord, Policy, episode_stream, run_episodes

REGIME_TAGS = ("seen_pairs", "unseen_pairs", "unseen_scenes")
_EVAL = 4
CHUNK = 512


class SplitError(ValueError):
    """Evaluation regimes violate their disjointness rules."""


@dataclass(frozen=True)
class EvalRegime:
    tag: str
    specs: tuple[EpisodeSpec, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "specs", tuple(self.specs))


@dataclass(frozen=True)
class EpisodeResult:
    success: int
    shortest: float  # l: geodesic cells from start to goal
    path: int  # p: cells actually traversed
    steps: int
    collisions: int
    spec_index: int
    seed: int
    repeat: int
    outcome: str  # success | wrong_stop | timeout | collision_cap

    @classmethod
    def from_record(cls, rec: EpisodeRecord, spec_index: int, seed: int, repeat: int, config: EnvConfig) -> "EpisodeResult":
        if rec.success:
            outcome = "success"
        elif rec.stopped:
            outcome = "wrong_stop"
        elif rec.collisions >= config.max_collisions:
            outcome = "collision_cap"
        else:
            outcome = "timeout"
        return cls(int(rec.success), rec.initial_geodesic, rec.path_length, rec.steps, rec.collisions, spec_index, seed, repeat, outcome)


@dataclass
class MetricsReport:
    regime: str
    seed: int | None  # None marks the aggregate over seeds
    episodes: int
    success_rate: float
    spl: float
    per_seed: list[dict] = field(default_factory=list)
    outcomes: dict = field(default_factory=dict)
    config_hash: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def spl(results: Sequence[EpisodeResult]) -> float:
    """Success weighted by path length: mean of S * l / max(p, l)."""
    if not results:
        raise ValueError("spl of an empty result set")
    total = 0.0
    for r in results:
        if r.shortest <= 0:
            raise ValueError(f"shortest-path length must be positive, got {r.shortest}")
        total += r.success * r.shortest / max(r.path, r.shortest)
    return total / len(results)


def success_rate(results: Sequence[EpisodeResult]) -> float:
    if not results:
        raise ValueError("success rate of an empty result set")
    return sum(r.success for r in results) / len(results)


def check_regimes(regimes: Sequence[EvalRegime], train_specs: Sequence[EpisodeSpec]) -> None:
    """Raise :class:`SplitError` unless every regime respects its split rule.

    ``seen_pairs`` must be a subset of training pairs; ``unseen_pairs`` (and
    any other tag) must share scenes with training but no pair; and
    ``unseen_scenes`` must avoid every training scene.
    """
    train_keys = {s.key() for s in train_specs}
    train_scenes = {s.scene_id for s in train_specs}
    for reg in regimes:
        keys = {s.key() for s in reg.specs}
        scenes = {s.scene_id for s in reg.specs}
        if reg.tag == "seen_pairs":
            if not keys <= train_keys:
                raise SplitError(f"{len(keys - train_keys)} seen_pairs specs are not training pairs")
        elif reg.tag == "unseen_scenes":
            if scenes & train_scenes:
                raise SplitError(f"unseen_scenes uses training scenes {sorted(scenes & train_scenes)}")
        else:
            if keys & train_keys:
                raise SplitError(f"{len(keys & train_keys)} {reg.tag} specs overlap training pairs")
            if not scenes <= train_scenes:
                raise SplitError(f"{reg.tag} uses scenes outside training: {sorted(scenes - train_scenes)}")


def _tag_key(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def run_episode(
    policy: Policy,
    scene: Scene,
    spec: EpisodeSpec,
    rng: np.random.Generator,
    env_config: EnvConfig = EnvConfig(),
    goal_mode: str = "relative",
) -> EpisodeResult:
    env = BatchEnv([scene], env_config, goal_mode)
    rec = run_episodes(policy, env, [spec], rng.random((1, env_config.max_steps)), record_features=False)[0]
    return EpisodeResult.from_record(rec, 0, -1, 0, env_config)


def run_regime(
    policy: Policy,
    env: BatchEnv,
    regime: EvalRegime,
    seed: int,
    episodes_per_spec: int,
) -> tuple[list[EpisodeResult], list[EpisodeRecord]]:
    jobs = [(j, e) for j in range(len(regime.specs)) for e in range(episodes_per_spec)]
    tag = _tag_key(regime.tag)
    results, records = [], []
    for start in range(0, len(jobs), CHUNK):
        chunk = jobs[start : start + CHUNK]
        specs = [regime.specs[j] for j, _ in chunk]
        u = np.stack([episode_stream(seed, _EVAL, tag, j, e).random(env.config.max_steps) for j, e in chunk])
        recs = run_episodes(policy, env, specs, u, record_features=False)
        for (j, e), rec in zip(chunk, recs):
            results.append(EpisodeResult.from_record(rec, j, seed, e, env.config))
            records.append(rec)
    return results, records


def _summarize(regime: str, seed: int | None, results: Sequence[EpisodeResult], chash: str) -> MetricsReport:
    outcomes: dict[str, int] = {}
    for r in results:
        outcomes[r.outcome] = outcomes.get(r.outcome, 0) + 1
    return MetricsReport(regime, seed, len(results), success_rate(results), spl(results), [], dict(sorted(outcomes.items())), chash)


def evaluate(
    policy: Policy,
    scenes: Sequence[Scene],
    regimes: Sequence[EvalRegime],
    episodes_per_spec: int = 3,
    seeds: Sequence[int] = (0,),
    env_config: EnvConfig = EnvConfig(),
    goal_mode: str = "relative",
    train_specs: Sequence[EpisodeSpec] | None = None,
    config_hash: str = "",
) -> list[MetricsReport]:
    """One report per regime and seed, followed by each regime's aggregate.

    Actions are sampled from the policy distribution. When ``train_specs``
    is given the split rules are checked before anything runs.
    """
    if not seeds:
        raise ValueError("at least one evaluation seed is required")
    if train_specs is not None:
        check_regimes(regimes, train_specs)
    needed = {s.scene_id for r in regimes for s in r.specs}
    env = BatchEnv([s for s in scenes if s.scene_id in needed], env_config, goal_mode)
    reports = []
    for reg in regimes:
        if not reg.specs:
            raise ValueError(f"regime {reg.tag} has no specs")
        pooled: list[EpisodeResult] = []
        per_seed = []
        for seed in seeds:
            results, _ = run_regime(policy, env, reg, seed, episodes_per_spec)
            rep = _summarize(reg.tag, seed, results, config_hash)
            reports.append(rep)
            per_seed.append({"seed": seed, "success_rate": rep.success_rate, "spl": rep.spl, "episodes": rep.episodes})
            pooled.extend(results)
        agg = _summarize(reg.tag, None, pooled, config_hash)
        agg.per_seed = per_seed
        reports.append(agg)
    return reports


def aggregate(reports: Sequence[MetricsReport], regime: str) -> MetricsReport:
    for r in reports:
        if r.regime == regime and r.seed is None:
            return r
    raise KeyError(regime)
