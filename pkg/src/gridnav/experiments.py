"""Dataset splits, the comparison studies, and report emission.

A study is a list of independent training jobs (agent, variant, seed) whose
evaluation rows are reduced into trend verdicts. Verdicts are computed only
from the flat metric rows, so they can be recomputed from the emitted CSV.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from gridnav.bc import BCConfig, build_dataset, train_bc
from gridnav.config import ExperimentConfig
from gridnav.env import (
    EnvConfig,
    EpisodeSpec,
    Pose,
    Scene,
    distance_field,
    generate_scene,
    load_scenes,
    read_specs,
    reset,
    save_scenes,
    scene_from_ascii,
    step,
    write_specs,
)
from gridnav.evaluation import EvalRegime, check_regimes, run_regime, spl, success_rate
from gridnav.planner import optimal_action_plan
from gridnav.ppo import PPOConfig, TrainingAborted, train_ppo
from gridnav.rollout import BatchEnv, NetworkPolicy

log = logging.getLogger(__name__)

ENV_OUTPUT_ROOT = "GRIDNAV_OUTPUT_ROOT"
ENV_WORKERS = "GRIDNAV_WORKERS"
SPLIT_NAMES = ("train", "seen_pairs", "unseen_pairs", "unseen_scenes", "augment")
METRIC_FIELDS = (
    "agent",
    "variant",
    "regime",
    "seed",
    "episodes",
    "success_rate",
    "spl",
    "success",
    "wrong_stop",
    "timeout",
    "collision_cap",
)


class InsufficientPairsError(ValueError):
    """A scene has fewer valid (start, goal) pairs than the split needs."""


# --------------------------------------------------------------- scenes/splits


def _derived_seed(*key: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, np.uint64)[0])


def make_scenes(config: ExperimentConfig) -> tuple[list[Scene], list[Scene]]:
    """Training and held-out scenes, each generated from its own derived seed."""
    def build(tag: int, count: int, prefix: str) -> list[Scene]:
        return [
            generate_scene(
                _derived_seed(config.seed, tag, i),
                config.scene_size,
                config.scene_size,
                config.scene_style,
                config.scene_params,
                scene_id=f"{prefix}{i:02d}",
            )
            for i in range(count)
        ]

    return build(0, config.train_scenes, "train"), build(1, config.unseen_scenes, "heldout")


def valid_pairs(scene: Scene, min_distance: float) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """Every (start cell, goal cell) with finite geodesic distance >= ``min_distance``."""
    cells = scene.walkable_cells()
    pairs = []
    for goal in cells:
        field_ = distance_field(scene, goal)
        for start in cells:
            d = field_[start[1], start[0]]
            if np.isfinite(d) and d >= min_distance:
                pairs.append((start, goal))
    return pairs


def _draw(scene: Scene, count: int, min_distance: float, rng: np.random.Generator) -> list[EpisodeSpec]:
    pool = valid_pairs(scene, min_distance)
    if len(pool) < count:
        raise InsufficientPairsError(f"scene {scene.scene_id} has {len(pool)} valid pairs, {count} needed")
    # sampling without replacement from the valid pool is rejection sampling
    # with duplicates discarded, done exactly
    picks = rng.choice(len(pool), size=count, replace=False)
    headings = rng.integers(0, 4, size=count)
    return [EpisodeSpec(scene.scene_id, Pose(*pool[i][0], int(h)), pool[i][1]) for i, h in zip(picks, headings)]


@dataclass
class Splits:
    train: list[EpisodeSpec]
    seen_pairs: list[EpisodeSpec]
    unseen_pairs: list[EpisodeSpec]
    unseen_scenes: list[EpisodeSpec]
    augment: list[EpisodeSpec] = field(default_factory=list)

    def regimes(self, scene_ids: set[str] | None = None) -> list[EvalRegime]:
        keep = (lambda s: True) if scene_ids is None else (lambda s: s.scene_id in scene_ids)
        return [
            EvalRegime("seen_pairs", [s for s in self.seen_pairs if keep(s)]),
            EvalRegime("unseen_pairs", [s for s in self.unseen_pairs if keep(s)]),
            EvalRegime("unseen_scenes", self.unseen_scenes),
        ]

    def check(self) -> None:
        """Disjointness for the eval regimes plus the augment split."""
        check_regimes(self.regimes(), self.train)
        aug = {s.key() for s in self.augment}
        for name in ("train", "unseen_pairs", "unseen_scenes"):
            overlap = aug & {s.key() for s in getattr(self, name)}
            if overlap:
                raise ValueError(f"augment split overlaps {name} in {len(overlap)} pairs")

    def save(self, directory: str | Path, chash: str) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {}
        for name in SPLIT_NAMES:
            paths[name] = directory / f"{name}_{chash}.jsonl"
            write_specs(paths[name], getattr(self, name))
        return paths

    @classmethod
    def load(cls, directory: str | Path, chash: str) -> "Splits":
        directory = Path(directory)
        return cls(**{name: read_specs(directory / f"{name}_{chash}.jsonl") for name in SPLIT_NAMES})


def sample_splits(
    config: ExperimentConfig,
    train_scenes: Sequence[Scene],
    heldout_scenes: Sequence[Scene],
    rng: np.random.Generator,
) -> Splits:
    """Draw disjoint train / seen / unseen-pair / augment / unseen-scene specs.

    Within each training scene the train, unseen-pair and augment pairs are
    one draw without replacement, so they never share a (start, goal) key.
    Seen-pair specs are a subset of the training specs.
    """
    min_d = config.env.min_start_distance
    train, seen, unseen, augment, held = [], [], [], [], []
    k, u, a = config.train_pairs, config.unseen_eval_pairs, config.augment_pairs
    for scene in train_scenes:
        drawn = _draw(scene, k + u + a, min_d, rng)
        block = drawn[:k]
        train += block
        seen += [block[i] for i in sorted(rng.choice(k, size=config.seen_eval_pairs, replace=False))]
        unseen += drawn[k : k + u]
        augment += drawn[k + u :]
    for scene in heldout_scenes:
        held += _draw(scene, config.unseen_scene_pairs, min_d, rng)
    splits = Splits(train, seen, unseen, held, augment)
    splits.check()
    return splits


def smoke_room(pairs: int = 20, seed: int = 0, size: int = 11, env: EnvConfig = EnvConfig()) -> tuple[Scene, list[EpisodeSpec]]:
    """One open room with ``pairs`` distinct training specs: the smoke task."""
    scene = generate_scene(seed, size, size, "open", scene_id=f"room{size}")
    return scene, _draw(scene, pairs, env.min_start_distance, np.random.default_rng([seed, 1]))


def prepare(config: ExperimentConfig) -> tuple[list[Scene], list[Scene], Splits]:
    train_scenes, heldout = make_scenes(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
    return train_scenes, heldout, sample_splits(config, train_scenes, heldout, rng)


# ------------------------------------------------------------------ junctions


def junction_scene(stem: int, left: int, right: int, index: int = 0) -> tuple[Scene, dict[str, tuple[int, int]]]:
    """A T-shaped corridor: a vertical stem meeting a horizontal bar.

    Returns the scene and its landmarks: ``A`` at the foot of the stem, ``B``
    at the junction, ``C`` at the end of the right arm and ``D`` at the end
    of the left arm.
    """
    width = left + right + 3
    height = stem + 3
    cells = np.ones((height, width), dtype=np.uint8)
    bx, by = left + 1, 1
    cells[by, 1 : width - 1] = 0
    cells[by : by + stem + 1, bx] = 0
    marks = {"A": (bx, by + stem), "B": (bx, by), "C": (bx + right, by), "D": (bx - left, by)}
    text = "\n".join("".join("#" if c else "." for c in row) for row in cells)
    scene = scene_from_ascii(text, scene_id=f"junction{index:02d}", seed=index)
    return scene, marks


def junction_family(count: int = 4) -> list[tuple[Scene, dict[str, tuple[int, int]]]]:
    shapes = [(5, 3, 5), (6, 4, 4), (4, 2, 6), (7, 5, 3), (5, 5, 5), (6, 3, 6)]
    return [junction_scene(*shapes[i % len(shapes)], index=i) for i in range(count)]


def stitching_splits(family) -> tuple[list[Scene], list[EpisodeSpec], list[EpisodeSpec]]:
    """Training specs A->B and B->C (every heading) and held-out A->C, C->A."""
    scenes, train, held = [], [], []
    for scene, m in family:
        scenes.append(scene)
        for h in range(4):
            train.append(EpisodeSpec(scene.scene_id, Pose(*m["A"], h), m["B"]))
            train.append(EpisodeSpec(scene.scene_id, Pose(*m["B"], h), m["C"]))
        held.append(EpisodeSpec(scene.scene_id, Pose(*m["A"], 0), m["C"]))
        held.append(EpisodeSpec(scene.scene_id, Pose(*m["C"], 3), m["A"]))
    return scenes, train, held


def classify_failure(scene: Scene, spec: EpisodeSpec, actions: Sequence[int], marks: dict, env: EnvConfig) -> str:
    """Failure mode of one held-out junction episode, from its action sequence."""
    state, _ = reset(scene, spec, env)
    visited = {state.pose.cell}
    for a in actions:
        state, out = step(scene, state, int(a), env)
        visited.add(state.pose.cell)
        if out.done:
            break
    if state.success:
        return "success"
    bx, by = marks["B"]
    wrong_arm = any(y == by and x < bx for x, y in visited)
    if state.prev_action == 0:
        if state.pose.cell == marks["B"]:
            return "stop_at_junction"
        return "junction_miss_turn" if wrong_arm else "premature_stop"
    return "junction_miss_turn" if wrong_arm else "timeout"


# ----------------------------------------------------------------------- jobs


@dataclass
class TrainJob:
    agent: str  # "ppo" or "bc"
    variant: str
    seed: int
    scenes: list[Scene]
    train_specs: list[EpisodeSpec]
    regimes: list[EvalRegime]
    env: EnvConfig
    ppo: PPOConfig | None = None
    bc: BCConfig | None = None
    eval_episodes: int = 3
    run_dir: str | None = None
    marks: dict | None = None  # junction landmarks per scene id

    @property
    def name(self) -> str:
        return f"{self.agent}-{self.variant}-s{self.seed}"


@dataclass
class JobResult:
    name: str
    agent: str
    variant: str
    seed: int
    rows: list[dict]
    accounting: dict
    failures: dict = field(default_factory=dict)
    error: str | None = None


def _rows(job: TrainJob, policy, scenes, goal_mode: str) -> tuple[list[dict], dict]:
    env = BatchEnv(scenes, job.env, goal_mode)
    rows, failures = [], {}
    by_id = {s.scene_id: s for s in scenes}
    for reg in job.regimes:
        results, records = run_regime(policy, env, reg, job.seed, job.eval_episodes)
        counts = {k: 0 for k in ("success", "wrong_stop", "timeout", "collision_cap")}
        for r in results:
            counts[r.outcome] += 1
        rows.append(
            {
                "agent": job.agent,
                "variant": job.variant,
                "regime": reg.tag,
                "seed": job.seed,
                "episodes": len(results),
                "success_rate": success_rate(results),
                "spl": spl(results),
                **counts,
            }
        )
        if job.marks is not None and reg.tag == "unseen_pairs":
            for rec in records:
                mode = classify_failure(by_id[rec.spec.scene_id], rec.spec, rec.actions, job.marks[rec.spec.scene_id], job.env)
                failures[mode] = failures.get(mode, 0) + 1
    return rows, dict(sorted(failures.items()))


def run_job(job: TrainJob) -> JobResult:
    """Train one agent and evaluate it on every regime of the job."""
    ids = {s.scene_id for s in job.train_specs} | {s.scene_id for r in job.regimes for s in r.specs}
    scenes = [s for s in job.scenes if s.scene_id in ids]
    out = Path(job.run_dir) if job.run_dir else None
    try:
        if job.agent == "ppo":
            cfg = replace(job.ppo, seed=job.seed)
            res = train_ppo(cfg, scenes, job.train_specs, job.env, out)
            acct = {"env_steps": res.env_steps, "grad_steps": res.grad_steps, "demo_steps": 0}
            goal_mode = cfg.goal_mode
        elif job.agent == "bc":
            cfg = replace(job.bc, seed=job.seed)
            data = build_dataset(scenes, job.train_specs, job.env)
            res = train_bc(cfg, data, scenes, job.env, out)
            demo_steps = sum(len(t.steps) for t in data.trajectories)
            acct = {"env_steps": 0, "grad_steps": res.grad_steps, "demo_steps": demo_steps}
            goal_mode = cfg.goal_mode
        else:
            raise ValueError(f"unknown agent {job.agent!r}")
    except TrainingAborted as exc:
        log.error("%s aborted: %s", job.name, exc)
        return JobResult(job.name, job.agent, job.variant, job.seed, [], {}, error=str(exc))
    rows, failures = _rows(job, NetworkPolicy(res.theta, res.net), scenes, goal_mode)
    return JobResult(job.name, job.agent, job.variant, job.seed, rows, acct, failures)


def workers_from_env() -> int:
    try:
        return max(1, int(os.environ.get(ENV_WORKERS, "1")))
    except ValueError:
        return 1


def run_jobs(jobs: Sequence[TrainJob], workers: int | None = None) -> list[JobResult]:
    """Run jobs, in parallel processes when ``workers`` > 1; order is preserved."""
    workers = workers_from_env() if workers is None else workers
    if workers <= 1 or len(jobs) <= 1:
        results = []
        for job in jobs:
            log.info("running %s", job.name)
            results.append(run_job(job))
        return results
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(run_job, jobs))


# ------------------------------------------------------------------- verdicts


@dataclass
class Verdict:
    name: str
    passed: bool
    value: float | None
    margin: float
    rule: str
    seeds: list[int]
    aggregation: str = "median over seeds"


@dataclass
class StudyReport:
    experiment: str
    config_hash: str
    rows: list[dict]
    verdicts: list[Verdict]
    accounting: list[dict]
    failures: dict = field(default_factory=dict)
    aborted: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(v.passed for v in self.verdicts)

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "config_hash": self.config_hash,
            "verdicts": [asdict(v) for v in self.verdicts],
            "metrics": self.rows,
            "accounting": self.accounting,
            "compute_parity": compute_parity(self.accounting),
            "failures": self.failures,
            "aborted": self.aborted,
        }

    def metric(self, agent: str, variant: str, regime: str, key: str = "success_rate") -> float:
        return _median(self.rows, agent, variant, regime, key)


def compute_parity(accounting: Sequence[dict]) -> dict:
    """Median BC/PPO gradient-step ratio per BC variant, with PPO's median env steps."""
    ppo = [a["grad_steps"] for a in accounting if a["agent"] == "ppo"]
    if not ppo:
        return {}
    ppo_steps = statistics.median(ppo)
    out = {"ppo_grad_steps": ppo_steps, "ppo_env_steps": statistics.median(a["env_steps"] for a in accounting if a["agent"] == "ppo")}
    for variant in sorted({str(a["variant"]) for a in accounting if a["agent"] == "bc"}):
        bc = statistics.median(a["grad_steps"] for a in accounting if a["agent"] == "bc" and str(a["variant"]) == variant)
        out[f"bc_{variant}_grad_steps"] = bc
        out[f"bc_{variant}_ratio"] = round(bc / ppo_steps, 6) if ppo_steps else None
    return out


def _median(rows, agent, variant, regime, key) -> float:
    vals = [float(r[key]) for r in rows if r["agent"] == agent and str(r["variant"]) == str(variant) and r["regime"] == regime]
    if not vals:
        raise KeyError((agent, variant, regime))
    return float(statistics.median(vals))


def _seeds(rows) -> list[int]:
    return sorted({int(r["seed"]) for r in rows})


def _verdict(name: str, rows, margin: float, rule: str, value_fn: Callable[[Callable], float], passes: Callable[[float], bool]) -> Verdict:
    med = lambda a, v, reg, key="success_rate": _median(rows, a, v, reg, key)
    try:
        value = value_fn(med)
    except KeyError as exc:
        return Verdict(name, False, None, margin, f"{rule} (missing {exc.args[0]})", _seeds(rows))
    return Verdict(name, bool(passes(value)), round(value, 12), margin, rule, _seeds(rows))


def compute_verdicts(experiment: str, rows: Sequence[dict], margins: dict, scene_counts=(1, 4)) -> list[Verdict]:
    """Trend checks as pure functions of metric rows (medians over seeds)."""
    m = margins
    V = []
    if experiment in ("main_compare", "augment_bc"):
        V.append(_verdict(
            "bc_seen_spl_at_least_ppo", rows, m["seen_pairs_spl"],
            "median SPL(bc, seen_pairs) - median SPL(ppo, seen_pairs) >= margin",
            lambda f: f("bc", "base", "seen_pairs", "spl") - f("ppo", "base", "seen_pairs", "spl"),
            lambda x: x >= m["seen_pairs_spl"],
        ))
        V.append(_verdict(
            "ppo_beats_bc_unseen_pairs", rows, m["unseen_pairs_success"],
            "median success(ppo, unseen_pairs) - median success(bc, unseen_pairs) >= margin (absolute points)",
            lambda f: f("ppo", "base", "unseen_pairs") - f("bc", "base", "unseen_pairs"),
            lambda x: x >= m["unseen_pairs_success"],
        ))
        V.append(_verdict(
            "ppo_beats_bc_unseen_scenes", rows, m["unseen_scenes_success"],
            "median success(ppo, unseen_scenes) - median success(bc, unseen_scenes) >= margin (absolute points)",
            lambda f: f("ppo", "base", "unseen_scenes") - f("bc", "base", "unseen_scenes"),
            lambda x: x >= m["unseen_scenes_success"],
        ))
    if experiment == "augment_bc":
        ratio = m["augment_spl_gap_ratio"]

        def gap_excess(f):
            base = f("ppo", "base", "unseen_pairs", "spl") - f("bc", "base", "unseen_pairs", "spl")
            aug = f("ppo", "base", "unseen_pairs", "spl") - f("bc", "augmented", "unseen_pairs", "spl")
            return aug - ratio * base

        V.append(_verdict(
            "augment_shrinks_spl_gap", rows, ratio,
            "SPL gap(ppo - augmented bc) - margin * SPL gap(ppo - base bc) <= 0 on unseen_pairs",
            gap_excess, lambda x: x <= 0,
        ))
        V.append(_verdict(
            "ppo_beats_augmented_bc_unseen_pairs", rows, m["augment_success_gap"],
            "median success(ppo, unseen_pairs) - median success(augmented bc, unseen_pairs) >= margin",
            lambda f: f("ppo", "base", "unseen_pairs") - f("bc", "augmented", "unseen_pairs"),
            lambda x: x >= m["augment_success_gap"],
        ))
        for variant in ("base", "augmented"):
            V.append(_verdict(
                f"bc_{variant}_spl_matches_success", rows, m["bc_spl_success_tol"],
                f"|median SPL(bc {variant}, unseen_pairs) - median success(bc {variant}, unseen_pairs)| <= margin",
                lambda f, v=variant: abs(f("bc", v, "unseen_pairs", "spl") - f("bc", v, "unseen_pairs")),
                lambda x: x <= m["bc_spl_success_tol"],
            ))
        V.append(_verdict(
            "augmented_bc_seen_at_least_base", rows, 0.0,
            "median success(augmented bc, seen_pairs) - median success(base bc, seen_pairs) >= margin",
            lambda f: f("bc", "augmented", "seen_pairs") - f("bc", "base", "seen_pairs"),
            lambda x: x >= 0,
        ))
    if experiment == "scene_ablation":
        lo, hi = (str(c) for c in (min(scene_counts), max(scene_counts)))
        tol = m["scene_count"]
        for agent in ("ppo", "bc"):
            V.append(_verdict(
                f"{agent}_more_scenes_help_unseen_scenes", rows, tol,
                f"median success({agent}@{hi}, unseen_scenes) - median success({agent}@{lo}, unseen_scenes) >= -margin",
                lambda f, a=agent: f(a, hi, "unseen_scenes") - f(a, lo, "unseen_scenes"),
                lambda x: x >= -tol,
            ))
        for regime in ("seen_pairs", "unseen_pairs"):
            V.append(_verdict(
                f"bc_more_scenes_hurt_{regime}", rows, tol,
                f"median success(bc@{hi}, {regime}) - median success(bc@{lo}, {regime}) <= margin",
                lambda f, r=regime: f("bc", hi, r) - f("bc", lo, r),
                lambda x: x <= tol,
            ))
    if experiment == "goal_repr_ablation":
        V.append(_verdict(
            "relative_goal_beats_absolute", rows, m["goal_repr_gap"],
            "median success(ppo relative, seen_pairs) - median success(ppo absolute, seen_pairs) >= margin",
            lambda f: f("ppo", "relative", "seen_pairs") - f("ppo", "absolute", "seen_pairs"),
            lambda x: x >= m["goal_repr_gap"],
        ))
        V.append(_verdict(
            "absolute_goal_like_no_goal", rows, m["goal_repr_tol"],
            "|median success(ppo absolute, seen_pairs) - median success(ppo none, seen_pairs)| <= margin",
            lambda f: abs(f("ppo", "absolute", "seen_pairs") - f("ppo", "none", "seen_pairs")),
            lambda x: x <= m["goal_repr_tol"],
        ))
    if experiment == "reward_ablation":
        V.append(_verdict(
            "shaped_reward_learns", rows, m["reward_full_min"],
            "median success(ppo shaped, seen_pairs) >= margin",
            lambda f: f("ppo", "shaped", "seen_pairs"),
            lambda x: x >= m["reward_full_min"],
        ))
        V.append(_verdict(
            "unshaped_reward_fails", rows, m["reward_ablation_max"],
            "median success(ppo unshaped, seen_pairs) < margin",
            lambda f: f("ppo", "unshaped", "seen_pairs"),
            lambda x: x < m["reward_ablation_max"],
        ))
    if experiment == "stitching_probe":
        V.append(_verdict(
            "ppo_stitches_better_than_bc", rows, m["stitching_gap"],
            "median success(ppo, held-out A->C) - median success(bc, held-out A->C) >= margin",
            lambda f: f("ppo", "base", "stitch_ac") - f("bc", "base", "stitch_ac"),
            lambda x: x >= m["stitching_gap"],
        ))
    return V


# -------------------------------------------------------------------- studies


def _run_dir(config: ExperimentConfig, name: str) -> str:
    return str(Path(config.output_dir) / "runs" / f"{config.experiment}_{config.hash()}" / name)


def _finish(config: ExperimentConfig, results: Sequence[JobResult], extra_rows: Callable[[list[dict]], list[dict]] | None = None) -> StudyReport:
    rows = [r for res in results for r in res.rows]
    if extra_rows is not None:
        rows = extra_rows(rows)
    accounting = [
        {"agent": r.agent, "variant": r.variant, "seed": r.seed, **r.accounting} for r in results if r.error is None
    ]
    failures = {r.name: r.failures for r in results if r.failures}
    aborted = [f"{r.name}: {r.error}" for r in results if r.error is not None]
    verdicts = compute_verdicts(config.experiment, rows, config.margins, config.scene_counts)
    for key, ratio in compute_parity(accounting).items():
        if key.endswith("_ratio") and ratio is not None and not 0.5 <= ratio <= 2.0:
            log.warning("compute parity: %s = %.3f is outside [0.5, 2]", key, ratio)
    return StudyReport(config.experiment, config.hash(), rows, verdicts, accounting, failures, aborted)


def _jobs(config, agents, variant, scenes, train, regimes, seeds=None, **over) -> list[TrainJob]:
    jobs = []
    for seed in seeds or config.seeds:
        for agent in agents:
            job = TrainJob(
                agent, variant, seed, scenes, train, regimes, config.env, config.ppo, config.bc, config.eval_episodes,
            )
            for k, v in over.items():
                setattr(job, k, v)
            job.run_dir = _run_dir(config, job.name)
            jobs.append(job)
    return jobs


def run_main_compare(config: ExperimentConfig, workers: int | None = None) -> StudyReport:
    tr, ho, splits = prepare(config)
    jobs = _jobs(config, ("ppo", "bc"), "base", tr + ho, splits.train, splits.regimes())
    return _finish(config, run_jobs(jobs, workers))


def run_augment_bc(config: ExperimentConfig, workers: int | None = None) -> StudyReport:
    tr, ho, splits = prepare(config)
    jobs = _jobs(config, ("ppo", "bc"), "base", tr + ho, splits.train, splits.regimes())
    jobs += _jobs(config, ("bc",), "augmented", tr + ho, splits.train + splits.augment, splits.regimes())
    return _finish(config, run_jobs(jobs, workers))


def run_scene_ablation(config: ExperimentConfig, workers: int | None = None) -> StudyReport:
    if config.train_scenes < max(config.scene_counts):
        raise ValueError(f"scene ablation needs {max(config.scene_counts)} training scenes, config has {config.train_scenes}")
    tr, ho, splits = prepare(config)
    # both scene counts are scored on the pairs of the first scene, which every variant trains on
    common = {tr[0].scene_id}
    regimes = splits.regimes(common)
    jobs = []
    for count in config.scene_counts:
        ids = {s.scene_id for s in tr[:count]}
        train = [s for s in splits.train if s.scene_id in ids]
        jobs += _jobs(config, ("ppo", "bc"), str(count), tr + ho, train, regimes)
    return _finish(config, run_jobs(jobs, workers))


def run_goal_repr_ablation(config: ExperimentConfig, workers: int | None = None) -> StudyReport:
    tr, ho, splits = prepare(config)
    regimes = splits.regimes()[:2]
    jobs = []
    for mode in ("relative", "absolute", "none"):
        ppo = replace(config.ppo, goal_mode=mode)
        jobs += _jobs(config, ("ppo",), mode, tr, splits.train, regimes, ppo=ppo)
    return _finish(config, run_jobs(jobs, workers))


def run_reward_ablation(config: ExperimentConfig, workers: int | None = None) -> StudyReport:
    tr, ho, splits = prepare(config)
    regimes = splits.regimes()[:2]
    jobs = []
    for variant, weight in (("shaped", config.env.shaping_weight), ("unshaped", 0.0)):
        jobs += _jobs(config, ("ppo",), variant, tr, splits.train, regimes, env=replace(config.env, shaping_weight=weight))
    return _finish(config, run_jobs(jobs, workers))


def run_stitching_probe(config: ExperimentConfig, workers: int | None = None) -> StudyReport:
    family = junction_family(config.train_scenes)
    scenes, train, held = stitching_splits(family)
    marks = {s.scene_id: m for s, m in family}
    ac = [s for s in held if s.goal == marks[s.scene_id]["C"]]
    ca = [s for s in held if s.goal == marks[s.scene_id]["A"]]
    seen = list({s.key(): s for s in train}.values())
    regimes = [EvalRegime("seen_pairs", seen), EvalRegime("unseen_pairs", ac), EvalRegime("stitch_ca", ca)]
    check_regimes(regimes, train)
    for scene, m in family:
        optimal_action_plan(scene, Pose(*m["A"], 0), m["C"])  # feasibility: raises if unreachable
    jobs = _jobs(config, ("ppo", "bc"), "base", scenes, train, regimes, marks=marks)

    def relabel(rows):
        # held-out A->C is scored under its own name in the report
        return [dict(r, regime="stitch_ac") if r["regime"] == "unseen_pairs" else r for r in rows]

    return _finish(config, run_jobs(jobs, workers), relabel)


STUDIES: dict[str, Callable[..., StudyReport]] = {
    "main_compare": run_main_compare,
    "augment_bc": run_augment_bc,
    "scene_ablation": run_scene_ablation,
    "goal_repr_ablation": run_goal_repr_ablation,
    "reward_ablation": run_reward_ablation,
    "stitching_probe": run_stitching_probe,
}


def run_study(config: ExperimentConfig, workers: int | None = None) -> StudyReport:
    return STUDIES[config.experiment](config, workers)


# -------------------------------------------------------------------- reports


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in METRIC_FIELDS})
    return buf.getvalue()


def rows_from_csv(text: str) -> list[dict]:
    out = []
    for r in csv.DictReader(io.StringIO(text)):
        row = dict(r)
        for k in ("seed", "episodes", "success", "wrong_stop", "timeout", "collision_cap"):
            row[k] = int(row[k])
        for k in ("success_rate", "spl"):
            row[k] = float(row[k])
        out.append(row)
    return out


def plot_data(study: StudyReport) -> dict:
    """x/y series per panel: one panel per metric, one series per agent variant."""
    rows = study.rows
    series_keys = sorted({(r["agent"], str(r["variant"])) for r in rows})
    panels = []
    if study.experiment == "scene_ablation":
        counts = sorted({str(r["variant"]) for r in rows}, key=int)
        for metric in ("success_rate", "spl"):
            for regime in sorted({r["regime"] for r in rows}):
                series = []
                for agent in sorted({r["agent"] for r in rows}):
                    y = [_median(rows, agent, c, regime, metric) for c in counts]
                    series.append({"label": agent, "x": [int(c) for c in counts], "y": y})
                panels.append({"title": f"{regime} {metric} vs training scenes", "xlabel": "training scenes", "ylabel": metric, "series": series})
        return {"experiment": study.experiment, "panels": panels}
    regimes = list(dict.fromkeys(r["regime"] for r in rows))
    for metric in ("success_rate", "spl"):
        series = []
        for agent, variant in series_keys:
            y = []
            for regime in regimes:
                try:
                    y.append(_median(rows, agent, variant, regime, metric))
                except KeyError:
                    y.append(None)
            label = agent if variant == "base" else f"{agent} ({variant})"
            series.append({"label": label, "x": regimes, "y": y})
        panels.append({"title": f"{metric} by evaluation regime", "xlabel": "regime", "ylabel": metric, "series": series})
    return {"experiment": study.experiment, "panels": panels}


def emit_reports(study: StudyReport, out_dir: str | Path, started: float | None = None) -> dict[str, Path]:
    """Write the JSON report, flat CSVs and plot data; timestamps go to a sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{study.experiment}_{study.config_hash}"
    paths = {
        "report": out / f"report_{stem}.json",
        "metrics": out / f"metrics_{stem}.csv",
        "verdicts": out / f"verdicts_{stem}.csv",
        "plot": out / f"plot_{stem}.json",
        "meta": out / f"meta_{stem}.json",
    }
    paths["report"].write_text(json.dumps(study.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    paths["metrics"].write_text(rows_to_csv(study.rows), encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "passed", "value", "margin", "rule", "seeds", "aggregation"])
    for v in study.verdicts:
        w.writerow([v.name, v.passed, "" if v.value is None else repr(v.value), repr(v.margin), v.rule, " ".join(map(str, v.seeds)), v.aggregation])
    paths["verdicts"].write_text(buf.getvalue(), encoding="utf-8")
    paths["plot"].write_text(json.dumps(plot_data(study), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    now = time.time()
    meta = {"written_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(now))}
    if started is not None:
        meta["wall_seconds"] = round(now - started, 3)
    paths["meta"].write_text(json.dumps(meta, sort_keys=True) + "\n", encoding="utf-8")
    return paths


def load_report(path: str | Path) -> StudyReport:
    d = json.loads(Path(path).read_text(encoding="utf-8"))
    return StudyReport(
        d["experiment"],
        d["config_hash"],
        d["metrics"],
        [Verdict(**v) for v in d["verdicts"]],
        d["accounting"],
        d.get("failures", {}),
        d.get("aborted", []),
    )


def write_scene_files(directory: str | Path, chash: str, train: Sequence[Scene], heldout: Sequence[Scene]) -> dict[str, Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"train_scenes": directory / f"scenes_train_{chash}.jsonl", "heldout_scenes": directory / f"scenes_heldout_{chash}.jsonl"}
    save_scenes(paths["train_scenes"], train)
    save_scenes(paths["heldout_scenes"], heldout)
    return paths


def read_scene_files(directory: str | Path, chash: str) -> tuple[list[Scene], list[Scene]]:
    directory = Path(directory)
    return (
        load_scenes(directory / f"scenes_train_{chash}.jsonl"),
        load_scenes(directory / f"scenes_heldout_{chash}.jsonl"),
    )
