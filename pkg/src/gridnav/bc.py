"""Behavior cloning on optimal demonstrations with the actor-only network."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gridnav.env import EnvConfig, EpisodeSpec, Scene
from gridnav.features import encode_episode
from gridnav.net import (
    AdamConfig,
    AdamState,
    BCLoss,
    Checkpoint,
    NetworkSpec,
    NonFiniteError,
    SequenceBatch,
    adam_step,
    clip_by_global_norm,
    init_params,
    sequence_gradient,
)
from gridnav.planner import Trajectory, config_hash, generate_demo, read_demos, write_demos
from gridnav.ppo import TrainingAborted, UpdateAborted
from gridnav.rollout import episode_stream

_INIT, _SHUFFLE = 0, 3


@dataclass(frozen=True)
class BCConfig:
    epochs: int = 200
    minibatch_episodes: int = 1
    lr: float = 2.5e-4
    seed: int = 0
    max_grad_norm: float = 0.5
    goal_mode: str = "relative"
    encoder_widths: tuple[int, ...] = (64,)
    hidden_size: int = 64
    checkpoint_every: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        if self.epochs < 1 or self.minibatch_episodes < 1 or self.lr <= 0:
            raise ValueError("epochs, minibatch_episodes and lr must be positive")

    def network(self, patch_size: int) -> NetworkSpec:
        return NetworkSpec(patch_size, self.encoder_widths, self.hidden_size, 4, value_head=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


@dataclass
class DemoDataset:
    trajectories: list[Trajectory]
    provenance: str
    split: str = "base"
    scene_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.trajectories)

    def keys(self) -> set:
        return {t.spec.key() for t in self.trajectories}

    def merged(self, other: "DemoDataset") -> "DemoDataset":
        if self.keys() & other.keys():
            raise ValueError("datasets overlap in (start, goal) pairs")
        return DemoDataset(
            self.trajectories + other.trajectories,
            config_hash([self.provenance, other.provenance]),
            f"{self.split}+{other.split}",
            sorted(set(self.scene_ids) | set(other.scene_ids)),
        )

    def save(self, path) -> None:
        header = {"scene_ids": self.scene_ids, "config_hash": self.provenance, "split": self.split}
        write_demos(path, self.trajectories, header)

    @classmethod
    def load(cls, path) -> "DemoDataset":
        head, trajs = read_demos(path)
        return cls(trajs, head["config_hash"], head.get("split", "base"), list(head.get("scene_ids", [])))


def build_dataset(
    scenes: Sequence[Scene],
    specs: Sequence[EpisodeSpec],
    env_config: EnvConfig = EnvConfig(),
    split: str = "base",
) -> DemoDataset:
    by_id = {s.scene_id: s for s in scenes}
    trajs = []
    for spec in specs:
        demo = generate_demo(by_id[spec.scene_id], spec, env_config)
        if not demo.success:
            raise RuntimeError(f"demo failed for {spec}")
        trajs.append(demo)
    prov = config_hash({"specs": [s.to_dict() for s in specs], "env": asdict(env_config), "split": split})
    return DemoDataset(trajs, prov, split, sorted({s.scene_id for s in specs}))


@dataclass
class EncodedDemo:
    features: np.ndarray  # (T, D)
    actions: np.ndarray  # (T,)


def encode_dataset(dataset: DemoDataset, scenes: Sequence[Scene], goal_mode: str = "relative") -> list[EncodedDemo]:
    """Network inputs for every demo step; rewards are never read."""
    by_id = {s.scene_id: s for s in scenes}
    return [
        EncodedDemo(
            encode_episode(t.observations, by_id[t.scene_id], t.goal, goal_mode),
            np.array(t.actions, dtype=np.int64),
        )
        for t in dataset.trajectories
    ]


def bc_update(
    theta: np.ndarray,
    adam: AdamState,
    net: NetworkSpec,
    demos: Sequence[EncodedDemo],
    config: BCConfig,
) -> tuple[np.ndarray, AdamState, float]:
    """One Adam step on the mean demo-action NLL of a minibatch (teacher forcing)."""
    if not demos:
        raise ValueError("empty minibatch")
    batch = SequenceBatch.from_episodes([d.features for d in demos], [d.actions for d in demos])
    try:
        loss, grad, _ = sequence_gradient(theta, net, batch, BCLoss())
    except NonFiniteError as exc:
        raise UpdateAborted(str(exc)) from exc
    grad, _ = clip_by_global_norm(grad, config.max_grad_norm)
    theta, adam = adam_step(theta, grad, adam, AdamConfig(lr=config.lr))
    return theta, adam, loss


def dataset_nll(theta: np.ndarray, net: NetworkSpec, demos: Sequence[EncodedDemo]) -> float:
    batch = SequenceBatch.from_episodes([d.features for d in demos], [d.actions for d in demos])
    loss, _, _ = sequence_gradient(theta, net, batch, BCLoss())
    return loss


@dataclass
class BCResult:
    theta: np.ndarray
    net: NetworkSpec
    ledger: list[dict]
    grad_steps: int
    checkpoint: Checkpoint


def train_bc(
    config: BCConfig,
    dataset: DemoDataset,
    scenes: Sequence[Scene],
    env_config: EnvConfig = EnvConfig(),
    out_dir: str | Path | None = None,
) -> BCResult:
    """Epochs over shuffled whole-episode minibatches; logs mean NLL per epoch."""
    if not len(dataset):
        raise ValueError("empty dataset")
    net = config.network(env_config.patch_size)
    demos = encode_dataset(dataset, scenes, config.goal_mode)
    theta = init_params(net, episode_stream(config.seed, _INIT))
    adam = AdamState.zeros_like(theta)
    out = Path(out_dir) if out_dir is not None else None
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps({"bc": config.to_dict(), "env": asdict(env_config), "dataset": dataset.provenance}, sort_keys=True, indent=2),
            encoding="utf-8",
        )
        fh = open(out / "ledger.jsonl", "w", encoding="utf-8")
    ledger: list[dict] = []
    grad_steps = 0
    n = len(demos)
    n_mb = max(1, -(-n // config.minibatch_episodes))
    try:
        for epoch in range(config.epochs):
            order = episode_stream(config.seed, _SHUFFLE, epoch).permutation(n)
            losses, sizes = [], []
            for members in np.array_split(order, n_mb):
                chunk = [demos[i] for i in members]
                try:
                    theta, adam, loss = bc_update(theta, adam, net, chunk, config)
                except UpdateAborted as exc:
                    raise TrainingAborted(f"epoch {epoch}: {exc}") from exc
                grad_steps += 1
                losses.append(loss)
                sizes.append(sum(len(d.actions) for d in chunk))
            rec = {
                "epoch": epoch,
                "grad_steps": grad_steps,
                "nll": float(np.average(losses, weights=sizes)),
            }
            ledger.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if out is not None and config.checkpoint_every and (epoch + 1) % config.checkpoint_every == 0:
                Checkpoint(net, theta, adam, grad_steps, {"seed": config.seed, "epoch": epoch}).save(
                    out / f"ckpt_{epoch + 1:05d}.json"
                )
    finally:
        if fh is not None:
            fh.close()
    ckpt = Checkpoint(
        net,
        theta,
        adam,
        grad_steps,
        {"seed": config.seed, "epoch": config.epochs},
        {"agent": "bc", "grad_steps": grad_steps, "goal_mode": config.goal_mode, "dataset": dataset.provenance},
    )
    if out is not None:
        ckpt.save(out / "final.json")
    return BCResult(theta, net, ledger, grad_steps, ckpt)
