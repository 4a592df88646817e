"""On-policy recurrent PPO with Monte-Carlo returns and a clipped surrogate."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from gridnav.env import EnvConfig, EpisodeSpec, Scene
from gridnav.net import (
    AdamConfig,
    AdamState,
    Checkpoint,
    NetworkSpec,
    NonFiniteError,
    PPOLoss,
    SequenceBatch,
    adam_step,
    clip_by_global_norm,
    init_params,
    sequence_gradient,
)
from gridnav.rollout import BatchEnv, EpisodeRecord, NetworkPolicy, episode_stream, run_episodes

log = logging.getLogger(__name__)

# stream tags mixed into SeedSequence keys
_INIT, _COLLECT, _UPDATE = 0, 1, 2


class UpdateAborted(RuntimeError):
    """A PPO update produced a non-finite loss; parameters were restored."""


class TrainingAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    episodes_per_iter: int = 32
    total_steps: int = 200_000
    lr: float = 2.5e-4
    seed: int = 0
    max_grad_norm: float = 0.5
    normalize_advantages: bool = True
    # False: R_t = sum_{j>t} gamma^(j-t) r_j as printed; True: gamma^(j-t-1)
    conventional_returns: bool = False
    goal_mode: str = "relative"
    encoder_widths: tuple[int, ...] = (64,)
    hidden_size: int = 64
    checkpoint_every: int = 0
    max_aborts: int = 3

    def __post_init__(self) -> None:
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0 < self.clip < 1:
            raise ValueError(f"clip must be in (0, 1), got {self.clip}")
        if self.entropy_coef < 0:
            raise ValueError("entropy_coef must be >= 0")
        if self.epochs < 1 or self.minibatches < 1 or self.episodes_per_iter < 1:
            raise ValueError("epochs, minibatches and episodes_per_iter must be positive")

    def network(self, patch_size: int) -> NetworkSpec:
        return NetworkSpec(patch_size, self.encoder_widths, self.hidden_size, 4, value_head=True)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        return d


def compute_returns(rewards: np.ndarray, gamma: float, conventional: bool = False) -> np.ndarray:
    """Discounted Monte-Carlo returns by one backward sweep.

    ``rewards[t]`` is the reward received after action ``t``. By default
    ``R_t = gamma * (r_{t+1} + R_{t+1})``; ``conventional`` drops the leading
    factor, giving ``R_t = r_{t+1} + gamma * R_{t+1}``.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    out = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc if conventional else gamma * (rewards[t] + acc)
        out[t] = acc
    return out


def compute_advantages(returns: np.ndarray, values: np.ndarray, normalize: bool = True, eps: float = 1e-8) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if returns.shape != values.shape:
        raise ValueError(f"length mismatch: {returns.shape} vs {values.shape}")
    adv = returns - values
    if normalize and adv.size:
        adv = (adv - adv.mean()) / (adv.std() + eps)
    return adv


@dataclass
class RolloutBatch:
    iteration: int
    episodes: list[EpisodeRecord]
    returns: list[np.ndarray] = field(default_factory=list)
    advantages: list[np.ndarray] = field(default_factory=list)

    @property
    def env_steps(self) -> int:
        return sum(e.steps for e in self.episodes)

    def success_rate(self) -> float:
        return float(np.mean([e.success for e in self.episodes]))


def _specs_by_scene(train_specs: Sequence[EpisodeSpec]) -> tuple[list[str], dict[str, list[EpisodeSpec]]]:
    groups: dict[str, list[EpisodeSpec]] = {}
    for s in train_specs:
        groups.setdefault(s.scene_id, []).append(s)
    return sorted(groups), groups


def collect_rollouts(
    theta: np.ndarray,
    net: NetworkSpec,
    env: BatchEnv,
    train_specs: Sequence[EpisodeSpec],
    config: PPOConfig,
    iteration: int,
) -> RolloutBatch:
    """Sample ``episodes_per_iter`` episodes with the stochastic policy.

    Each episode draws its scene uniformly, then a training pair from that
    scene, then its action noise, all from its own stream keyed by
    ``(seed, iteration, episode)``. Failed episodes stay in the batch.
    """
    scene_ids, groups = _specs_by_scene(train_specs)
    specs, uniforms = [], []
    for i in range(config.episodes_per_iter):
        g = episode_stream(config.seed, _COLLECT, iteration, i)
        pool = groups[scene_ids[int(g.integers(len(scene_ids)))]]
        specs.append(pool[int(g.integers(len(pool)))])
        uniforms.append(g.random(env.config.max_steps))
    episodes = run_episodes(NetworkPolicy(theta, net), env, specs, np.stack(uniforms))
    batch = RolloutBatch(iteration, episodes)
    annotate(batch, config)
    return batch


def annotate(batch: RolloutBatch, config: PPOConfig) -> None:
    """Fill per-step returns and (batch-normalized) advantages."""
    rets = [compute_returns(e.rewards, config.gamma, config.conventional_returns) for e in batch.episodes]
    vals = [e.extras["value"] for e in batch.episodes]
    flat = compute_advantages(np.concatenate(rets), np.concatenate(vals), config.normalize_advantages)
    splits = np.cumsum([len(r) for r in rets])[:-1]
    batch.returns = rets
    batch.advantages = np.split(flat, splits)


def clipped_objective(ratio, advantage, clip: float):
    """Per-step ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip, 1.0 + clip) * advantage)


def minibatch(batch: RolloutBatch, members: Sequence[int]) -> SequenceBatch:
    eps = [batch.episodes[i] for i in members]
    return SequenceBatch.from_episodes(
        [e.features for e in eps],
        [e.actions for e in eps],
        old_logp=[e.extras["logp"] for e in eps],
        advantages=[batch.advantages[i] for i in members],
        returns=[batch.returns[i] for i in members],
    )


@dataclass
class UpdateStats:
    loss: float
    surrogate: float
    value_mse: float
    entropy: float
    approx_kl: float
    clip_frac: float
    grad_norm: float
    clip_dominance: bool
    ratio_dev_at_snapshot: float
    grad_steps: int


def ppo_update(
    theta: np.ndarray,
    adam: AdamState,
    net: NetworkSpec,
    batch: RolloutBatch,
    config: PPOConfig,
) -> tuple[np.ndarray, AdamState, UpdateStats]:
    """Epochs of Adam steps on whole-episode minibatches.

    Raises :class:`UpdateAborted` on a non-finite loss; the caller keeps the
    parameters it passed in, which are never mutated.
    """
    loss_spec = PPOLoss(config.clip, config.value_coef, config.entropy_coef)
    hyper = AdamConfig(lr=config.lr)
    g = episode_stream(config.seed, _UPDATE, batch.iteration)
    n = len(batch.episodes)
    k = min(config.minibatches, n)
    new_theta, new_adam = theta, adam
    agg: dict[str, list[float]] = {}
    dominance = True
    ratio_dev = 0.0
    steps = 0
    for epoch in range(config.epochs):
        order = g.permutation(n)
        for j, members in enumerate(np.array_split(order, k)):
            mb = minibatch(batch, members)
            try:
                loss, grad, stats = sequence_gradient(new_theta, net, mb, loss_spec)
            except NonFiniteError as exc:
                raise UpdateAborted(str(exc)) from exc
            if epoch == 0 and j == 0:
                ratio_dev = stats["max_ratio_dev"]
            dominance &= stats["clip_dominance"]
            grad, norm = clip_by_global_norm(grad, config.max_grad_norm)
            new_theta, new_adam = adam_step(new_theta, grad, new_adam, hyper)
            steps += 1
            for key in ("surrogate", "value_mse", "entropy", "approx_kl", "clip_frac"):
                agg.setdefault(key, []).append(stats[key])
            agg.setdefault("loss", []).append(loss)
            agg.setdefault("grad_norm", []).append(norm)
    if not np.all(np.isfinite(new_theta)):
        raise UpdateAborted("non-finite parameters after update")
    mean = {k: float(np.mean(v)) for k, v in agg.items()}
    return new_theta, new_adam, UpdateStats(
        mean["loss"],
        mean["surrogate"],
        mean["value_mse"],
        mean["entropy"],
        mean["approx_kl"],
        mean["clip_frac"],
        mean["grad_norm"],
        dominance,
        ratio_dev,
        steps,
    )


@dataclass
class TrainResult:
    theta: np.ndarray
    net: NetworkSpec
    ledger: list[dict]
    env_steps: int
    grad_steps: int
    checkpoint: Checkpoint


def _round(x: float) -> float:
    return float(np.float64(x))


def train_ppo(
    config: PPOConfig,
    scenes: Sequence[Scene],
    train_specs: Sequence[EpisodeSpec],
    env_config: EnvConfig = EnvConfig(),
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Alternate rollout collection and clipped-surrogate updates.

    Writes ``ledger.jsonl`` (one record per iteration), ``config.json`` and
    checkpoints into ``out_dir`` when given.
    """
    if not train_specs:
        raise ValueError("empty training split")
    net = config.network(env_config.patch_size)
    scene_ids = {s.scene_id for s in train_specs}
    env = BatchEnv([s for s in scenes if s.scene_id in scene_ids], env_config, config.goal_mode)
    theta = init_params(net, episode_stream(config.seed, _INIT))
    adam = AdamState.zeros_like(theta)
    out = Path(out_dir) if out_dir is not None else None
    ledger_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(
            json.dumps({"ppo": config.to_dict(), "env": asdict(env_config)}, sort_keys=True, indent=2),
            encoding="utf-8",
        )
        ledger_fh = open(out / "ledger.jsonl", "w", encoding="utf-8")

    ledger: list[dict] = []
    env_steps = grad_steps = aborts = 0
    iteration = 0
    try:
        while env_steps < config.total_steps:
            batch = collect_rollouts(theta, net, env, train_specs, config, iteration)
            env_steps += batch.env_steps
            try:
                theta, adam, st = ppo_update(theta, adam, net, batch, config)
            except UpdateAborted as exc:
                aborts += 1
                log.warning("iteration %d: update aborted (%s); %d/%d", iteration, exc, aborts, config.max_aborts)
                if aborts > config.max_aborts:
                    raise TrainingAborted(f"{aborts} aborted updates") from exc
                iteration += 1
                continue
            grad_steps += st.grad_steps
            rec = {
                "iteration": iteration,
                "env_steps": env_steps,
                "grad_steps": grad_steps,
                "episodes": len(batch.episodes),
                "success_rate": batch.success_rate(),
                "mean_return": _round(np.mean([e.rewards.sum() for e in batch.episodes])),
                "mean_length": _round(np.mean([e.steps for e in batch.episodes])),
                **{k: (v if isinstance(v, bool) else _round(v)) for k, v in asdict(st).items() if k != "grad_steps"},
            }
            ledger.append(rec)
            if ledger_fh is not None:
                ledger_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if out is not None and config.checkpoint_every and (iteration + 1) % config.checkpoint_every == 0:
                Checkpoint(net, theta, adam, env_steps, {"seed": config.seed, "iteration": iteration}).save(
                    out / f"ckpt_{iteration + 1:05d}.json"
                )
            iteration += 1
    finally:
        if ledger_fh is not None:
            ledger_fh.close()
    ckpt = Checkpoint(
        net,
        theta,
        adam,
        env_steps,
        {"seed": config.seed, "iteration": iteration},
        {"agent": "ppo", "grad_steps": grad_steps, "goal_mode": config.goal_mode},
    )
    if out is not None:
        ckpt.save(out / "final.json")
    return TrainResult(theta, net, ledger, env_steps, grad_steps, ckpt)
