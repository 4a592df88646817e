import json
import math

import numpy as np
import pytest

from conftest import random_specs
from gridnav.bc import BCConfig, DemoDataset, bc_update, build_dataset, dataset_nll, encode_dataset, train_bc
from gridnav.env import EnvConfig
from gridnav.net import AdamState, init_params, unroll
from gridnav.rollout import BatchEnv, NetworkPolicy, run_episodes

TINY_NET = {"encoder_widths": (16,), "hidden_size": 16}


@pytest.fixture
def dataset(maze9):
    return build_dataset([maze9], random_specs(maze9, 6, 0))


def test_dataset_contents(dataset, maze9):
    assert len(dataset) == 6 and dataset.scene_ids == [maze9.scene_id]
    assert all(t.success and t.actions[-1] == 0 for t in dataset.trajectories)
    again = build_dataset([maze9], random_specs(maze9, 6, 0))
    assert again.provenance == dataset.provenance


def test_dataset_roundtrip(tmp_path, dataset):
    dataset.save(tmp_path / "d.jsonl")
    back = DemoDataset.load(tmp_path / "d.jsonl")
    assert back.provenance == dataset.provenance and back.keys() == dataset.keys()
    assert [t.actions for t in back.trajectories] == [t.actions for t in dataset.trajectories]


def test_merge_requires_disjoint_pairs(maze9, dataset):
    extra = build_dataset([maze9], random_specs(maze9, 12, 0)[6:], split="augment")
    if extra.keys() & dataset.keys():
        pytest.skip("sampled overlap")
    merged = dataset.merged(extra)
    assert len(merged) == 12 and merged.split == "base+augment"
    with pytest.raises(ValueError):
        dataset.merged(dataset)


def test_training_never_reads_rewards(maze9, dataset):
    config = BCConfig(epochs=2, **TINY_NET)
    before = train_bc(config, dataset, [maze9])
    for t in dataset.trajectories:
        for s in t.steps:
            object.__setattr__(s, "reward", float("nan"))
    after = train_bc(config, dataset, [maze9])
    assert np.array_equal(before.theta, after.theta) and before.ledger == after.ledger


def test_initial_nll_is_log4(maze9, dataset):
    config = BCConfig()
    net = config.network(5)
    theta = init_params(net, np.random.default_rng(0))
    assert dataset_nll(theta, net, encode_dataset(dataset, [maze9])) == pytest.approx(math.log(4), abs=0.01)


def test_teacher_forcing_matches_demo_inputs(maze9, dataset):
    """The features for step t carry the demonstrated action t-1, not the model's."""
    demos = encode_dataset(dataset, [maze9])
    for d, t in zip(demos, dataset.trajectories):
        prev = d.features[1:, -4:]
        assert np.array_equal(np.argmax(prev, axis=1), d.actions[:-1])
        assert not d.features[0, -4:].any()


def test_update_lowers_minibatch_nll(maze9, dataset):
    config = BCConfig(lr=1e-3, **TINY_NET)
    net = config.network(5)
    theta = init_params(net, np.random.default_rng(0))
    demos = encode_dataset(dataset, [maze9])
    adam = AdamState.zeros_like(theta)
    first = dataset_nll(theta, net, demos)
    for _ in range(20):
        theta, adam, _ = bc_update(theta, adam, net, demos, config)
    assert dataset_nll(theta, net, demos) < first
    with pytest.raises(ValueError):
        bc_update(theta, adam, net, [], config)


def test_bc_network_has_no_value_head():
    assert not BCConfig().network(5).value_head


def test_training_is_deterministic(tmp_path, maze9, dataset):
    config = BCConfig(epochs=3, **TINY_NET)
    a = train_bc(config, dataset, [maze9], EnvConfig(), tmp_path / "a")
    b = train_bc(config, dataset, [maze9], EnvConfig(), tmp_path / "b")
    assert (tmp_path / "a" / "ledger.jsonl").read_bytes() == (tmp_path / "b" / "ledger.jsonl").read_bytes()
    assert np.array_equal(a.theta, b.theta)
    assert a.grad_steps == 3 * len(dataset)
    recs = [json.loads(line) for line in (tmp_path / "a" / "ledger.jsonl").read_text().splitlines()]
    assert [r["epoch"] for r in recs] == [0, 1, 2]
    assert (tmp_path / "a" / "final.json").exists()


def test_nll_decreases_over_epochs(maze9, dataset):
    res = train_bc(BCConfig(epochs=30, **TINY_NET), dataset, [maze9])
    nll = [r["nll"] for r in res.ledger]
    smooth = np.convolve(nll, np.ones(5) / 5, mode="valid")
    assert np.all(np.diff(smooth) <= 1e-3)
    assert nll[-1] < nll[0]


def test_empty_dataset_rejected(maze9):
    with pytest.raises(ValueError):
        train_bc(BCConfig(), DemoDataset([], "x"), [maze9])


class RecordingPolicy(NetworkPolicy):
    def act(self, idx, feats, u):
        actions, extra = super().act(idx, feats, u)
        self.trace.append(self.hidden[0].copy())
        return actions, extra


def test_teacher_forced_hidden_states_match_greedy_replay(maze9):
    spec = random_specs(maze9, 1, 3)[0]
    data = build_dataset([maze9], [spec])
    res = train_bc(BCConfig(epochs=150, lr=3e-3, **TINY_NET), data, [maze9])
    d = encode_dataset(data, [maze9])[0]
    forced = unroll(res.theta, res.net, d.features[:, None, :])
    assert np.array_equal(np.argmax(forced.logits[:, 0], axis=1), d.actions)

    policy = RecordingPolicy(res.theta, res.net, greedy=True)
    policy.trace = []
    rec = run_episodes(policy, BatchEnv([maze9]), [spec], np.zeros((1, EnvConfig().max_steps)))[0]
    assert rec.success and list(rec.actions) == list(d.actions)
    assert np.allclose(np.array(policy.trace), forced.hidden[:, 0], rtol=0, atol=1e-12)


def test_augment_split_keeps_base_nll(maze9):
    specs = random_specs(maze9, 12, 7)
    base = build_dataset([maze9], specs[:6])
    both = base.merged(build_dataset([maze9], specs[6:], split="augment"))
    config = BCConfig(epochs=60, lr=1e-3, **TINY_NET)
    demos = encode_dataset(base, [maze9])
    a = train_bc(config, base, [maze9])
    b = train_bc(config, both, [maze9])
    assert abs(dataset_nll(a.theta, a.net, demos) - dataset_nll(b.theta, b.net, demos)) <= 0.1
