import pytest

from gridnav.config import (
    DEFAULT_MARGINS,
    EXPERIMENTS,
    ConfigError,
    ExperimentConfig,
    dump_config,
    load_config,
    preset,
)


def test_defaults_and_presets():
    cfg = load_config(None)
    assert cfg == ExperimentConfig() and cfg.margins == DEFAULT_MARGINS
    for tag in EXPERIMENTS:
        assert preset(tag).experiment == tag
    assert preset("reward_ablation").scene_style == "open"
    assert len(preset("stitching_probe").seeds) == 5
    main = preset("main_compare")
    assert main.ppo.total_steps == 5_000_000 and main.bc.epochs == 45


def test_load_file_and_overrides(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text(
        "[experiment]\nversion = 1\nseeds = 3,4\nscene_size = 11  ; small\n"
        "[ppo]\ntotal_steps = 1e5\nlr = 1e-3\n[env]\nmax_steps = 50\n[margins]\nunseen_pairs_success = 0.2\n"
        "[scene_params]\nloop_prob = 0.3\n"
    )
    cfg = load_config(path, ["bc.epochs=7", "train_pairs=60", "env.shaping_weight=0"])
    assert cfg.seeds == (3, 4) and cfg.scene_size == 11
    assert cfg.ppo.total_steps == 100_000 and cfg.ppo.lr == 1e-3
    assert cfg.env.max_steps == 50 and cfg.env.shaping_weight == 0
    assert cfg.bc.epochs == 7 and cfg.train_pairs == 60
    assert cfg.margins["unseen_pairs_success"] == 0.2 and cfg.margins["stitching_gap"] == 0.3
    assert cfg.scene_params == {"loop_prob": 0.3}


def test_dump_roundtrip(tmp_path):
    cfg = load_config(None, ["seeds=5,6", "ppo.entropy_coef=0.0", "scene_params.loop_prob=0.2", "ppo.normalize_advantages=false"])
    path = tmp_path / "d.ini"
    path.write_text(dump_config(cfg))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict() and back.hash() == cfg.hash()


def test_hashes():
    a = ExperimentConfig()
    assert a.hash() == ExperimentConfig().hash()
    assert a.replace(output_dir="elsewhere").hash() == a.hash()
    assert a.replace(seeds=(9,)).hash() != a.hash()
    # training knobs do not move the data hash; data knobs do
    assert a.replace(seeds=(9,)).data_hash() == a.data_hash()
    assert a.replace(seed=1).data_hash() != a.data_hash()


@pytest.mark.parametrize(
    "text, overrides",
    [
        ("[experiment]\nseeds = 1\n", []),  # missing version
        ("[experiment]\nversion = 2\n", []),
        ("[experiment]\nversion = 1\n[nonsense]\na = 1\n", []),
        ("[experiment]\nversion = 1\nbogus = 1\n", []),
        ("[experiment]\nversion = 1\n[ppo]\nclip = 3\n", []),
        ("[experiment]\nversion = 1\n[ppo]\nepochs = four\n", []),
        ("[experiment]\nversion = 1\n[margins]\nmade_up = 1\n", []),
        ("[experiment]\nversion = 1\n", ["experiment=nope"]),
        ("[experiment]\nversion = 1\n", ["seeds="]),
        ("[experiment]\nversion = 1\n", ["noequals"]),
        ("[experiment]\nversion = 1\n", ["train_pairs=5", "seen_eval_pairs=6"]),
    ],
)
def test_invalid_configs(tmp_path, text, overrides):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_config(path, overrides)


def test_missing_file():
    with pytest.raises(ConfigError):
        load_config("/nonexistent/x.ini")
