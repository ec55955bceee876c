import pytest

from osteo_ssl.config import ConfigError, RunConfig, config_text, dump_config, load_config


def test_defaults():
    cfg = load_config(None)
    assert cfg.train.objective == "simclr" and cfg.augment.global_size == 224
    assert cfg.run.seeds == (0, 1, 2)


def test_round_trip(tmp_path):
    cfg = RunConfig().with_overrides("train", objective="vicreg", base_lr=None, seed=4)
    cfg = cfg.with_overrides("augment", extended=True, nonzero_threshold=0.2)
    cfg = cfg.with_overrides("run", seeds=(3, 5))
    dump_config(cfg, tmp_path / "c.ini")
    assert load_config(tmp_path / "c.ini") == cfg


def test_partial_file_overlays_defaults(tmp_path):
    (tmp_path / "c.ini").write_text("[train]\nepochs = 7\n[augment]\nglobal_size = 64\n")
    cfg = load_config(tmp_path / "c.ini")
    assert cfg.train.epochs == 7 and cfg.augment.global_size == 64 and cfg.augment.local_size == 96


@pytest.mark.parametrize(
    "text, needle",
    [
        ("[train]\nlearning_rate = 1\n", "learning_rate"),
        ("[optimizer]\nx = 1\n", "optimizer"),
        ("[train]\nepochs = many\n", "epochs"),
        ("[train]\nobjective = byol\n", "objective"),
        ("[augment]\nextended = maybe\n", "boolean"),
        ("not an ini", "c.ini"),
    ],
)
def test_invalid_files(tmp_path, text, needle):
    (tmp_path / "c.ini").write_text(text)
    with pytest.raises(ConfigError, match=needle):
        load_config(tmp_path / "c.ini")


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "none.ini")


def test_override_unknown_key():
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig().with_overrides("train", bogus=1)


def test_config_text_lists_every_section():
    text = config_text(RunConfig())
    for section in ("run", "train", "augment", "encoder", "probe", "phantom"):
        assert f"[{section}]" in text
    assert "objective = simclr" in text and "base_lr = none" in text
