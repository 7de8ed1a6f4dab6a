from pathlib import Path

import pytest

from services.config import (
    ExperimentConfig,
    config_hash,
    load_config,
    load_preset,
    parse_config,
    parse_config_text,
    serialize_config,
)
from services.distill import PkdSchedule, StrategyVariant
from services.errors import ConfigError
from services.moddata import Modality

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_empty_file_gives_defaults():
    assert parse_config_text("") == ExperimentConfig()
    assert parse_config_text("# only a comment\n\n") == ExperimentConfig()


def test_toy_preset_spells_out_the_defaults():
    assert parse_config(CONFIGS / "toy.env") == ExperimentConfig()


def test_paper_preset_lengthens_the_schedules():
    cfg = load_preset("paper")
    assert cfg.training.backbone_epochs == 510
    assert cfg.schedule() == PkdSchedule(150, 50, 100)
    assert cfg.data == ExperimentConfig().data


def test_unknown_preset():
    with pytest.raises(ConfigError):
        load_preset("huge")


def test_overrides_are_typed():
    cfg = parse_config_text("IC_STRATEGY=ce\nMODEL_WIDTHS_MV=8,8,4,4\nIC_RESET_ON_PHASE=no\nPOLICY_TAU=0.5\n")
    assert cfg.strategy().variant is StrategyVariant.CE
    assert cfg.model.widths()[Modality.MV] == (8, 8, 4, 4)
    assert cfg.ics.reset_on_phase is False
    assert cfg.policy.tau == 0.5


def test_boundary_k_after_t_is_rejected():
    with pytest.raises(ConfigError, match="K < T"):
        parse_config_text("IC_BOUNDARY_K=70\nIC_BOUNDARY_T=60\n")


def test_unknown_key_names_file_and_line():
    with pytest.raises(ConfigError, match=r"exp.env:2: unknown key IC_TEACHER"):
        parse_config_text("IC_EPOCHS=90\nIC_TEACHER=iframe\n", source="exp.env")


def test_bad_value_names_the_key():
    with pytest.raises(ConfigError, match="TRAIN_BATCH_SIZE"):
        parse_config_text("TRAIN_BATCH_SIZE=lots\n")


@pytest.mark.parametrize(
    "text",
    [
        "MODEL_WIDTHS_R=8,8,8\n",
        "POLICY_CHAIN_ORDER=r,mv\n",
        "PROBE_RESOLUTION=20\n",
        "RUN_SPLITS=1,4\n",
        "DATA_SIGMA_I=2.0\n",
        "TRAIN_BACKBONE_MILESTONES=50,30\n",
        "POLICY_FIT_SPLIT=validation\n",
        "POLICY_ISO_TOLERANCE=0.03\n",
        "POLICY_ISO_TOLERANCE=0\n",
    ],
)
def test_invalid_values(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_serialize_round_trip_and_hash():
    cfg = parse_config_text("IC_TEMPERATURE=2.5\nRUN_SEEDS=4,5\nPOLICY_CHAIN_ORDER=iframe,r,mv\n")
    text = serialize_config(cfg)
    assert parse_config_text(text) == cfg
    assert config_hash(parse_config_text(text)) == config_hash(cfg)
    assert len(config_hash(cfg)) == 12
    assert config_hash(cfg) != config_hash(ExperimentConfig())
    assert cfg.chain_order() == (Modality.IFRAME, Modality.R, Modality.MV)


def test_missing_file():
    with pytest.raises(ConfigError):
        parse_config(Path("does/not/exist.env"))


def test_app_config_reads_environment(monkeypatch, tmp_path):
    monkeypatch.setenv("CASCADE_KD_THREADS", "3")
    monkeypatch.setenv("CASCADE_KD_RUNS_DIR", str(tmp_path))
    monkeypatch.setenv("CASCADE_KD_LOG_LEVEL", "debug")
    app = load_config()
    assert app.threads == 3
    assert app.runs_dir == tmp_path
    assert app.log_level == "DEBUG"
    assert app.base_dir == Path(__file__).resolve().parents[1]
    assert app.configs_dir == app.base_dir / "configs"
    monkeypatch.setenv("CASCADE_KD_THREADS", "many")
    with pytest.raises(ConfigError):
        load_config()
