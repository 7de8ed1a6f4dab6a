import json

import pytest

from services.costmodel import TradeoffPoint
from services.errors import ArtifactExistsError, CascadeError
from services.reports import header_comment, read_csv, summarize, tradeoff_rows, write_csv, write_json
from services.storage import ManifestRecorder, RunManifest, RunPaths, claim_output, ensure_directories, load_manifest


def test_claim_output_refuses_to_overwrite(tmp_path):
    path = claim_output(tmp_path / "nested" / "a.csv")
    assert path.parent.is_dir()
    path.write_text("x")
    with pytest.raises(ArtifactExistsError):
        claim_output(path)


def test_run_paths_layout(tmp_path):
    paths = RunPaths.under(tmp_path / "run")
    ensure_directories(paths)
    assert paths.checkpoints_dir.is_dir() and paths.reports_dir.is_dir() and paths.data_dir.is_dir()


def test_manifest_lists_artifacts_relative_to_the_run(tmp_path):
    recorder = ManifestRecorder(tmp_path, "sweep", "abc123def456", "0.3.0", seed=2)
    artifact = tmp_path / "reports" / "tradeoff_wise.csv"
    artifact.parent.mkdir()
    artifact.write_text("tau\n")
    recorder.add(artifact)
    recorder.finish()
    manifest = load_manifest(tmp_path)
    assert manifest.artifacts == ["reports/tradeoff_wise.csv"]
    assert (manifest.command, manifest.seed, manifest.config_hash) == ("sweep", 2, "abc123def456")


def test_manifest_refuses_missing_artifacts(tmp_path):
    recorder = ManifestRecorder(tmp_path, "sweep", "h", "0.3.0")
    recorder.add(tmp_path / "never.csv")
    with pytest.raises(CascadeError):
        recorder.finish()


def test_manifest_from_dict_is_tolerant():
    manifest = RunManifest.from_dict({"command": "infer", "artifacts": ["a\\b.json"], "extra": 1})
    assert manifest.seed is None
    assert manifest.artifacts == ["a/b.json"]


def test_csv_has_provenance_comment_and_exact_floats(tmp_path):
    points = [TradeoffPoint(0.1, 2 / 3, 1234.5, (3, 0, 1))]
    path = write_csv(tmp_path / "t.csv", ["tau", "accuracy", "mean_flops", "exit_hist_json"], tradeoff_rows(points), "cafe")
    lines = path.read_text().split("\n")
    assert lines[0] == header_comment("cafe") == "# cascade-kd 0.3.0 config=cafe"
    assert lines[1] == "tau,accuracy,mean_flops,exit_hist_json"
    rows = read_csv(path)
    assert float(rows[0]["accuracy"]) == 2 / 3
    assert json.loads(rows[0]["exit_hist_json"]) == [3, 0, 1]
    with pytest.raises(ArtifactExistsError):
        write_csv(path, ["a"], [], "cafe")


def test_json_report(tmp_path):
    path = write_json(tmp_path / "r.json", {"b": 1, "a": [1.5]})
    assert json.loads(path.read_text()) == {"a": [1.5], "b": 1}


def test_summarize():
    assert summarize([1.0, 2.0, 3.0]) == (2.0, 1.0, 3)
    assert summarize([0.5]) == (0.5, 0.0, 1)


def test_setup_logging_writes_to_file(tmp_path):
    from loguru import logger

    from services.logging_setup import setup_logging

    log_path = setup_logging(tmp_path / "logs", level="debug")
    logger.debug("probe line")
    logger.complete()
    logger.remove()
    assert log_path.name == "cascade.log"
    assert "probe line" in log_path.read_text(encoding="utf-8")
