import json

import pytest

from app.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from services.reports import read_csv
from services.storage import load_manifest

from tests.conftest import TINY_CONFIG


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "tiny.env").write_text(TINY_CONFIG)
    return tmp_path


def _run(*argv) -> int:
    return main([str(a) for a in argv])


def test_pipeline_end_to_end(workdir, capsys):
    cfg = workdir / "tiny.env"
    data = workdir / "data.cvkd"
    assert _run("gen-data", "--config", cfg, "--out", data, "--seed", 3) == EXIT_OK
    assert _run("train-backbones", "--config", cfg, "--data", data, "--out-dir", workdir / "bb", "--seed", 3) == EXIT_OK
    assert sorted(p.name for p in (workdir / "bb").glob("*.ckpt")) == ["iframe.ckpt", "mv.ckpt", "r.ckpt"]
    assert load_manifest(workdir / "bb").seed == 3

    assert _run("train-ics", "--config", cfg, "--data", data, "--ckpt-dir", workdir / "bb",
                "--out-dir", workdir / "pkd", "--strategy", "pkd") == EXIT_OK
    rows = read_csv(workdir / "pkd" / "ic_accuracy.csv")
    assert len(rows) == 12 and {r["strategy"] for r in rows} == {"pkd"}

    policy = workdir / "policy.wise"
    assert _run("fit-wise", "--config", cfg, "--data", data, "--ckpt-dir", workdir / "pkd", "--out", policy) == EXIT_OK
    assert policy.read_text().startswith("# cascade-kd exit policy")

    capsys.readouterr()
    assert _run("infer", "--data", data, "--ckpt-dir", workdir / "pkd", "--policy", policy, "--tau", 0) == EXIT_OK
    result = json.loads(capsys.readouterr().out)
    assert result["exit_histogram"][0] == result["num_samples"]

    assert _run("sweep", "--config", cfg, "--data", data, "--ckpt-dir", workdir / "pkd", "--policy", policy,
                "--out-dir", workdir / "sweep", "--modes", "wise,none") == EXIT_OK
    sweep = read_csv(workdir / "sweep" / "tradeoff_wise.csv")
    assert [float(r["tau"]) for r in sweep] == [0.0, 0.5, 0.9, 1.01]
    assert (workdir / "sweep" / "tradeoff_none_pareto.csv").exists()

    assert _run("probe-flatness", "--config", cfg, "--ckpt", workdir / "pkd" / "mv.ckpt", "--data", data,
                "--ic", "mv:2", "--r", 0.5, "--out-dir", workdir / "probe") == EXIT_OK
    assert len(read_csv(workdir / "probe" / "landscape_mv_ic2.csv")) == 9
    manifest = load_manifest(workdir / "probe")
    assert manifest.command == "probe-flatness"
    assert manifest.artifacts == ["config.env", "landscape_mv_ic2.csv"]


def test_refuses_to_overwrite_output(workdir):
    data = workdir / "data.cvkd"
    assert _run("gen-data", "--config", workdir / "tiny.env", "--out", data) == EXIT_OK
    assert _run("gen-data", "--config", workdir / "tiny.env", "--out", data) == EXIT_RUNTIME


def test_bad_config_is_a_runtime_failure(workdir):
    bad = workdir / "bad.env"
    bad.write_text("IC_BOUNDARY_K=9\nIC_BOUNDARY_T=3\n")
    assert _run("gen-data", "--config", bad, "--out", workdir / "d.cvkd") == EXIT_RUNTIME


def test_usage_errors_exit_with_one(workdir):
    with pytest.raises(SystemExit) as excinfo:
        _run("train-ics", "--strategy", "distill-everything")
    assert excinfo.value.code == EXIT_USAGE
    assert _run() == EXIT_USAGE


def test_flatness_command_rejects_the_fc(workdir):
    cfg = workdir / "tiny.env"
    data = workdir / "data.cvkd"
    _run("gen-data", "--config", cfg, "--out", data)
    _run("train-backbones", "--config", cfg, "--data", data, "--out-dir", workdir / "bb")
    assert _run("probe-flatness", "--ckpt", workdir / "bb" / "mv.ckpt", "--data", data, "--ic", "mv:fc") == EXIT_USAGE


def test_stream_report(tmp_path, capsys):
    specs = tmp_path / "streams.json"
    specs.write_text(json.dumps({
        "reference": "ours",
        "streams": [
            {"name": "ours", "gop_frames": 12, "n_i": 1, "n_mv": 1, "n_r": 2, "s_i": 24000, "s_mv": 1500, "s_r": 6000},
            {"name": "mimo-style", "gop_frames": 12, "n_i": 8, "n_mv": 8, "n_r": 8, "s_i": 24000, "s_mv": 1500, "s_r": 6000},
        ],
    }))
    assert _run("stream-report", "--specs", specs) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert [row["relative_latency"] for row in report["rows"]] == [1.0, 8.0]


def test_train_backbones_rejects_a_seed_that_disagrees_with_the_data(workdir):
    cfg = workdir / "tiny.env"
    data = workdir / "data.cvkd"
    assert _run("gen-data", "--config", cfg, "--out", data, "--seed", 3) == EXIT_OK
    assert _run("train-backbones", "--config", cfg, "--data", data, "--out-dir", workdir / "bb", "--seed", 4) == EXIT_USAGE
    assert not (workdir / "bb" / "manifest.json").exists()


def _pipeline(cfg, root):
    data = root / "data.cvkd"
    policy = root / "policy.wise"
    assert _run("gen-data", "--config", cfg, "--out", data, "--seed", 5) == EXIT_OK
    assert _run("train-backbones", "--config", cfg, "--data", data, "--out-dir", root / "bb") == EXIT_OK
    assert _run("train-ics", "--config", cfg, "--data", data, "--ckpt-dir", root / "bb",
                "--out-dir", root / "pkd", "--strategy", "pkd") == EXIT_OK
    assert _run("fit-wise", "--config", cfg, "--data", data, "--ckpt-dir", root / "pkd", "--out", policy) == EXIT_OK
    assert _run("sweep", "--config", cfg, "--data", data, "--ckpt-dir", root / "pkd", "--policy", policy,
                "--out-dir", root / "sweep", "--modes", "wise,uniform") == EXIT_OK


def test_reruns_are_byte_identical(workdir):
    cfg = workdir / "tiny.env"
    _pipeline(cfg, workdir / "first")
    _pipeline(cfg, workdir / "second")
    outputs = sorted(
        p.relative_to(workdir / "first")
        for p in (workdir / "first").rglob("*")
        if p.suffix in (".cvkd", ".ckpt", ".csv", ".wise", ".env")
    )
    assert len([p for p in outputs if p.suffix == ".ckpt"]) == 6
    assert len([p for p in outputs if p.suffix == ".csv"]) >= 5
    for rel in outputs:
        assert (workdir / "first" / rel).read_bytes() == (workdir / "second" / rel).read_bytes(), rel
