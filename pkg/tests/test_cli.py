import json

import pytest

from conftest import make_gray
from genint.cli import main, verify_scm
from genint.config import parse_config
from genint.exceptions import DependencyError, ValidationError
from genint.formats import write_idx_images, write_idx_labels
from genint.pipeline import STAGES, ablation_sweep, emit_metrics, read_results_csv, run_pipeline

TINY = """\
[run]
seed = 7
[data]
source = idx
train_images = train-images
train_labels = train-labels
test_images = test-images
test_labels = test-labels
[cvae]
latent_dim = 4
hidden_units = 16
epochs = 2
[intervention]
per_class_n = 6
[classifier]
hidden_units = 16
epochs = 1
[irm]
warmup_steps = 2
[causal]
n_scm = 20
iv_samples = 2000
[probe]
subset_sizes = 2, 10
hidden_units = 8
epochs = 2
regressor_epochs = 2
"""


def write_tiny_config(directory, extra=""):
    for split, n, seed in (("train", 20, 0), ("test", 6, 1)):
        gray = make_gray(n_per_class=n, side=8, seed=seed)
        write_idx_images(directory / f"{split}-images", gray.images)
        write_idx_labels(directory / f"{split}-labels", gray.labels)
    path = directory / "tiny.ini"
    path.write_text(TINY + extra)
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    config = parse_config(write_tiny_config(root))
    config.sections["run"]["out"] = str(root / "out")
    run_pipeline(config)
    return config


def _snapshot(root):
    return {p: (p.stat().st_mtime_ns, p.read_bytes()) for p in sorted(root.rglob("*")) if p.is_file()}


def test_full_tiny_run_writes_every_artifact(tiny_run):
    out = tiny_run.out
    for rel in ("results.csv", "summary.json", "eval/reports.json", "causal/summary.json", "corr/probe.csv"):
        assert (out / rel).is_file(), rel
    rows = read_results_csv(out / "results.csv")
    assert {r["method"] for r in rows} == {"erm", "cvae_observational", "irm", "genint", "genint_three_term"}
    assert {r["split"] for r in rows} == {"confounded", "causal"}
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["timings"]) == set(STAGES)
    assert "results.csv" in summary["checksums"]


def test_rerun_skips_and_writes_nothing(tiny_run):
    before = _snapshot(tiny_run.out)
    pipeline = run_pipeline(tiny_run)
    assert all(o.skipped for o in pipeline.outcomes)
    assert _snapshot(tiny_run.out) == before


def test_second_run_is_byte_identical(tiny_run, tmp_path):
    config = parse_config(tiny_run.path)
    config.sections["run"]["out"] = str(tmp_path / "again")
    run_pipeline(config)
    assert (tmp_path / "again" / "results.csv").read_bytes() == (tiny_run.out / "results.csv").read_bytes()


def test_eval_before_training_names_the_producer(tmp_path):
    config = parse_config(write_tiny_config(tmp_path))
    config.sections["run"]["out"] = str(tmp_path / "out")
    run_pipeline(config, ["synth-data"])
    with pytest.raises(DependencyError, match="train-classifier"):
        run_pipeline(config, ["eval"])


def test_unknown_stage(tiny_run):
    with pytest.raises(ValidationError):
        run_pipeline(tiny_run, ["train"])


def test_single_cell_grid_gives_one_row(tiny_run):
    rows = ablation_sweep(tiny_run, {"only": tiny_run.strategy()})
    assert len(rows) == 1 and rows[0]["strategy"] == "only"
    lines = (tiny_run.out / "ablation" / "ablation.csv").read_text().splitlines()
    assert len(lines) == 2


def test_emit_metrics_round_trip(tmp_path):
    reports = [
        {"run_id": "r", "method": "erm", "split": "causal", "top1": 0.1 + 0.2, "chance": 0.1, "seed": 7},
        {"run_id": "r", "method": "irm", "split": "causal", "top1": 1 / 3, "chance": 0.1, "seed": 7},
    ]
    emit_metrics(reports, tmp_path / "a")
    emit_metrics(reports, tmp_path / "b")
    assert read_results_csv(tmp_path / "a" / "results.csv") == reports
    for name in ("results.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    with pytest.raises(ValidationError):
        emit_metrics([], tmp_path / "c")


def test_verify_scm_small():
    report = verify_scm(n_scm=30, iv_samples=20000, seed=1)
    assert report.ok
    assert report.iv_estimate == pytest.approx(0.5, abs=0.1)


# -- exit codes ---------------------------------------------------------------------


def test_show_config_round_trips(capsys, tmp_path):
    assert main(["show-config"]) == 0
    path = tmp_path / "defaults.ini"
    path.write_text(capsys.readouterr().out)
    assert parse_config(path).as_dict() == parse_config(None).as_dict()


def test_invalid_config_exits_1(tmp_path, capsys):
    path = tmp_path / "bad.ini"
    path.write_text("[classifier]\nlambda1 = -1\n")
    assert main(["run", "--config", str(path)]) == 1
    assert "λ1 ≥ 0" in capsys.readouterr().err


def test_negative_seed_exits_1():
    assert main(["scm-verify", "--seed", "-1"]) == 1


def test_missing_dependency_exits_2(tmp_path, capsys):
    assert main(["eval", "--out", str(tmp_path / "empty")]) == 2
    assert "produced by stage 'synth-data'" in capsys.readouterr().err


def test_scm_verify_verb(tmp_path, capsys):
    path = tmp_path / "c.ini"
    path.write_text("[causal]\nn_scm = 10\niv_samples = 5000\n")
    assert main(["scm-verify", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "scm_verify.json").read_text())["ok"] is True


def test_run_verb_with_stage_list(tmp_path, capsys):
    path = write_tiny_config(tmp_path)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o"), "--stages", "synth-data"]) == 0
    assert "synth-data" in capsys.readouterr().out
    assert (tmp_path / "o" / "data" / "test_causal").is_dir()
