import hashlib
import json

import pytest

from cmes.cli import EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, main, parse_grid
from cmes.errors import ValidationError

GEN = ["gen", "--students", "50", "--exercises", "30", "--concepts", "5", "--logs", "15", "--seed", "7"]
FAST = ["--epochs", "2", "--batch", "64", "--n", "2", "--clusters", "3"]


def digest(directory):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(directory.iterdir())}


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "d"
    assert main(GEN + ["--out", str(out)]) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(data_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs") / "r"
    assert main(["train", "--data", str(data_dir), "--strategy", "cmes", *FAST, "--out", str(out)]) == EXIT_OK
    return out


def test_gen_writes_four_files(data_dir, capsys):
    assert sorted(p.name for p in data_dir.iterdir()) == [
        "ground_truth.json", "interactions.csv", "q_matrix.csv", "synthetic_config.json"]


def test_gen_is_deterministic(data_dir, tmp_path):
    assert main(GEN + ["--out", str(tmp_path / "again")]) == EXIT_OK
    assert digest(tmp_path / "again") == digest(data_dir)


def test_gen_refuses_existing_output(data_dir, capsys):
    assert main(GEN + ["--out", str(data_dir)]) == EXIT_VALIDATION
    assert "--force" in capsys.readouterr().err


def test_gen_rejects_zero_exercises(tmp_path):
    assert main(["gen", "--exercises", "0", "--out", str(tmp_path / "x")]) == EXIT_VALIDATION


def test_gen_summary(tmp_path, capsys):
    main(GEN + ["--out", str(tmp_path / "s")])
    out = capsys.readouterr().out
    assert "students=50" in out and "logs=750" in out and "positive_rate=" in out


def test_train_outputs(run_dir):
    names = {p.name for p in run_dir.iterdir()}
    assert {"resolved_config.json", "checkpoint.pt", "metrics.csv", "reports.jsonl"} <= names
    resolved = json.loads((run_dir / "resolved_config.json").read_text())
    assert resolved["train"]["strategy"] == "cmes" and resolved["train"]["n"] == 2
    assert resolved["data"]["kind"] == "dir"


def test_rerun_from_resolved_config_is_identical(run_dir, tmp_path):
    assert main(["train", "--config", str(run_dir / "resolved_config.json"), "--out", str(tmp_path / "r2")]) == 0
    assert (tmp_path / "r2" / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()


def test_eval_reports_recovery(run_dir, capsys):
    assert main(["eval", str(run_dir)]) == EXIT_OK
    report = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert report["recovery"] is not None and 0 <= report["auc"] <= 1


def test_eval_refuses_config_mismatch(run_dir, tmp_path, capsys):
    import shutil
    copy = tmp_path / "tampered"
    shutil.copytree(run_dir, copy)
    resolved = json.loads((copy / "resolved_config.json").read_text())
    resolved["train"]["balance"] = 0.25
    (copy / "resolved_config.json").write_text(json.dumps(resolved))
    assert main(["eval", str(copy)]) == EXIT_VALIDATION
    assert "config hash mismatch" in capsys.readouterr().err


def test_eval_refuses_data_mismatch(run_dir, tmp_path, capsys):
    other = tmp_path / "other"
    main(["gen", "--students", "50", "--exercises", "30", "--concepts", "5", "--logs", "15", "--seed", "8",
          "--out", str(other)])
    assert main(["eval", str(run_dir), "--data", str(other)]) == EXIT_VALIDATION
    assert "data hash mismatch" in capsys.readouterr().err


def test_eval_missing_checkpoint(tmp_path):
    assert main(["eval", str(tmp_path)]) == EXIT_VALIDATION


def test_original_warns_about_sampling_flags(data_dir, tmp_path, caplog):
    assert main(["train", "--data", str(data_dir), "--strategy", "original", *FAST, "--out",
                 str(tmp_path / "o")]) == EXIT_OK
    assert "ignores --n" in caplog.text


def test_missing_data_source(tmp_path):
    assert main(["train", "--out", str(tmp_path / "x")]) == EXIT_VALIDATION


def test_undefined_metric_exit_code(tmp_path, capsys):
    # every response correct: test AUC is undefined
    d = tmp_path / "ones"
    d.mkdir()
    rows = ["student_id,exercise_id,score"] + [f"{s},{e},1" for s in range(20) for e in range(15)]
    (d / "interactions.csv").write_text("\n".join(rows) + "\n")
    (d / "q_matrix.csv").write_text("exercise_id,concept_id\n" + "".join(f"{e},{e % 3}\n" for e in range(15)))
    assert main(["train", "--data", str(d), "--strategy", "original", "--epochs", "1",
                 "--out", str(tmp_path / "r")]) == EXIT_RUNTIME
    assert "AUC" in capsys.readouterr().err


def test_output_root_env(data_dir, tmp_path, monkeypatch):
    monkeypatch.setenv("CMES_OUTPUT_ROOT", str(tmp_path / "root"))
    assert main(["train", "--data", str(data_dir), "--strategy", "original", "--epochs", "1"]) == EXIT_OK
    assert (tmp_path / "root" / "original-ncd-seed0" / "checkpoint.pt").exists()


def test_ablate_counts_runs(data_dir, tmp_path, capsys):
    out = tmp_path / "ab"
    assert main(["ablate", "--data", str(data_dir), *FAST, "--seeds", "0,1", "--out", str(out)]) == EXIT_OK
    runs = (out / "runs.csv").read_text().splitlines()
    table = (out / "table.csv").read_text().splitlines()
    assert len(runs) == 1 + 3 * 2 and len(table) == 1 + 3
    assert "auc_median" in table[0]


def test_ablate_grid(data_dir, tmp_path):
    out = tmp_path / "grid"
    assert main(["ablate", "--data", str(data_dir), *FAST, "--strategies", "cmes", "--seeds", "0",
                 "--grid", "n=1,2", "--out", str(out)]) == EXIT_OK
    assert len((out / "table.csv").read_text().splitlines()) == 3


def test_parse_grid():
    assert parse_grid("n=5,10,20") == ("n", [5, 10, 20])
    assert parse_grid("train-frac=0.5,1.0") == ("train_frac", [0.5, 1.0])
    with pytest.raises(ValidationError):
        parse_grid("lr=1,2")
