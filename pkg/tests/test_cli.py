import json
import logging
import shlex
import sys

import numpy as np
import pytest

import start
from core.core_errors import TrainingDiverged
from utilities.util_tensorfile import write_tensor


@pytest.fixture(autouse=True)
def restore_logging():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


@pytest.fixture
def config_file(tmp_path, small_config):
    path = tmp_path / "run.json"
    path.write_text(json.dumps(small_config.to_dict()))
    return str(path)


@pytest.fixture
def ledger_url(tmp_path):
    return f"sqlite:///{(tmp_path / 'runs.db').as_posix()}"


def test_layout_to_stdout(capsys):
    assert start.main(["layout", "--subject", "man", "--subject", "guitar"]) == 0
    document = json.loads(capsys.readouterr().out)
    assert document["boundaries"] == [10, 14, 18, 22, 26, 30]
    assert document["subjects"] == ["man", "guitar"]


def test_rope_dump_matches_golden(tmp_path, golden_dir):
    out = tmp_path / "rope.tsv"
    assert start.main(["rope-dump", "--output", str(out)]) == 0
    assert out.read_text() == (golden_dir / "rope_example.tsv").read_text()


def test_rope_dump_sequential(capsys):
    assert start.main(["rope-dump", "--prompt", "A dog", "--subject", "dog", "--rope-mode", "sequential"]) == 0
    rows = capsys.readouterr().out.splitlines()[1:]
    assert [row.split("\t")[3] for row in rows] == [row.split("\t")[0] for row in rows]


def test_consolidate_sample(tmp_path, samples_dir, golden_dir):
    out = tmp_path / "subjects.json"
    code = start.main(["consolidate", "--input", str(samples_dir / "observations_sample.jsonl"),
                       "--output", str(out)])
    assert code == 0
    assert json.loads(out.read_text()) == json.loads((golden_dir / "consolidation_sample.json").read_text())


def test_consolidate_mock_provider(capsys):
    assert start.main(["consolidate", "--provider", "mock", "--seed", "5"]) == 0
    assert len(json.loads(capsys.readouterr().out)["cliques"]) == 2


def test_consolidate_subprocess_provider(samples_dir, golden_dir, capsys):
    sample = samples_dir / "observations_sample.jsonl"
    script = f"import sys; sys.stdout.write(open({str(sample)!r}).read())"
    command = shlex.join([sys.executable, "-c", script])
    assert start.main(["consolidate", "--provider", "subprocess", "--command", command]) == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest == json.loads((golden_dir / "consolidation_sample.json").read_text())


def test_non_utf8_config_exits_2(tmp_path):
    path = tmp_path / "run.json"
    path.write_bytes(b"\xff\xfe{}")
    assert start.main(["layout", "--config", str(path)]) == 2


@pytest.mark.parametrize("argv", [
    ["consolidate"],
    ["consolidate", "--input", "does-not-exist.jsonl"],
    ["consolidate", "--provider", "subprocess"],
    ["layout", "--set", "sead=1"],
    ["layout", "--prompt", "   "],
    ["demo-train"],
    ["no-such-command"],
])
def test_usage_errors_exit_2(argv):
    assert start.main(argv) == 2


def test_metrics_command(tmp_path, capsys):
    frames = np.tile([1.0, 2.0, 3.0], (4, 1))
    write_tensor(tmp_path / "frames.pvtd", frames)
    write_tensor(tmp_path / "ref.pvtd", np.array([1.0, 2.0, 3.0]))
    code = start.main(["metrics", "--frames", str(tmp_path / "frames.pvtd"),
                       "--reference", str(tmp_path / "ref.pvtd")])
    assert code == 0
    report = json.loads(capsys.readouterr().out)
    assert report["identity_similarity"] == pytest.approx(1.0)
    assert report["temporal_consistency"] == pytest.approx(1.0)


def test_metrics_bad_tensor(tmp_path):
    (tmp_path / "junk.pvtd").write_bytes(b"junk")
    assert start.main(["metrics", "--frames", str(tmp_path / "junk.pvtd")]) == 2


def test_divergence_exits_1(tmp_path, config_file, monkeypatch):
    def boom(config, show_progress=False):
        raise TrainingDiverged("step 3: loss is nan")

    monkeypatch.setattr(start, "train", boom)
    assert start.main(["demo-train", "--config", config_file, "--output", str(tmp_path / "ckpt"),
                       "--no-ledger"]) == 1


def test_demo_round_trip_is_deterministic(tmp_path, config_file, ledger_url, capsys):
    for name in ("a", "b"):
        code = start.main(["demo-train", "--config", config_file, "--output", str(tmp_path / name),
                           "--ledger-url", ledger_url, "--quiet"])
        assert code == 0
        code = start.main(["demo-generate", "--checkpoint", str(tmp_path / name),
                           "--output", str(tmp_path / f"{name}.pvtd")])
        assert code == 0
    for path in (tmp_path / "a").iterdir():
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()
    assert (tmp_path / "a.pvtd").read_bytes() == (tmp_path / "b.pvtd").read_bytes()
    capsys.readouterr()

    report_path = tmp_path / "report.json"
    code = start.main(["demo-eval", "--checkpoint", str(tmp_path / "a"), "--baseline", str(tmp_path / "b"),
                       "--output", str(report_path), "--ledger-url", ledger_url])
    assert code == 0
    report = json.loads(report_path.read_text())
    assert report["identity_gap"] == 0.0
    assert len(report["frame_profile"]) == 2

    assert start.main(["runs", "--ledger-url", ledger_url]) == 0
    runs = json.loads(capsys.readouterr().out)
    assert [r["kind"] for r in runs] == ["demo-train", "demo-train", "demo-eval"]


def test_flags_override_config(tmp_path, config_file, capsys):
    code = start.main(["demo-train", "--config", config_file, "--set", "train_steps=1", "--train-steps", "2",
                       "--mode", "adapter", "--output", str(tmp_path / "ckpt"), "--no-ledger"])
    assert code == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["steps"] == 2
    manifest = json.loads((tmp_path / "ckpt" / "manifest.json").read_text())
    assert manifest["metadata"]["config"]["mode"] == "adapter"
