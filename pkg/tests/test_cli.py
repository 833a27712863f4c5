import json
import subprocess
import sys

import pytest

from reconprobe.cli import main

SMALL = {
    "corpus": {"count": 120, "probe_count": 15},
    "model": {"n_layers": 2, "n_heads": 2, "hidden": 16, "ff_dim": 32, "max_positions": 24},
    "train": {"steps": 40, "batch_size": 8},
    "aggregate": {"n_boot": 100, "top_n": 5},
}
STAGES = ("gen-corpus", "train", "probe", "aggregate", "report")


def _run_pipeline(tmp_path, name, jobs=2, seed=3):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(SMALL))
    out = tmp_path / name
    for stage in STAGES:
        assert main([stage, "--config", str(cfg), "--out", str(out), "--seed", str(seed), "--jobs", str(jobs)]) == 0
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    return base, _run_pipeline(base, "a")


def test_pipeline_outputs(pipeline):
    base, out = pipeline
    for name in ("corpus.txt", "corpus.conllu", "probe.conllu", "weights.rpw", "loss.csv", "vocab.txt",
                 "records.csv", "topk.json", "aggregates.json", "comparisons.json", "extreme_pairs.json"):
        assert (out / name).stat().st_size > 0, name
    for dim in ("RelationCategory", "DeprelLabel", "FunctionalRelation", "LinearDistance", "StructuralDistance"):
        svg = (out / "report" / f"{dim}.svg").read_text()
        assert svg.startswith("<svg") and 'class="bar"' in svg
    summary = json.loads((out / "comparisons.json").read_text())
    assert len(summary) == 6 and all(v["skipped"] == 0 for v in summary.values())


def test_nothing_written_outside_out(pipeline):
    base, _ = pipeline
    assert sorted(p.name for p in base.iterdir()) == ["a", "cfg.json"]


def test_rerun_byte_identical(pipeline):
    base, out = pipeline
    again = _run_pipeline(base, "b", jobs=1)
    for name in ("records.csv", "aggregates.json", "weights.rpw", "corpus.conllu"):
        assert (out / name).read_bytes() == (again / name).read_bytes(), name


def test_selftest_exit_zero(tmp_path, capsys):
    assert main(["selftest", "--out", str(tmp_path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("[PASS]") for line in lines)


def test_unknown_flag_and_subcommand_exit_one(tmp_path, capsys):
    assert main(["train", "--bogus", "--out", str(tmp_path)]) == 1
    assert "usage" in capsys.readouterr().err
    assert main(["frobnicate"]) == 1
    assert main([]) == 1


def test_bad_config_exit_one(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"probe": {"conditions": ["Nope"]}}')
    assert main(["probe", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    cfg.write_text("{not json")
    assert main(["probe", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert main(["probe", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path / "o")]) == 1


def test_missing_input_exit_one(tmp_path):
    assert main(["probe", "--out", str(tmp_path)]) == 1


def test_corrupt_weights_exit_one(tmp_path):
    (tmp_path / "weights.rpw").write_bytes(b"RPW1junk")
    (tmp_path / "probe.conllu").write_text("")
    assert main(["probe", "--out", str(tmp_path)]) == 1


def test_runtime_error_exit_two(tmp_path, monkeypatch):
    import reconprobe.cli as cli

    def boom(cfg, out):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.COMMANDS, "report", boom)
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "reconprobe", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gen-corpus" in proc.stdout
