import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from packthermal.cli import (ConfigError, RunConfig, main, pgm_bytes, run_config_from_dict,
                             split_sizes)
from packthermal.fields import load_manifest, read_field
from packthermal.metrics import EvalReport

TINY = {"backbone": {"widths": [8, 8, 8, 8, 8]}, "head": {"widths": [8, 8, 8, 8]},
        "train": {"epochs_pretrain": 1, "epochs_posttrain": 1}}


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file()}


def _gen(tmp_path, name="d", *extra):
    out = tmp_path / name
    assert main(["gen-layouts", "--out", str(out), *extra]) == 0
    return out


def test_split_sizes():
    assert split_sizes(290) == {"pretrain": 200, "labeled": 20, "val": 20, "test": 50}
    small = split_sizes(5)
    assert sum(small.values()) == 5 and min(small.values()) >= 1
    assert sum(split_sizes(2000).values()) == 2000
    assert split_sizes(2, {"pretrain": 1, "labeled": 0, "val": 0, "test": 1}) == {
        "pretrain": 1, "labeled": 0, "val": 0, "test": 1}


def test_gen_layouts_is_reproducible(tmp_path):
    a = _gen(tmp_path, "a", "--count", "5", "--seed", "7", "--grid", "16")
    b = _gen(tmp_path, "b", "--count", "5", "--seed", "7", "--grid", "16")
    assert _tree(a) == _tree(b)
    assert len(load_manifest(a / "manifest.json").cases) == 5
    c = _gen(tmp_path, "c", "--count", "5", "--seed", "8", "--grid", "16")
    assert _tree(a) != _tree(c)


def test_infeasible_cell_count_fails(tmp_path, capsys):
    assert main(["gen-layouts", "--count", "1", "--cells", "100", "--out",
                 str(tmp_path / "x")]) != 0
    assert "budget" in capsys.readouterr().err


def test_solve_zero_cells_gives_ambient(tmp_path):
    d = _gen(tmp_path, "d", "--count", "2", "--cells", "0", "--grid", "16")
    assert main(["solve", "--manifest", str(d / "manifest.json"), "--workers", "1"]) == 0
    m = load_manifest(d / "manifest.json")
    for c in m.cases:
        assert c.solver == "reference"
        assert np.max(np.abs(read_field(m.resolve(c.temperature)).values - 25.0)) <= 1e-9


def test_dense_refuses_large_grid(tmp_path, capsys):
    d = _gen(tmp_path, "d", "--count", "1", "--grid", "200")
    assert main(["solve", "--manifest", str(d / "manifest.json"), "--solver", "dense"]) != 0
    assert "dense" in capsys.readouterr().err


def test_solvers_differ_and_skip_when_solved(tmp_path):
    d = _gen(tmp_path, "d", "--count", "2", "--grid", "16")
    mp = str(d / "manifest.json")
    assert main(["solve", "--manifest", mp, "--solver", "lowfi", "--workers", "1"]) == 0
    assert main(["solve", "--manifest", mp, "--solver", "reference", "--workers", "1"]) == 0
    m = load_manifest(mp)
    for c in m.cases:
        low = read_field(d / f"temperature_lowfi/{c.case_id}.tfld").values
        ref = read_field(m.resolve(c.temperature)).values
        assert np.abs(low - ref).mean() > 0
    before = {p: p.stat().st_mtime_ns for p in (d / "temperature_reference").iterdir()}
    assert main(["solve", "--manifest", mp, "--workers", "1"]) == 0
    assert {p: p.stat().st_mtime_ns for p in before} == before
    assert main(["solve", "--manifest", mp, "--workers", "1", "--force"]) == 0
    assert any(p.stat().st_mtime_ns != t for p, t in before.items())
    # dense oracle reproduces the iterative reference fields
    assert main(["solve", "--manifest", mp, "--solver", "dense", "--workers", "1"]) == 0
    m = load_manifest(mp)
    for c in m.cases:
        dense = read_field(m.resolve(c.temperature)).values
        ref = read_field(d / f"temperature_reference/{c.case_id}.tfld").values
        assert np.max(np.abs(dense - ref)) <= 1e-6


def test_eval_truth_is_zero(tmp_path, capsys):
    d = _gen(tmp_path, "d", "--count", "4", "--grid", "16")
    mp = str(d / "manifest.json")
    main(["solve", "--manifest", mp, "--workers", "1"])
    rep = tmp_path / "r.json"
    assert main(["eval", "--model", "truth", "--manifest", mp, "--report", str(rep),
                 "--compare", "constant", "--csv", str(tmp_path / "r.csv")]) == 0
    doc = json.loads(rep.read_text())
    assert doc["aggregate"] == {"mae": 0.0, "bmae": 0.0, "max_ae": 0.0, "mt_ae": 0.0}
    other = EvalReport.from_json(tmp_path / "r.compare.json")
    for k, v in other.aggregate.items():
        assert v == pytest.approx(np.mean([r[k] for r in other.rows]))
        assert v > 0
    out = capsys.readouterr().out
    assert "truth" in out and "constant" in out


def test_pgm_format():
    raw = pgm_bytes(np.array([[0.0, 1.0]]), 0.0, 1.0)
    assert raw == b"P5\n2 1\n255\n" + bytes([0, 255])
    assert pgm_bytes(np.full((3, 3), 7.0)).endswith(bytes([128] * 9))
    clamped = pgm_bytes(np.array([[-5.0, 0.5, 9.0]]), 0.0, 1.0)
    assert clamped[-3:] == bytes([0, 128, 255])


def test_render_command(tmp_path):
    d = _gen(tmp_path, "d", "--count", "1", "--grid", "16")
    main(["solve", "--manifest", str(d / "manifest.json"), "--workers", "1"])
    field = next((d / "temperature_reference").iterdir())
    out = tmp_path / "t.pgm"
    assert main(["render", "--field", str(field), "--out", str(out)]) == 0
    raw = out.read_bytes()
    assert raw.startswith(b"P5\n16 16\n255\n") and len(raw) == len(b"P5\n16 16\n255\n") + 256
    pix = np.frombuffer(raw[-256:], np.uint8)
    assert pix.min() == 0 and pix.max() == 255


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="bogus"):
        run_config_from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match="train"):
        run_config_from_dict({"train": {"epochs": 3}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"splits": {"training": 3}})
    with pytest.raises(ConfigError):
        run_config_from_dict({"train": {"batch_size": 2}})
    cfg = run_config_from_dict({"grid": 32, **TINY})
    assert isinstance(cfg, RunConfig) and cfg.train.epochs_pretrain == 1


def test_training_commands(tmp_path):
    d = _gen(tmp_path, "d", "--count", "6", "--grid", "32")
    mp = str(d / "manifest.json")
    main(["solve", "--manifest", mp, "--workers", "1", "--method", "sparse"])
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    bb, head, sup = (str(tmp_path / f) for f in ("bb.ptmw", "head.ptmw", "sup.ptmw"))
    assert main(["pretrain", "--manifest", mp, "--config", str(cfg), "--out-model", bb]) == 0
    assert main(["posttrain", "--manifest", mp, "--config", str(cfg), "--backbone", bb,
                 "--out-model", head]) == 0
    assert main(["train-supervised", "--manifest", mp, "--config", str(cfg),
                 "--out-model", sup]) == 0
    for m in (bb, head, sup):
        assert Path(m).is_file() and Path(m + ".json").is_file()
        lines = Path(m + ".log.jsonl").read_text().splitlines()
        assert lines and set(json.loads(lines[0])) == {"epoch", "case_id", "loss", "lr"}
    assert json.loads(Path(head + ".json").read_text())["backbone"] == "bb.ptmw"
    rep = str(tmp_path / "pi.json")
    assert main(["eval", "--model", head, "--manifest", mp, "--report", rep,
                 "--compare", sup]) == 0
    assert json.loads(Path(rep).read_text())["model_id"] == head


def test_run_end_to_end(tmp_path):
    cfg = {"workdir": str(tmp_path / "w"), "count": 5, "grid": 32, "method": "sparse",
           "workers": 1, **TINY}
    (tmp_path / "cfg.json").write_text(json.dumps(cfg))
    assert main(["run", "--config", str(tmp_path / "cfg.json")]) == 0
    w = tmp_path / "w"
    resolved = json.loads((w / "run_config.resolved.json").read_text())
    assert resolved["grid"] == 32 and resolved["pack"]["k"] == 3000.0
    assert run_config_from_dict(resolved).to_dict() == resolved
    summary = json.loads((w / "summary.json").read_text())
    assert len(summary["seeds"]) == 1 and "median_mae_improvement" in summary
    pgms = sorted((w / "seed_0" / "render").glob("*.pgm"))
    assert len(pgms) == 2 and all(p.read_bytes().startswith(b"P5\n32 32\n255\n") for p in pgms)


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "packthermal", "--help"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and "gen-layouts" in res.stdout
