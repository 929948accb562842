import subprocess
import sys

import pytest

from maxq.cli import main, parse_domain

RUN_CONFIG = """\
method = maxq-abstracted
domain = taxi-noisy
trials = 2
budget = 4000
eval_interval = 2000
eval_mode = exact
"""


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.mark.parametrize("text,noise", [("taxi", 0.0), ("taxi-deterministic", 0.0), ("taxi-noisy", 0.2),
                                        ("taxi-noisy(0.35)", 0.35)])
def test_parse_domain(text, noise):
    assert parse_domain(text) == noise


@pytest.mark.parametrize("mode,total", [("flat", "3000"), ("maxq_plain", "14000")])
def test_count(capsys, mode, total):
    code, out, _ = run(capsys, "count", "taxi", mode)
    assert code == 0 and out.strip() == total


def test_count_breakdown(capsys):
    code, out, _ = run(capsys, "count", "taxi", "maxq_abstracted", "--breakdown")
    lines = out.splitlines()
    assert code == 0
    assert "C Root->Put\t0\teliminated" in out
    assert int(lines[0]) == sum(int(line.split("\t")[1]) for line in lines[1:] if "subtotal" in line)


def test_audit(capsys):
    code, out, _ = run(capsys, "audit", "taxi", "--policies", "2")
    lines = out.splitlines()
    assert code == 0 and len(lines) == 5
    assert all(line.startswith("PASS") for line in lines)


def test_audit_machine_format(capsys):
    code, out, _ = run(capsys, "audit", "taxi-noisy", "--policies", "1", "--machine")
    assert code == 0
    for line in out.splitlines():
        condition, subject, status, cx, discrepancy = line.split("\t")
        assert status == "PASS" and cx == "-" and float(discrepancy) == 0.0


def test_oracle(capsys, tmp_path):
    code, out, _ = run(capsys, "oracle", "taxi", "--out", str(tmp_path))
    assert code == 0
    assert "flat mean start value = 6.93" in out
    flat = (tmp_path / "flat.tsv").read_text().splitlines()
    assert flat[0] == "state\tvalue\taction" and len(flat) == 501
    hier = (tmp_path / "hierarchical.tsv").read_text().splitlines()
    assert hier[0] == "node\tstate\tvalue\tchoice"


def test_run_writes_outputs(capsys, tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(RUN_CONFIG)
    outputs = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        code, _, _ = run(capsys, "--seed", "9", "run", str(cfg), "--out", str(out_dir))
        assert code == 0
        outputs.append(out_dir)
    a, b = outputs
    for rel in ("curve.csv", "trials.csv", "tables/trial-000.txt", "tables/trial-001.txt"):
        assert (a / rel).read_bytes() == (b / rel).read_bytes()
    assert (a / "curve.csv").read_text().splitlines()[0] == "steps,mean_return,stderr,trials"
    assert "seed = 9" in (a / "config.txt").read_text()
    assert "oracle_mean_return" in (a / "summary.txt").read_text()


def test_output_dir_from_environment(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv("MAXQ_OUTPUT_DIR", str(tmp_path / "env"))
    code, _, _ = run(capsys, "oracle", "taxi")
    assert code == 0 and (tmp_path / "env" / "flat.tsv").exists()


def test_errors_are_reported(capsys, tmp_path):
    code, _, err = run(capsys, "count", "taxi", "sideways")
    assert code == 2 and err.startswith("error: UsageError:")
    code, _, err = run(capsys, "audit", "gridworld")
    assert code == 2 and "unknown domain" in err
    code, _, err = run(capsys, "run", str(tmp_path / "nope.cfg"))
    assert code == 2 and err.startswith("error: ConfigError:")
    bad = tmp_path / "bad.cfg"
    bad.write_text("gamma = 2\n")
    code, _, err = run(capsys, "run", str(bad))
    assert code == 2 and "missing required keys" in err
    assert len(err.splitlines()) == 1


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "maxq", "count", "taxi", "flat"],
                          capture_output=True, text=True, check=False)
    assert proc.returncode == 0 and proc.stdout == "3000\n"
    proc = subprocess.run([sys.executable, "-m", "maxq"], capture_output=True, text=True, check=False)
    assert proc.returncode == 2
