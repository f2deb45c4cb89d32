import subprocess
import sys

import numpy as np
import pytest

from logstab.cli import main
from logstab.extremal import find_extremizer, vertex_oracle
from logstab.illustrative import A_ILLUSTRATIVE, direction
from logstab.linalg import write_matrix
from logstab.node import NeuralOdeModel, SmoothedLeakyReLU, write_manifest
from logstab.outer import read_result, stabilize
from logstab.robustness import ExperimentConfig

TINY = ExperimentConfig(
    dimension=3, hidden=3, samples=150, steps=4, epochs=4, retrain_epochs=2,
    delta_grid=(-0.2, 0.0), fgsm_eta=(0.0, 0.2), fgm_eta=(0.0, 0.5),
)


def _kv(text):
    return dict(line.split(" = ", 1) for line in text.splitlines() if " = " in line)


def test_stabilize_scalar(tmp_path, capsys):
    src = tmp_path / "a.txt"
    src.write_text("1 1\n3\n")
    out = tmp_path / "res.txt"
    assert main(["stabilize", "--input", str(src), "--delta", "1", "--m", "0.5", "--out", str(out)]) == 0
    printed = _kv(capsys.readouterr().out)
    assert float(printed["epsilon_star"]) == pytest.approx(2.0, abs=1e-6)
    assert "outer_iterations" in printed
    doc = read_result(out)
    assert doc["matrices"]["A_hat"][0, 0] == pytest.approx(1.0, abs=1e-6)


def test_stabilize_illustrative(tmp_path, capsys):
    src = tmp_path / "a.txt"
    write_matrix(src, A_ILLUSTRATIVE)
    out = tmp_path / "res.txt"
    assert main(["stabilize", "--input", str(src), "--delta", "0.5", "--m", "0.5", "--out", str(out)]) == 0
    A_hat = read_result(out)["matrices"]["A_hat"]
    assert abs(vertex_oracle(A_hat, 0.5).mu_value - 0.5) <= 1e-6


def test_stabilize_already_satisfied(tmp_path, capsys):
    src = tmp_path / "a.txt"
    write_matrix(src, A_ILLUSTRATIVE)
    out = tmp_path / "res.txt"
    assert main(["stabilize", "--input", str(src), "--delta", "5", "--m", "0.5", "--out", str(out)]) == 0
    assert "already satisfied" in capsys.readouterr().out
    doc = read_result(out)
    assert not np.any(doc["matrices"]["E_star"]) and float(doc["header"]["epsilon_star"]) == 0.0


def test_stabilize_two_layer_and_diagonal(tmp_path, capsys):
    rng = np.random.default_rng(0)
    p1, p2 = tmp_path / "a1.txt", tmp_path / "a2.txt"
    write_matrix(p1, rng.standard_normal((3, 3)))
    write_matrix(p2, rng.standard_normal((3, 3)))
    out = tmp_path / "res.txt"
    args = ["stabilize", "--input", str(p1), "--two-layer", str(p2), "--delta", "0.3", "--m", "0.5", "--out", str(out)]
    assert main(args) == 0
    assert {"E1_star", "E2_star"} <= set(read_result(out)["matrices"])
    args = ["stabilize", "--input", str(p1), "--structure", "diagonal", "--delta", "0.3", "--m", "0.5", "--out", str(out)]
    assert main(args) == 0
    E = read_result(out)["matrices"]["E_star"]
    assert np.count_nonzero(E - np.diag(np.diag(E))) == 0


def test_stabilize_nonconvergence_exit_2(tmp_path):
    src = tmp_path / "a.txt"
    write_matrix(src, A_ILLUSTRATIVE)
    args = ["stabilize", "--input", str(src), "--delta", "0.5", "--m", "0.5", "--max-outer", "1", "--out", str(tmp_path / "r")]
    assert main(args) == 2


def test_malformed_matrix_exit_1(tmp_path, capsys):
    src = tmp_path / "bad.txt"
    src.write_text("2 2\n1 2\n3 x\n")
    assert main(["stabilize", "--input", str(src), "--delta", "0", "--m", "0.5", "--out", str(tmp_path / "r")]) == 1
    assert "bad.txt:3:" in capsys.readouterr().err


def test_bad_m_exit_1(tmp_path):
    src = tmp_path / "a.txt"
    write_matrix(src, A_ILLUSTRATIVE)
    assert main(["stabilize", "--input", str(src), "--delta", "0", "--m", "1.5", "--out", str(tmp_path / "r")]) == 1


def test_unknown_flag_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["lognorm-max", "--input", "x", "--m", "0.5", "--bogus"])
    assert exc.value.code == 1


@pytest.mark.parametrize("cmd", [[], ["stabilize"], ["demo-illustrative"], ["verify-bound"], ["robustness"], ["lognorm-max"]])
def test_help_exit_0(cmd, capsys):
    with pytest.raises(SystemExit) as exc:
        main(cmd + ["--help"])
    assert exc.value.code == 0
    assert "--" in capsys.readouterr().out or not cmd


def test_lognorm_identity(tmp_path, capsys):
    src = tmp_path / "i.txt"
    write_matrix(src, np.eye(3))
    assert main(["lognorm-max", "--input", str(src), "--m", "0.5"]) == 0
    out = _kv(capsys.readouterr().out)
    assert float(out["mu"]) == 1.0 and out["d_star"] == "1 1 1"


def test_lognorm_skew(tmp_path, capsys):
    src = tmp_path / "s.txt"
    write_matrix(src, np.array([[0.0, 2.0], [-2.0, 0.0]]))
    assert main(["lognorm-max", "--input", str(src), "--m", "1"]) == 0
    assert abs(float(_kv(capsys.readouterr().out)["mu"])) <= 1e-15


def test_lognorm_oracle_cross_check(tmp_path, capsys):
    src = tmp_path / "b.txt"
    B = A_ILLUSTRATIVE + 0.3 * direction(0.0)
    write_matrix(src, B)
    assert main(["lognorm-max", "--input", str(src), "--m", "0.5", "--oracle"]) == 0
    out = _kv(capsys.readouterr().out)
    assert abs(float(out["oracle_delta"])) <= 1e-8
    assert float(out["mu"]) == pytest.approx(find_extremizer(B, 0.5).mu_value, abs=1e-14)


def test_lognorm_oracle_capacity(tmp_path):
    src = tmp_path / "big.txt"
    write_matrix(src, np.eye(21))
    assert main(["lognorm-max", "--input", str(src), "--m", "0.5", "--oracle"]) == 1


def test_demo(tmp_path, capsys):
    out = tmp_path / "demo.csv"
    assert main(["demo-illustrative", "--out", str(out)]) == 0
    log = capsys.readouterr().out
    assert "transition at t = 0.45" in log
    assert "(-0.2865, 1.0832, -0.0002)" in log
    assert "(-0.2804, 1.0830, -0.0043)" in log
    assert out.read_text().startswith("t,mu,d_star")


def test_verify_bound_stabilized_manifest(tmp_path, capsys):
    rng = np.random.default_rng(1)
    res = stabilize(rng.standard_normal((3, 3)), 0.0, 0.1)
    model = NeuralOdeModel([(res.A_hat, rng.standard_normal(3))], SmoothedLeakyReLU(0.1), 1.0, 500)
    path = tmp_path / "net.manifest"
    write_manifest(path, model)
    report = tmp_path / "report.txt"
    args = ["verify-bound", "--manifest", str(path), "--delta", "0", "--trials", "200", "--scale", "1e-3", "--out", str(report)]
    assert main(args) == 0
    assert _kv(report.read_text())["violations"] == "0"


def test_verify_bound_missing_manifest(tmp_path):
    assert main(["verify-bound", "--manifest", str(tmp_path / "none"), "--delta", "0"]) == 1


def test_verify_bound_divergence_exit_2(tmp_path):
    model = NeuralOdeModel([(1e200 * np.eye(2), np.zeros(2))], steps=5)
    path = tmp_path / "big.manifest"
    write_manifest(path, model)
    assert main(["verify-bound", "--manifest", str(path), "--delta", "0", "--trials", "3"]) == 2


def test_robustness_empty_grid_exit_1(tmp_path):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text(TINY.to_text().replace("delta_grid = -0.2, 0.0", "delta_grid = "))
    assert main(["robustness", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1


def test_robustness_deterministic(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("LOGSTAB_SEED", raising=False)
    cfg = tmp_path / "cfg.txt"
    TINY.write(cfg)
    outs = []
    for name in ("a", "b"):
        assert main(["robustness", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        outs.append(tmp_path / name)
    for fname in ("accuracy.csv", "certificates.txt"):
        assert (outs[0] / fname).read_text() == (outs[1] / fname).read_text()
    monkeypatch.setenv("LOGSTAB_SEED", "3")
    assert main(["robustness", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "accuracy.csv").read_text() != (outs[0] / "accuracy.csv").read_text()


def test_console_script(tmp_path):
    exe = [sys.executable, "-m", "logstab.cli"]
    proc = subprocess.run(exe + ["demo-illustrative"], capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 0 and "transition" in proc.stdout
    proc = subprocess.run(exe + ["nope"], capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 1
