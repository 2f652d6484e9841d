import os
import re
import subprocess
import sys

import numpy as np
import pytest

from sttmpc import __version__
from sttmpc.cli import (atomic_write, cmd_check, main, read_regret_csv,
                        regret_csv)
from sttmpc.config import load_config, parse_config_text, shipped_config_path
from sttmpc.errors import ConfigError

SHIPPED = open(shipped_config_path(), encoding="utf-8").read()


def edit(text, section, key, value):
    """Set ``key`` in ``section`` (appending the key when absent)."""
    lines = text.splitlines()
    start = lines.index(f"[{section}]")
    end = next((i for i in range(start + 1, len(lines))
                if lines[i].startswith("[")), len(lines))
    pat = re.compile(rf"^{re.escape(key)}\s*=")
    for i in range(start + 1, end):
        if pat.match(lines[i]):
            lines[i] = f"{key} = {value}"
            # drop continuation lines of a multi-line value
            while i + 1 < end and lines[i + 1][:1].isspace() and lines[i + 1].strip():
                del lines[i + 1]
                end -= 1
            return "\n".join(lines) + "\n"
    lines.insert(end, f"{key} = {value}")
    return "\n".join(lines) + "\n"


def drop(text, section, key):
    out = edit(text, section, key, "__drop__")
    return "\n".join(l for l in out.splitlines() if "__drop__" not in l) + "\n"


def small(text=SHIPPED, horizon=8, n_runs=2):
    text = edit(text, "run", "horizon", horizon)
    return edit(text, "run", "n_runs", n_runs)


def write(tmp_path, text, name="exp.cfg"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


def test_shipped_values(sec5):
    np.testing.assert_array_equal(sec5.A, [[0.6, 0.2], [-0.1, 0.4]])
    np.testing.assert_array_equal(sec5.B, [[1.0], [0.6]])
    assert sec5.sigma == 0.01
    np.testing.assert_array_equal(sec5.x0, [6.0, 3.0])
    np.testing.assert_array_equal(sec5.Theta0.half_widths, 0.07)
    np.testing.assert_array_equal(sec5.theta0,
                                  [0.57, 0.17, -0.12, 0.42, 0.95, 0.65])
    np.testing.assert_array_equal(sec5.K, [[-0.426, -0.290]])
    assert sec5.lam == 0.999 and sec5.delta == 0.01
    assert sec5.alphas == [0.01, 0.5, 0.99]
    np.testing.assert_array_equal(sec5.Q, np.eye(2))
    np.testing.assert_array_equal(sec5.R, np.eye(1))
    assert sec5.horizon == 400 and sec5.n_runs == 100


def test_shipped_constraints(sec5):
    # x1 >= -0.15, x2 >= -1.1 and u <= 0.5 are rows of F x + G u <= 1
    def ok(x, u):
        return bool(np.all(sec5.F @ x + sec5.G @ u <= 1 + 1e-12))
    assert ok([-0.15, 0.0], [0.0]) and not ok([-0.151, 0.0], [0.0])
    assert ok([0.0, -1.1], [0.0]) and not ok([0.0, -1.101], [0.0])
    assert ok([0.0, 0.0], [0.5]) and not ok([0.0, 0.0], [0.501])


def test_default_horizon():
    cfg = parse_config_text(drop(SHIPPED, "mpc", "N"))
    assert cfg.N == 10


def test_unstable_vertex_rejected():
    text = edit(SHIPPED, "mpc", "K", "[[0.5, 0.5]]")
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert any("robust stabilization" in m for m in exc.value.errors)


def test_unknown_key_reports_line():
    text = edit(SHIPPED, "plant", "colour", "3")
    line = text.splitlines().index("colour = 3") + 1
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert any(f"line {line}" in m and "colour" in m for m in exc.value.errors)


def test_unbounded_constraint_set():
    text = edit(SHIPPED, "mpc", "F", "[[-1, 0], [0, -1], [0, 0]]")
    text = edit(text, "mpc", "G", "[[0], [0], [2]]")
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert any("compactness" in m for m in exc.value.errors)


def test_theta_outside_box():
    text = edit(SHIPPED, "uncertainty", "half_widths", "0.01")
    with pytest.raises(ConfigError) as exc:
        parse_config_text(text)
    assert any("true parameter" in m for m in exc.value.errors)


def test_check_shipped(sec5):
    report = cmd_check(sec5)
    assert report["ok"], report["problems"]
    assert report["m"] == 64 and report["contractive"]
    assert report["initial_feasible"]


def test_check_reports_small_lambda():
    cfg = parse_config_text(edit(SHIPPED, "mpc", "lambda", "0.5"))
    report = cmd_check(cfg)
    assert not report["ok"] and report["problems"]


def test_check_explicit_template_same_margins(sec5):
    T = sec5.template().T
    rows = ", ".join("[" + ", ".join(repr(float(v)) for v in r) + "]"
                     for r in T)
    cfg = parse_config_text(edit(SHIPPED, "mpc", "T", f"[{rows}]"))
    a, b = cmd_check(cfg), cmd_check(sec5)
    assert a["template_source"] == "explicit"
    assert a["min_margin"] == b["min_margin"]


def test_regret_csv_round_trip():
    rng = np.random.default_rng(1)
    mean, sem = rng.standard_normal(17), rng.random(17)
    m2, s2, n = read_regret_csv(regret_csv(mean, sem, 100))
    assert m2.tobytes() == mean.tobytes() and s2.tobytes() == sem.tobytes()
    assert n == 100


def test_atomic_write_leaves_no_partial(tmp_path):
    target = tmp_path / "out.csv"
    target.write_text("old")

    # a non-string payload fails inside the write, after the temp file exists
    with pytest.raises(TypeError):
        atomic_write(str(target), 12345)
    assert target.read_text() == "old"
    assert os.listdir(tmp_path) == ["out.csv"]


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip() == __version__


def test_exit_codes(tmp_path, capsys):
    good = write(tmp_path, small())
    assert main(["check", good]) == 0
    bad = write(tmp_path, edit(SHIPPED, "mpc", "K", "[[0.5, 0.5]]"), "bad.cfg")
    assert main(["check", bad]) == 2
    assert main(["run", bad]) == 2
    assert main(["check", str(tmp_path / "missing.cfg")]) == 4
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", good, "--out", str(blocker / "sub"), "--quiet"]) == 4


def test_runtime_error_exit_code(tmp_path, monkeypatch):
    from sttmpc import cli
    from sttmpc.errors import BrokenPreconditionError

    def broken(*a, **k):
        raise BrokenPreconditionError("no feasible estimate")

    monkeypatch.setattr(cli, "monte_carlo", broken)
    assert main(["run", write(tmp_path, small()), "--quiet",
                 "--out", str(tmp_path / "o")]) == 3


def test_run_outputs_and_determinism(tmp_path):
    cfg = write(tmp_path, small(horizon=12, n_runs=2))
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        proc = subprocess.run(
            [sys.executable, "-m", "sttmpc", "run", cfg, "--out", str(out),
             "--with-trajectories", "--quiet"],
            capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    names = sorted(os.listdir(outs[0]))
    assert names == ["regret_alpha0.01.csv", "regret_alpha0.5.csv",
                     "regret_alpha0.99.csv", "trajectories.csv"]
    for n in names:
        assert (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()
    mean, sem, n_runs = read_regret_csv((outs[0] / names[0]).read_text())
    assert len(mean) == 12 and n_runs == 2
    traj = (outs[0] / "trajectories.csv").read_text().splitlines()
    assert traj[0].startswith("policy,alpha,run,t,x1,x2,u1")
    assert len(traj) == 1 + 2 * 4 * 12


def test_single_run_sem_zero(tmp_path):
    cfg = load_config(write(tmp_path, small(horizon=5, n_runs=1)))
    from sttmpc.cli import cmd_run
    written, _ = cmd_run(cfg, out=str(tmp_path / "o"))
    for path in written:
        _, sem, n = read_regret_csv(open(path).read())
        assert n == 1 and np.all(sem == 0.0)
