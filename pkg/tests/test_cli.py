from pathlib import Path

import numpy as np
import pytest

from funnelmpc.cli import main
from funnelmpc.config import bundled
from funnelmpc.learn.checkpoint import write_model
from funnelmpc.learn.surrogate import LinearSurrogate
from funnelmpc.plotting import plot_report, report_figure, series_extents
from funnelmpc.runner import read_report_csv

from helpers import raw_config, toml_text

REACTOR = str(bundled("reactor"))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    """Short reactor run (one learning step) through the command line."""
    d = tmp_path_factory.mktemp("cli")
    text = Path(REACTOR).read_text().replace("t_end = 3.0", "t_end = 0.6")
    cfg = d / "reactor_short.toml"
    cfg.write_text(text)
    out = d / "out"
    code = main(["run", "--config", str(cfg), "--out", str(out)])
    return code, cfg, out


def test_run_writes_artifacts(small_run):
    code, _, out = small_run
    assert code == 0
    for name in ("report.csv", "meta.txt", "errors.svg", "controls.svg"):
        assert (out / name).stat().st_size > 0
    assert sorted(p.name for p in (out / "models").iterdir()) == ["model_0000.txt",
                                                                  "model_0005.txt"]
    meta = (out / "meta.txt").read_text()
    assert "status ok" in meta and "learning_times 0.5" in meta


def test_replay_command(small_run, capsys):
    _, cfg, out = small_run
    assert main(["replay", "--in", str(out / "report.csv"), "--config", str(cfg)]) == 0
    assert "replay ok" in capsys.readouterr().out


def test_plot_command_and_extents(small_run, tmp_path):
    _, _, out = small_run
    svg = tmp_path / "fig.svg"
    assert main(["plot", "--in", str(out / "report.csv"), "--out", str(svg)]) == 0
    assert svg.read_text().lstrip().startswith("<?xml")
    cols = read_report_csv(out / "report.csv")
    ext = series_extents(report_figure(cols))
    assert ext["u_fmpc0"] == (cols["u_fmpc[0]"].min(), cols["u_fmpc[0]"].max())
    assert ext["u_fc0"] == (cols["u_fc[0]"].min(), cols["u_fc[0]"].max())
    assert ext["u0"] == (cols["u[0]"].min(), cols["u[0]"].max())
    assert ext["psi"] == (cols["psi"].min(), cols["psi"].max())
    e = cols["y[0]"] - cols["y_ref[0]"]
    assert ext["e0"] == (e.min(), e.max())


def test_plot_panels_and_markers(small_run):
    _, _, out = small_run
    cols = read_report_csv(out / "report.csv")
    fig = report_figure(cols)
    assert len(fig.axes) == 2
    # one vertical marker per learning step in each panel
    flags = int(cols["learn_flag"].sum())
    for ax in fig.axes:
        marks = [ln for ln in ax.get_lines() if not ln.get_gid()]
        assert len(marks) == flags == 1


def test_plot_deterministic(small_run, tmp_path):
    _, _, out = small_run
    cols = read_report_csv(out / "report.csv")
    plot_report(cols, tmp_path / "a.svg")
    plot_report(cols, tmp_path / "b.svg")
    assert (tmp_path / "a.svg").read_bytes() == (tmp_path / "b.svg").read_bytes()


def test_plot_empty_report(tmp_path):
    p = tmp_path / "empty.csv"
    p.write_text("")
    assert main(["plot", "--in", str(p), "--out", str(tmp_path / "x.svg")]) == 1


def test_certify_initial_reactor_model(small_run, capsys):
    _, _, out = small_run
    assert main(["certify", "--model", str(out / "models" / "model_0000.txt"),
                 "--config", REACTOR]) == 0
    text = capsys.readouterr().out
    assert "not a member" in text and "lambda_Q" in text and "FAIL" in text
    assert "input certificate" in text and "internal bound" in text
    assert text.strip().endswith("certified")


def test_certify_learned_model(small_run, capsys):
    _, _, out = small_run
    assert main(["certify", "--model", str(out / "models" / "model_0005.txt"),
                 "--config", REACTOR]) == 0
    assert "class membership: member" in capsys.readouterr().out


def test_certify_singular_gamma(tmp_path, capsys):
    m = LinearSurrogate.zero(1, 2, gamma=[[0.0]])
    p = write_model(tmp_path / "m.txt", m)
    assert main(["certify", "--model", str(p), "--config", REACTOR]) != 0
    assert "gamma_inv" in capsys.readouterr().out


def test_certify_hand_example(tmp_path):
    m = LinearSurrogate([[0.0]], [[0.0]], [[1.0]], [0.0], [[-2.0]], [[0.0]], [0.0], [0.0])
    raw = raw_config(funnel={"a": 1e-300, "b": 0.0, "c": 1.0}, mpc={"u_bar": 3.0},
                     learning={"bounds": {"r_bar": 1.0, "s_bar": 1.0, "gamma_bar": 1.0,
                                          "p_bar": 1.0, "eta_bar": 1.0, "rho_bar": 1.0}})
    cfg = tmp_path / "hand.toml"
    cfg.write_text(toml_text(raw))
    p = write_model(tmp_path / "m.txt", m)
    assert main(["certify", "--model", str(p), "--config", str(cfg)]) == 0


def test_certify_bad_model_file(tmp_path):
    p = tmp_path / "m.txt"
    p.write_text("garbage\n")
    assert main(["certify", "--model", str(p), "--config", REACTOR]) == 1


def test_run_missing_funnel(tmp_path, capsys):
    raw = raw_config()
    del raw["funnel"]
    cfg = tmp_path / "c.toml"
    cfg.write_text(toml_text(raw))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 1
    assert "funnel.a" in capsys.readouterr().err


def test_run_zero_input_bound(tmp_path):
    text = Path(REACTOR).read_text().replace("u_bar = 735.0", "u_bar = 0.0")
    cfg = tmp_path / "c.toml"
    cfg.write_text(text)
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_replay_detects_tampering(small_run, tmp_path):
    _, cfg, out = small_run
    lines = (out / "report.csv").read_text().splitlines()
    header = lines[0].split(",")
    j = header.index("u[0]")
    row = lines[50].split(",")
    row[j] = repr(float(row[j]) + 1.0)
    lines[50] = ",".join(row)
    bad = tmp_path / "bad.csv"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["replay", "--in", str(bad), "--config", str(cfg)]) == 2
    (tmp_path / "short.csv").write_text("\n".join(lines[:-5]) + "\n")
    assert main(["replay", "--in", str(tmp_path / "short.csv"), "--config", str(cfg)]) == 1


def test_log_level_env(monkeypatch, small_run, tmp_path):
    _, _, out = small_run
    monkeypatch.setenv("FMPC_LOG", "debug")
    assert main(["plot", "--in", str(out / "report.csv"), "--out", str(tmp_path / "p.svg")]) == 0
