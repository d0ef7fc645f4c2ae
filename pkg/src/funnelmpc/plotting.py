"""Static SVG figures of a run: tracking errors and control signals."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .runner import RunReport, report_from_columns  # noqa: E402

plt.rcParams["svg.hashsalt"] = "funnelmpc"
plt.rcParams["svg.fonttype"] = "none"


def _as_report(data) -> RunReport:
    return data if isinstance(data, RunReport) else report_from_columns(data)


def _markers(ax, rep: RunReport):
    for t in rep.t[rep.learn_flag == 1]:
        ax.axvline(t, color="0.6", lw=0.8, ls=":", zorder=0)


def draw_errors(ax, rep: RunReport):
    m = rep.m
    for i in range(m):
        sfx = f"[{i}]" if m > 1 else ""
        ax.plot(rep.t, rep.y[:, i] - rep.y_ref[:, i], lw=1.2, label=f"y - y_ref{sfx}",
                gid=f"e{i}")
        ax.plot(rep.t, rep.y_M[:, i] - rep.y_ref[:, i], lw=0.9, ls="--",
                label=f"y_M - y_ref{sfx}", gid=f"eM{i}")
    ax.plot(rep.t, rep.psi, color="k", lw=0.9, label="+/- psi", gid="psi")
    ax.plot(rep.t, -rep.psi, color="k", lw=0.9, gid="-psi")
    _markers(ax, rep)
    ax.set_xlabel("t")
    ax.set_ylabel("error")
    ax.legend(loc="upper right", fontsize=8)


def draw_controls(ax, rep: RunReport):
    m = rep.m
    for i in range(m):
        sfx = f"[{i}]" if m > 1 else ""
        ax.plot(rep.t, rep.u_fmpc[:, i], lw=1.0, label=f"u_FMPC{sfx}", gid=f"u_fmpc{i}")
        ax.plot(rep.t, rep.u_fc[:, i], lw=1.0, label=f"u_FC{sfx}", gid=f"u_fc{i}")
        ax.plot(rep.t, rep.u[:, i], lw=1.2, label=f"u{sfx}", gid=f"u{i}")
    _markers(ax, rep)
    ax.set_xlabel("t")
    ax.set_ylabel("input")
    ax.legend(loc="upper right", fontsize=8)


def report_figure(data):
    """Two panels: errors with the funnel envelope, and the three inputs."""
    rep = _as_report(data)
    fig, (a1, a2) = plt.subplots(2, 1, figsize=(8, 6.5), sharex=True)
    draw_errors(a1, rep)
    draw_controls(a2, rep)
    fig.tight_layout()
    return fig


def single_figure(data, which: str):
    rep = _as_report(data)
    fig, ax = plt.subplots(figsize=(8, 3.6))
    (draw_errors if which == "errors" else draw_controls)(ax, rep)
    fig.tight_layout()
    return fig


def save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def plot_report(data, out_svg):
    """Render the two-panel figure to ``out_svg``; returns the (closed) figure."""
    fig = report_figure(data)
    save(fig, out_svg)
    return fig


def series_extents(fig) -> dict:
    """``gid -> (min, max)`` of every plotted line, for consistency checks."""
    out = {}
    for ax in fig.axes:
        for ln in ax.get_lines():
            gid = ln.get_gid()
            if gid:
                y = np.asarray(ln.get_ydata(), dtype=float)
                out[gid] = (float(y.min()), float(y.max()))
    return out
