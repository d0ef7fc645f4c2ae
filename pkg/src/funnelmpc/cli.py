"""Command-line front end.

Exit statuses (all commands):

* 0: success / certified
* 1: configuration, model-file or report parse error
* 2: funnel violation during a run, or a replay mismatch
* 3: OCP feasibility lost during a run
* 4: ``certify``: the model is not certified
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load
from .learn.certify import check_K_membership, m_ubar_certificate, verify_internal_bound
from .learn.checkpoint import CheckpointError, read_model
from .learn.graybox import GrayboxParams
from .runner import (NondeterminismError, ReportFormatError, read_report_csv, replay, run,
                     write_meta, write_report_csv)

log = logging.getLogger("funnelmpc")

EXIT_OK, EXIT_INPUT, EXIT_FUNNEL, EXIT_FEASIBILITY, EXIT_UNCERTIFIED = 0, 1, 2, 3, 4
_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging():
    name = os.environ.get("FMPC_LOG", "error").strip().lower()
    level = _LEVELS.get(name, logging.ERROR)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if name and name not in _LEVELS:
        log.error("ignoring FMPC_LOG=%r (expected error, info or debug)", name)


def _err(msg: str):
    print(f"funnelmpc: {msg}", file=sys.stderr)


def cmd_run(args) -> int:
    from .plotting import save, single_figure

    out = Path(args.out)
    try:
        setup = load(args.config, seed=args.seed)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_INPUT
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        _err(f"cannot create output directory {out}: {exc}")
        return EXIT_INPUT
    rep = run(setup, checkpoint_dir=out / "models")
    write_report_csv(rep, out / "report.csv")
    write_meta(out / "meta.txt", setup, rep)
    if len(rep.t):
        save(single_figure(rep, "errors"), out / "errors.svg")
        save(single_figure(rep, "controls"), out / "controls.svg")
    print(f"status {rep.status}  max|e|/psi={rep.max_ratio:.6g}  "
          f"max|u_fmpc|={rep.maxima['u_fmpc']:.6g}  runtime={rep.runtime:.1f}s")
    if rep.message:
        _err(rep.message)
    return rep.exit_code


def cmd_certify(args) -> int:
    try:
        setup = load(args.config)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_INPUT
    try:
        model, file_bounds = read_model(args.model)
    except (OSError, CheckpointError, ValueError, KeyError) as exc:
        _err(f"cannot parse model file {args.model}: {exc}")
        return EXIT_INPUT
    if isinstance(model, GrayboxParams):
        print("gray-box model: no class certificate available")
        return EXIT_UNCERTIFIED
    bounds = setup.bounds or file_bounds
    if bounds is None:
        _err("no class bounds in the config or the model file")
        return EXIT_INPUT

    k = check_K_membership(model, bounds, setup.funnel, setup.reference)
    print(f"class membership: {'member' if k.member else 'not a member'}")
    for line in k.lines():
        print("  " + line)
    cert = m_ubar_certificate(model, bounds, setup.funnel, setup.reference)
    print(f"input certificate: G_max={cert.G_max_bound:.10g} P_max={cert.P_max_bound:.10g} "
          f"required_u={cert.required_u:.10g} u_bar={cert.u_bar:.10g} "
          f"{'pass' if cert.passes else 'FAIL'}")
    ib = verify_internal_bound(model, bounds, setup.funnel, setup.reference, trials=args.trials,
                               horizon=args.horizon, seed=args.seed)
    print(f"internal bound: max|eta|={ib.max_norm:.6g} eta_bar={ib.eta_bar:.6g} "
          f"violations={len(ib.violations)}/{ib.trials} {'pass' if ib.ok else 'FAIL'}")
    certified = cert.passes and ib.ok
    print("certified" if certified else "not certified")
    return EXIT_OK if certified else EXIT_UNCERTIFIED


def cmd_plot(args) -> int:
    from .plotting import plot_report

    try:
        cols = read_report_csv(args.inp)
    except ReportFormatError as exc:
        _err(f"bad report {args.inp}: {exc}")
        return EXIT_INPUT
    plot_report(cols, args.out)
    return EXIT_OK


def cmd_replay(args) -> int:
    try:
        setup = load(args.config)
        cols = read_report_csv(args.inp)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_INPUT
    except ReportFormatError as exc:
        _err(f"bad report {args.inp}: {exc}")
        return EXIT_INPUT
    try:
        worst = replay(cols, setup)
    except ReportFormatError as exc:
        _err(str(exc))
        return EXIT_INPUT
    except NondeterminismError as exc:
        _err(str(exc))
        return EXIT_FUNNEL
    print(f"replay ok: max|dy|={worst:.3g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="funnelmpc", description="Learning-based funnel MPC runs.")
    sub = p.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="simulate a configured closed loop")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("certify", help="check a model file against the class bounds")
    c.add_argument("--model", required=True)
    c.add_argument("--config", required=True)
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--horizon", type=float, default=5.0)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_certify)

    pl = sub.add_parser("plot", help="render a report as a two-panel SVG")
    pl.add_argument("--in", dest="inp", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)

    rp = sub.add_parser("replay", help="re-integrate a report's inputs and compare outputs")
    rp.add_argument("--in", dest="inp", required=True)
    rp.add_argument("--config", required=True)
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
