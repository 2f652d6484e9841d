"""Command line: ``check``, ``run`` and ``version``.

Exit codes: 0 success, 2 configuration or validation error, 3 runtime
(broken precondition) error, 4 I/O error.
"""
import argparse
import io
import os
import sys
import tempfile

import numpy as np

from . import __version__
from .errors import (BrokenPreconditionError, ConfigError,
                     IterationLimitError, NotContractibleError,
                     TemplateInsufficientError, TemplateUnboundedError)
from .geometry import is_lambda_contractive
from .simulation import monte_carlo
from .tube_mpc import build_tube, solve_mpc, terminal_cost
from .config import load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 2, 3, 4


def cmd_check(cfg):
    """Template certification and initial feasibility report.

    Returns a dict with ``ok`` plus the individual findings; failures are
    reported in ``problems`` rather than raised.
    """
    report = {"ok": True, "problems": [], "m": len(np.unique(cfg.vertices(),
                                                             axis=0))}
    try:
        tpl = cfg.template()
    except (NotContractibleError, IterationLimitError,
            TemplateUnboundedError) as exc:
        report["ok"] = False
        report["problems"].append(f"template: {exc}")
        return report
    report["d_alpha"] = tpl.d_alpha
    report["template_source"] = "explicit" if cfg.T is not None else "computed"
    try:
        ok, margins = is_lambda_contractive(tpl.T, cfg.vertices(), cfg.K,
                                            cfg.lam)
    except TemplateUnboundedError as exc:
        ok, margins = False, None
        report["problems"].append(f"template: {exc}")
    report["contractive"] = ok
    report["min_margin"] = None if margins is None else float(margins.min())
    if not ok:
        report["ok"] = False
        if margins is not None:
            report["problems"].append(
                f"template is not {cfg.lam}-contractive (worst margin "
                f"{margins.min():.3e})")
        return report
    mpc = cfg.mpc_config()
    sol = None
    for a in cfg.alphas:
        c = cfg.closed_loop(a, mpc)
        try:
            tube = build_tube(cfg.Theta0, mpc, c.sigma_t(0)).with_terminal(
                terminal_cost(c.theta0, mpc))
        except TemplateInsufficientError as exc:
            report["ok"] = False
            report["problems"].append(f"tube: {exc}")
            return report
        sol = solve_mpc(cfg.x0, c.theta0, tube, mpc)
        if not sol.feasible:
            break
    report["initial_feasible"] = bool(sol is not None and sol.feasible)
    if sol is not None and sol.feasible:
        report["initial_objective"] = float(sol.objective)
    else:
        report["ok"] = False
        report["problems"].append("tube MPC problem at (x0, theta0) is "
                                  "infeasible")
    return report


def format_report(report):
    lines = [f"vertices m: {report['m']}"]
    if "d_alpha" in report:
        lines.append(f"template rows d_alpha: {report['d_alpha']} "
                     f"({report['template_source']})")
    if report.get("min_margin") is not None:
        lines.append(f"contractivity: {'pass' if report['contractive'] else 'FAIL'}"
                     f" (worst margin {report['min_margin']:.3e})")
    if "initial_feasible" in report:
        lines.append("initial problem: " + (
            f"feasible (objective {report['initial_objective']:.6g})"
            if report["initial_feasible"] else "INFEASIBLE"))
    for p in report["problems"]:
        lines.append(f"problem: {p}")
    lines.append("check: " + ("pass" if report["ok"] else "FAIL"))
    return "\n".join(lines)


def alpha_label(a):
    return format(float(a), "g")


def regret_csv(mean, sem, n_runs):
    buf = io.StringIO()
    buf.write("t,mean_regret,sem,n_runs\n")
    for t, (m, s) in enumerate(zip(mean, sem)):
        buf.write(f"{t},{float(m)!r},{float(s)!r},{n_runs}\n")
    return buf.getvalue()


def read_regret_csv(text):
    """Inverse of :func:`regret_csv`: (mean, sem, n_runs)."""
    rows = text.strip().splitlines()
    if rows[0] != "t,mean_regret,sem,n_runs":
        raise ValueError("unexpected regret CSV header")
    data = [r.split(",") for r in rows[1:]]
    mean = np.array([float(r[1]) for r in data])
    sem = np.array([float(r[2]) for r in data])
    n = int(data[0][3]) if data else 0
    return mean, sem, n


def trajectories_csv(summary):
    buf = io.StringIO()
    first = summary.logs[("oracle", 0)]
    d_x, d_u = first.x.shape[1], first.u.shape[1]
    cols = (["policy", "alpha", "run", "t"]
            + [f"x{i + 1}" for i in range(d_x)]
            + [f"u{i + 1}" for i in range(d_u)]
            + [f"v{i + 1}" for i in range(d_u)]
            + [f"zeta{i + 1}" for i in range(d_u)]
            + [f"w{i + 1}" for i in range(d_x)]
            + ["stage_cost", "rho", "theta_err", "feasible"])
    buf.write(",".join(cols) + "\n")

    def emit(policy, alpha, run, log):
        for t in range(log.T):
            vals = ([policy, alpha, str(run), str(t)]
                    + [repr(float(v)) for v in log.x[t]]
                    + [repr(float(v)) for v in log.u[t]]
                    + [repr(float(v)) for v in log.v[t]]
                    + [repr(float(v)) for v in log.zeta[t]]
                    + [repr(float(v)) for v in log.w[t]]
                    + [repr(float(log.stage_cost[t])), str(int(log.rho[t])),
                       repr(float(log.theta_err[t])),
                       str(int(bool(log.feasible[t])))])
            buf.write(",".join(vals) + "\n")

    for run in range(summary.n_runs):
        emit("oracle", "", run, summary.logs[("oracle", run)])
        for a, alpha in enumerate(summary.alphas):
            emit("stt-mpc", alpha_label(alpha), run, summary.logs[(a, run)])
    return buf.getvalue()


def atomic_write(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-",
                               suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def cmd_run(cfg, out=None, with_trajectories=False, progress=None):
    """Run the Monte-Carlo batch and write the CSV files.

    All file contents are produced before anything is written, and each
    file is replaced atomically.  Returns the list of written paths.
    """
    out = out or cfg.output
    summary = monte_carlo(cfg.closed_loop(cfg.alphas[0]), cfg.horizon,
                          cfg.n_runs, cfg.alphas, cfg.master_seed,
                          workers=cfg.workers, keep_logs=with_trajectories,
                          progress=progress)
    files = {}
    for a, alpha in enumerate(summary.alphas):
        name = f"regret_alpha{alpha_label(alpha)}.csv"
        files[name] = regret_csv(summary.mean[a], summary.sem[a],
                                 summary.n_runs)
    if with_trajectories:
        files["trajectories.csv"] = trajectories_csv(summary)
    os.makedirs(out, exist_ok=True)
    written = []
    for name, text in files.items():
        path = os.path.join(out, name)
        atomic_write(path, text)
        written.append(path)
    return written, summary


def _build_parser():
    p = argparse.ArgumentParser(
        prog="sttmpc",
        description="Self-tuning tube MPC experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    c = sub.add_parser("check", help="certify the template and initial "
                       "feasibility of a configuration")
    c.add_argument("config")
    r = sub.add_parser("run", help="run the Monte-Carlo regret experiment")
    r.add_argument("config")
    r.add_argument("--out", default=None,
                   help="output directory (default: [run] output)")
    r.add_argument("--with-trajectories", action="store_true",
                   help="also write per-run logs to trajectories.csv")
    r.add_argument("--quiet", action="store_true",
                   help="no progress output on stderr")
    sub.add_parser("version", help="print the package version")
    return p


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.command == "version":
        print(__version__)
        return EXIT_OK
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_IO

    report = cmd_check(cfg)
    if args.command == "check":
        print(format_report(report))
        return EXIT_OK if report["ok"] else EXIT_CONFIG
    if not report["ok"]:
        print(format_report(report), file=sys.stderr)
        return EXIT_CONFIG

    def progress(done, total):
        print(f"\rruns {done}/{total}", end="" if done < total else "\n",
              file=sys.stderr, flush=True)

    try:
        written, _ = cmd_run(cfg, args.out, args.with_trajectories,
                             progress=None if args.quiet else progress)
    except ConfigError as exc:
        for msg in exc.errors:
            print(f"config error: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except BrokenPreconditionError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"I/O error: {exc.filename or ''} {exc.strerror or exc}",
              file=sys.stderr)
        return EXIT_IO
    for path in written:
        print(path)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
