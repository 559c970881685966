"""Command-line entry point: ``check``, ``solve`` and ``verify``.

Exit codes: 0 success, 1 mathematical failure (hypothesis, convergence or
residual), 2 input error.  Reports are JSON; without ``--report`` the
``check`` and ``verify`` reports go to stdout.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import conditions as co
from . import solver as so
from .frame import check_frame
from .geometry import ChartError, OutsideChartError, box_grid, check_scc, check_transversality
from .problem import ProblemError, ProblemSpec, load
from .reports import DiagnosticsReport, HypothesisReport, SccReport

log = logging.getLogger("darboux")

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2
SOLUTION_FILE = "solution.csv"
REPORT_FILE = "report.json"


class _Timer:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.marks: dict[str, float] = {}

    def __call__(self, name: str):
        timer = self

        class _Span:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.marks[name] = timer.marks.get(name, 0.0) + time.perf_counter() - self.t0

        return _Span()

    def result(self) -> dict | None:
        return {k: round(v, 6) for k, v in self.marks.items()} if self.enabled else None


def _transversality(spec: ProblemSpec) -> HypothesisReport:
    parts = [check_transversality(mf, spec.frame) for mf in spec.manifolds]
    k = int(np.argmin([p.worst for p in parts]))
    worst = parts[k]
    return HypothesisReport(
        "transversality",
        all(p.passed for p in parts),
        worst.worst,
        worst.tolerance,
        sum(p.samples for p in parts),
        witness={"alpha": k + 1, **(worst.witness or {})},
        details={"per_alpha": [p.worst for p in parts]},
        message=worst.message,
    )


def run_checks(spec: ProblemSpec, threads: int = 1, timer: _Timer | None = None):
    """All hypothesis sections in a fixed order; returns ``(sections, charts)``.

    ``charts`` is ``None`` when no chart box could be certified.
    """
    timer = timer or _Timer(False)
    nodes = box_grid(spec.box, spec.grid)
    sections: dict[str, dict] = {}
    with timer("frame"):
        sections["frame"] = check_frame(spec.frame, nodes).to_dict()
    with timer("transversality"):
        sections["transversality"] = _transversality(spec).to_dict()
    charts = None
    with timer("scc"):
        if sections["frame"]["passed"] and sections["transversality"]["passed"]:
            try:
                charts = so.chart_for(spec)
                scc = check_scc(charts, spec.box, spec.settings.scc_resolution, nodes, threads=threads)
            except ChartError as exc:
                scc = SccReport(False, spec.settings.scc_resolution, 0.0, nodes=len(nodes), message=str(exc))
        else:
            scc = SccReport(False, spec.settings.scc_resolution, 0.0, nodes=len(nodes),
                            message="skipped: frame or transversality failed")
        sections["scc"] = scc.to_dict()
    samples = co.draw_samples(spec)
    for name, fn in (("dependency", co.check_dependency), ("involution", co.check_involution),
                     ("integrability", co.check_integrability)):
        with timer(name):
            sections[name] = fn(spec, samples).to_dict()
    with timer("bounded_coeffs"):
        sections["bounded_coeffs"] = co.check_bounded_coeffs(spec, nodes).to_dict()
    return sections, charts


def _passed(sections: dict) -> bool:
    return all(s["passed"] for s in sections.values())


def _failed_names(sections: dict) -> list[str]:
    return [k for k, s in sections.items() if not s["passed"]]


def _emit(report: DiagnosticsReport, path: str | Path | None) -> None:
    text = report.to_json()
    if path is None:
        sys.stdout.write(text)
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _load(args) -> ProblemSpec:
    spec = load(args.file)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    return spec.with_settings(**changes) if changes else spec


def _report(spec_name: str, command: str, seed: int, **kw) -> DiagnosticsReport:
    return DiagnosticsReport(problem=spec_name, command=command, version=__version__, seed=seed, **kw)


def _input_error(command: str, exc: Exception, args, path=None) -> int:
    log.error("%s", exc)
    if path is not None:
        _emit(_report(str(args.file), command, args.seed or 0, passed=False, exit_code=EXIT_INPUT,
                      summary={"error": str(exc)}), path)
    return EXIT_INPUT


def cmd_check(args) -> int:
    timer = _Timer(args.timings)
    try:
        spec = _load(args)
    except ProblemError as exc:
        return _input_error("check", exc, args, args.report)
    sections, _ = run_checks(spec, args.threads, timer)
    ok = _passed(sections)
    code = EXIT_OK if ok else EXIT_FAIL
    failed = _failed_names(sections)
    summary = {"failed": failed, "warnings": list(spec.warnings)}
    _emit(_report(spec.name, "check", spec.settings.seed, passed=ok, exit_code=code, sections=sections,
                  summary=summary, timings=timer.result()), args.report)
    log.info("check %s: %s", spec.name, "pass" if ok else f"FAIL ({', '.join(failed)})")
    return code


def _residual_summary(spec: ProblemSpec, sol: so.SolutionGrid, rr) -> dict:
    threshold = so.residual_threshold(spec, sol)
    out = {
        "residual_threshold": threshold,
        "data_threshold": spec.settings.data_tol,
        "full_residual_ok": bool(rr.full_sup <= threshold),
        "data_ok": bool(rr.data_sup <= spec.settings.data_tol),
    }
    err = so.exact_error(spec, sol)
    if err is not None:
        out["sup_error"] = err
    return out


def _node_t(charts, nodes):
    try:
        return [c.psi_inverse(nodes) for c in charts]
    except OutsideChartError:
        return None


def cmd_solve(args) -> int:
    timer = _Timer(args.timings)
    out_dir = Path(args.output)
    report_path = out_dir / REPORT_FILE
    try:
        spec = _load(args)
    except ProblemError as exc:
        return _input_error("solve", exc, args, report_path)
    out_dir.mkdir(parents=True, exist_ok=True)
    sections, charts = run_checks(spec, args.threads, timer)
    checks_ok = _passed(sections)
    base = dict(sections=sections, forced=bool(args.force and not checks_ok))

    def finish(code: int, **kw) -> int:
        rep = _report(spec.name, "solve", spec.settings.seed, passed=code == EXIT_OK, exit_code=code,
                      timings=timer.result(), **base, **kw)
        _emit(rep, report_path)
        return code

    if not checks_ok and not args.force:
        failed = _failed_names(sections)
        log.error("hypotheses failed (%s); rerun with --force to solve anyway", ", ".join(failed))
        return finish(EXIT_FAIL, summary={"failed": failed, "solved": False})
    if charts is None:
        log.error("no chart could be certified; nothing to solve")
        return finish(EXIT_FAIL, summary={"failed": _failed_names(sections), "solved": False})
    if base["forced"]:
        log.warning("solving despite failed hypotheses: %s", ", ".join(_failed_names(sections)))
    try:
        with timer("plan"):
            grid = so.SolutionGrid.zeros(spec.box, spec.grid, spec.m)
            plan = so.build_plan(spec, charts, grid, threads=args.threads)
        with timer("iterate"):
            result = so.solve(spec, plan=plan)
    except so.ConvergenceError as exc:
        log.error("%s", exc)
        return finish(EXIT_FAIL, trace=exc.trace.to_dict(), summary={"solved": False, "error": str(exc)})
    except (so.OutOfBoxError, OutsideChartError) as exc:
        log.error("%s", exc)
        return finish(EXIT_FAIL, summary={"solved": False, "error": str(exc)})
    with timer("residuals"):
        rr = so.residuals(spec, charts, result.grid, node_t=plan.t)
    so.write_table(result.grid, out_dir / SOLUTION_FILE)
    summary = {"solved": True, "iterations": result.trace.iterations, "clamp_events": result.trace.clamp_events}
    summary.update(_residual_summary(spec, result.grid, rr))
    ok = summary["full_residual_ok"] and result.trace.clamp_events == 0
    log.info("solve %s: %d iterations, full residual %.3g (threshold %.3g)", spec.name,
             result.trace.iterations, rr.full_sup, summary["residual_threshold"])
    return finish(EXIT_OK if ok else EXIT_FAIL, trace=result.trace.to_dict(), residuals=rr.to_dict(), summary=summary)


def cmd_verify(args) -> int:
    timer = _Timer(args.timings)
    try:
        spec = _load(args)
        sol = so.read_table(args.solution, spec.box, spec.grid, spec.m)
    except (ProblemError, so.TableError) as exc:
        return _input_error("verify", exc, args, args.report)
    try:
        charts = so.chart_for(spec)
    except ChartError as exc:
        log.error("%s", exc)
        rep = _report(spec.name, "verify", spec.settings.seed, passed=False, exit_code=EXIT_FAIL,
                      summary={"error": str(exc)})
        _emit(rep, args.report)
        return EXIT_FAIL
    with timer("residuals"):
        rr = so.residuals(spec, charts, sol, node_t=_node_t(charts, sol.nodes()))
    summary = _residual_summary(spec, sol, rr)
    ok = summary["full_residual_ok"] and summary["data_ok"]
    code = EXIT_OK if ok else EXIT_FAIL
    _emit(_report(spec.name, "verify", spec.settings.seed, passed=ok, exit_code=code, residuals=rr.to_dict(),
                  summary=summary, timings=timer.result()), args.report)
    log.info("verify %s: full %.3g, restricted %.3g, data %.3g -> %s", spec.name, rr.full_sup,
             rr.restricted_sup, rr.data_sup, "pass" if ok else "FAIL")
    return code


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _threads(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("threads must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="darboux", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--seed", type=_seed, default=None, help="override the sampling seed in the problem file")
    parser.add_argument("--threads", type=_threads, default=1, help="worker threads for chart inversion")
    parser.add_argument("--timings", action="store_true", help="record wall-clock timings in the report")
    parser.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("check", help="run the hypothesis checks")
    p.add_argument("file")
    p.add_argument("--report", default=None, help="report path (default: stdout)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("solve", help="solve by Picard iteration and write solution.csv and report.json")
    p.add_argument("file")
    p.add_argument("-o", "--output", required=True, help="output directory (created if missing)")
    p.add_argument("--force", action="store_true", help="solve even if hypotheses fail (recorded in the report)")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("verify", help="compute residuals of a solution table")
    p.add_argument("file")
    p.add_argument("solution")
    p.add_argument("--report", default=None, help="report path (default: stdout)")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(levelname)s: %(message)s",
                        stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
