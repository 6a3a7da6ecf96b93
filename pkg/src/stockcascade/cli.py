"""``stockcascade`` command line: run one scenario or a sweep of configurations."""
from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import bundled_text, engine, reference_scenario
from .topology import (CHOICE_MODELS, MARGIN_MODES, SELECTION_STRATEGIES, ScenarioConfig,
                       TopologyError, load_scenario, validate_topology)

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
EMIT_CHOICES = ("csv", "events", "summary")
_DEFAULTS = {f.name: f.default for f in fields(ScenarioConfig)}

# argparse dest -> ScenarioConfig field
_OVERRIDES = {
    "stages_max": "max_stages",
    "stability_window": "stability_window",
    "margin_mode": "margin_mode",
    "selection": "selection_strategy",
    "choice": "choice_model",
    "penalty_rate": "penalty_rate",
    "event_cap": "event_cap",
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _emit_list(text: str) -> List[str]:
    items = [s.strip() for s in text.split(",") if s.strip()]
    bad = [s for s in items if s not in EMIT_CHOICES]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown artifact(s) {', '.join(bad)}; pick from {','.join(EMIT_CHOICES)}")
    return items


def _add_config_flags(p: argparse.ArgumentParser, multi: bool) -> None:
    def kind(conv, choices=None):
        def one(s):
            v = conv(s)
            if choices is not None and v not in choices:
                raise argparse.ArgumentTypeError(f"{s!r} is not one of {', '.join(choices)}")
            return v

        if not multi:
            return one
        return lambda s: [one(x) for x in s.split(",")]

    many = " (comma-separated list)" if multi else ""
    d = _DEFAULTS
    p.add_argument("--stages-max", type=kind(int), help=f"stage limit{many} [default {d['max_stages']}]")
    p.add_argument("--stability-window", type=kind(int),
                   help=f"identical consecutive stages that count as stable{many} [default {d['stability_window']}]")
    p.add_argument("--margin-mode", type=kind(str, MARGIN_MODES),
                   help=f"{'|'.join(MARGIN_MODES)}{many} [default {d['margin_mode']}]")
    sel = tuple(s.replace("_", "-") for s in SELECTION_STRATEGIES)
    p.add_argument("--selection", type=kind(lambda s: s.replace("-", "_"), SELECTION_STRATEGIES),
                   help=f"{'|'.join(sel)}{many} [default {d['selection_strategy'].replace('_', '-')}]")
    p.add_argument("--choice", type=kind(str, CHOICE_MODELS),
                   help=f"{'|'.join(CHOICE_MODELS)}{many} [default {d['choice_model']}]")
    p.add_argument("--penalty-rate", type=kind(int),
                   help=f"penalty per released unit and block{many} [default {d['penalty_rate']}]")
    p.add_argument("--event-cap", type=kind(int),
                   help=f"message limit per destination and stage{many} [default 10*|V|^2]")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stockcascade", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run_p = sub.add_parser("run", help="simulate one scenario")
    run_p.add_argument("scenario", help="scenario file, or 'builtin' for the bundled seven-node network")
    _add_config_flags(run_p, multi=False)
    run_p.add_argument("--out", default="results", help="output directory [default results]")
    run_p.add_argument("--emit", type=_emit_list, default=list(EMIT_CHOICES),
                       help="artifacts to write [default csv,events,summary]")

    sweep_p = sub.add_parser("sweep", help="simulate every combination of the listed flag values")
    sweep_p.add_argument("scenario", help="scenario file, or 'builtin'")
    _add_config_flags(sweep_p, multi=True)
    sweep_p.add_argument("--out", default="results", help="parent directory; one subdirectory per run")
    sweep_p.add_argument("--emit", type=_emit_list, default=list(EMIT_CHOICES))
    sweep_p.add_argument("--jobs", type=int, default=None, help="worker processes [default cpu count]")

    show_p = sub.add_parser("example", help="print the bundled seven-node scenario file")
    show_p.set_defaults(scenario=None)
    return parser


def _load(path: str):
    if path == "builtin":
        return reference_scenario()
    return load_scenario(path)


def write_atomic(path: Path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename over ``path``."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def simulate(scenario_path: str, overrides: Dict, out_dir: str, emit: Sequence[str]) -> int:
    """Load, run and write artifacts; returns the process exit code."""
    try:
        scenario = _load(scenario_path)
        scenario = scenario.with_config(**overrides)
        problems = scenario.config.validate() + validate_topology(
            scenario.graph, scenario.traffic, scenario.config)
    except (OSError, TopologyError, ValueError) as exc:
        print(f"stockcascade: {scenario_path}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if problems:
        for p in problems:
            print(f"stockcascade: {scenario_path}: {p}", file=sys.stderr)
        return EXIT_INPUT

    report = engine.run(scenario)
    out = Path(out_dir)
    try:
        if "csv" in emit:
            write_atomic(out / "stages.csv", engine.export_csv(report))
        if "events" in emit:
            write_atomic(out / "events.log", engine.export_events(report))
        if "summary" in emit:
            write_atomic(out / "summary.txt", engine.summary_text(report, scenario))
    except OSError as exc:
        print(f"stockcascade: cannot write to {out}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def _overrides(args) -> Dict:
    out = {}
    for flag, name in _OVERRIDES.items():
        value = getattr(args, flag)
        if value is not None:
            out[name] = value
    return out


def _sweep_jobs(args):
    chosen = _overrides(args)
    names = sorted(chosen)
    for combo in itertools.product(*(chosen[n] for n in names)):
        over = dict(zip(names, combo))
        label = "_".join(f"{n}-{v}" for n, v in over.items()) or "default"
        yield label, over


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "example":
        sys.stdout.write(bundled_text())
        return EXIT_OK
    if args.command == "run":
        code = simulate(args.scenario, _overrides(args), args.out, args.emit)
        if code != EXIT_INPUT and "summary" in args.emit:
            sys.stdout.write((Path(args.out) / "summary.txt").read_text(encoding="utf-8"))
        return code

    jobs = list(_sweep_jobs(args))
    with ProcessPoolExecutor(max_workers=args.jobs) as pool:
        futures = [(label, pool.submit(simulate, args.scenario, over,
                                       str(Path(args.out) / label), args.emit))
                   for label, over in jobs]
        codes = []
        for label, fut in futures:
            code = fut.result()
            codes.append(code)
            status = {EXIT_OK: "converged", EXIT_NOT_CONVERGED: "not converged"}.get(code, "input error")
            print(f"{label}: {status}")
    if EXIT_INPUT in codes:
        return EXIT_INPUT
    return EXIT_NOT_CONVERGED if EXIT_NOT_CONVERGED in codes else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
