"""Command-line entry point.

Exit codes: 0 when every verdict passed, 2 when at least one verdict failed,
1 on any operational error (bad input, bad config, I/O failure).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import __version__
from . import predictors as P
from . import synth
from .audit import AuditConfig, emit_report, resolve_seed, run_audit
from .dataio import load_dataset, write_dataset
from .errors import ConfigConflict, ContrafairError
from .scm import dumps, fit_scm, load_graph, load_scm, save_scm, scm_to_dict

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_FAILED = 2

PRESETS = {
    "fix_a": (synth.fix_a_scm, {"A": [0.5, 0.5]}),
    "law_school": (synth.law_school_scm, synth.LAW_MARGINALS),
    "job_location": (synth.job_location_scm, {"race": [0.6, 0.4]}),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are operational errors, not failed audits
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigConflict(f"{path}: invalid JSON ({exc})") from None


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_fit(args) -> int:
    graph = load_graph(args.graph)
    scm = fit_scm(graph, load_dataset(args.data, graph))
    _write(dumps(scm_to_dict(scm)), args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    graph = load_graph(args.graph)
    dataset = load_dataset(args.data, graph)
    scm = fit_scm(graph, dataset)
    doc = _read_json(args.config)
    try:
        decisions = P.DecisionSpace(tuple(doc.pop("decisions")))
    except KeyError:
        raise ConfigConflict("train config needs 'decisions'") from None
    doc["seed"] = resolve_seed(args.seed, doc.get("seed"))
    try:
        config = P.TrainConfig(**doc)
    except TypeError as exc:
        raise ConfigConflict(f"bad train config: {exc}") from None
    predictor = P.train(config, scm, dataset, decisions)
    text = json.dumps(P.predictor_to_dict(predictor), indent=2, sort_keys=True) + "\n"
    _write(text, args.out)
    return EXIT_OK


def cmd_audit(args) -> int:
    doc = _read_json(args.config)
    base = Path(args.config).parent
    if args.graph:
        doc["graph"] = str(Path(args.graph).resolve())
    if args.data:
        doc["data"] = str(Path(args.data).resolve())
    seed = resolve_seed(args.seed, doc.get("seed"))
    config = AuditConfig.from_dict(doc, base, seed)
    report = run_audit(config)
    fmt = args.format or config.output.get("format", "json")
    out = args.out or config.output.get("path")
    text = emit_report(report, fmt, out)
    if not out:
        sys.stdout.write(text)
    return EXIT_OK if report.all_passed else EXIT_FAILED


def cmd_simulate(args) -> int:
    doc = _read_json(args.config) if args.config else {}
    if args.preset:
        make, marginals = PRESETS[args.preset]
        scm = make()
        doc.setdefault("protected_marginals", marginals)
    elif args.graph:
        scm = load_scm(args.graph)
    else:
        raise ConfigConflict("simulate needs --graph (a fitted model file) or --preset")
    try:
        config = synth.GeneratorConfig(
            scm=scm,
            n=int(doc.get("n", 1000)),
            seed=resolve_seed(args.seed, doc.get("seed")),
            # unspecified protected variables are sampled uniformly over their levels
            protected_marginals={**synth.uniform_marginals(scm.graph),
                                 **doc.get("protected_marginals", {})},
            snapshots_per_individual=int(doc.get("snapshots_per_individual", 1)),
            drift=doc.get("drift", {}),
            id_prefix=doc.get("id_prefix", "I"),
        )
    except ValueError as exc:
        raise ConfigConflict(str(exc)) from exc
    people = synth.sample_population(config)
    if not args.out:
        raise ConfigConflict("simulate needs --out for the CSV dataset")
    write_dataset(args.out, scm.graph, people)
    if args.preset and args.graph_out:
        save_scm(scm, args.graph_out)
    return EXIT_OK


def cmd_report(args) -> int:
    doc = _read_json(args.report)
    if doc.get("schema_version") != 1:
        raise ConfigConflict(f"{args.report}: unsupported report schema {doc.get('schema_version')!r}")
    text = emit_report(doc, args.format or "text", args.out)
    if not args.out:
        sys.stdout.write(text)
    failed = (doc.get("summary") or {}).get("failed", 0)
    return EXIT_FAILED if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="contrafair", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"contrafair {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit a linear SCM and write the model file")
    p.add_argument("--graph", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train", help="train one predictor family")
    p.add_argument("--graph", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True, help="JSON train config incl. 'decisions'")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="run an audit config and emit the report")
    p.add_argument("--config", required=True)
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--format", choices=("json", "text"))
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("simulate", help="sample a synthetic population to CSV")
    p.add_argument("--graph", help="model file with equations")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--graph-out", help="with --preset, also write the preset model file")
    p.add_argument("--config", help="JSON generator config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("report", help="re-render a stored json report")
    p.add_argument("report")
    p.add_argument("--format", choices=("json", "text"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ContrafairError, OSError, ValueError) as exc:
        print(f"contrafair {args.command}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
