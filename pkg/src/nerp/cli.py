"""Command-line interface.

One subcommand per pipeline stage, JSON in, JSON out. All outputs are
written atomically (temp file + rename) and carry a schema-version field;
identical inputs and seeds produce byte-identical outputs. Exit codes:
0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path


from nerp import __version__
from nerp.calibration import (
    CalibrationConfig,
    GridSpec,
    grid_search,
)
from nerp.corrector import GateConfig, batch_correct, load_gates, outcomes_to_json
from nerp.embedding_store import load_bundle, save_bundle
from nerp.errors import ValidationError
from nerp.graph import build_knn_graph, load_edge_list, save_edge_list
from nerp.margins import estimate_margin_stats
from nerp.priors import PairGapTable, bundle_gaps, bundle_priors, composite_gap
from nerp.simulator import (
    generate_calibration_suite,
    load_config,
    run_theory_suite,
)


class _CliError(SystemExit):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2; spec says 1
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _write_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _load_graph(path: str, n_classes: int, class_names) -> "ConfusionGraph":
    return load_edge_list(path, n_classes, class_names)


def _gaps_from_priors_file(path: str) -> PairGapTable:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed priors file {path}: {exc}") from exc
    gaps = {}
    for entry in data["gaps"]:
        gaps[(int(entry["i"]), int(entry["j"]))] = float(entry["sigma"])
    return PairGapTable(mode=data.get("mode", "plain"), gaps=gaps)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_graph_knn(args) -> int:
    bundle = load_bundle(args.bundle)
    graph = build_knn_graph(bundle.prototypes_zs, args.k)
    _write_atomic(args.out, _dump_json([[i, j] for i, j in graph.edges()]))
    return 0


def _cmd_priors(args) -> int:
    bundle = load_bundle(args.bundle)
    graph = _load_graph(args.graph, bundle.n_classes, bundle.class_names)
    txt, img = bundle_priors(bundle, args.mode)
    gaps = composite_gap(txt, img, graph)
    payload = {
        "schema_version": 1,
        "mode": args.mode,
        "text_prior": {"variant": txt.variant, "values": txt.values.tolist()},
        "image_prior": {"variant": img.variant, "values": img.values.tolist()},
        "gaps": [
            {"i": i, "j": j, "sigma": gaps.gaps[(i, j)]} for i, j in sorted(gaps.gaps.keys())
        ],
    }
    _write_atomic(args.out, _dump_json(payload))
    return 0


def _cmd_margins(args) -> int:
    bundle = load_bundle(args.bundle)
    graph = _load_graph(args.graph, bundle.n_classes, bundle.class_names)
    stats = estimate_margin_stats(bundle.features, bundle.prototypes_ft, graph)
    payload = {
        "schema_version": 1,
        "n_samples": stats.n_samples,
        "pairs": [
            {"i": i, "j": j, "mu": stats.mu_hat[(i, j)], "var": stats.var_hat[(i, j)]}
            for i, j in sorted(stats.mu_hat.keys())
        ],
    }
    _write_atomic(args.out, _dump_json(payload))
    return 0


def _cmd_correct(args) -> int:
    bundle = load_bundle(args.bundle)
    graph = _load_graph(args.graph, bundle.n_classes, bundle.class_names)
    gaps = _gaps_from_priors_file(args.priors)
    gates = load_gates(args.gates)
    outcomes, summary = batch_correct(bundle, gaps, graph, gates)
    _write_atomic(args.out, _dump_json(outcomes_to_json(outcomes, summary)))
    return 0


def _cmd_calibrate(args) -> int:
    fold_dirs = sorted(Path(args.folds).iterdir()) if Path(args.folds).is_dir() else []
    fold_dirs = [d for d in fold_dirs if d.is_dir()]
    if not fold_dirs:
        raise ValidationError(f"--folds {args.folds} holds no fold directories")
    objective = "net_correct_flips"
    fer_cap = None
    if args.objective != "net":
        if not args.objective.startswith("cap:"):
            raise ValidationError("--objective must be 'net' or 'cap:<fer>'")
        objective = "coverage_under_fer_cap"
        fer_cap = float(args.objective.split(":", 1)[1])

    folds = []
    graph = None
    for d in fold_dirs:
        bundle = load_bundle(d)
        if graph is None:
            graph = _load_graph(args.graph, bundle.n_classes, bundle.class_names)
        folds.append((bundle, bundle_gaps(bundle, graph, args.mode)))

    config = CalibrationConfig(
        n_folds=max(len(folds), 2),
        grid_tau=GridSpec.from_string(args.grid_tau),
        grid_delta=GridSpec.from_string(args.grid_delta),
        objective=objective,
        fer_cap=fer_cap,
        epsilon0=args.epsilon0,
    )
    report = grid_search(folds, graph, config)
    gates = report.best_gates(epsilon0=args.epsilon0)
    _write_atomic(args.out, _dump_json(gates.to_json_dict() | {"schema_version": 1}))
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    _write_atomic(report_path, _dump_json(report.to_json_dict()))
    return 0


def _cmd_simulate(args) -> int:
    config = load_config(args.config)
    report = run_theory_suite(config)
    _write_atomic(args.out, _dump_json(report.to_json_dict()))
    if args.emit_bundles:
        root = Path(args.emit_bundles)
        if config.planted_bias:
            suite = generate_calibration_suite(config, args.emit_folds)
            main_world = suite.main
            for e, target in enumerate(suite.fold_targets()):
                save_bundle(target, root / f"fold_{e:02d}")
        else:
            from nerp.simulator import generate_world

            main_world = generate_world(config)
        save_bundle(main_world.fine_tuned, root / "main")
        save_bundle(main_world.zero_shot, root / "main_zs")
        split_payload = {
            "schema_version": 1,
            "base_classes": sorted(main_world.split.base_classes),
            "novel_classes": sorted(main_world.split.novel_classes),
        }
        _write_atomic(root / "split.json", _dump_json(split_payload))
    return 0


def _cmd_report(args) -> int:
    try:
        outcomes = json.loads(Path(args.outcomes).read_text())
    except FileNotFoundError:
        raise ValidationError(f"outcomes file not found: {args.outcomes}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed outcomes file: {exc}") from exc

    summary = outcomes.get("summary", {})
    flips = summary.get("flips", 0)
    fer = summary.get("fer")
    lines = [
        f"samples:          {summary.get('n_samples')}",
        f"flips:            {flips}",
    ]
    if summary.get("accuracy_before") is not None:
        lines.append(f"accuracy before:  {summary['accuracy_before']:.4f}")
        lines.append(f"accuracy after:   {summary['accuracy_after']:.4f}")
    lines.append("flip error rate:  " + (f"{fer * 100:.2f}%" if flips else "n/a (0 flips)"))

    histogram: dict[str, int] = {}
    for o in outcomes.get("outcomes", []):
        if o.get("flipped"):
            key = f"{o['original_top1']}->{o['corrected_top1']}"
            histogram[key] = histogram.get(key, 0) + 1
    payload = {
        "schema_version": 1,
        "summary": summary,
        "flip_histogram": dict(sorted(histogram.items())),
    }
    if args.calibration:
        payload["calibration"] = json.loads(Path(args.calibration).read_text())
    print("\n".join(lines))
    if histogram:
        print("flips by pair:")
        for key, count in sorted(histogram.items()):
            print(f"  {key}: {count}")
    if args.out:
        _write_atomic(args.out, _dump_json(payload))
    return 0


# ---------------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="nerp", description="Neutral-reference prior probing and local flips")
    parser.add_argument("--version", action="version", version=f"nerp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("graph-knn", help="build a symmetrized cosine kNN confusion graph")
    p.add_argument("--bundle", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_graph_knn)

    p = sub.add_parser("priors", help="compute prior tables and composite pair gaps")
    p.add_argument("--bundle", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--mode", choices=["plain", "residual"], default="plain")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_priors)

    p = sub.add_parser("margins", help="estimate per-pair margin statistics")
    p.add_argument("--bundle", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_margins)

    p = sub.add_parser("correct", help="apply gated local flips to a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--graph", required=True)
    p.add_argument("--priors", required=True)
    p.add_argument("--gates", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_correct)

    p = sub.add_parser("calibrate", help="grid-search decision gates on pseudo-target folds")
    p.add_argument("--folds", required=True, help="directory holding one bundle directory per fold")
    p.add_argument("--graph", required=True)
    p.add_argument("--grid-tau", required=True, help="min,max,step")
    p.add_argument("--grid-delta", required=True, help="min,max,step")
    p.add_argument("--objective", default="net", help="'net' or 'cap:<fer>'")
    p.add_argument("--mode", choices=["plain", "residual"], default="plain")
    p.add_argument("--epsilon0", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=_cmd_calibrate)

    p = sub.add_parser("simulate", help="run the synthetic theory suite")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--emit-bundles", default=None, help="also write generated bundles here")
    p.add_argument("--emit-folds", type=int, default=5)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("report", help="summarize correction outcomes")
    p.add_argument("--outcomes", required=True)
    p.add_argument("--calibration", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
