"""``fidmap`` command line: simulate, build, eval, sweep, localize, plan, plot.

Exit status is 0 on success, 1 for invalid input or usage, 2 when the
optimizer hits a numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from fidmap.dataset import SessionError, dumps, load_gt_tags, load_session, save_gt_tags, save_session
from fidmap.graph import GraphError, Hyperparams
from fidmap.localization import DEFAULT_WINDOW, Localizer, records_to_jsonl, replay
from fidmap.mapping import build_map, load_map, pre_optimized_map, save_map
from fidmap.metrics import MetricError, ground_truth_metric_details, shift_metric_details, tag_path_distances
from fidmap.optimizer import LmConfig, NumericalError, StructuralError
from fidmap.planner import FLOOR_GAP, JUNCTION_RADIUS, PlanningError, shortest_path
from fidmap.simulate import BUILTIN_SCENARIOS, ScenarioSpec, simulate
from fidmap.sweep import (
    SweepError,
    SweepGrid,
    read_csv_metrics,
    result_to_csv,
    run_sweep,
    select_best,
    spearman,
)

EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _read(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _write(path: str, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _json_file(path: str):
    try:
        return json.loads(_read(path))
    except json.JSONDecodeError as exc:
        raise SessionError(f"{path}: invalid JSON: {exc}") from None


def _lm_config(args) -> LmConfig:
    return LmConfig.from_dict(_json_file(args.lm_config)) if args.lm_config else LmConfig()


def _point(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"expected x,y,z, got {text!r}") from None
    if len(values) != 3:
        raise UsageError(f"expected x,y,z, got {text!r}")
    return values


def cmd_simulate(args) -> int:
    if args.scenario in BUILTIN_SCENARIOS:
        spec = BUILTIN_SCENARIOS[args.scenario]()
    else:
        try:
            spec = ScenarioSpec.from_dict(_json_file(args.scenario))
        except (KeyError, TypeError) as exc:
            raise SessionError(f"{args.scenario}: invalid scenario: {exc}") from None
    sim = simulate(spec, args.seed)
    _write(args.out_session, save_session(sim.session))
    _write(args.out_gt, save_gt_tags(sim.ground_truth))
    return EXIT_OK


def cmd_build(args) -> int:
    session = load_session(_read(args.session))
    theta = Hyperparams.from_dict(_json_file(args.params))
    if args.pre_optimized:
        artifact = pre_optimized_map(session, theta, args.junction_radius, args.floor_gap)
        summary = {"optimized": False}
    else:
        artifact, report = build_map(session, theta, _lm_config(args), args.junction_radius, args.floor_gap)
        summary = {"optimized": True, **report.summary()}
    _write(args.out, save_map(artifact))
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    artifact = load_map(_read(args.map))
    session = load_session(_read(args.session))
    shift = shift_metric_details(session, artifact.tags)
    out = {"gt_metric": None, "shift_metric": shift.value, "pairs_used": shift.count, "anchors_used": None}
    if args.gt:
        gt = load_gt_tags(_read(args.gt))
        value = ground_truth_metric_details(artifact.tags, gt, tag_path_distances(session))
        out.update(gt_metric=value.value, anchors_used=value.count)
    print(json.dumps(out))
    return EXIT_OK


def cmd_sweep(args) -> int:
    session = load_session(_read(args.session))
    grid = SweepGrid.from_dict(_json_file(args.grid)) if args.grid else SweepGrid.geometric()
    gt = load_gt_tags(_read(args.gt)) if args.gt else None
    if args.jobs < 1:
        raise UsageError("--jobs must be at least 1")
    result = run_sweep(session, grid, gt, args.jobs, _lm_config(args))
    _write(args.out, result_to_csv(result))
    best = {"shift_selected": select_best(result, "shift").to_dict()}
    if result.has_gt:
        best["gt_selected"] = select_best(result, "gt").to_dict()
    print(json.dumps(best))
    return EXIT_OK


def cmd_localize(args) -> int:
    artifact = load_map(_read(args.map))
    session = load_session(_read(args.session))
    localizer = Localizer(artifact.tags, artifact.hyperparams, artifact.g_world, args.window, _lm_config(args))
    states = list(replay(session, localizer))
    _write(args.out, records_to_jsonl(states))
    if states[-1].unknown_tags:
        print(f"warning: skipped {states[-1].unknown_tags} observations of unmapped tags", file=sys.stderr)
    return EXIT_OK


def cmd_plan(args) -> int:
    artifact = load_map(_read(args.map))
    start = _point(args.start)
    try:
        goal = _point(args.goal)
    except UsageError:
        goal = artifact.waypoint_position(args.goal)
    route = shortest_path(artifact.path_graph, start, goal)
    doc = {"path": [[float(c) for c in p] for p in route.path], "length_m": route.length}
    _write(args.out, dumps(doc))
    return EXIT_OK


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    shift, gt = read_csv_metrics(_read(args.sweep))
    if not shift:
        raise SweepError("sweep CSV has no rows")
    if any(v is None for v in gt):
        raise SweepError("sweep CSV has no ground-truth metric values")
    rho = spearman(shift, gt) if len(shift) >= 2 else float("nan")
    matplotlib.rcParams["svg.hashsalt"] = "fidmap"
    matplotlib.rcParams["svg.fonttype"] = "none"
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter(shift, gt, s=12, gid="points")
    ax.set_xlabel("shift metric")
    ax.set_ylabel("ground-truth metric")
    ax.set_title(f"spearman={rho:.3f}")
    fig.tight_layout()
    try:
        fig.savefig(args.out, format="svg", metadata={"Date": None})
    except OSError as exc:
        raise UsageError(f"cannot write {args.out}: {exc.strerror}") from None
    finally:
        plt.close(fig)
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fidmap", description="Tag-anchored pose-graph mapping toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="simulate a session and its ground-truth tags")
    p.add_argument("--scenario", required=True, help=f"scenario JSON file or one of {sorted(BUILTIN_SCENARIOS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-session", required=True)
    p.add_argument("--out-gt", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build", help="optimize a session into a map")
    p.add_argument("--session", required=True)
    p.add_argument("--params", required=True, help="hyperparameter JSON")
    p.add_argument("--pre-optimized", action="store_true", help="skip optimization; tags at first observation")
    p.add_argument("--out", required=True)
    p.add_argument("--lm-config")
    p.add_argument("--junction-radius", type=float, default=JUNCTION_RADIUS)
    p.add_argument("--floor-gap", type=float, default=FLOOR_GAP)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("eval", help="score a map with the shift and ground-truth metrics")
    p.add_argument("--map", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--gt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="grid-search the four hyperparameters")
    p.add_argument("--session", required=True)
    p.add_argument("--grid", help="grid JSON; defaults to 4 values 1e-4..1e-1 per axis")
    p.add_argument("--gt")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--lm-config")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("localize", help="replay a session against a map")
    p.add_argument("--map", required=True)
    p.add_argument("--session", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--lm-config")
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("plan", help="shortest route along the map's path graph")
    p.add_argument("--map", required=True)
    p.add_argument("--from", dest="start", required=True, help="x,y,z")
    p.add_argument("--to", dest="goal", required=True, help="waypoint name or x,y,z")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("plot", help="scatter of shift vs ground-truth metric from a sweep CSV")
    p.add_argument("--sweep", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = make_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"fidmap: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericalError as exc:
        print(f"fidmap: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (SessionError, GraphError, MetricError, SweepError, PlanningError, StructuralError, ValueError) as exc:
        print(f"fidmap: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
