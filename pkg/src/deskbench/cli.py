"""`bench`: the single command-line driver for the five-step workflow.

Subcommands: validate | run | reproduce | attack | slice | analyze | publish
| query | datasets. Every subcommand ends with machine-readable summary
line(s) on stdout; per-trial progress goes to stderr. Exit status: 0 on
success, 2 when any trial or publish outcome failed, 1 on a harness or
configuration error.
"""

import argparse
import os
import sys

from . import __version__, analysis, config, datagen, executor, robustness, store
from .errors import BenchError, ConfigError


def _read(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}", source=path)


def _load_study(args):
    task = config.parse_task_config(_read(args.task), source=args.task)
    models = [config.parse_model_config(_read(p), source=p) for p in args.models]
    hopt = config.parse_hyperopt_config(_read(args.hyperopt), source=args.hyperopt)
    if getattr(args, "seed", None) is not None:
        hopt = config.HyperoptConfig(
            goal_metric=hopt.goal_metric, direction=hopt.direction,
            sampler=hopt.sampler, num_samples=hopt.num_samples, seed=args.seed,
            max_parallel_trials=hopt.max_parallel_trials,
            grid_points_per_range=hopt.grid_points_per_range, tpe=hopt.tpe,
            publish=hopt.publish,
        )
    return config.validate_study(task, models, hopt)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bench",
        description="Desk-scale multi-objective benchmarking harness.",
    )
    parser.add_argument("--version", action="version", version=f"bench {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="<command>")

    def study_flags(p):
        p.add_argument("--task", required=True, help="task config file")
        p.add_argument("--models", required=True, nargs="+",
                       help="model config file(s), one per model")
        p.add_argument("--hyperopt", required=True, help="hyperopt config file")

    p = sub.add_parser("validate", help="parse and validate study configs")
    study_flags(p)

    p = sub.add_parser("run", help="run a full study")
    study_flags(p)
    p.add_argument("--workers", type=int, default=None,
                   help="max parallel trials (default: from hyperopt config)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the hyperopt config seed")
    p.add_argument("--out-dir", default="bench_out", help="output directory")
    p.add_argument("--publish-config", default=None,
                   help="publish results to this target after the run")
    p.add_argument("--external-timeout-s", type=float, default=600.0,
                   help="wall-clock timeout per external trial")

    p = sub.add_parser("reproduce", help="replay a snapshot bit-exactly")
    p.add_argument("snapshot", help="experiment snapshot file")
    p.add_argument("--out-dir", default="bench_out", help="output directory")
    p.add_argument("--external-timeout-s", type=float, default=600.0,
                   help="wall-clock timeout per external trial")

    p = sub.add_parser("attack", help="adversarial attacks on a trained trial")
    p.add_argument("--snapshot", required=True, help="experiment snapshot file")
    p.add_argument("--thesaurus", default=None,
                   help="thesaurus file for synonym substitution")
    p.add_argument("--attacks", nargs="+", default=["deepwordbug", "pwws", "input_reduction"],
                   choices=["deepwordbug", "pwws", "input_reduction"],
                   help="attacks to run")
    p.add_argument("--trial", type=int, default=0, help="snapshot trial index to train")
    p.add_argument("--n-examples", type=int, default=25,
                   help="test examples to attack")
    p.add_argument("--seed", type=int, default=0, help="sampling/perturbation seed")
    p.add_argument("--budget", type=int, default=None,
                   help="edit budget (default: per-attack default)")
    p.add_argument("--theta", type=float, default=0.5,
                   help="input-reduction success fraction")
    p.add_argument("--out-dir", default="bench_out", help="output directory")

    p = sub.add_parser("slice", help="subpopulation performance report")
    p.add_argument("--snapshot", required=True, help="experiment snapshot file")
    p.add_argument("--slices", required=True, help="slice predicates config file")
    p.add_argument("--trial", type=int, default=0, help="snapshot trial index to train")
    p.add_argument("--out-dir", default="bench_out", help="output directory")

    p = sub.add_parser("analyze", help="comparative meta-analysis reports")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--store", help="result store file (.ndjson)")
    src.add_argument("--scores", help="CSV score table (header: model,<dataset>,...)")
    p.add_argument("--metric", default="accuracy", help="test metric to tabulate")
    p.add_argument("--direction", default="maximize", choices=["maximize", "minimize"],
                   help="whether larger scores are better")
    p.add_argument("--report", default="all",
                   choices=["mrr", "zscore", "gaps", "pareto", "convergence", "all"],
                   help="which analysis to emit")
    p.add_argument("--ranking", default="competition", choices=["competition", "dense"],
                   help="tie policy for rank-based analyses")
    p.add_argument("--out-dir", default="bench_out", help="output directory")

    p = sub.add_parser("publish", help="upload stored docs to a document API")
    p.add_argument("--store", required=True, help="result store file (.ndjson)")
    p.add_argument("--publish-config", required=True, help="publish target config file")

    p = sub.add_parser("query", help="filter stored result docs")
    p.add_argument("--store", required=True, help="result store file (.ndjson)")
    p.add_argument("--where", action="append", default=[],
                   help="filter clause `<field> <op> <value>`; repeatable "
                        "(ops: eq, lt, gt, contains)")

    sub.add_parser("datasets", help="list bundled and registered datasets")
    return parser


# ---------------------------------------------------------------------------
# Subcommand implementations

def _cmd_validate(args):
    plan = _load_study(args)
    experiments = config.expand_matrix(plan)
    print(f"validate status=ok study_id={plan.study_id} "
          f"config_hash={plan.config_hash} experiments={len(experiments)}")
    return 0


def _cmd_run(args):
    plan = _load_study(args)
    result = executor.run_study(
        plan, workers=args.workers, out_dir=args.out_dir,
        external_timeout_s=args.external_timeout_s,
    )
    target = plan.hyperopt.publish
    if args.publish_config:
        target = config.parse_publish_config(_read(args.publish_config),
                                             source=args.publish_config)
    publish_note = ""
    if target is not None:
        outcomes = store.publish([d for d in result.docs], target)
        n_bad = sum(1 for o in outcomes if not o.ok)
        publish_note = f" published={len(outcomes) - n_bad} publish_failed={n_bad}"
    status = "ok" if result.n_failed == 0 else "partial"
    print(f"run status={status} study_id={result.study_id} docs={len(result.docs)} "
          f"failed={result.n_failed} store={result.store_file}{publish_note}")
    return 0 if result.n_failed == 0 else 2


def _cmd_reproduce(args):
    snapshot = config.load_snapshot(args.snapshot)
    docs = executor.reproduce(
        snapshot, out_dir=args.out_dir,
        external_timeout_s=args.external_timeout_s, progress_stream=sys.stderr,
    )
    n_failed = sum(1 for d in docs if d["trial"]["status"] != "ok")
    status = "ok" if n_failed == 0 else "partial"
    print(f"reproduce status={status} study_id={snapshot.study_id} "
          f"experiment={snapshot.model_id}__{snapshot.dataset_id} "
          f"docs={len(docs)} failed={n_failed}")
    return 0 if n_failed == 0 else 2


def _attack_fn(name, thesaurus, budget, theta):
    if name == "deepwordbug":
        kwargs = {} if budget is None else {"budget": budget}
        return lambda model, ex, fz, seed: robustness.attack_deepwordbug(
            model, ex, fz, seed=seed, **kwargs)
    if name == "pwws":
        if thesaurus is None:
            raise ConfigError("pwws requires --thesaurus")
        kwargs = {} if budget is None else {"budget": budget}
        return lambda model, ex, fz, seed: robustness.attack_pwws(
            model, ex, fz, thesaurus, **kwargs)
    return lambda model, ex, fz, seed: robustness.attack_input_reduction(
        model, ex, fz, theta=theta)


def _cmd_attack(args):
    import numpy as np

    snapshot = config.load_snapshot(args.snapshot)
    model, ds, assignment, fz = executor.train_snapshot_trial(snapshot, args.trial)
    thesaurus = robustness.load_thesaurus(args.thesaurus) if args.thesaurus else None

    by_uid = {ex.uid: ex for ex in ds.examples}
    test_uids = sorted(assignment.test)
    rng = np.random.default_rng(args.seed)
    n = min(args.n_examples, len(test_uids))
    chosen = [test_uids[int(i)] for i in rng.choice(len(test_uids), size=n, replace=False)]

    rows = []
    rates = {}
    for name in args.attacks:
        fn = _attack_fn(name, thesaurus, args.budget, args.theta)
        outcomes = []
        for uid in chosen:
            outcome = fn(model, by_uid[uid], fz, args.seed)
            outcomes.append(outcome)
            rows.append((snapshot.model_id, snapshot.dataset_id, name, uid, outcome))
        rates[name] = robustness.attack_success_rate(outcomes)

    report_dir = os.path.join(args.out_dir, "reports", snapshot.study_id)
    os.makedirs(report_dir, exist_ok=True)
    csv_path = os.path.join(
        report_dir, f"attacks_{snapshot.model_id}__{snapshot.dataset_id}.csv")
    robustness.write_attack_csv(csv_path, rows)
    for name in args.attacks:
        print(f"attack name={name} model={snapshot.model_id} "
              f"dataset={snapshot.dataset_id} examples={n} "
              f"success_rate={rates[name]:.4f}")
    print(f"attack status=ok rows={len(rows)} csv={csv_path}")
    return 0


def _cmd_slice(args):
    snapshot = config.load_snapshot(args.snapshot)
    model, ds, assignment, fz = executor.train_snapshot_trial(snapshot, args.trial)
    slices = robustness.load_slices(_read(args.slices), source=args.slices)
    rows = robustness.slice_report(model, ds, assignment.test, fz, slices)

    report_dir = os.path.join(args.out_dir, "reports", snapshot.study_id)
    os.makedirs(report_dir, exist_ok=True)
    csv_path = os.path.join(
        report_dir, f"slices_{snapshot.model_id}__{snapshot.dataset_id}.csv")
    import csv as _csv

    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(["slice", "n_examples", "accuracy", "delta_vs_overall"])
        for r in rows:
            w.writerow([r.name, r.n_examples,
                        "" if r.accuracy is None else repr(r.accuracy),
                        "" if r.delta_vs_overall is None else repr(r.delta_vs_overall)])
    for r in rows:
        acc = "absent" if r.accuracy is None else f"{r.accuracy:.4f}"
        delta = "" if r.delta_vs_overall is None else f" delta={r.delta_vs_overall:+.4f}"
        print(f"slice name={r.name} n={r.n_examples} accuracy={acc}{delta}")
    print(f"slice status=ok rows={len(rows)} csv={csv_path}")
    return 0


def _cmd_analyze(args):
    if args.scores:
        table = analysis.score_table_from_csv(args.scores, direction=args.direction)
        docs = None
        study_id = os.path.splitext(os.path.basename(args.scores))[0]
    else:
        records, _ = store.read_store(args.store)
        docs = [r["doc"] for r in records]
        table = analysis.score_table_from_docs(docs, metric=args.metric,
                                               direction=args.direction)
        study_id = docs[0]["envelope"]["study_id"] if docs else "store"

    out_dir = os.path.join(args.out_dir, "reports", study_id)
    os.makedirs(out_dir, exist_ok=True)
    wanted = ([args.report] if args.report != "all"
              else ["mrr", "zscore", "gaps"] + (["pareto", "convergence"] if docs else []))

    ranks = analysis.rank_matrix(table, method=args.ranking)
    score_report = analysis.TableReport(
        title=f"{args.metric} (rows: models, columns: datasets)",
        row_labels=table.models, col_labels=table.datasets, values=table.values,
    )
    analysis.render_report(score_report, "text", os.path.join(out_dir, "scores.txt"))
    analysis.render_report(score_report, "csv", os.path.join(out_dir, "scores.csv"))

    if "mrr" in wanted:
        mrr_values = analysis.mrr(ranks)
        counts = analysis.top_rank_counts(ranks)
        heat = analysis.TableReport(
            title=f"{args.metric} colored by MRR ({args.ranking} ranking)",
            row_labels=table.models, col_labels=table.datasets, values=table.values,
            color_values=tuple(
                tuple(mrr_values[m] for _ in table.datasets) for m in table.models
            ),
        )
        analysis.render_report(heat, "svg_heatmap", os.path.join(out_dir, "mrr_heatmap.svg"))
        for m in table.models:
            print(f"mrr model={m} value={mrr_values[m]:.6f} top_rank_count={counts[m]}")
    if "zscore" in wanted:
        z = analysis.zscores(table)
        z_rows = tuple(tuple(float(v) for v in row) for row in z)
        z_report = analysis.TableReport(
            title=f"z-scores of {args.metric} per dataset",
            row_labels=table.models, col_labels=table.datasets,
            values=table.values, color_values=z_rows,
        )
        analysis.render_report(z_report, "svg_heatmap", os.path.join(out_dir, "zscore_heatmap.svg"))
        analysis.render_report(
            analysis.TableReport(title="z-scores", row_labels=table.models,
                                 col_labels=table.datasets, values=z_rows),
            "csv", os.path.join(out_dir, "zscores.csv"))
    if "gaps" in wanted:
        for d, g in analysis.gaps_ranked(table):
            print(f"gap dataset={d} value={g:.6f}")
    if "pareto" in wanted and docs:
        points = _latency_accuracy_points(docs, args.metric)
        if points:
            front = analysis.pareto_front(points, ("minimize", "maximize"))
            for p in front:
                flag = "dominated" if p.dominated else "front"
                print(f"pareto model={p.model_id} latency_s={p.coordinates[0]:.6g} "
                      f"{args.metric}={p.coordinates[1]:.6g} status={flag}")
    if "convergence" in wanted and docs:
        conv = analysis.convergence_table(docs)
        for (m, d), epoch in sorted(conv.items()):
            value = "absent" if epoch is None else epoch
            print(f"convergence model={m} dataset={d} best_epoch={value}")

    print(f"analyze status=ok reports={out_dir}")
    return 0


def _latency_accuracy_points(docs, metric):
    """Mean best-trial latency vs mean test metric per model (across datasets)."""
    cells = {}
    for doc in docs:
        env, trial = doc["envelope"], doc["trial"]
        if trial["status"] != "ok":
            continue
        cells.setdefault((env["model_id"], env["dataset_id"]), []).append(doc)
    per_model = {}
    for (m, _), cell_docs in sorted(cells.items()):
        best = analysis.best_trial_doc(cell_docs)
        tm = best["trial"]["test_metrics"]
        if metric not in tm:
            continue
        lat = best["trial"]["accounting"]["inference_latency_s"]
        per_model.setdefault(m, []).append((lat, tm[metric]))
    points = []
    for m, pairs in sorted(per_model.items()):
        lat = sum(p[0] for p in pairs) / len(pairs)
        acc = sum(p[1] for p in pairs) / len(pairs)
        points.append((m, (lat, acc)))
    return points


def _cmd_publish(args):
    target = config.parse_publish_config(_read(args.publish_config),
                                         source=args.publish_config)
    records, _ = store.read_store(args.store)
    outcomes = store.publish([r["doc"] for r in records], target)
    n_bad = sum(1 for o in outcomes if not o.ok)
    status = "ok" if n_bad == 0 else "partial"
    print(f"publish status={status} ok={len(outcomes) - n_bad} failed={n_bad}")
    return 0 if n_bad == 0 else 2


def _cmd_query(args):
    from .yamlio import canonical_json

    clauses = [store.parse_clause(w) for w in args.where]
    matches = store.query(args.store, clauses)
    for rec in matches:
        print(canonical_json(rec))
    print(f"query status=ok matched={len(matches)}")
    return 0


def _cmd_datasets(args):
    ids = datagen.list_dataset_ids()
    for dataset_id in ids:
        kind = "bundled" if dataset_id in datagen.bundled_ids() else "registered"
        print(f"dataset id={dataset_id} kind={kind}")
    print(f"datasets status=ok count={len(ids)}")
    return 0


_COMMANDS = {
    "validate": _cmd_validate,
    "run": _cmd_run,
    "reproduce": _cmd_reproduce,
    "attack": _cmd_attack,
    "slice": _cmd_slice,
    "analyze": _cmd_analyze,
    "publish": _cmd_publish,
    "query": _cmd_query,
    "datasets": _cmd_datasets,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help/--version exit 0; bad usage exits 1
        return 0 if exc.code in (0, None) else 1
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc.located()}", file=sys.stderr)
        return 1
    except BenchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
