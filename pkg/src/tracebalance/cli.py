"""Command-line entry point: ``tracebalance <subcommand> ...``.

Exit status is 0 on success, 2 on usage errors and 1 when a pipeline stage
fails; the failing stage is named on stderr. Relative ``--out`` paths are
resolved under ``$TRACEBALANCE_OUT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ._seeding import derive_seed
from .agent.dqn import AgentConfig, load_network
from .agent.train import SAMPLERS, TrainConfig, evaluate, summarize, train
from .clustering import SEARCH_RANGES, ClusterModel, search_clustering
from .features import extract_matrix, read_feature_csv, write_feature_csv
from .pipeline import Categorization, StageError, categorize
from .prioritization import CategoricalDistribution
from .selection import SelectionConfig, SelectionReport, select_critical_features
from .tracebench.generator import COMPOSITIONS, SCENARIOS, build_dataset, build_scenario
from .tracebench.lb import lb_generate
from .traces import TraceDataset, load_dataset, save_dataset, write_summary_csv

log = logging.getLogger("tracebalance")

DEFAULT_STEPS = 40_000


def _out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get("TRACEBALANCE_OUT")
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _dump_json(obj, path: Path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)
        fh.write("\n")


def _stage(name):
    """Tag any exception raised inside the block with a stage name."""

    class _Ctx:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, (StageError, SystemExit, KeyboardInterrupt)):
                raise StageError(name, exc) from exc
            return False

    return _Ctx()


def cmd_gen_traces(args) -> None:
    out = _out(args.out)
    with _stage("gen-traces"):
        if args.kind == "lb":
            traces = tuple(lb_generate(derive_seed(args.seed, "lb", i), trace_id=f"lb-{args.split}-{i:05d}")
                           for i in range(args.n))
            ds = TraceDataset(f"lb-{args.split}", traces)
        else:
            ds = build_dataset(args.kind, args.n, args.seed, args.split)
        manifest = save_dataset(ds, out)
        write_summary_csv(ds, out / "summary.csv")
    print(manifest)


def cmd_extract_features(args) -> None:
    with _stage("extract-features"):
        ds = load_dataset(args.dataset)
        matrix = extract_matrix(ds)
        write_feature_csv(matrix, _out(args.out))


def _matrix_from(args):
    if args.features:
        return read_feature_csv(args.features)
    return extract_matrix(load_dataset(args.dataset))


def cmd_select_features(args) -> None:
    with _stage("select-features"):
        matrix = _matrix_from(args)
        cfg = SelectionConfig(initial_cluster_count=args.initial_k, min_features=args.min_features,
                              ig_threshold=args.ig_threshold, seed=derive_seed(args.seed, "select"))
        report = select_critical_features(matrix, cfg)
        report.dump(_out(args.out))
    print(" ".join(report.final_features))


def cmd_cluster(args) -> None:
    with _stage("cluster"):
        matrix = read_feature_csv(args.features)
        if args.selection:
            with open(args.selection) as fh:
                matrix = matrix.select(json.load(fh)["final_features"])
        model = search_clustering(matrix.values, (args.k_min, args.k_max), args.seeds,
                                  derive_seed(args.seed, "cluster"), jobs=args.jobs)
        model.trace_ids = list(matrix.trace_ids)
        model.feature_labels = list(matrix.labels)
        model.dump(_out(args.out))
    print(f"k={model.k} silhouette={model.silhouette:.4f}")


def _agent_config(args) -> AgentConfig:
    return AgentConfig(seed=args.seed, lr=args.lr, batch_size=args.batch_size,
                       eps_schedule=(1.0, 0.05, max(1, args.steps // 2)),
                       dueling=args.dueling, double=args.double, prioritized=args.per)


def _train_config(args) -> TrainConfig:
    return TrainConfig(sampler=args.sampler, total_steps=args.steps, n_actors=args.actors,
                       eval_every=max(1, args.eval_every or args.steps), env=args.env)


def _categories_from_model(model: ClusterModel, ds: TraceDataset) -> Categorization:
    matrix = extract_matrix(ds)
    critical = matrix.select(model.feature_labels) if model.feature_labels else matrix
    labels = model.labels_by_trace()
    missing = set(ds.ids) - set(labels)
    if missing:
        raise ValueError(f"cluster model lacks {len(missing)} training traces")
    dist = CategoricalDistribution.from_labels(ds.ids, [labels[t] for t in ds.ids])
    feats = {t: row.astype(np.float32) for t, row in zip(critical.trace_ids, critical.values)}
    report = SelectionReport(final_features=list(critical.labels), initial_count=matrix.shape[1])
    return Categorization(matrix, report, model, dist, feats)


def _write_run(result, out: Path, cats: Categorization | None, train_ds: TraceDataset) -> None:
    out.mkdir(parents=True, exist_ok=True)
    result.write_metrics(out / "metrics.csv")
    result.sampler.board.dump(out / "weights.json", cats.cluster_classes(train_ds) if cats else None)
    result.learner.save(out / "checkpoint.pt")
    with open(out / "episodes.csv", "w", newline="") as fh:
        fh.write("# schema_version=1 kind=episodes\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trace_id", "category", "raw_return", "step"])
        for tid, cat, ret, step in result.episodes:
            w.writerow([tid, cat, repr(float(ret)), step])


def cmd_train(args) -> None:
    with _stage("load"):
        train_ds, test_ds = load_dataset(args.train), load_dataset(args.test)
    cats = None
    if args.sampler.startswith("plume"):
        with _stage("cluster"):
            if args.cluster_model:
                with open(args.cluster_model) as fh:
                    model = ClusterModel.from_json(json.load(fh))
                cats = _categories_from_model(model, train_ds)
            else:
                cats = categorize(train_ds, args.seed, jobs=args.jobs)
    with _stage("train"):
        result = train(train_ds, test_ds, cats, _train_config(args), _agent_config(args))
    with _stage("write"):
        _write_run(result, _out(args.out), cats, train_ds)
    print(json.dumps({k: v for k, v in result.final.items()}, sort_keys=True))


def cmd_eval(args) -> None:
    with _stage("eval"):
        ds = load_dataset(args.dataset)
        net = load_network(args.checkpoint)
        returns = evaluate(net, ds, args.env, args.eval_seed)
        with open(_out(args.out), "w", newline="") as fh:
            fh.write("# schema_version=1 kind=eval_returns\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["trace_id", "ground_truth_class", "return"])
            for tid in ds.ids:
                w.writerow([tid, ds[tid].ground_truth_class or "", repr(returns[tid])])
    print(json.dumps(summarize(returns, ds), sort_keys=True))


def cmd_weights_dump(args) -> None:
    with _stage("weights-dump"):
        src = Path(args.run)
        if src.is_dir():
            src = src / "weights.json"
        with open(src) as fh:
            blob = json.load(fh)
        out = _out(args.out)
        if out.suffix == ".json":
            _dump_json(blob, out)
            return
        with open(out, "w", newline="") as fh:
            fh.write("# schema_version=1 kind=weights\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["episode", "version", "category", "weight", "effective_pdf", "relative_weight"])
            base = None
            for entry in blob["series"]:
                eff = entry["effective_pdf"]
                if base is None:
                    base = eff  # version 0 is the unweighted starting point for dynamic runs
                for c, wt, p, p0 in zip(entry["categories"], entry["weights"], eff, base):
                    w.writerow([entry["episode"], entry["version"], c, repr(wt), repr(p),
                                repr(p / p0 if p0 > 0 else float("nan"))])


def cmd_bench(args) -> None:
    out = _out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with _stage("gen-traces"):
        train_ds, test_ds = build_scenario(args.scenario, args.n_train, args.n_test, args.seed)
        save_dataset(train_ds, out / "train")
        save_dataset(test_ds, out / "test")
    # baselines do not sample by cluster, but their clustering is still recorded
    found = categorize(train_ds, args.seed, jobs=args.jobs)
    with _stage("write"):
        write_feature_csv(found.matrix, out / "features.csv")
        found.report.dump(out / "selection.json")
        found.model.dump(out / "cluster_model.json")
    cats = found if args.sampler.startswith("plume") else None
    with _stage("train"):
        result = train(train_ds, test_ds, cats, _train_config(args), _agent_config(args))
    with _stage("write"):
        _write_run(result, out, cats, train_ds)
    print(json.dumps(result.final, sort_keys=True))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker cap for parallel stages")
    p.add_argument("-v", "--verbose", action="count", default=0)


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--sampler", choices=SAMPLERS, default="random")
    p.add_argument("--steps", type=int, default=DEFAULT_STEPS, help="total environment steps")
    p.add_argument("--eval-every", type=int, default=0, help="checkpoint interval (default: end only)")
    p.add_argument("--actors", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--dueling", action="store_true")
    p.add_argument("--double", action="store_true")
    p.add_argument("--per", action="store_true", help="prioritized experience replay")
    p.add_argument("--env", choices=("abr", "lb"), default="abr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracebalance", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-traces", help="generate a TraceBench or load-balancing dataset")
    _common(p)
    p.add_argument("--kind", choices=sorted(COMPOSITIONS) + ["lb"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_traces)

    p = sub.add_parser("extract-features", help="write the feature catalog for a dataset as CSV")
    _common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("select-features", help="identify critical features")
    _common(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--features")
    p.add_argument("--out", required=True)
    p.add_argument("--initial-k", type=int, default=4)
    p.add_argument("--min-features", type=int, default=4)
    p.add_argument("--ig-threshold", type=float, default=0.5)
    p.set_defaults(func=cmd_select_features)

    p = sub.add_parser("cluster", help="GMM search over seeds and cluster counts")
    _common(p)
    p.add_argument("--features", required=True)
    p.add_argument("--selection", help="selection report restricting the columns")
    p.add_argument("--k-min", type=int, default=SEARCH_RANGES["tracebench"][0])
    p.add_argument("--k-max", type=int, default=SEARCH_RANGES["tracebench"][1])
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", default="cluster_model.json")
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("train", help="train an agent on one dataset, evaluate on another")
    _common(p)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--cluster-model")
    p.add_argument("--out", required=True)
    _training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="greedy returns of a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--env", choices=("abr", "lb"), default="abr")
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("weights-dump", help="export the sampling-weight time series of a run")
    _common(p)
    p.add_argument("--run", required=True, help="run directory or weights.json")
    p.add_argument("--out", required=True, help=".csv for tidy rows, .json for the raw series")
    p.set_defaults(func=cmd_weights_dump)

    p = sub.add_parser("bench", help="run a full TraceBench scenario end to end")
    _common(p)
    p.add_argument("--scenario", type=int, choices=sorted(SCENARIOS), required=True)
    p.add_argument("--n-train", type=int, default=400)
    p.add_argument("--n-test", type=int, default=200)
    p.add_argument("--out", default="bench")
    _training_flags(p)
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"error in stage {exc.stage}: {exc.cause}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
