"""Command-line front end: ``mmfusion {gen-data,fuse,query,evaluate}``.

Exit status: 0 success, 1 runtime failure, 2 usage error, 3 inner solver
did not converge under ``fuse --strict``.
"""

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .index import (
    GroundTruth,
    IndexFormatError,
    ProtocolError,
    QueryVector,
    SparseIndex,
    cmc_rank1,
    index_map,
    load_index,
    mean_average_precision,
    ns_score,
    query,
    read_run,
    read_truth,
    save_index,
    write_run,
    write_truth,
)
from .pipeline import FusionConfig, run_fusion
from .solver import AlmConfig
from .synthdata import SynthSpec, generate

log = logging.getLogger("mmfusion")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_manifest(path, command, argv, config, inputs, outputs, timings, outcome):
    manifest = {
        "tool": "mmfusion",
        "version": __version__,
        "command": command,
        "argv": argv,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": {str(p): _digest(p) for p in outputs},
        "timings": timings,
        "outcome": outcome,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _nonneg_float(text):
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {text}")
    return value


# --- gen-data -------------------------------------------------------------------


def cmd_gen_data(args, argv):
    t0 = time.perf_counter()
    spec = SynthSpec(
        n_clusters=args.clusters,
        per_cluster=args.per_cluster,
        views=args.views,
        dims=args.dims,
        intra_noise=args.noise,
        view_corruption=args.corruption,
        sparsity=args.sparsity,
        subspace_dim=args.subspace_dim,
        seed=args.seed,
    )
    indexes, truth = generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for v, idx in enumerate(indexes, start=1):
        path = out / f"view{v}.idx"
        save_index(idx, path)
        outputs.append(path)
    truth_path = out / "truth.txt"
    write_truth(truth_path, truth)
    outputs.append(truth_path)
    _write_manifest(
        out / "manifest.json", "gen-data", argv, spec.to_dict(), [], outputs,
        {"total_seconds": time.perf_counter() - t0},
        {"n_images": spec.n_images, "views": spec.views},
    )
    print(f"wrote {len(indexes)} indexes of {spec.n_images} images to {out}")
    return EXIT_OK


# --- fuse -------------------------------------------------------------------------


def _plot(report, accuracy, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    offset = 0
    for rec in report.iterations:
        it = np.array([r["iteration"] for r in rec["trace"]]) + offset
        for key, style in (("err1", "-"), ("err2", "--"), ("err3", ":")):
            vals = np.maximum([r[key] for r in rec["trace"]], 1e-18)
            ax.semilogy(it, vals, style, label=f"{key} (T={rec['iteration']})")
        offset = it[-1]
    ax.set_xlabel("inner iteration (cumulative)")
    ax.set_ylabel("residual (max-abs)")
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(out / "residuals.png", dpi=120)
    plt.close(fig)
    paths = [out / "residuals.png"]
    if accuracy:
        fig, ax = plt.subplots(figsize=(6, 4))
        acc = np.array(accuracy)
        for v in range(acc.shape[1]):
            ax.plot(np.arange(acc.shape[0]), acc[:, v], marker="o", label=f"view {v + 1}")
        ax.set_xlabel("fusion iteration (0 = original index)")
        ax.set_ylabel("mAP")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out / "accuracy.png", dpi=120)
        plt.close(fig)
        paths.append(out / "accuracy.png")
    return paths


def cmd_fuse(args, argv):
    t0 = time.perf_counter()
    if args.plot and args.truth is None:
        log.info("--plot without --truth: only the residual figure is written")
    indexes = [load_index(p) for p in args.indexes]
    n = {idx.n_images for idx in indexes}
    if len(n) != 1:
        raise ValueError(f"indexes cover different numbers of images: {sorted(n)}")
    config = FusionConfig(
        alm=AlmConfig(lam=args.lam, sigma=args.sigma, max_inner_iters=args.max_inner_iters,
                      normalized_tnn=not args.unnormalized_tnn),
        theta1=args.theta1,
        theta2=args.theta2,
        fusion_iters=args.iters,
    )
    truth = read_truth(args.truth) if args.truth else None
    accuracy = []
    if truth is not None:
        accuracy.append([index_map(idx, truth) for idx in indexes])

    def on_iteration(record, xs):
        if truth is not None:
            accuracy.append([index_map(SparseIndex(x), truth) for x in xs])
            record["map"] = accuracy[-1]
        log.info("fusion iteration %d: %d inner iterations, converged=%s",
                 record["iteration"], record["inner_iterations"], record["converged"])

    fused, report = run_fusion(indexes, config, on_iteration=on_iteration)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    for src, idx in zip(args.indexes, fused):
        path = out / Path(src).name
        save_index(idx, path)
        outputs.append(path)
    report_doc = report.to_dict()
    if truth is not None:
        report_doc["map_per_iteration"] = accuracy
        report_doc["final_map"] = [index_map(idx, truth) for idx in fused]
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report_doc, indent=2) + "\n")
    outputs.append(report_path)
    if args.plot:
        outputs.extend(_plot(report, accuracy, out))
    warnings = [
        f"fusion iteration {rec['iteration']}: inner solver stopped at "
        f"{rec['inner_iterations']} iterations without converging"
        for rec in report.iterations if not rec["converged"]
    ]
    _write_manifest(
        out / "manifest.json", "fuse", argv, config.to_dict(), args.indexes, outputs,
        {"total_seconds": time.perf_counter() - t0,
         "per_iteration_seconds": [rec["seconds"] for rec in report.iterations]},
        {"converged": report.all_converged, "warnings": warnings,
         "final_density": report.final_density,
         "final_map": report_doc.get("final_map")},
    )
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"wrote {len(fused)} fused indexes to {out}")
    if warnings and args.strict:
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# --- query ------------------------------------------------------------------------


def cmd_query(args, argv):
    t0 = time.perf_counter()
    if args.index_pos and args.index:
        raise UsageError("give the index either positionally or with --index, not both")
    index_path = args.index or args.index_pos
    if not index_path:
        raise UsageError("an index file is required (--index FILE)")
    if args.top is not None and args.top < 1:
        raise UsageError("--top must be a positive integer")
    sources = sum(bool(x) for x in (args.query_id, args.query_file, args.all))
    if sources != 1:
        raise UsageError("choose exactly one of --query-id, --query-file, --all")
    index = load_index(index_path)
    inputs = [index_path]
    queries = {}
    if args.query_file:
        qidx = load_index(args.query_file)
        inputs.append(args.query_file)
        if qidx.dim != index.dim:
            raise ValueError(f"query dim {qidx.dim} != index dim {index.dim}")
        for j in range(qidx.n_images):
            queries[j] = QueryVector.from_index(qidx, j)
    else:
        ids = range(index.n_images) if args.all else args.query_id
        for j in ids:
            if not 0 <= j < index.n_images:
                raise ValueError(f"unknown image id {j} (index has {index.n_images} images)")
            queries[j] = QueryVector.from_index(index, j)
    results = {q: query(index, vec) for q, vec in queries.items()}
    if args.out:
        write_run(args.out, results, top=args.top)
    else:
        write_run(sys.stdout, results, top=args.top)
    manifest = args.manifest or (f"{args.out}.manifest.json" if args.out else None)
    if manifest:
        _write_manifest(
            manifest, "query", argv, {"top": args.top}, inputs,
            [args.out] if args.out else [],
            {"total_seconds": time.perf_counter() - t0},
            {"queries": len(results)},
        )
    return EXIT_OK


# --- evaluate ---------------------------------------------------------------------


def evaluate_runs(results, truth):
    """Compute the metrics, skipping queries that violate a protocol.

    Returns ``(metrics, problems)`` where problems is a list of messages.
    """
    problems = []
    missing = [q for q in truth.queries() if q not in results]
    problems += [f"query {q}: no ranking in run file" for q in missing]
    valid = {}
    for q in truth.queries():
        if q in missing:
            continue
        if not set(truth.relevant[q]) - set(truth.excluded_for(q)):
            problems.append(f"query {q}: relevant set is empty after exclusions")
            continue
        valid[q] = truth.relevant[q]
    vt = GroundTruth(valid, {q: truth.excluded_for(q) for q in valid})
    metrics = {"queries": len(valid)}
    metrics["map"] = mean_average_precision(results, vt)
    metrics["rank1"] = cmc_rank1(results, vt)
    four = {q: rel for q, rel in valid.items() if len(rel) == 4}
    for q in valid:
        if q not in four:
            problems.append(f"query {q}: {len(valid[q])} relevant images, N-S score needs 4")
    if four:
        metrics["ns_score"] = ns_score(results, GroundTruth(four))
        metrics["ns_queries"] = len(four)
    return metrics, problems


def cmd_evaluate(args, argv):
    t0 = time.perf_counter()
    results = read_run(args.run)
    truth = read_truth(args.truth)
    metrics, problems = evaluate_runs(results, truth)
    for p in problems:
        print(f"warning: {p}", file=sys.stderr)
    print(f"{'metric':<10}{'value':>10}")
    for key in ("map", "rank1", "ns_score"):
        if key in metrics:
            print(f"{key:<10}{metrics[key]:>10.4f}")
    print()
    for key, value in metrics.items():
        print(f"{key}={value}")
    manifest = args.manifest
    if args.out:
        Path(args.out).write_text(json.dumps(metrics, indent=2) + "\n")
        manifest = manifest or f"{args.out}.manifest.json"
    if manifest:
        _write_manifest(
            manifest, "evaluate", argv, {}, [args.run, args.truth],
            [args.out] if args.out else [],
            {"total_seconds": time.perf_counter() - t0},
            {"metrics": metrics, "problems": problems},
        )
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mmfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic multi-view corpus")
    p.add_argument("--clusters", type=_positive_int, default=25)
    p.add_argument("--per-cluster", type=_positive_int, default=4)
    p.add_argument("--views", type=_positive_int, default=3)
    p.add_argument("--dims", type=_positive_int, nargs="+", default=[128])
    p.add_argument("--noise", type=_nonneg_float, nargs="+", default=[0.2])
    p.add_argument("--corruption", type=_nonneg_float, nargs="+", default=[0.0])
    p.add_argument("--sparsity", type=float, default=0.25)
    p.add_argument("--subspace-dim", type=_positive_int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fuse", help="fuse indexes of the same corpus")
    p.add_argument("indexes", nargs="+")
    p.add_argument("--lambda", dest="lam", type=float, default=0.01)
    p.add_argument("--sigma", type=_nonneg_float, default=0.001)
    p.add_argument("--theta1", type=_nonneg_float, default=0.01)
    p.add_argument("--theta2", type=_nonneg_float, default=None,
                   help="final-index threshold (default: theta1)")
    p.add_argument("--iters", type=_positive_int, default=3)
    p.add_argument("--max-inner-iters", type=_positive_int, default=200)
    p.add_argument("--unnormalized-tnn", action="store_true",
                   help="weight the tensor nuclear norm by 1 instead of 1/N")
    p.add_argument("--truth", help="ground truth, enables per-iteration mAP")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--strict", action="store_true",
                   help=f"exit {EXIT_NOT_CONVERGED} if any inner solve fails to converge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("query", help="rank an index against queries")
    p.add_argument("index_pos", nargs="?", metavar="INDEX")
    p.add_argument("--index", help="index file to serve (same as positional INDEX)")
    p.add_argument("--query-id", type=int, nargs="+")
    p.add_argument("--query-file", help="index file whose columns are the queries")
    p.add_argument("--all", action="store_true", help="query with every stored image")
    p.add_argument("--top", type=int)
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("evaluate", help="score a run file against ground truth")
    p.add_argument("run")
    p.add_argument("truth")
    p.add_argument("--out")
    p.add_argument("--manifest")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mmfusion {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, IndexFormatError, ProtocolError, np.linalg.LinAlgError) as exc:
        print(f"mmfusion {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
