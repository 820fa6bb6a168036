"""Command-line entry point. Stages exchange files so each can be re-run alone."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import benchmark, cleaning, knn, margin_loss, metrics, query_expansion, soft_voting, synth
from .embedding_store import load_embeddings, save_embeddings
from .rerank import (RankedList, RerankContext, insert_step, read_ranked_lists, sort_step,
                     write_ranked_lists)


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _threads(p):
    p.add_argument("--threads", type=_positive_int, default=1,
                   help="worker threads; output does not depend on it (default: 1)")


def write_synth(out_dir, data: synth.SynthData, features=None) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_embeddings(out / "train.emb", data.train, labels_path=out / "train.labels.tsv")
    save_embeddings(out / "index.emb", data.index)
    save_embeddings(out / "query.emb", data.queries)
    metrics.write_ground_truth(out / "gt.csv", data.ground_truth)
    if features is not None:
        cleaning.write_features(out / "train.lft", features)


def synth_features(data: synth.SynthData, seed: int):
    """Train-image features; images of one class and mode share a scene."""
    scenes = {i: (data.classes[i], data.modes[i]) for i in data.train.ids}
    return synth.generate_features(data.train.ids, scenes, synth.FeatureConfig(seed=seed))


def _synth_config(args) -> synth.SynthConfig:
    return synth.SynthConfig(seed=args.seed, dim=args.dim, n_classes=args.classes,
                             items_per_class=args.items, dissimilar_fraction=args.fraction,
                             cluster_spread=args.spread)


def cmd_synth(args):
    data = synth.generate(_synth_config(args))
    feats = synth_features(data, args.seed) if args.features else None
    write_synth(args.out, data, feats)
    print(f"train={data.train.count} index={data.index.count} queries={data.queries.count}")


def cmd_predict(args):
    train = load_embeddings(args.train, labels_path=args.labels)
    index = load_embeddings(args.index)
    table = soft_voting.predict_index(index, train, args.k, args.threads)
    if args.add_train:
        table = soft_voting.mark_known(table, train.ids, train.labels)
    soft_voting.write_predictions(args.out, table)


def cmd_search(args):
    queries = load_embeddings(args.queries)
    db = load_embeddings(args.db)
    lists = knn.search(queries, db, args.k, exclude_self=args.exclude_self, threads=args.threads)
    knn.write_neighbors_csv(args.out, queries, db, lists)


def retrieve(queries, index, k, qe: query_expansion.QEConfig | None, threads=1):
    if qe is None:
        lists = knn.search(queries, index, k, threads=threads)
    else:
        lists = query_expansion.qe_search(queries, index, k, qe, threads)
    return [RankedList(q, tuple(index.ids[i] for i in nl.indices.tolist()), k)
            for q, nl in zip(queries.ids, lists)]


def cmd_retrieve(args):
    queries = load_embeddings(args.queries)
    index = load_embeddings(args.index)
    qe = None
    if args.qe_alpha is not None or args.qe_topk is not None:
        qe = query_expansion.QEConfig(
            n_expand=args.qe_topk if args.qe_topk is not None else 10,
            alpha=args.qe_alpha if args.qe_alpha is not None else 3.0)
    write_ranked_lists(args.out, retrieve(queries, index, args.k, qe, args.threads))


def cmd_rerank(args):
    lists = read_ranked_lists(args.lists, args.capacity)
    query_preds = soft_voting.read_predictions(args.query_pred)
    table = soft_voting.read_predictions(args.index_pred)
    out = []
    for rl in lists:
        if rl.query_id not in query_preds:
            raise KeyError(f"no prediction for query {rl.query_id!r}")
        ctx = RerankContext(query_preds[rl.query_id], table, args.tau)
        s = sort_step(rl, ctx)
        out.append(s if args.sort_only else insert_step(s, ctx))
    write_ranked_lists(args.out, out)


def cmd_eval(args):
    gt = metrics.read_ground_truth(args.gt)
    report = metrics.evaluate(read_ranked_lists(args.lists, capacity=10 ** 9), gt)
    if args.report:
        report.write_tsv(args.report)
    print(report.summary())


def cmd_clean(args):
    train = load_embeddings(args.train, labels_path=args.labels)
    feats = cleaning.read_features(args.features)
    cfg = cleaning.CleaningConfig(nn_pool=args.nn_pool, per_label_cap=args.per_label_cap,
                                  inlier_min=args.inlier_min, tau_freq=args.tau_freq,
                                  ransac_iters=args.ransac_iters, inlier_px=args.inlier_px,
                                  seed=args.seed)
    kept = cleaning.clean(train, feats, cfg, args.threads)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for item in kept:
            fh.write(item + "\n")
    print(f"kept {len(kept)} of {train.count}")


def cmd_loss_check(args):
    results = margin_loss.run_gradient_suite(args.instances, args.seed)
    worst = 0.0
    for r in results:
        worst = max(worst, r["features"], r["weights"])
        print(f"{r['kind']}\ttrial={r['trial']}\tfeatures={r['features']:.3e}"
              f"\tweights={r['weights']:.3e}")
    ok = worst < args.tol
    print(f"{'PASS' if ok else 'FAIL'} worst relative error {worst:.3e} (tolerance {args.tol:g})")
    return 0 if ok else 1


def cmd_ablate(args):
    data = synth.generate(_synth_config(args))
    rows = benchmark.hyperparameter_grid(data, threads=args.threads)
    text = benchmark.format_grid(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def _synth_flags(p):
    p.add_argument("--seed", type=int, default=7, help="(default: 7)")
    p.add_argument("--dim", type=_positive_int, default=64, help="(default: 64)")
    p.add_argument("--classes", type=_positive_int, default=50, help="(default: 50)")
    p.add_argument("--items", type=_positive_int, default=40, help="items per class (default: 40)")
    p.add_argument("--fraction", type=float, default=0.3,
                   help="share of each class placed in its far mode (default: 0.3)")
    p.add_argument("--spread", type=float, default=1.4,
                   help="isotropic noise scale around a mode (default: 1.4)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="landmark-rerank", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic benchmark")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--features", action="store_true", help="also write train.lft")
    _synth_flags(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("predict", help="soft-vote labels for every item of an embedding file")
    p.add_argument("--train", required=True)
    p.add_argument("--labels", required=True, help="train labels TSV")
    p.add_argument("--index", required=True, help="items to predict (index or query set)")
    p.add_argument("--k", type=_positive_int, default=soft_voting.DEFAULT_K,
                   help="neighbors per vote (default: 3)")
    p.add_argument("--add-train", action="store_true",
                   help="also emit train items with their known label and score 1.0")
    p.add_argument("--out", required=True)
    _threads(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("search", help="exact k-NN, neighbor CSV output")
    p.add_argument("--queries", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--k", type=_positive_int, default=100, help="(default: 100)")
    p.add_argument("--exclude-self", action="store_true")
    p.add_argument("--out", required=True)
    _threads(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("retrieve", help="k-NN retrieval to an id,images CSV")
    p.add_argument("--queries", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--k", type=_positive_int, default=100, help="list length (default: 100)")
    p.add_argument("--qe-alpha", type=float, default=None,
                   help="enable query expansion with this alpha; 0 is plain averaging "
                        "(default when only --qe-topk is given: 3.0)")
    p.add_argument("--qe-topk", type=_positive_int, default=None,
                   help="items combined by query expansion, query included (default: 10)")
    p.add_argument("--out", required=True)
    _threads(p)
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("rerank", help="sort-step + insert-step over a ranked-list CSV")
    p.add_argument("--lists", required=True)
    p.add_argument("--query-pred", required=True, help="prediction TSV for the queries")
    p.add_argument("--index-pred", required=True, help="prediction TSV for the index")
    p.add_argument("--tau", type=float, default=0.6,
                   help="insert only when query score + item score exceeds this (default: 0.6)")
    p.add_argument("--capacity", type=_positive_int, default=100,
                   help="output list length (default: 100)")
    p.add_argument("--sort-only", action="store_true", help="skip the insert-step")
    p.add_argument("--out", required=True)
    _threads(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("eval", help="mAP@100, P@10 and MeanPos")
    p.add_argument("--lists", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--report", help="per-query TSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("clean", help="filter a labeled train set by spatial verification")
    p.add_argument("--train", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--features", required=True, help="LFT1 local feature file")
    p.add_argument("--nn-pool", type=_positive_int, default=1000,
                   help="neighbors searched per image (default: 1000)")
    p.add_argument("--per-label-cap", type=_positive_int, default=100,
                   help="same-label neighbors verified per image (default: 100)")
    p.add_argument("--inlier-min", type=_non_negative_int, default=30,
                   help="a neighbor verifies with more inliers than this (default: 30)")
    p.add_argument("--tau-freq", type=_non_negative_int, default=3,
                   help="verified neighbors needed to keep an image (default: 3)")
    p.add_argument("--ransac-iters", type=_positive_int, default=1000, help="(default: 1000)")
    p.add_argument("--inlier-px", type=float, default=10.0,
                   help="reprojection error bound in pixels (default: 10.0)")
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--out", required=True)
    _threads(p)
    p.set_defaults(func=cmd_clean)

    p = sub.add_parser("loss-check", help="finite-difference check of the margin losses")
    p.add_argument("--instances", type=_positive_int, default=20, help="(default: 20)")
    p.add_argument("--seed", type=int, default=0, help="(default: 0)")
    p.add_argument("--tol", type=float, default=1e-4, help="(default: 1e-4)")
    p.set_defaults(func=cmd_loss_check)

    p = sub.add_parser("ablate", help="(k, tau) sweep on a synthetic benchmark")
    _synth_flags(p)
    p.add_argument("--out", help="write the table here as well")
    _threads(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"error: {msg}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
