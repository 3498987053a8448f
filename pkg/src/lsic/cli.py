"""Command-line entry point.

Exit codes: 0 success, 1 training aborted, 2 I/O or data error, 3 bad config.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import List, Optional

from . import pipeline as P
from .config import load_config
from .errors import ConfigError, DataError, TrainingAbort
from .nn import CheckpointError, NonFiniteError

EXIT_OK, EXIT_ABORT, EXIT_IO, EXIT_CONFIG = 0, 1, 2, 3


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--mixture", help="override the mixture variant (v1..v4)")
    common.add_argument("--out-dir", help="output directory")
    common.add_argument("--checkpoint", help="model checkpoint (default: <out-dir>/model.ckpt)")
    common.add_argument("--no-content", action="store_true", help="score without poster features")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="lsic", description="Long/short-term movie recommender with adversarial training")
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse, split and sessionize the rating data")
    tr = sub.add_parser("train", parents=[common], help="MF, pairwise pretraining and adversarial training")
    tr.add_argument("--resume", action="store_true", help="continue from the last epoch checkpoint")
    tr.add_argument("--stop-after", type=int, help="stop after this adversarial epoch")
    sub.add_parser("evaluate", parents=[common], help="test metrics for MF and the trained mixture")
    rec = sub.add_parser("recommend", parents=[common], help="top-n unrated movies for one user")
    rec.add_argument("--user", type=int, required=True, help="raw user id")
    rec.add_argument("-n", type=int, default=10)
    sub.add_parser("sweep-candidates", parents=[common], help="metrics against the MF candidate count")
    sub.add_parser("sweep-sessions", parents=[common], help="retrain for several session lengths")
    syn = sub.add_parser("make-synthetic", parents=[common], help="write a synthetic rating world")
    syn.add_argument("--world", default="planted", help="planted | content | drift")
    syn.add_argument("--dest", required=True, help="directory for ratings.tsv (and content.txt)")
    return ap


def _config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.mixture is not None:
        overrides["mixture"] = args.mixture
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    return load_config(args.config, overrides)


def run(argv: Optional[List[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    cfg = _config(args)
    if args.command == "ingest":
        stats = P.ingest(cfg)
        print(P.format_stats(stats))
    elif args.command == "train":
        out = P.train(cfg, resume=args.resume, stop_after=args.stop_after)
        print(f"best validation NDCG@5 {out.state.best_ndcg:.4f} at epoch {out.state.best_epoch}; "
              f"checkpoint {P.out_path(cfg, P.MODEL_CKPT)}")
    elif args.command == "evaluate":
        mf_rep, mix_rep = P.run_evaluation(cfg, args.checkpoint, args.no_content)
        print(mf_rep.to_table())
        print()
        print(mix_rep.to_table())
    elif args.command == "recommend":
        recs = P.recommend(cfg, args.user, args.n, args.checkpoint)
        if not recs:
            print(f"user {args.user} has rated every movie; nothing to recommend")
        for rank, (movie, score) in enumerate(recs, start=1):
            print(f"{rank}\t{movie}\t{score:.6f}")
    elif args.command == "sweep-candidates":
        rows = P.run_candidate_sweep(cfg, args.checkpoint)
        for n, mf_rep, mix_rep in rows:
            print(f"N={n}\tmf ndcg@5 {mf_rep['ndcg_at_5']:.4f}\t{cfg.mixture} ndcg@5 {mix_rep['ndcg_at_5']:.4f}")
    elif args.command == "sweep-sessions":
        rows = P.run_session_sweep(cfg)
        for p, mf_rep, mix_rep in rows:
            print(f"{p}d\tmf ndcg@5 {mf_rep['ndcg_at_5']:.4f}\t{cfg.mixture} ndcg@5 {mix_rep['ndcg_at_5']:.4f}")
    elif args.command == "make-synthetic":
        from .synthetic import write_world
        paths = write_world(args.world, args.dest, cfg.seed)
        for p in paths:
            print(p)
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAbort, NonFiniteError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (OSError, DataError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
