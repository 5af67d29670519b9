"""Command-line entry point: ``fpvt train | eval | audit | gradcheck | bench | pairs``.

Exit codes: 0 success, 1 check failure (gradient mismatch, divergence),
2 usage, config, pairs-file or checkpoint error.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional

from dotenv import load_dotenv

from fpvt_tensor import DEFAULT_TOLERANCE, default_dtype

from . import __version__
from .bench import bench_inference, compare_lines
from .config import RunConfig, default_run_dir, load_config, stage_table
from .data import make_pairs, pair_images, read_pairs, write_pairs
from .diagnostics import run_gradcheck
from .exceptions import (
    CheckpointError,
    ConfigError,
    Error,
    InterfaceError,
    ProtocolError,
    TrainingDivergedError,
)
from .fdr_head import parameter_saving
from .pyramid import audit, build_model, variant_totals
from .train import Trainer, model_from_checkpoint
from .verification import cosine_similarity, kfold_from_similarities

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


def _emit(lines: List[str]) -> None:
    for line in lines:
        print(line)


def _config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


def cmd_train(args: argparse.Namespace) -> int:
    if args.resume:
        trainer = Trainer.resume(args.resume, args.out)
    else:
        config = _config(args)
        out_dir = Path(args.out) if args.out else default_run_dir(config.name)
        trainer = Trainer(config, out_dir)
    records = trainer.run(args.steps)
    if records:
        last = records[-1]
        print(f"step={last.step} loss={last.loss:.6f} acc={last.accuracy:.4f}")
    print(f"out={trainer.out_dir}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config, model = model_from_checkpoint(args.ckpt)
    pairs = read_pairs(args.pairs)
    images_a, images_b, labels = pair_images(config.data, pairs)
    with default_dtype(config.precision):
        embeddings_a = model.embed_images(images_a)
        embeddings_b = model.embed_images(images_b)
    report = kfold_from_similarities(cosine_similarity(embeddings_a, embeddings_b), labels, args.folds)
    report.params = model.num_parameters()
    _emit(report.to_lines())
    return EXIT_OK


def cmd_audit(args: argparse.Namespace) -> int:
    config = _config(args)
    with default_dtype(config.precision):
        model = build_model(config.model)
        report = audit(model)
        variants = variant_totals(config.model)
    _emit(stage_table(config.model))
    _emit(report.to_lines())
    _emit([f"variant {label}: {total}" for label, total in variants.items()])
    if config.fdr.head == "fdr":
        n, m, d = config.data.n_identities, config.fdr.groups, config.model.embed_dim
        print(f"fdr groups={m} identities={n} saving={parameter_saving(n, m, d)}")
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    seed = args.seed
    if seed is None:
        seed = load_config(args.config).model.seed if args.config else 0
    results = run_gradcheck(tolerance=args.tolerance, seed=seed, max_samples=args.max_samples)
    failures = 0
    for result in results:
        status = "ok" if result.passed else "FAIL"
        zero = f" zero_grad={','.join(result.zero_params)}" if result.zero_params else ""
        print(
            f"{status} {result.name}: max_rel_err={result.max_rel_error:.3e} "
            f"at {result.param}{list(result.index)} ({result.checked} checked){zero}"
        )
        failures += not result.passed
    print(f"cases={len(results)} failed={failures} tolerance={args.tolerance:g}")
    return EXIT_CHECK_FAILED if failures else EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    config = _config(args)
    with default_dtype(config.precision):
        report = bench_inference(build_model(config.model), args.n, args.warmup)
        lines = report.to_lines()
        if args.compare:
            other = load_config(args.compare)
            other_report = bench_inference(build_model(other.model), args.n, args.warmup)
            lines = lines[:-1] + compare_lines(report, other_report) + lines[-1:]
    _emit(lines)
    return EXIT_OK


def cmd_pairs(args: argparse.Namespace) -> int:
    config = _config(args)
    pairs = make_pairs(config.data, args.n, seed=args.seed or 0)
    write_pairs(args.out, pairs)
    print(f"pairs={len(pairs)} out={args.out}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace], int]] = {
    "train": cmd_train,
    "eval": cmd_eval,
    "audit": cmd_audit,
    "gradcheck": cmd_gradcheck,
    "bench": cmd_bench,
    "pairs": cmd_pairs,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpvt", description="Face pyramid vision transformer toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help="logging level (default: $FPVT_LOG_LEVEL or WARNING)")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train on the synthetic identity dataset")
    train.add_argument("--config", help="config file (default: toy preset)")
    train.add_argument("--out", help="run directory (default: user data dir)")
    train.add_argument("--seed", type=int)
    train.add_argument("--steps", type=int, help="override train.steps")
    train.add_argument("--resume", help="continue from a checkpoint")

    evaluate = sub.add_parser("eval", help="k-fold verification of a checkpoint")
    evaluate.add_argument("--ckpt", required=True)
    evaluate.add_argument("--pairs", required=True)
    evaluate.add_argument("--folds", type=int, default=10)

    audit_cmd = sub.add_parser("audit", help="parameter, memory and MAC audit")
    audit_cmd.add_argument("--config")
    audit_cmd.add_argument("--seed", type=int)

    grad = sub.add_parser("gradcheck", help="64-bit finite-difference gradient suite")
    grad.add_argument("--config")
    grad.add_argument("--seed", type=int)
    grad.add_argument("--tolerance", type=float, default=DEFAULT_TOLERANCE)
    grad.add_argument("--max-samples", type=int, default=4, help="elements checked per model tensor")

    bench = sub.add_parser("bench", help="per-image inference latency")
    bench.add_argument("--config")
    bench.add_argument("--seed", type=int)
    bench.add_argument("--n", type=int, default=10)
    bench.add_argument("--warmup", type=int, default=2)
    bench.add_argument("--compare", help="second config to time against the first")

    pairs = sub.add_parser("pairs", help="write a balanced verification pairs file")
    pairs.add_argument("--config")
    pairs.add_argument("--out", required=True)
    pairs.add_argument("--n", type=int, default=1000)
    pairs.add_argument("--seed", type=int)
    return parser


def _exit_code(error: Exception) -> int:
    if isinstance(error, TrainingDivergedError):
        return EXIT_CHECK_FAILED
    if isinstance(error, (ConfigError, CheckpointError, InterfaceError, ProtocolError)):
        return EXIT_USAGE
    return EXIT_CHECK_FAILED


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    level = (args.log_level or os.environ.get("FPVT_LOG_LEVEL") or "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except Error as e:
        print(f"error: {e}", file=sys.stderr)
        return _exit_code(e)


if __name__ == "__main__":
    sys.exit(main())
