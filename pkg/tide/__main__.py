import argparse
import sys
from pathlib import Path
from typing import Any

import pandas as pd
from loguru import logger

from . import utils
from .datatypes import RunConfig, SceneGrammar
from .evaluation import (
    consistency_table,
    evaluate_prediction,
    log_table,
    report_csv,
    run_ablation,
    summarize_consistency,
)
from .nn import GRAD_UNITS, grad_check
from .sample import batch_synthesize, sample_from_checkpoint
from .scenes import (
    dataset_grammar,
    default_grammar,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from .train import load_checkpoint, train

VERBOSE_HELP = (
    "Verbosity. Multiple `-v`s increase the log level. Can also be set on the command"
    " line by setting the environment variable `LOGURU_LEVEL`. Available levels are"
    " `TRACE`, `DEBUG`, `INFO`, `SUCCESS`, `WARNING`, `ERROR`, and `CRITICAL`."
    " Default is `SUCCESS`"
)


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def parse_seeds(text: str) -> list[int]:
    """`N` means seeds 0..N-1, `A:B` means seeds A..B-1."""
    try:
        if ":" in text:
            start, stop = (int(x) for x in text.split(":", 1))
        else:
            start, stop = 0, int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected N or A:B, got {text!r}") from None
    if start < 0 or stop <= start:
        raise argparse.ArgumentTypeError(f"empty or negative seed range {text!r}")
    return list(range(start, stop))


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _out(args: argparse.Namespace, name: str) -> Path:
    return Path(args.out) if args.out else Path(utils.output_dir_default()) / name


def _emit(df: pd.DataFrame, out: str | None):
    text = report_csv(df)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
        logger.info(f"Wrote {out}")
    else:
        sys.stdout.write(text)


def _load_config(args: argparse.Namespace, overrides: dict[str, dict[str, Any]]) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), overrides)


def _load_data(path: str):
    grammar = dataset_grammar(path)
    records = list(read_dataset(path))
    if not records:
        raise ValueError(f"Dataset {path} has no records")
    logger.info(f"Loaded {len(records)} records from {path}")
    return records, grammar


# ============================================================================
# ===============                 SUBCOMMANDS                 ================
# ============================================================================


def cmd_gen_data(args: argparse.Namespace) -> int:
    grammar = SceneGrammar.load(args.grammar) if args.grammar else default_grammar()
    if args.size is not None:
        grammar = grammar.with_overrides(size=args.size)
    manifest = generate_dataset(args.seeds, grammar, _out(args, "data"), args.workers)
    logger.success(f"Generated {len(args.seeds)} scenes in {manifest.parent}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    records, grammar = _load_data(args.data)
    config = _load_config(
        args,
        {
            "model": {"size": records[0].size},
            "train": {
                "stage": "A",
                "iterations": args.iterations,
                "mini_iterations": args.mini_iterations,
                "seed": args.seed,
                "batch_size": args.batch_size,
            },
        },
    )
    train(config, records, grammar, _out(args, "stage-a"))
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    records, grammar = _load_data(args.data)
    config = _load_config(
        args,
        {
            "model": {
                "share_start": args.share_start,
                "share_end": args.share_end,
                "share_stride": args.share_stride,
                "tan_time_adaptive": False if args.no_time_gate else None,
            },
            "train": {
                "stage": "B",
                "iterations": args.iterations,
                "seed": args.seed,
                "batch_size": args.batch_size,
                "ils": False if args.no_ils else None,
                "tan": False if args.no_tan else None,
            },
        },
    )
    train(config, records, grammar, _out(args, "stage-b"), init=args.init, resume=args.resume)
    return 0


def cmd_sample(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    steps = args.steps if args.steps is not None else ckpt.config.sample.steps
    triple = sample_from_checkpoint(ckpt, args.caption, steps, args.seed)
    manifest = write_dataset([triple], _out(args, "sample"), ckpt.grammar)
    logger.success(f"Sampled {args.caption!r} to {manifest.parent} ({utils.file_digest(manifest)})")
    return 0


def cmd_synthesize(args: argparse.Namespace) -> int:
    captions = [
        line.strip()
        for line in Path(args.captions_file).read_text(encoding="utf-8").splitlines()
        if line.strip()
    ]
    if not captions:
        raise ValueError(f"No captions in {args.captions_file}")
    ckpt = load_checkpoint(args.checkpoint)
    steps = args.steps if args.steps is not None else ckpt.config.sample.steps
    n = args.n if args.n is not None else ckpt.config.sample.n_per_caption
    batch_synthesize(
        captions, n, _out(args, "synthetic"), ckpt.path, steps, args.seed, args.workers
    )
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.mode == "consistency":
        if not args.dataset:
            raise ValueError("eval consistency needs --dataset")
        grammar = dataset_grammar(args.dataset)
        df = consistency_table(read_dataset(args.dataset), grammar)
        summary = summarize_consistency(df)
        log_table(pd.DataFrame([summary]), f"Consistency of {args.dataset}")
        logger.success(
            f"mask-image mIoU {summary['mask_image_miou']:.4f},"
            f" depth-mask Spearman {summary['depth_mask_spearman']:.4f}"
            f" ({summary['depth_undefined']} undefined)"
        )
    else:
        if not (args.pred and args.gt):
            raise ValueError("eval needs --pred and --gt")
        grammar = dataset_grammar(args.gt)
        df = evaluate_prediction(
            read_dataset(args.pred),
            read_dataset(args.gt),
            grammar.num_categories,
            median_align=args.median_align,
            pooled=args.pooled,
        )
        log_table(df, f"{args.pred} against {args.gt}")
    _emit(df, args.out)
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    units = args.units or sorted(GRAD_UNITS)
    reports = [grad_check(unit, seed=args.seed, tol=args.tol) for unit in units]
    df = pd.DataFrame(
        [
            {"unit": r.unit, "max_rel_error": r.max_rel_error, "tol": r.tol, "passed": r.passed}
            for r in reports
        ]
    )
    log_table(df, "Gradient check")
    _emit(df, args.out)
    failed = [r.unit for r in reports if not r.passed]
    if failed:
        logger.error(f"Gradient check failed for {failed}")
        return 1
    logger.success(f"Gradient check passed for {len(reports)} units at tol {args.tol:g}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    out = _out(args, "ablation")
    config = _load_config(args, {"train": {"batch_size": args.batch_size}})
    if args.data:
        records, grammar = _load_data(args.data)
    else:
        grammar = default_grammar(config.model.size)
        generate_dataset(range(args.scenes), grammar, out / "data", args.workers)
        records = list(read_dataset(out / "data"))
    config = _load_config(
        args, {"model": {"size": records[0].size}, "train": {"batch_size": args.batch_size}}
    )
    df = run_ablation(
        config,
        records,
        grammar,
        out,
        kind=args.variants,
        budget=args.budget,
        seeds=args.seeds,
        init=args.init,
        n_samples=args.n_samples,
        workers=args.workers,
    )
    _emit(df, str(out / "ablation.csv"))
    logger.success(f"Ablation table written to {out / 'ablation.csv'}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "sample": cmd_sample,
    "synthesize": cmd_synthesize,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def run(args: argparse.Namespace) -> int:
    """Run a parsed command and return its exit status.

    Validation errors give 1, I/O errors give 2.
    """
    utils.setup_logger(args.verbose, log_dir=args.log_dir)
    workers = getattr(args, "workers", None)
    if workers is not None and workers > utils.max_workers:
        logger.warning(f"Capping --workers {workers} at {utils.max_workers}")
        args.workers = utils.max_workers
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FloatingPointError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 1
    except OSError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return 2


def parse_args(arg_list: None | list[str]) -> argparse.Namespace:
    """Parses command line arguments.

    Parameters
    ----------
    arg_list
        List of command line arguments. Uses sys.argv (default argparse behaviour) if `None`.

    Returns
    -------
    argparse.Namespace
        Parsed arguments.
    """
    common = ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", help=VERBOSE_HELP)
    common.add_argument("--log-dir", type=str, help="Also write a log file to this directory")

    args_parser = ArgumentParser(
        prog="tide", description="Tri-branch text-to-(image, depth, mask) diffusion at desk scale"
    )
    sub = args_parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)
    out_help = "Output directory (default: under $TIDE_OUTPUT_DIR or ./output)"

    p = sub.add_parser("gen-data", parents=[common], help="Generate procedural quadruples")
    p.add_argument("--seeds", type=parse_seeds, required=True, help="N (seeds 0..N-1) or A:B")
    p.add_argument("--size", type=int, help="Grid size, overriding the grammar")
    p.add_argument("--grammar", type=str, help="Scene grammar JSON file")
    p.add_argument("--out", type=str, help=out_help)
    p.add_argument("--workers", type=int, default=1, help="Worker processes")

    p = sub.add_parser("pretrain", parents=[common], help="Stage A: text encoder and branches")
    p.add_argument("--config", type=str, help="TOML configuration file")
    p.add_argument("--data", type=str, required=True, help="Dataset directory")
    p.add_argument("--out", type=str, help=out_help)
    p.add_argument("--iterations", type=int, help="Image-branch iterations")
    p.add_argument("--mini-iterations", type=int, help="Mini-branch iterations")
    p.add_argument("--seed", type=int, help="Training seed")
    p.add_argument("--batch-size", type=int, help="Batch size")

    p = sub.add_parser("train", parents=[common], help="Stage B: joint LoRA and TAN training")
    p.add_argument("--config", type=str, help="TOML configuration file")
    p.add_argument("--data", type=str, required=True, help="Dataset directory")
    p.add_argument("--init", type=str, help="Stage-A checkpoint to start from")
    p.add_argument("--resume", type=str, help="Stage-B checkpoint to continue")
    p.add_argument("--out", type=str, help=out_help)
    p.add_argument("--no-ils", action="store_true", help="Disable implicit layout sharing")
    p.add_argument("--no-tan", action="store_true", help="Disable time adaptive normalization")
    p.add_argument("--no-time-gate", action="store_true", help="Fix the TAN gate at 1")
    p.add_argument("--share-start", type=int, help="First image layer sharing its layout")
    p.add_argument("--share-end", type=int, help="Last image layer sharing its layout")
    p.add_argument("--share-stride", type=int, help="Image-layer stride between shared layouts")
    p.add_argument("--iterations", type=int, help="Total stage-B iterations")
    p.add_argument("--seed", type=int, help="Training seed")
    p.add_argument("--batch-size", type=int, help="Batch size")

    p = sub.add_parser("sample", parents=[common], help="Sample one triple for a caption")
    p.add_argument("--checkpoint", type=str, required=True, help="Stage-B checkpoint")
    p.add_argument("--caption", type=str, required=True, help="Text prompt")
    p.add_argument("--seed", type=int, default=0, help="Sampling seed")
    p.add_argument("--steps", type=int, help="Reverse steps (default from the checkpoint)")
    p.add_argument("--out", type=str, help=out_help)

    p = sub.add_parser("synthesize", parents=[common], help="Sample N triples per caption")
    p.add_argument("--checkpoint", type=str, required=True, help="Stage-B checkpoint")
    p.add_argument("--captions-file", type=str, required=True, help="One caption per line")
    p.add_argument("--n", type=int, help="Samples per unique caption")
    p.add_argument("--steps", type=int, help="Reverse steps (default from the checkpoint)")
    p.add_argument("--seed", type=int, default=0, help="Base seed")
    p.add_argument("--out", type=str, help=out_help)
    p.add_argument("--workers", type=int, default=1, help="Worker processes")

    p = sub.add_parser("eval", parents=[common], help="Score predictions or consistency")
    p.add_argument(
        "mode",
        nargs="?",
        choices=["metrics", "consistency"],
        default="metrics",
        help="metrics: compare --pred with --gt; consistency: score --dataset",
    )
    p.add_argument("--pred", type=str, help="Predicted dataset directory")
    p.add_argument("--gt", type=str, help="Ground-truth dataset directory")
    p.add_argument("--dataset", type=str, help="Dataset directory to score for consistency")
    p.add_argument("--pooled", action="store_true", help="Pool pixels across images")
    p.add_argument("--median-align", action="store_true", help="Median-scale predicted depth")
    p.add_argument("--out", type=str, help="CSV file (default: standard output)")

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference gradient checks")
    p.add_argument("--tol", type=float, default=1e-4, help="Relative error tolerance")
    p.add_argument("--seed", type=int, default=0, help="Probe seed")
    p.add_argument("--units", nargs="+", choices=sorted(GRAD_UNITS), help="Units to check")
    p.add_argument("--out", type=str, help="CSV file (default: standard output)")

    p = sub.add_parser("ablate", parents=[common], help="Train and score ablation variants")
    p.add_argument("--config", type=str, help="TOML configuration file")
    p.add_argument("--budget", type=int, required=True, help="Stage-B iterations per variant")
    p.add_argument("--out", type=str, help=out_help)
    p.add_argument(
        "--variants", choices=["toggles", "positions", "time_gate"], default="toggles"
    )
    p.add_argument("--seeds", type=parse_int_list, default=[0], help="Comma-separated seeds")
    p.add_argument("--data", type=str, help="Dataset directory (default: generate one)")
    p.add_argument("--scenes", type=int, default=256, help="Scenes to generate without --data")
    p.add_argument("--init", type=str, help="Stage-A checkpoint (default: train one)")
    p.add_argument("--n-samples", type=int, default=32, help="Samples per variant")
    p.add_argument("--batch-size", type=int, help="Batch size")
    p.add_argument("--workers", type=int, default=1, help="Worker processes")

    return args_parser.parse_args(arg_list)


def main(arg_list: None | list[str] = None) -> None:
    """Main entry point for the tide package."""
    args = parse_args(arg_list)
    sys.exit(run(args))


if __name__ == "__main__":
    main(sys.argv[1:])
