"""
RepGAN Lab Main Entry Point.

This module implements the ``repgan`` command line: corpus creation, the
individual training stages, generation, evaluation, the end-to-end
pipeline and the experiment runners. Library errors are mapped to
distinct exit codes.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from .config.settings import PRESETS, RunConfig, Settings, load_run_config, parse_overrides
from .core.checkpoint import load_aligner, load_generator
from .core.corpus import load_sentences, write_sentences
from .core.experiments import EXPERIMENTS, run_experiment
from .core.grammar import default_grammar, gen_synthetic_corpus
from .core.numerics import make_rng
from .core.pipeline import (
    Stream,
    evaluate_generated,
    generate_sentences,
    load_frozen_aligner,
    make_embedder,
    prepare_data,
    run_mle,
    run_pipeline,
    stage_aligner,
    stage_gan,
    stage_streams,
    write_data,
)
from .models.training import Provenance
from .utils.logging import get_logger, setup_logging
from .utils.validation import ConfigError, DataError, NumericDivergenceError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

VALID_LOG_LEVELS = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


def _common_options() -> argparse.ArgumentParser:
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--config", type=Path, help="Flat KEY=value configuration file")
    parent.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="Base hyperparameter preset")
    parent.add_argument("--seed", type=int, help="Master seed")
    parent.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="Override one config key"
    )
    parent.add_argument("--out", type=Path, help="Output directory (default: $REPGAN_OUTPUT_ROOT/<command>)")
    parent.add_argument("--resume", action="store_true", help="Reuse artifacts already in the output directory")
    parent.add_argument("--csv", action="store_true", help="Also write CSV tables")
    parent.add_argument("--log-level", help="Override REPGAN_LOG_LEVEL")
    return parent


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="repgan", description="Representation-space text GAN laboratory")
    commands = parser.add_subparsers(dest="command", required=True)

    make_corpus = commands.add_parser("make-corpus", parents=[common], help="Sample the built-in grammar")
    make_corpus.add_argument("-n", type=int, help="Number of sentences (default: grammar_size)")
    commands.add_parser("train-aligner", parents=[common], help="Train and freeze the aligner")
    train_gan = commands.add_parser("train-gan", parents=[common], help="Adversarial training on a frozen aligner")
    train_gan.add_argument("--aligner", type=Path, help="Aligner checkpoint (default: <out>/aligner.ckpt)")
    commands.add_parser("train-mle", parents=[common], help="Train and evaluate the teacher-forced comparison model")
    generate = commands.add_parser("generate", parents=[common], help="Write sentences from a trained generator")
    generate.add_argument("--aligner", type=Path, help="Aligner checkpoint (default: <out>/aligner.ckpt)")
    generate.add_argument("--generator", type=Path, help="Generator checkpoint (default: <out>/generator.ckpt)")
    generate.add_argument("-n", type=int, help="Number of sentences (default: eval_embed_size)")
    evaluate = commands.add_parser("eval", parents=[common], help="Compute every metric of a generated set")
    evaluate.add_argument("--generated", type=Path, help="Generated sentences (default: <out>/generated.txt)")
    evaluate.add_argument("--reference", type=Path, help="Reference sentences (default: the test split)")
    commands.add_parser("pipeline", parents=[common], help="Run every stage end to end")
    experiment = commands.add_parser("experiment", parents=[common], help="Run an experiment")
    experiment.add_argument("name", choices=list(EXPERIMENTS), help="Experiment to run")
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(args.preset, args.config, parse_overrides(args.overrides), args.seed)


def _out_dir(args: argparse.Namespace, settings: Settings) -> Path:
    if args.out is not None:
        return args.out
    suffix = args.name if args.command == "experiment" else args.command
    return Path(settings.output_root) / suffix


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} {path} does not exist", field=str(path))
    return path


def run_command(args: argparse.Namespace, config: RunConfig, out_dir: Path) -> None:
    """Dispatch one parsed command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if args.command == "make-corpus":
        n = args.n or config.grammar_size
        sentences = gen_synthetic_corpus(default_grammar(), n, make_rng(config.seed))
        write_sentences(out_dir / "corpus.txt", sentences)
        logger.info(f"Wrote {n} sentences to {out_dir / 'corpus.txt'}")
        return
    if args.command == "pipeline":
        artifacts = run_pipeline(config, out_dir, resume=args.resume)
        print(artifacts.report.to_flat_text(), end="")
        return
    if args.command == "train-mle":
        print(run_mle(config, out_dir).to_flat_text(), end="")
        return
    if args.command == "experiment":
        report = run_experiment(args.name, config)
        paths = report.write(out_dir, write_csv=args.csv)
        logger.info(f"Report written to {paths[0]}")
        print(report.summary_text(), end="")
        return

    streams = stage_streams(config.seed)
    data = prepare_data(config, streams[Stream.DATA])
    write_data(data, out_dir)
    if args.command == "train-aligner":
        stage_aligner(config, data, out_dir, streams, resume=args.resume)
    elif args.command == "train-gan":
        aligner = load_frozen_aligner(_require(args.aligner or out_dir / "aligner.ckpt", "aligner checkpoint"), data.vocab)
        stage_gan(config, data, aligner, out_dir, streams, make_embedder(config), resume=args.resume)
    elif args.command == "generate":
        aligner, vocab, _ = load_aligner(_require(args.aligner or out_dir / "aligner.ckpt", "aligner checkpoint"))
        gen, _ = load_generator(_require(args.generator or out_dir / "generator.ckpt", "generator checkpoint"), aligner.f_lt)
        n = args.n or config.eval_embed_size
        generated = generate_sentences(gen, n, config.max_len, vocab, streams[Stream.GENERATE])
        write_sentences(out_dir / "generated.txt", generated)
        logger.info(f"Wrote {n} generated sentences to {out_dir / 'generated.txt'}")
    elif args.command == "eval":
        generated = load_sentences(_require(args.generated or out_dir / "generated.txt", "generated set"), Provenance.GENERATED)
        if args.reference is not None:
            data.test = load_sentences(_require(args.reference, "reference set"), Provenance.TEST)
        report = evaluate_generated(config, data, generated, make_embedder(config), streams[Stream.EVALUATE])
        report.write(out_dir)
        print(report.to_flat_text(), end="")


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point for the ``repgan`` command."""
    args = build_parser().parse_args(argv)
    try:
        settings = Settings()
        log_level = (args.log_level or settings.log_level).upper()
        if log_level not in VALID_LOG_LEVELS:
            raise ConfigError(f"Log level must be one of: {VALID_LOG_LEVELS}", field="log_level")
        setup_logging(log_level=log_level, log_file=settings.log_file)
        cli_logger = get_logger("cli")
        config = _resolve_config(args)
        out_dir = _out_dir(args, settings)
        cli_logger.info(f"Running {args.command} (seed {config.seed}) into {out_dir}")
        run_command(args, config, out_dir)
        return EXIT_OK
    except ValidationError as e:
        logger.error(f"Invalid environment settings: {e}")
        return EXIT_CONFIG
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except DataError as e:
        logger.error(f"Data error: {e}")
        return EXIT_DATA
    except NumericDivergenceError as e:
        logger.error(f"Numeric divergence at {e.site}: {e}")
        return EXIT_DIVERGENCE
    except KeyboardInterrupt:
        logger.info("Interrupted")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"Failed: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
