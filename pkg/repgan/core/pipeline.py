"""
Training Pipeline.

This module wires the stages of a run together: corpus preparation,
aligner training and freezing, adversarial training, generation of the
evaluation set and metric computation. Every stage writes its artifacts
into the run directory and, when resuming, reuses whatever a previous run
left there. Each stage draws from its own random stream spawned from the
master seed, so skipping a stage leaves the downstream streams unchanged.
"""

import logging
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..config.settings import RunConfig
from ..models.corpus import SentenceSet
from ..models.grammar import GrammarSpec
from ..models.reports import MetricReport
from ..models.training import (
    AlignerTrainConfig,
    GanTrainConfig,
    MleTrainConfig,
    Provenance,
    TraceRecord,
)
from ..utils.validation import CheckpointError, NumericDivergenceError
from .aligner import AlignerModel, train_aligner
from .checkpoint import (
    load_aligner,
    load_discriminator,
    load_generator,
    save_aligner,
    save_discriminator,
    save_generator,
    save_mle,
)
from .corpus import (
    Vocabulary,
    decode_batch,
    encode_batch,
    load_sentences,
    sample_subset,
    split_corpus,
    write_sentences,
)
from .embedders import Embedder, FileEmbedder, HashedNgramEmbedder
from .gan import Discriminator, EvalFn, Generator, generate, train_gan
from .grammar import default_grammar, gen_synthetic_corpus
from .metrics import EvaluationSets, evaluate_sets, fed, length_distribution
from .mle import MleModel, sample_mle, train_mle
from .numerics import make_rng, spawn_rngs

logger = logging.getLogger(__name__)

GENERATION_CHUNK = 256


class Stream(IntEnum):
    """Index of each stage's random stream among those spawned from the seed."""
    DATA = 0
    ALIGNER_INIT = 1
    ALIGNER_TRAIN = 2
    GAN_INIT = 3
    GAN_TRAIN = 4
    GENERATE = 5
    EVALUATE = 6
    MLE = 7


def stage_streams(seed: int) -> List[np.random.Generator]:
    return spawn_rngs(seed, len(Stream))


@dataclass
class PreparedData:
    """Corpus splits, vocabulary and the encoded training matrix."""

    train: SentenceSet
    valid: SentenceSet
    test: SentenceSet
    vocab: Vocabulary
    train_ids: np.ndarray
    train_lengths: np.ndarray
    grammar: Optional[GrammarSpec] = None


def prepare_data(config: RunConfig, rng: np.random.Generator) -> PreparedData:
    """
    Load the configured corpus (or sample the built-in grammar) and split it.

    The vocabulary is built from the training split only.
    """
    grammar: Optional[GrammarSpec] = None
    if config.corpus_path:
        sentences = load_sentences(Path(config.corpus_path))
    else:
        grammar = default_grammar()
        sentences = gen_synthetic_corpus(grammar, config.grammar_size, rng)
        logger.info(f"Sampled {len(sentences)} sentences from the built-in grammar")
    train, valid, test = split_corpus(sentences, config.valid_fraction, config.test_fraction, rng)
    vocab = Vocabulary.build(train.sentences)
    ids, lengths = encode_batch(train.sentences, vocab, config.max_len)
    logger.info(
        f"Corpus split: {len(train)} train, {len(valid)} valid, {len(test)} test; vocabulary {vocab.size}"
    )
    return PreparedData(
        train=train, valid=valid, test=test, vocab=vocab, train_ids=ids, train_lengths=lengths, grammar=grammar
    )


def write_data(data: PreparedData, out_dir: Path) -> None:
    data_dir = Path(out_dir) / "data"
    write_sentences(data_dir / "train.txt", data.train)
    if len(data.valid):
        write_sentences(data_dir / "valid.txt", data.valid)
    if len(data.test):
        write_sentences(data_dir / "test.txt", data.test)


def make_embedder(config: RunConfig) -> Embedder:
    if config.embedder == "file":
        return FileEmbedder(Path(config.embedding_sentences), Path(config.embedding_file))
    return HashedNgramEmbedder(config.hash_dim)


def build_aligner(config: RunConfig, vocab: Vocabulary, rng: np.random.Generator) -> AlignerModel:
    return AlignerModel(
        vocab_size=vocab.size,
        width=config.embed_dim,
        rep_dim=config.rep_dim,
        ff_width=config.aligner_ff_dim,
        layers=config.aligner_layers,
        heads=config.aligner_heads,
        max_len=config.max_len,
        dropout=config.aligner_dropout,
        rng=rng,
        n_reserved=vocab.n_reserved,
    )


def build_generator(
    config: RunConfig, vocab: Vocabulary, aligner: AlignerModel, rng: np.random.Generator
) -> Generator:
    return Generator(
        vocab_size=vocab.size,
        embed_dim=config.embed_dim,
        noise_dim=config.noise_dim,
        hidden_dim=config.gen_hidden,
        depth=config.gen_layers,
        f_lt=aligner.f_lt,
        rho=config.sampling_dropout,
        rng=rng,
        variant=config.gen_variant,
        noise_std=config.noise_std,
        bos_id=vocab.bos_id,
        eos_id=vocab.eos_id,
        pad_id=vocab.pad_id,
    )


def build_discriminator(config: RunConfig, rng: np.random.Generator) -> Discriminator:
    return Discriminator.init(config.rep_dim, config.disc_hidden, config.disc_layers, config.disc_variant, rng)


def write_trace(path: Path, records: Sequence[TraceRecord]) -> None:
    """One JSON object per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(record.model_dump_json(exclude_none=True) + "\n" for record in records), encoding="utf-8")


def read_trace(path: Path) -> List[TraceRecord]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [TraceRecord.model_validate_json(line) for line in lines if line.strip()]


def generate_sentences(
    gen: Generator, n: int, steps: int, vocab: Vocabulary, rng: np.random.Generator
) -> SentenceSet:
    """Generate ``n`` sentences in chunks and decode them."""
    sentences: List[List[str]] = []
    for start in range(0, n, GENERATION_CHUNK):
        batch = generate(gen, min(GENERATION_CHUNK, n - start), steps, rng)
        sentences.extend(decode_batch(batch.tokens, vocab).sentences)
    return SentenceSet(sentences=sentences, provenance=Provenance.GENERATED)


def validation_scorer(
    config: RunConfig, data: PreparedData, embedder: Embedder, seed: int
) -> Optional[EvalFn]:
    """FED between a fixed validation subset and fresh generations, identical streams on every call."""
    if len(data.valid) < 2:
        logger.warning("Validation split has fewer than two sentences; model selection disabled")
        return None
    reference = sample_subset(data.valid, config.validation_size, make_rng(seed))

    def score(gen: Generator) -> float:
        generated = generate_sentences(gen, len(reference), config.max_len, data.vocab, make_rng(seed + 1))
        return fed(reference, generated, embedder)

    return score


def evaluate_generated(
    config: RunConfig,
    data: PreparedData,
    generated: SentenceSet,
    embedder: Embedder,
    rng: np.random.Generator,
    name: str = "gan",
) -> MetricReport:
    """Every metric of a generated set against the test split."""
    test = sample_subset(data.test, config.eval_embed_size, rng)
    sets = EvaluationSets(
        train=data.train,
        test=test,
        generated=generated,
        embedder=embedder,
        tau=config.tau,
        mode=config.coverage_mode,
        max_n=config.bleu_max_n,
        token_size=config.eval_token_size,
        grammar=data.grammar,
    )
    metrics = evaluate_sets(sets, rng)
    report = MetricReport(
        name=name,
        seed=config.seed,
        metrics=metrics,
        length_distribution=length_distribution(generated),
        config=config.model_dump(mode="json"),
    )
    logger.info(f"{name} metrics: " + ", ".join(f"{k}={v:.4f}" for k, v in sorted(metrics.items())))
    return report


@dataclass
class PipelineArtifacts:
    """Outputs of a pipeline run."""

    out_dir: Path
    data: PreparedData
    aligner: AlignerModel
    generator: Generator
    discriminator: Discriminator
    generated: SentenceSet
    report: MetricReport
    paths: Dict[str, Path] = field(default_factory=dict)


def load_frozen_aligner(path: Path, vocab: Vocabulary) -> AlignerModel:
    """Load a frozen aligner and check it was trained on ``vocab``."""
    model, saved_vocab, _ = load_aligner(path)
    if saved_vocab.tokens != vocab.tokens:
        raise CheckpointError(f"{path} was trained on a different vocabulary")
    if not model.frozen:
        raise CheckpointError(f"{path} holds an aligner that was never frozen")
    return model


def stage_aligner(
    config: RunConfig,
    data: PreparedData,
    out_dir: Path,
    streams: Sequence[np.random.Generator],
    resume: bool = False,
) -> AlignerModel:
    """Train and freeze the aligner, or reuse ``aligner.ckpt`` when resuming."""
    path = Path(out_dir) / "aligner.ckpt"
    if resume and path.exists():
        logger.info(f"Resuming with aligner from {path}")
        return load_frozen_aligner(path, data.vocab)

    model = build_aligner(config, data.vocab, streams[Stream.ALIGNER_INIT])
    rng = streams[Stream.ALIGNER_TRAIN]
    trace_path = Path(out_dir) / "trace_aligner.jsonl"
    try:
        result = train_aligner(model, data.train_ids, data.vocab, AlignerTrainConfig.from_run_config(config), rng)
    except NumericDivergenceError as e:
        write_trace(trace_path, e.trace or [])
        raise
    write_trace(trace_path, result.trace)
    save_aligner(path, result.model, data.vocab, rng, metadata={"seed": config.seed, "epochs": result.epochs_run})
    return result.model


def stage_gan(
    config: RunConfig,
    data: PreparedData,
    aligner: AlignerModel,
    out_dir: Path,
    streams: Sequence[np.random.Generator],
    embedder: Embedder,
    resume: bool = False,
) -> Tuple[Generator, Discriminator]:
    """Adversarial training, or reuse the generator/discriminator checkpoints when resuming."""
    gen_path = Path(out_dir) / "generator.ckpt"
    disc_path = Path(out_dir) / "discriminator.ckpt"
    if resume and gen_path.exists() and disc_path.exists():
        gen, _ = load_generator(gen_path, aligner.f_lt)
        disc, _ = load_discriminator(disc_path)
        logger.info(f"Resuming with generator from {gen_path}")
        return gen, disc

    init_rng = streams[Stream.GAN_INIT]
    gen = build_generator(config, data.vocab, aligner, init_rng)
    disc = build_discriminator(config, init_rng)
    rng = streams[Stream.GAN_TRAIN]
    evaluate = None
    if config.eval_every:
        evaluate = validation_scorer(config, data, embedder, config.seed)
    trace_path = Path(out_dir) / "trace_gan.jsonl"
    try:
        result = train_gan(
            gen, disc, aligner, data.train_ids, data.train_lengths, GanTrainConfig.from_run_config(config), rng, evaluate
        )
    except NumericDivergenceError as e:
        write_trace(trace_path, e.trace or [])
        raise
    write_trace(trace_path, result.trace)
    metadata = {"seed": config.seed, "steps": result.steps_run, "best_step": result.best_step}
    save_generator(gen_path, result.generator, rng, metadata)
    save_discriminator(disc_path, result.discriminator, rng, metadata)
    return result.generator, result.discriminator


def stage_generate(
    config: RunConfig,
    data: PreparedData,
    gen: Generator,
    out_dir: Path,
    streams: Sequence[np.random.Generator],
    resume: bool = False,
) -> SentenceSet:
    path = Path(out_dir) / "generated.txt"
    if resume and path.exists():
        logger.info(f"Resuming with generated sentences from {path}")
        return load_sentences(path, Provenance.GENERATED)
    generated = generate_sentences(gen, config.eval_embed_size, config.max_len, data.vocab, streams[Stream.GENERATE])
    write_sentences(path, generated)
    return generated


def run_pipeline(config: RunConfig, out_dir: Path, resume: bool = False) -> PipelineArtifacts:
    """
    Run every stage end to end.

    Args:
        config: Resolved run configuration
        out_dir: Run directory, owned exclusively by this run
        resume: Reuse checkpoints and generated sets already in ``out_dir``

    Returns:
        Models, generated set, metric report and artifact paths
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.env").write_text(
        "".join(f"{k.upper()}={v}\n" for k, v in config.to_flat().items()), encoding="utf-8"
    )
    streams = stage_streams(config.seed)
    data = prepare_data(config, streams[Stream.DATA])
    write_data(data, out_dir)
    embedder = make_embedder(config)

    logger.info("Stage 1/4: aligner")
    aligner = stage_aligner(config, data, out_dir, streams, resume)
    logger.info("Stage 2/4: adversarial training")
    gen, disc = stage_gan(config, data, aligner, out_dir, streams, embedder, resume)
    logger.info("Stage 3/4: generation")
    generated = stage_generate(config, data, gen, out_dir, streams, resume)
    logger.info("Stage 4/4: metrics")
    report = evaluate_generated(config, data, generated, embedder, streams[Stream.EVALUATE])
    paths = {name: out_dir / f"{name}.ckpt" for name in ("aligner", "generator", "discriminator")}
    paths["generated"] = out_dir / "generated.txt"
    for written in report.write(out_dir):
        paths[written.name] = written
    return PipelineArtifacts(
        out_dir=out_dir,
        data=data,
        aligner=aligner,
        generator=gen,
        discriminator=disc,
        generated=generated,
        report=report,
        paths=paths,
    )


def run_mle(config: RunConfig, out_dir: Path) -> MetricReport:
    """Train the teacher-forced comparison model, sample from it and evaluate the samples."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = stage_streams(config.seed)
    data = prepare_data(config, streams[Stream.DATA])
    rng = streams[Stream.MLE]
    model = MleModel(
        vocab_size=data.vocab.size,
        embed_dim=config.embed_dim,
        hidden_dim=config.gen_hidden,
        depth=config.gen_layers,
        rng=rng,
        variant=config.gen_variant,
        bos_id=data.vocab.bos_id,
        eos_id=data.vocab.eos_id,
        pad_id=data.vocab.pad_id,
    )
    trace_path = out_dir / "trace_mle.jsonl"
    try:
        result = train_mle(model, data.train_ids, data.train_lengths, MleTrainConfig.from_run_config(config), rng)
    except NumericDivergenceError as e:
        write_trace(trace_path, e.trace or [])
        raise
    write_trace(trace_path, result.trace)
    save_mle(out_dir / "mle.ckpt", model, rng, metadata={"seed": config.seed})
    tokens, _ = sample_mle(model, config.eval_embed_size, config.max_len, streams[Stream.GENERATE])
    generated = decode_batch(tokens, data.vocab)
    write_sentences(out_dir / "mle_generated.txt", generated)
    report = evaluate_generated(config, data, generated, make_embedder(config), streams[Stream.EVALUATE], name="mle")
    report.write(out_dir, stem="mle_metrics")
    return report