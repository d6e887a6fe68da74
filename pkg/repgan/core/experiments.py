"""
Experiment Runners.

Each runner takes a resolved :class:`RunConfig`, runs its sweep and
returns an :class:`ExperimentReport` that embeds the configuration and
every seed it used. Training cells that fail numerically are recorded in
the report and the sweep carries on.
"""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, TypeVar

import numpy as np

from ..config.settings import RunConfig
from ..models.corpus import SentenceSet
from ..models.reports import CellError, ExperimentReport
from ..models.training import AlignerObjective, AlignerTrainConfig, GanTrainConfig, LstmVariant, Provenance
from ..utils.validation import ConfigError, DegenerateInputError, NumericDivergenceError, check_finite
from .aligner import AlignerModel, balance_error, decode_consistency, train_aligner, variance_spread
from .corpus import Vocabulary, load_sentences, sample_subset
from .embedders import Embedder
from .gan import train_gan
from .grammar import default_grammar, gen_synthetic_corpus
from .metrics import (
    corrupt_corpus,
    coverage_from_embeddings,
    coverage_monotone,
    coverage_rates,
    fed,
    frechet_distance,
    gaussian_summary,
    inverse_bleu,
)
from .numerics import ln_gradient_factor_probe, make_rng, spawn_rngs
from .pipeline import (
    PreparedData,
    Stream,
    build_aligner,
    build_discriminator,
    build_generator,
    generate_sentences,
    make_embedder,
    prepare_data,
    stage_streams,
    validation_scorer,
)
from .recurrent import LstmCellParams, LstmStack, LstmState, grad_norm_probe, hidden_cell_jacobian, projection_loss

logger = logging.getLogger(__name__)

T = TypeVar("T")

VARIANT_ORDER = (LstmVariant.VANILLA, LstmVariant.LAYER_NORM, LstmVariant.FULLY_NORMALIZED)
LN_PROBE_WIDTH = 1024
LN_PROBE_SIGMAS = (0.25, 0.5, 0.8, 1.0)
LN_PROBE_TOLERANCE = 0.05


def _new_report(name: str, config: RunConfig, seeds: Sequence[int]) -> ExperimentReport:
    return ExperimentReport(name=name, config=config.model_dump(mode="json"), seeds=sorted({config.seed, *seeds}))


def _run_cell(report: ExperimentReport, cell: str, seed: int, fn: Callable[[], T]) -> Optional[T]:
    """Run one sweep cell, recording numeric failures instead of raising."""
    try:
        return fn()
    except (NumericDivergenceError, DegenerateInputError) as e:
        logger.warning(f"Cell {cell} (seed {seed}) failed: {e}")
        report.cell_errors.append(
            CellError(cell=cell, seed=seed, error_type=type(e).__name__, message=str(e), site=getattr(e, "site", None))
        )
        return None


def _median(values: Sequence[float]) -> Optional[float]:
    return float(np.median(values)) if len(values) else None


def _spread(values: Sequence[float]) -> Optional[float]:
    if not len(values):
        return None
    q1, q3 = np.percentile(values, [25, 75])
    return float(q3 - q1)


def _train_aligner_cell(config: RunConfig, data: PreparedData, seed: int) -> AlignerModel:
    streams = stage_streams(seed)
    model = build_aligner(config, data.vocab, streams[Stream.ALIGNER_INIT])
    result = train_aligner(
        model, data.train_ids, data.vocab, AlignerTrainConfig.from_run_config(config), streams[Stream.ALIGNER_TRAIN]
    )
    return result.model


def _adversarial_cell(
    config: RunConfig, data: PreparedData, aligner: AlignerModel, seed: int, embedder: Embedder
) -> SentenceSet:
    """Train a generator against ``aligner`` and return its evaluation set."""
    streams = stage_streams(seed)
    gen = build_generator(config, data.vocab, aligner, streams[Stream.GAN_INIT])
    disc = build_discriminator(config, streams[Stream.GAN_INIT])
    evaluate = validation_scorer(config, data, embedder, seed) if config.eval_every else None
    train_gan(
        gen,
        disc,
        aligner,
        data.train_ids,
        data.train_lengths,
        GanTrainConfig.from_run_config(config),
        streams[Stream.GAN_TRAIN],
        evaluate,
    )
    return generate_sentences(gen, config.eval_embed_size, config.max_len, data.vocab, streams[Stream.GENERATE])


def _distinct_fraction(sentences: SentenceSet) -> float:
    return len({tuple(s) for s in sentences}) / len(sentences)


def run_experiment_grad_norm(config: RunConfig) -> ExperimentReport:
    """
    Last-layer input-matrix gradient norms of the three cell variants.

    Every variant is built from the same seed and probed on the same input
    batches with the same random read-out loss. No parameters are updated.
    """
    report = _new_report("grad-norm", config, config.probe_seeds)
    per_batch: Dict[LstmVariant, List[List[float]]] = {variant: [] for variant in VARIANT_ORDER}
    per_seed: Dict[LstmVariant, List[float]] = {variant: [] for variant in VARIANT_ORDER}
    shape = (config.probe_len, config.probe_batch_size, config.probe_input_dim)

    for seed in config.probe_seeds:
        for variant in VARIANT_ORDER:
            init_rng, data_rng, loss_rng = spawn_rngs(seed, 3)
            stack = LstmStack.init(config.probe_input_dim, config.probe_hidden, config.probe_depth, variant, init_rng)
            loss_fn = projection_loss(config.probe_hidden, loss_rng)
            batches = (data_rng.standard_normal(shape) for _ in range(config.probe_batches))
            norms = grad_norm_probe(stack, loss_fn, batches, config.probe_batches)
            check_finite(np.asarray(norms), f"grad_norm.{variant.value}")
            per_batch[variant].append(norms)
            per_seed[variant].append(float(np.mean(norms)))
            report.add_record(variant=variant.value, seed=seed, mean_norm=per_seed[variant][-1])
            logger.info(f"Seed {seed} {variant.value}: mean gradient norm {per_seed[variant][-1]:.6g}")

    medians = {}
    for variant in VARIANT_ORDER:
        report.series[variant.value] = np.median(np.array(per_batch[variant]), axis=0).tolist()
        medians[variant] = _median(per_seed[variant])
        report.summary[f"median_mean_norm.{variant.value}"] = medians[variant]
    report.verdicts["fully_normalized>layer_norm>vanilla"] = bool(
        medians[LstmVariant.FULLY_NORMALIZED] > medians[LstmVariant.LAYER_NORM] > medians[LstmVariant.VANILLA]
    )
    return report


def run_experiment_dropout_sweep(config: RunConfig) -> ExperimentReport:
    """
    FED of the generator trained at each sampling dropout rate.

    One aligner is shared by every cell. A cell whose generations are
    mostly duplicates raises the invalid-sampling flag.
    """
    report = _new_report("dropout-sweep", config, [config.seed])
    streams = stage_streams(config.seed)
    data = prepare_data(config, streams[Stream.DATA])
    embedder = make_embedder(config)
    aligner = _train_aligner_cell(config, data, config.seed)
    test = sample_subset(data.test, config.eval_embed_size, streams[Stream.EVALUATE])

    rates, feds = [], []
    for rho in config.dropout_rates:
        cell_config = config.model_copy(update={"sampling_dropout": rho})
        generated = _run_cell(
            report, f"rho={rho}", config.seed,
            lambda: _adversarial_cell(cell_config, data, aligner, config.seed, embedder),
        )
        if generated is None:
            continue
        value = fed(test, generated, embedder)
        distinct = _distinct_fraction(generated)
        invalid = distinct < config.collapse_threshold
        if invalid:
            logger.warning(f"rho={rho}: invalid sampling, only {distinct:.3f} of generations are distinct")
        report.add_record(rho=rho, seed=config.seed, fed=value, distinct=distinct, invalid_sampling=invalid)
        rates.append(rho)
        feds.append(value)

    report.series["rho"] = rates
    report.series["fed"] = feds
    if feds:
        best = int(np.argmin(feds))
        report.summary["best_rho"] = rates[best]
        report.summary["best_fed"] = feds[best]
        report.verdicts["best_fed_at_interior_rho"] = 0 < best < len(feds) - 1
    return report


def _sensitivity_corpus(config: RunConfig) -> SentenceSet:
    rng = make_rng(config.seed)
    if config.corpus_path:
        sentences = sample_subset(load_sentences(Path(config.corpus_path)), config.sensitivity_size, rng)
    else:
        sentences = gen_synthetic_corpus(default_grammar(), config.sensitivity_size, rng)
    return sentences.with_provenance(Provenance.TEST)


def run_experiment_lcr_sensitivity(config: RunConfig) -> ExperimentReport:
    """
    LCR and FED of a test set against corrupted copies of itself.

    Relative changes are normalized to the value at the largest corruption
    rate: FED as ``fed(p) / fed(p_max)`` and LCR as
    ``(lcr(0) - lcr(p)) / (lcr(0) - lcr(p_max))``.
    """
    report = _new_report("lcr-sensitivity", config, config.sensitivity_seeds)
    test = _sensitivity_corpus(config)
    vocab = Vocabulary.build(test.sentences)
    embedder = make_embedder(config)
    emb_test = embedder.embed(test.sentences)
    summary_test = gaussian_summary(emb_test)
    rates = list(config.corruption_rates)

    lcr_rows, fed_rows = [], []
    for seed in config.sensitivity_seeds:
        rng = make_rng(seed)
        lcrs, feds = [], []
        for p in rates:
            corrupted = corrupt_corpus(test, p, vocab, rng)
            emb = embedder.embed(corrupted.sentences)
            fed_value = frechet_distance(summary_test, gaussian_summary(emb))
            lcr_value = min(coverage_from_embeddings(emb_test, emb, config.sensitivity_tau, config.coverage_mode))
            lcrs.append(lcr_value)
            feds.append(fed_value)
            report.add_record(p=p, seed=seed, lcr=lcr_value, fed=fed_value)
        report.series[f"lcr.seed{seed}"] = lcrs
        report.series[f"fed.seed{seed}"] = feds
        lcr_rows.append(lcrs)
        fed_rows.append(feds)
        logger.info(f"Seed {seed}: LCR {lcrs[0]:.3f} -> {lcrs[-1]:.3f}, FED {feds[0]:.4g} -> {feds[-1]:.4g}")

    lcr_median = np.median(np.array(lcr_rows), axis=0)
    fed_median = np.median(np.array(fed_rows), axis=0)
    report.series["p"] = rates
    report.series["lcr_median"] = lcr_median.tolist()
    report.series["fed_median"] = fed_median.tolist()
    report.series["lcr_spread"] = [_spread(col) for col in np.array(lcr_rows).T]
    report.series["fed_spread"] = [_spread(col) for col in np.array(fed_rows).T]

    lcr_drop = float(lcr_median[0] - lcr_median[-1])
    relative_drop = lcr_drop / lcr_median[0] if lcr_median[0] > 0 else 0.0
    report.summary["lcr_relative_drop"] = relative_drop
    report.verdicts["lcr_non_increasing"] = coverage_monotone(lcr_median.tolist())
    report.verdicts["lcr_drop_at_least_30pct"] = relative_drop >= 0.3
    if len(rates) > 2 and lcr_drop > 0 and fed_median[-1] > 0:
        fed_rel = fed_median / fed_median[-1]
        lcr_rel = (lcr_median[0] - lcr_median) / lcr_drop
        report.series["fed_relative"] = fed_rel.tolist()
        report.series["lcr_relative"] = lcr_rel.tolist()
        report.verdicts["fed_less_sensitive"] = bool(np.all(fed_rel[1:-1] < lcr_rel[1:-1]))
    return report


ABLATION_ARMS = {
    "full": {},
    "no_dropout_sampling": {"sampling_dropout": 0.0},
    "no_fully_normalized": {"gen_variant": LstmVariant.LAYER_NORM, "disc_variant": LstmVariant.LAYER_NORM},
    "no_both": {
        "sampling_dropout": 0.0,
        "gen_variant": LstmVariant.LAYER_NORM,
        "disc_variant": LstmVariant.LAYER_NORM,
    },
}


def ablation_matrix(config: RunConfig) -> ExperimentReport:
    """
    Inverse BLEU and FED with dropout sampling and/or fully normalized cells removed.

    Each seed trains one aligner shared by its arms.
    """
    report = _new_report("ablation", config, config.seeds)
    streams = stage_streams(config.seed)
    data = prepare_data(config, streams[Stream.DATA])
    embedder = make_embedder(config)
    test = sample_subset(data.test, config.eval_embed_size, streams[Stream.EVALUATE])
    token_test = sample_subset(test, config.eval_token_size, make_rng(config.seed))
    results: Dict[str, Dict[str, List[float]]] = {arm: {"inverse_bleu": [], "fed": []} for arm in ABLATION_ARMS}

    for seed in config.seeds:
        aligner = _run_cell(report, "aligner", seed, lambda: _train_aligner_cell(config, data, seed))
        if aligner is None:
            continue
        for arm, update in ABLATION_ARMS.items():
            arm_config = config.model_copy(update=update)
            generated = _run_cell(
                report, arm, seed, lambda: _adversarial_cell(arm_config, data, aligner, seed, embedder)
            )
            if generated is None:
                continue
            token_generated = sample_subset(generated, config.eval_token_size, make_rng(seed))
            score = inverse_bleu(token_test, token_generated, config.bleu_max_n)
            value = fed(test, generated, embedder)
            results[arm]["inverse_bleu"].append(score)
            results[arm]["fed"].append(value)
            report.add_record(arm=arm, seed=seed, inverse_bleu=score, fed=value)
            logger.info(f"Ablation {arm} seed {seed}: inverse BLEU {score:.3f}, FED {value:.4g}")

    medians = {}
    for arm, values in results.items():
        medians[arm] = _median(values["inverse_bleu"])
        report.summary[f"median_inverse_bleu.{arm}"] = medians[arm]
        report.summary[f"median_fed.{arm}"] = _median(values["fed"])
    if all(value is not None for value in medians.values()):
        singles = (medians["no_dropout_sampling"], medians["no_fully_normalized"])
        report.verdicts["full_ge_single_ablations"] = all(medians["full"] >= s for s in singles)
        report.verdicts["single_ge_double_ablation"] = all(s >= medians["no_both"] for s in singles)
    return report


def run_experiment_balance_error(config: RunConfig) -> ExperimentReport:
    """Balance error and variance spread of aligners trained at each penalty weight."""
    report = _new_report("balance-error", config, config.seeds)
    streams = stage_streams(config.seed)
    data = prepare_data(config, streams[Stream.DATA])
    errors: Dict[float, List[float]] = {value: [] for value in config.lambda_a_values}

    for value in config.lambda_a_values:
        arm_config = config.model_copy(update={"lambda_a": value})
        for seed in config.seeds:
            model = _run_cell(report, f"lambda_a={value}", seed, lambda: _train_aligner_cell(arm_config, data, seed))
            if model is None:
                continue
            error = balance_error(model, config.n_pairs, config.n_interp, spawn_rngs(seed, 1)[0])
            spread = variance_spread(model)
            consistency = decode_consistency(model)
            errors[value].append(error)
            report.add_record(
                lambda_a=value, seed=seed, balance_error=error, variance_spread=spread, decode_consistency=consistency
            )
            logger.info(f"lambda_a={value} seed {seed}: balance error {error:.3f}, variance spread {spread:.4g}")

    for value, values in errors.items():
        report.summary[f"median_balance_error.{value}"] = _median(values)
    report.summary["expected_count"] = config.n_interp / 2.0
    baseline = _median(errors.get(0.0, []))
    penalized = [_median(values) for value, values in errors.items() if value > 0]
    if baseline is not None and penalized and all(m is not None for m in penalized):
        report.verdicts["penalty_lowers_balance_error"] = all(m < baseline for m in penalized)
    return report


def run_experiment_aligner_objective(config: RunConfig) -> ExperimentReport:
    """FED and LCR after adversarial training on top of each aligner objective."""
    report = _new_report("aligner-objective", config, config.seeds)
    streams = stage_streams(config.seed)
    data = prepare_data(config, streams[Stream.DATA])
    embedder = make_embedder(config)
    test = sample_subset(data.test, config.eval_embed_size, streams[Stream.EVALUATE])
    results: Dict[AlignerObjective, Dict[str, List[float]]] = {obj: {"fed": [], "lcr": []} for obj in AlignerObjective}

    for objective in AlignerObjective:
        arm_config = config.model_copy(update={"aligner_objective": objective})
        for seed in config.seeds:

            def cell() -> SentenceSet:
                aligner = _train_aligner_cell(arm_config, data, seed)
                return _adversarial_cell(arm_config, data, aligner, seed, embedder)

            generated = _run_cell(report, objective.value, seed, cell)
            if generated is None:
                continue
            value = fed(test, generated, embedder)
            rate = min(coverage_rates(test, generated, embedder, config.tau, config.coverage_mode))
            results[objective]["fed"].append(value)
            results[objective]["lcr"].append(rate)
            report.add_record(objective=objective.value, seed=seed, fed=value, lcr=rate)

    for objective, values in results.items():
        report.summary[f"median_fed.{objective.value}"] = _median(values["fed"])
        report.summary[f"median_lcr.{objective.value}"] = _median(values["lcr"])
    vp = _median(results[AlignerObjective.VARIANCE_PENALIZED]["fed"])
    ce = _median(results[AlignerObjective.CROSS_ENTROPY]["fed"])
    if vp is not None and ce is not None:
        report.verdicts["variance_penalized_lower_fed"] = vp < ce
    return report


def run_experiment_output_gate(config: RunConfig) -> ExperimentReport:
    """
    Norm of ``dh_t / dc_{t-1}`` under a nearly closed output gate.

    Also checks that the layer-norm input Jacobian diagonal tracks
    ``1 / sigma`` at several input deviations.
    """
    report = _new_report("output-gate", config, config.seeds)
    hidden = config.gate_hidden
    norms: Dict[LstmVariant, List[float]] = {LstmVariant.VANILLA: [], LstmVariant.FULLY_NORMALIZED: []}

    for seed in config.seeds:
        for variant in norms:
            init_rng, state_rng = spawn_rngs(seed, 2)
            params = LstmCellParams.init(hidden, hidden, variant, init_rng)
            params.b[2 * hidden:3 * hidden] = config.gate_output_bias
            values = []
            for _ in range(config.gate_trials):
                x = state_rng.standard_normal(hidden)
                state = LstmState(h=state_rng.standard_normal(hidden), c=state_rng.standard_normal(hidden))
                values.append(float(np.linalg.norm(hidden_cell_jacobian(variant, params, x, state))))
            norms[variant].append(float(np.mean(values)))
            report.add_record(variant=variant.value, seed=seed, mean_jacobian_norm=norms[variant][-1])

    vanilla = _median(norms[LstmVariant.VANILLA])
    normalized = _median(norms[LstmVariant.FULLY_NORMALIZED])
    report.summary["median_jacobian_norm.vanilla"] = vanilla
    report.summary["median_jacobian_norm.fully_normalized"] = normalized
    report.summary["ratio"] = normalized / vanilla if vanilla else None
    report.verdicts["fully_normalized>vanilla"] = bool(normalized > vanilla)

    rng = make_rng(config.seed)
    factors = [
        ln_gradient_factor_probe(LN_PROBE_WIDTH, sigma, config.gate_trials, rng) for sigma in LN_PROBE_SIGMAS
    ]
    report.series["sigma"] = list(LN_PROBE_SIGMAS)
    report.series["ln_factor"] = factors
    report.series["inverse_sigma"] = [1.0 / sigma for sigma in LN_PROBE_SIGMAS]
    report.verdicts["ln_factor_tracks_inverse_sigma"] = all(
        abs(factor * sigma - 1.0) <= LN_PROBE_TOLERANCE for factor, sigma in zip(factors, LN_PROBE_SIGMAS)
    )
    return report


EXPERIMENTS: Dict[str, Callable[[RunConfig], ExperimentReport]] = {
    "grad-norm": run_experiment_grad_norm,
    "dropout-sweep": run_experiment_dropout_sweep,
    "lcr-sensitivity": run_experiment_lcr_sensitivity,
    "ablation": ablation_matrix,
    "balance-error": run_experiment_balance_error,
    "aligner-objective": run_experiment_aligner_objective,
    "corollary": run_experiment_output_gate,
    "output-gate": run_experiment_output_gate,
}


def run_experiment(name: str, config: RunConfig) -> ExperimentReport:
    """Run an experiment by its command-line name."""
    runner = EXPERIMENTS.get(name)
    if runner is None:
        raise ConfigError(f"Unknown experiment {name!r}; choose from: {', '.join(EXPERIMENTS)}")
    logger.info(f"Running experiment {name} with seed {config.seed}")
    report = runner(config)
    failed = len(report.cell_errors)
    logger.info(f"Experiment {name} finished: verdicts {report.verdicts}" + (f", {failed} failed cells" if failed else ""))
    return report

