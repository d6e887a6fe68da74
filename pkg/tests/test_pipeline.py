"""
Tests for the End-to-End Pipeline.

This module runs every stage at toy scale and checks the artifacts a run
leaves behind, resumption from those artifacts and the comparison model.
"""

import json

import numpy as np
import pytest

from repgan.config.settings import read_config_file
from repgan.core.checkpoint import load_generator
from repgan.core.corpus import Vocabulary, load_sentences
from repgan.core.pipeline import (
    Stream,
    load_frozen_aligner,
    prepare_data,
    read_trace,
    run_mle,
    run_pipeline,
    stage_streams,
)
from repgan.utils.validation import CheckpointError

pytestmark = pytest.mark.integration

ARTIFACTS = [
    "config.env",
    "aligner.ckpt",
    "generator.ckpt",
    "discriminator.ckpt",
    "generated.txt",
    "metrics.txt",
    "metrics.json",
    "trace_aligner.jsonl",
    "trace_gan.jsonl",
    "data/train.txt",
    "data/valid.txt",
    "data/test.txt",
]


@pytest.fixture
def pipeline_run(tmp_path, tiny_config):
    """A finished toy pipeline run."""
    return run_pipeline(tiny_config, tmp_path / "run")


class TestDataPreparation:
    """Test cases for corpus preparation."""

    def test_splits_and_vocabulary(self, tiny_config):
        data = prepare_data(tiny_config, stage_streams(0)[Stream.DATA])
        assert (len(data.train), len(data.valid), len(data.test)) == (112, 16, 32)
        assert data.train_ids.shape == (112, tiny_config.max_len)
        assert data.vocab.tokens == Vocabulary.build(data.train.sentences).tokens
        assert data.grammar is not None

    def test_seeded(self, tiny_config):
        a = prepare_data(tiny_config, stage_streams(5)[Stream.DATA])
        b = prepare_data(tiny_config, stage_streams(5)[Stream.DATA])
        assert a.train.sentences == b.train.sentences
        np.testing.assert_array_equal(a.train_ids, b.train_ids)

    def test_corpus_file(self, tmp_path, tiny_config):
        path = tmp_path / "corpus.txt"
        path.write_text("".join(f"w{i % 7} w{i % 5} end\n" for i in range(40)), encoding="utf-8")
        config = tiny_config.model_copy(update={"corpus_path": str(path)})
        data = prepare_data(config, stage_streams(0)[Stream.DATA])
        assert len(data.train) + len(data.valid) + len(data.test) == 40
        assert data.grammar is None


class TestRunPipeline:
    """Test cases for a complete run."""

    def test_artifacts(self, pipeline_run):
        for name in ARTIFACTS:
            assert (pipeline_run.out_dir / name).exists(), name
        assert pipeline_run.paths["metrics.json"] == pipeline_run.out_dir / "metrics.json"

    def test_metrics(self, pipeline_run, tiny_config):
        metrics = pipeline_run.report.metrics
        for name in ("bleu", "self_bleu", "inverse_bleu", "fed", "lcr", "mean_length", "grammar_acceptance"):
            assert name in metrics
        assert metrics["lcr"] == min(metrics["coverage_test"], metrics["coverage_generated"])
        assert len(pipeline_run.generated) == tiny_config.eval_embed_size
        saved = json.loads((pipeline_run.out_dir / "metrics.json").read_text())
        assert saved["metrics"] == pytest.approx(metrics)
        assert "metric.fed=" in (pipeline_run.out_dir / "metrics.txt").read_text()

    def test_traces(self, pipeline_run, tiny_config):
        aligner_trace = read_trace(pipeline_run.out_dir / "trace_aligner.jsonl")
        gan_trace = read_trace(pipeline_run.out_dir / "trace_gan.jsonl")
        assert [r.step for r in aligner_trace] == list(range(tiny_config.aligner_epochs))
        assert len(gan_trace) == tiny_config.gan_max_steps
        assert all(r.phase == "gan" and r.loss_d is not None for r in gan_trace)

    def test_resolved_config_is_saved(self, pipeline_run, tiny_config):
        flat = read_config_file(pipeline_run.out_dir / "config.env")
        assert flat["seed"] == str(tiny_config.seed)
        assert flat["max_len"] == str(tiny_config.max_len)

    def test_aligner_is_frozen(self, pipeline_run):
        assert pipeline_run.aligner.frozen

    def test_same_seed_same_metrics(self, tmp_path, pipeline_run, tiny_config):
        again = run_pipeline(tiny_config, tmp_path / "again")
        assert again.report.metrics == pipeline_run.report.metrics
        assert again.generated.sentences == pipeline_run.generated.sentences


class TestResume:
    """Test cases for resuming from a run directory."""

    def test_resume_reuses_everything(self, pipeline_run, tiny_config):
        resumed = run_pipeline(tiny_config, pipeline_run.out_dir, resume=True)
        assert resumed.report.metrics == pipeline_run.report.metrics

    def test_resume_after_aligner_matches_uninterrupted_run(self, pipeline_run, tiny_config):
        for name in ("generator.ckpt", "discriminator.ckpt", "generated.txt"):
            (pipeline_run.out_dir / name).unlink()
        resumed = run_pipeline(tiny_config, pipeline_run.out_dir, resume=True)
        assert resumed.generated.sentences == pipeline_run.generated.sentences
        assert resumed.report.metrics == pipeline_run.report.metrics

    def test_resumed_generator_is_bitwise_identical(self, pipeline_run):
        gen, _ = load_generator(pipeline_run.out_dir / "generator.ckpt", pipeline_run.aligner.f_lt)
        for (name, a), (_, b) in zip(gen.named_parameters(), pipeline_run.generator.named_parameters()):
            assert a.tobytes() == b.tobytes(), name

    def test_aligner_vocabulary_must_match(self, pipeline_run):
        other = Vocabulary.build([["completely", "different", "words"]])
        with pytest.raises(CheckpointError):
            load_frozen_aligner(pipeline_run.out_dir / "aligner.ckpt", other)


class TestRunMle:
    """Test cases for the comparison model run."""

    def test_artifacts_and_metrics(self, tmp_path, tiny_config):
        report = run_mle(tiny_config, tmp_path / "mle")
        assert report.name == "mle"
        for name in ("mle.ckpt", "mle_generated.txt", "mle_metrics.txt", "mle_metrics.json", "trace_mle.jsonl"):
            assert (tmp_path / "mle" / name).exists(), name
        generated = load_sentences(tmp_path / "mle" / "mle_generated.txt")
        assert len(generated) == tiny_config.eval_embed_size
        assert "fed" in report.metrics
