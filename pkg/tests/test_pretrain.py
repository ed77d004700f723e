"""Pretraining loop: convergence, determinism, objectives, resume."""

import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from regionmix.geometry import RegionSpec
from regionmix.mixer import CheckpointMismatchError, MixerConfig, load_checkpoint
from regionmix.pretrain import PretrainConfig, lr_at, pretrain_run
from regionmix.synth import SynthConfig, generate_dataset

FIXTURE = Path(__file__).parent / "data" / "mem_tiny_curve.json"

TINY_SPEC = RegionSpec(t=2, l=2, d=8)
TINY_MIXER = MixerConfig(
    spec=TINY_SPEC,
    hidden_dim=16,
    encoder_layers=2,
    heads=1,
    decoder_layers=1,
    decoder_dim=16,
)
TINY_RUN = PretrainConfig(
    objective="mem",
    r=0.5,
    total_samples=4000,
    batch_size=32,
    base_lr=3e-3,
    base_batch=32,
    warmup_fraction=0.1,
    seed=0,
)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    cfg = SynthConfig(
        spec=TINY_SPEC,
        n_specimens={"train": 30},
        regions_per_slide=(2, 4),
        slides_per_specimen=(1, 2),
        seed=1,
    )
    generate_dataset(cfg, out)
    return out


@pytest.fixture(scope="module")
def context_corpus(tmp_path_factory):
    # source contexts of side 3 for two-view contrastive subsampling
    out = tmp_path_factory.mktemp("context")
    cfg = SynthConfig(
        spec=RegionSpec(t=3, l=2, d=8),
        n_specimens={"train": 20},
        regions_per_slide=(2, 3),
        slides_per_specimen=(1, 1),
        seed=1,
    )
    generate_dataset(cfg, out)
    return out


class TestSchedule:
    def test_peak_under_reference_constants(self):
        cfg = PretrainConfig(total_samples=200_000_000, batch_size=4096)
        warmup_end = int(cfg.warmup_fraction * cfg.total_steps)
        assert lr_at(warmup_end, cfg) == pytest.approx(2.4e-3, rel=1e-12)

    def test_endpoints(self):
        cfg = PretrainConfig(total_samples=6400, batch_size=32)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(cfg.total_steps, cfg) == 0.0

    def test_junction_continuity(self):
        cfg = PretrainConfig(total_samples=64000, batch_size=32, warmup_fraction=0.25)
        peak = cfg.base_lr * cfg.batch_size / cfg.base_batch
        warmup = int(0.25 * cfg.total_steps)
        assert abs(lr_at(warmup, cfg) - peak) < 1e-12 * peak

    def test_step_past_end_rejected(self):
        cfg = PretrainConfig(total_samples=320, batch_size=32)
        with pytest.raises(ValueError, match="step"):
            lr_at(cfg.total_steps + 1, cfg)


class TestMemRun:
    def test_learns_from_near_zero_start(self, tiny_corpus, tmp_path):
        out = pretrain_run(TINY_RUN, tiny_corpus, TINY_MIXER, tmp_path / "run")
        history = out["history"]
        assert abs(history[0]["mem"]) < 0.25  # random-init cosine is near zero
        assert history[-1]["mem"] < -0.5
        assert Path(out["checkpoint"]).exists()
        model, meta = load_checkpoint(out["checkpoint"])
        assert meta["step"] == TINY_RUN.total_steps
        assert meta["fingerprint"] == out["fingerprint"]

    def test_curve_matches_regression_fixture(self, tiny_corpus, tmp_path):
        out = pretrain_run(TINY_RUN, tiny_corpus, TINY_MIXER, tmp_path / "run")
        frozen = json.loads(FIXTURE.read_text())
        history = out["history"]
        for point in frozen["points"]:
            got = history[point["step"]]["mem"]
            assert got == pytest.approx(point["mem"], rel=1e-4, abs=1e-6)

    def test_identical_config_identical_curves(self, tiny_corpus, tmp_path):
        short = dataclasses.replace(TINY_RUN, total_samples=10 * 32)
        a = pretrain_run(short, tiny_corpus, TINY_MIXER, tmp_path / "a")
        b = pretrain_run(short, tiny_corpus, TINY_MIXER, tmp_path / "b")
        assert a["history"] == b["history"]

    def test_mem_ignores_source_context(self, tiny_corpus, tmp_path):
        short = dataclasses.replace(TINY_RUN, total_samples=5 * 32)
        a = pretrain_run(short, tiny_corpus, TINY_MIXER, tmp_path / "a")
        other = dataclasses.replace(short, source_c=7)
        b = pretrain_run(other, tiny_corpus, TINY_MIXER, tmp_path / "b")
        assert [h["loss"] for h in a["history"]] == [h["loss"] for h in b["history"]]

    def test_metrics_are_line_delimited_json(self, tiny_corpus, tmp_path):
        short = dataclasses.replace(TINY_RUN, total_samples=3 * 32)
        out = pretrain_run(short, tiny_corpus, TINY_MIXER, tmp_path / "run")
        lines = Path(out["metrics_path"]).read_text().strip().splitlines()
        assert len(lines) == 3
        entry = json.loads(lines[0])
        assert {"step", "lr", "loss", "mem", "contrastive", "samples_per_s"} <= set(entry)


class TestCmemRun:
    def cmem_cfg(self, **overrides):
        base = dict(
            objective="cmem",
            r=0.5,
            source_c=3,
            total_samples=8 * 8,
            batch_size=8,
            base_lr=1e-3,
            base_batch=8,
            temperature=0.2,
            contrastive_weight=1.0,
            seed=3,
        )
        base.update(overrides)
        return PretrainConfig(**base)

    def test_total_is_sum_of_parts(self, context_corpus, tmp_path):
        out = pretrain_run(self.cmem_cfg(), context_corpus, TINY_MIXER, tmp_path / "run")
        for entry in out["history"]:
            assert entry["contrastive"] is not None
            assert entry["loss"] == pytest.approx(
                entry["mem"] + entry["contrastive"], rel=1e-5, abs=1e-6
            )

    def test_contrastive_weight_scales_term(self, context_corpus, tmp_path):
        out = pretrain_run(
            self.cmem_cfg(contrastive_weight=0.5, total_samples=3 * 8),
            context_corpus,
            TINY_MIXER,
            tmp_path / "w",
        )
        for entry in out["history"]:
            assert entry["loss"] == pytest.approx(
                entry["mem"] + 0.5 * entry["contrastive"], rel=1e-5, abs=1e-6
            )

    def test_corpus_context_must_match(self, tiny_corpus, tmp_path):
        # the tiny corpus holds t=2 regions, not side-3 contexts
        with pytest.raises(ValueError, match="source context"):
            pretrain_run(self.cmem_cfg(), tiny_corpus, TINY_MIXER, tmp_path / "run")

    def test_checkpoint_carries_projector(self, context_corpus, tmp_path):
        out = pretrain_run(
            self.cmem_cfg(total_samples=2 * 8), context_corpus, TINY_MIXER, tmp_path / "r"
        )
        _, meta = load_checkpoint(out["checkpoint"])
        assert "projector" in meta["extra"]


class TestResume:
    def test_resume_reproduces_uninterrupted_run(self, tiny_corpus, tmp_path):
        cfg = dataclasses.replace(
            TINY_RUN, total_samples=8 * 32, checkpoint_every=4, seed=9
        )
        full = pretrain_run(cfg, tiny_corpus, TINY_MIXER, tmp_path / "full")
        resumed = pretrain_run(
            cfg,
            tiny_corpus,
            TINY_MIXER,
            tmp_path / "resumed",
            resume_from=tmp_path / "full" / "checkpoint_step4.pt",
        )
        assert resumed["history"] == full["history"]

    def test_fingerprint_mismatch_rejected(self, tiny_corpus, tmp_path):
        cfg = dataclasses.replace(TINY_RUN, total_samples=2 * 32, checkpoint_every=1)
        pretrain_run(cfg, tiny_corpus, TINY_MIXER, tmp_path / "a")
        other = dataclasses.replace(cfg, base_lr=1e-4)
        with pytest.raises(CheckpointMismatchError):
            pretrain_run(
                other,
                tiny_corpus,
                TINY_MIXER,
                tmp_path / "b",
                resume_from=tmp_path / "a" / "checkpoint_step1.pt",
            )


class TestValidation:
    def test_zero_mask_ratio_rejected(self, tiny_corpus, tmp_path):
        cfg = dataclasses.replace(TINY_RUN, r=0.0)
        with pytest.raises(ValueError, match="masks no tokens"):
            pretrain_run(cfg, tiny_corpus, TINY_MIXER, tmp_path / "run")

    def test_unknown_objective_rejected(self):
        with pytest.raises(ValueError, match="objective"):
            PretrainConfig(objective="simclr").validate()

    def test_cmem_needs_negatives(self):
        with pytest.raises(ValueError, match="negatives"):
            PretrainConfig(objective="cmem", batch_size=1, total_samples=4).validate()

    def test_dimension_mismatch_rejected(self, tiny_corpus, tmp_path):
        mixer = dataclasses.replace(TINY_MIXER, spec=RegionSpec(t=2, l=2, d=16))
        with pytest.raises(ValueError, match="do not match"):
            pretrain_run(TINY_RUN, tiny_corpus, mixer, tmp_path / "run")
