import colorsys
import dataclasses
import json

import numpy as np
import pytest
import torch

from lbgan.losses import LossWeights
from lbgan.training import (
    CHECKPOINT_VERSION,
    CheckpointError,
    ConfigError,
    ModelBundle,
    TrainConfig,
    TrainLogger,
    TrainingError,
    _rotate_hue,
    build_bundle,
    config_digest,
    load_checkpoint,
    parameter_digest,
    run_variant,
    save_checkpoint,
    stage2_cycle_position,
    train_stage_one,
    train_stage_two,
)

from conftest import ListLogger


class TestTrainConfig:
    def test_defaults_are_paper_constants(self):
        cfg = TrainConfig()
        assert cfg.stage1_iters == 20000
        assert cfg.batch_size == 24
        assert cfg.lr == 2e-4
        assert cfg.adam_beta1 == 0.5
        assert cfg.stage2_gn_lr_factor == 0.25
        assert cfg.g_steps_per_d_step == 4
        assert cfg.weights == LossWeights(10.0, 10.0)
        assert cfg.color_jitter == 0.0

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"lr": 0.0},
            {"lr": -1e-4},
            {"batch_size": 0},
            {"g_steps_per_d_step": 0},
            {"stage1_iters": -1},
            {"stage2_gn_lr_factor": 0.0},
            {"stage2_gn_lr_factor": 1.5},
            {"adam_beta1": 1.0},
            {"variant": "mystery"},
            {"image_size": 20, "n_blocks": 3},
            {"weights": LossWeights(-1.0, 0.0)},
            {"d_base_channels": -4},
            {"color_jitter": -0.1},
            {"color_jitter": 0.6},
        ],
    )
    def test_validation_rejects(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()

    def test_json_roundtrip(self, tiny_config):
        again = TrainConfig.from_json(tiny_config.to_json())
        assert again == tiny_config
        assert config_digest(again) == config_digest(tiny_config)

    def test_digest_changes_with_config(self, tiny_config):
        other = dataclasses.replace(tiny_config, seed=tiny_config.seed + 1)
        assert config_digest(other) != config_digest(tiny_config)

    def test_discriminator_width_default_follows_base(self, tiny_config):
        assert tiny_config.discriminator_config().base_channels == tiny_config.base_channels
        wide = dataclasses.replace(tiny_config, d_base_channels=4)
        assert wide.discriminator_config().base_channels == 4
        assert wide.encoder_config().base_channels == tiny_config.base_channels


class TestBundle:
    def test_needs_two_identities(self, tiny_config):
        with pytest.raises(ConfigError):
            build_bundle(tiny_config, 1)

    def test_seeded_initialization_deterministic(self, tiny_config):
        a = build_bundle(tiny_config, 4)
        b = build_bundle(tiny_config, 4)
        assert a.parameter_digests() == b.parameter_digests()
        c = build_bundle(dataclasses.replace(tiny_config, seed=99), 4)
        assert c.parameter_digests() != a.parameter_digests()

    def test_networks_differ_from_each_other(self, tiny_config):
        bundle = build_bundle(tiny_config, 4)
        digests = bundle.parameter_digests()
        assert len(set(digests.values())) == 4

    def test_single_stage_starts_in_stage2(self, tiny_config, tiny_data):
        cfg = dataclasses.replace(tiny_config, variant="single_stage")
        assert build_bundle(cfg, tiny_data.n_id).stage == "stage2"


class TestStageOne:
    def test_zero_budget_flips_marker_only(self, tiny_config, tiny_data):
        cfg = dataclasses.replace(tiny_config, stage1_iters=0)
        bundle = build_bundle(cfg, tiny_data.n_id)
        before = bundle.parameter_digests()
        train_stage_one(cfg, tiny_data, bundle)
        assert bundle.stage == "stage2"
        assert bundle.parameter_digests() == before

    def test_editor_pair_untouched(self, tiny_config, tiny_data):
        bundle = build_bundle(tiny_config, tiny_data.n_id)
        before = bundle.parameter_digests()
        train_stage_one(tiny_config, tiny_data, bundle)
        after = bundle.parameter_digests()
        assert after["g_e"] == before["g_e"]
        assert after["d_e"] == before["d_e"]
        assert after["g_n"] != before["g_n"]
        assert after["d_n"] != before["d_n"]

    def test_step_counters(self, tiny_config, tiny_data):
        bundle = build_bundle(tiny_config, tiny_data.n_id)
        train_stage_one(tiny_config, tiny_data, bundle)
        assert bundle.optimizer_steps == {"g_n": 6, "g_e": 0, "d_n": 6, "d_e": 0}

    def test_logs_every_iteration(self, tiny_config, tiny_data):
        bundle = build_bundle(tiny_config, tiny_data.n_id)
        logger = ListLogger()
        train_stage_one(tiny_config, tiny_data, bundle, logger)
        assert [(e["stage"], e["iteration"]) for e in logger.entries] == [
            (1, i) for i in range(1, 7)
        ]
        assert all(e["g_n"] > 0 and e["d_n"] > 0 for e in logger.entries)


class TestStageTwo:
    def test_cycle_position_function(self):
        pattern = [stage2_cycle_position(i, 4) for i in range(10)]
        assert pattern == ["g", "g", "g", "g", "d", "g", "g", "g", "g", "d"]
        assert stage2_cycle_position(0, 1) == "g"
        assert stage2_cycle_position(1, 1) == "d"

    def test_requires_stage1_completion(self, tiny_config, tiny_data):
        bundle = build_bundle(tiny_config, tiny_data.n_id)
        with pytest.raises(ConfigError):
            train_stage_two(tiny_config, tiny_data, bundle)

    def test_cycle_parameter_isolation(self, tiny_config, tiny_data):
        """Generators move only on g slots, discriminators only on d slots."""
        bundle = build_bundle(tiny_config, tiny_data.n_id)
        train_stage_one(tiny_config, tiny_data, bundle)
        trace = [bundle.parameter_digests()]
        train_stage_two(
            tiny_config, tiny_data, bundle,
            on_iteration=lambda b: trace.append(b.parameter_digests()),
        )
        assert len(trace) == 13
        for i in range(1, len(trace)):
            pos = stage2_cycle_position(i - 1, tiny_config.g_steps_per_d_step)
            prev, cur = trace[i - 1], trace[i]
            g_moved = cur["g_n"] != prev["g_n"] or cur["g_e"] != prev["g_e"]
            d_moved = cur["d_n"] != prev["d_n"] or cur["d_e"] != prev["d_e"]
            if pos == "g":
                assert g_moved and not d_moved
            else:
                assert d_moved and not g_moved

    def test_learning_rates_full(self, tiny_config, tiny_data):
        bundle = run_variant(tiny_config, tiny_data)
        lr = tiny_config.lr
        assert bundle.optimizers["g_n"].param_groups[0]["lr"] == lr * 0.25
        assert bundle.optimizers["d_n"].param_groups[0]["lr"] == lr * 0.25
        assert bundle.optimizers["g_e"].param_groups[0]["lr"] == lr
        assert bundle.optimizers["d_e"].param_groups[0]["lr"] == lr

    def test_learning_rates_single_stage(self, tiny_config, tiny_data):
        cfg = dataclasses.replace(tiny_config, variant="single_stage")
        bundle = run_variant(cfg, tiny_data)
        for name in ("g_n", "g_e", "d_n", "d_e"):
            assert bundle.optimizers[name].param_groups[0]["lr"] == cfg.lr

    def test_step_counters_full(self, tiny_config, tiny_data):
        bundle = run_variant(tiny_config, tiny_data)
        # stage 1: 6 iters of (D, G); stage 2: 12 iters = 10 g + 2 d slots.
        assert bundle.optimizer_steps == {"g_n": 16, "g_e": 10, "d_n": 8, "d_e": 2}

    def test_matched_budgets_across_variants(self, tiny_config, tiny_data):
        totals = {}
        for variant in ("full", "single_stage", "no_regularizers"):
            cfg = dataclasses.replace(tiny_config, variant=variant)
            bundle = run_variant(cfg, tiny_data)
            totals[variant] = sum(bundle.optimizer_steps.values())
        assert totals["full"] == totals["single_stage"] == totals["no_regularizers"]

    def test_single_stage_counters(self, tiny_config, tiny_data):
        cfg = dataclasses.replace(tiny_config, variant="single_stage")
        bundle = run_variant(cfg, tiny_data)
        # 18 joint iterations: 15 g slots, 3 d slots.
        assert bundle.optimizer_steps == {"g_n": 15, "g_e": 15, "d_n": 3, "d_e": 3}

    def test_no_regularizers_reports(self, tiny_config, tiny_data):
        cfg = dataclasses.replace(tiny_config, variant="no_regularizers")
        logger = ListLogger()
        run_variant(cfg, tiny_data, logger=logger)
        gen_entries = [e for e in logger.entries if e["stage"] == 2 and e["total_g"] > 0]
        assert gen_entries
        assert all(e["csc"] == 0.0 for e in gen_entries)
        # Reconstruction survives as a plain (all-ones mask) L2 term.
        assert all(e["rec"] > 0.0 for e in gen_entries)

    def test_single_stage_has_no_stage1_entries(self, tiny_config, tiny_data):
        cfg = dataclasses.replace(tiny_config, variant="single_stage")
        logger = ListLogger()
        run_variant(cfg, tiny_data, logger=logger)
        assert all(e["stage"] == 2 for e in logger.entries)
        assert len(logger.entries) == cfg.stage1_iters + cfg.stage2_iters


class TestDeterminism:
    def test_bit_identical_tiny_runs(self, tiny_config, tiny_data):
        a = run_variant(tiny_config, tiny_data)
        b = run_variant(tiny_config, tiny_data)
        assert a.parameter_digests() == b.parameter_digests()

    def test_variants_produce_distinct_parameters(self, tiny_config, tiny_data):
        digests = []
        for variant in ("full", "single_stage", "no_regularizers"):
            cfg = dataclasses.replace(tiny_config, variant=variant)
            digests.append(tuple(sorted(run_variant(cfg, tiny_data).parameter_digests().items())))
        assert len(set(digests)) == 3


class TestColorJitter:
    def test_rotation_matches_colorsys(self):
        rng = np.random.default_rng(3)
        imgs = rng.uniform(-1, 1, (2, 3, 6, 6)).astype(np.float32)
        deltas = rng.uniform(-0.5, 0.5, 2)
        got = _rotate_hue(imgs, deltas)
        for b in range(2):
            for i in range(6):
                for j in range(6):
                    r, g, bl = ((imgs[b, :, i, j] + 1.0) / 2.0).tolist()
                    h, s, v = colorsys.rgb_to_hsv(r, g, bl)
                    want = np.array(colorsys.hsv_to_rgb((h + deltas[b]) % 1.0, s, v))
                    np.testing.assert_allclose(got[b, :, i, j], want * 2.0 - 1.0, atol=1e-5)

    def test_gray_and_zero_fixed_points(self):
        gray = np.full((1, 3, 4, 4), 0.25, dtype=np.float32)
        assert np.array_equal(_rotate_hue(gray, np.array([0.37])), gray)
        zeros = np.zeros((1, 3, 4, 4), dtype=np.float32)
        assert np.array_equal(_rotate_hue(zeros, np.array([0.5])), zeros)

    def test_zero_delta_is_identity(self):
        rng = np.random.default_rng(4)
        imgs = rng.uniform(-1, 1, (3, 3, 5, 5)).astype(np.float32)
        np.testing.assert_allclose(_rotate_hue(imgs, np.zeros(3)), imgs, atol=1e-6)

    def test_jittered_training_seeded_and_distinct(self, tiny_config, tiny_data):
        cfg = dataclasses.replace(tiny_config, color_jitter=0.2)
        a = run_variant(cfg, tiny_data)
        b = run_variant(cfg, tiny_data)
        assert a.parameter_digests() == b.parameter_digests()
        base = run_variant(tiny_config, tiny_data)
        assert base.parameter_digests() != a.parameter_digests()


class TestCheckpoints:
    def _trained(self, tiny_config, tiny_data):
        return run_variant(tiny_config, tiny_data)

    def test_roundtrip_bit_exact(self, tiny_config, tiny_data, tmp_path):
        bundle = self._trained(tiny_config, tiny_data)
        save_checkpoint(bundle, tmp_path / "ck")
        loaded = load_checkpoint(tmp_path / "ck")
        assert loaded.parameter_digests() == bundle.parameter_digests()
        assert loaded.stage == bundle.stage
        assert loaded.stage1_iter == bundle.stage1_iter
        assert loaded.stage2_iter == bundle.stage2_iter
        assert loaded.optimizer_steps == bundle.optimizer_steps
        assert loaded.rng.bit_generator.state == bundle.rng.bit_generator.state
        assert loaded.config == bundle.config
        for name in ("g_n", "d_n"):
            assert (
                loaded.optimizers[name].param_groups[0]["lr"]
                == bundle.optimizers[name].param_groups[0]["lr"]
            )

    def test_manifest_contents(self, tiny_config, tiny_data, tmp_path):
        bundle = self._trained(tiny_config, tiny_data)
        path = save_checkpoint(bundle, tmp_path / "ck")
        manifest = json.loads(path.read_text())
        assert manifest["version"] == CHECKPOINT_VERSION
        assert manifest["stage"] == "stage2"
        assert manifest["iteration"] == bundle.stage2_iter
        assert manifest["config_digest"] == config_digest(tiny_config)
        assert set(manifest["digests"]) == {"g_n", "g_e", "d_n", "d_e"}

    def test_wrong_image_size_rejected(self, tiny_config, tiny_data, tmp_path):
        bundle = self._trained(tiny_config, tiny_data)
        save_checkpoint(bundle, tmp_path / "ck")
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "ck", expected_image_size=96)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "nothing")

    def test_corrupt_manifest(self, tiny_config, tiny_data, tmp_path):
        bundle = self._trained(tiny_config, tiny_data)
        path = save_checkpoint(bundle, tmp_path / "ck")
        path.write_text("{not json")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_version_mismatch(self, tiny_config, tiny_data, tmp_path):
        bundle = self._trained(tiny_config, tiny_data)
        path = save_checkpoint(bundle, tmp_path / "ck")
        manifest = json.loads(path.read_text())
        manifest["version"] = CHECKPOINT_VERSION + 1
        path.write_text(json.dumps(manifest))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_missing_blob(self, tiny_config, tiny_data, tmp_path):
        bundle = self._trained(tiny_config, tiny_data)
        save_checkpoint(bundle, tmp_path / "ck")
        (tmp_path / "ck" / "g_e.pt").unlink()
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")

    def test_tampered_blob_digest_mismatch(self, tiny_config, tiny_data, tmp_path):
        bundle = self._trained(tiny_config, tiny_data)
        save_checkpoint(bundle, tmp_path / "ck")
        other = build_bundle(dataclasses.replace(tiny_config, seed=123), tiny_data.n_id)
        payload = {"model": other.g_n.state_dict(), "optimizer": None}
        torch.save(payload, tmp_path / "ck" / "g_n.pt")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "ck")


class TestResume:
    def test_mid_stage2_resume_matches_uninterrupted(self, tiny_config, tiny_data, tmp_path):
        logger_a = ListLogger()
        run_variant(tiny_config, tiny_data, logger=logger_a)
        final_a = run_variant(tiny_config, tiny_data).parameter_digests()

        short = dataclasses.replace(tiny_config, stage2_iters=7)
        bundle_b = run_variant(short, tiny_data, logger=ListLogger())
        assert bundle_b.stage2_iter == 7
        save_checkpoint(bundle_b, tmp_path / "mid")

        resumed = load_checkpoint(tmp_path / "mid")
        logger_b = ListLogger()
        train_stage_two(tiny_config, tiny_data, resumed, logger=logger_b)
        assert resumed.stage2_iter == tiny_config.stage2_iters

        next_a = next(e for e in logger_a.entries if (e["stage"], e["iteration"]) == (2, 8))
        next_b = logger_b.entries[0]
        assert next_b["iteration"] == 8
        assert next_a == next_b  # every float identical
        assert resumed.parameter_digests() == final_a

    def test_run_variant_skips_finished_stage1(self, tiny_config, tiny_data, tmp_path):
        bundle = build_bundle(tiny_config, tiny_data.n_id)
        train_stage_one(tiny_config, tiny_data, bundle)
        save_checkpoint(bundle, tmp_path / "s1")
        resumed = load_checkpoint(tmp_path / "s1")
        run_variant(tiny_config, tiny_data, bundle=resumed)
        assert resumed.stage1_iter == tiny_config.stage1_iters
        assert resumed.stage2_iter == tiny_config.stage2_iters


class TestNonFiniteAbort:
    def test_abort_with_diagnostic_checkpoint(self, tiny_config, tiny_data, tmp_path):
        bundle = build_bundle(tiny_config, tiny_data.n_id)
        with torch.no_grad():
            for p in bundle.g_n.parameters():
                p.fill_(float("nan"))
        with pytest.raises(TrainingError, match="non-finite"):
            train_stage_one(tiny_config, tiny_data, bundle, diagnostics_dir=tmp_path)
        assert (tmp_path / "diagnostic" / "manifest.json").exists()

    def test_abort_without_diagnostics_dir(self, tiny_config, tiny_data):
        bundle = build_bundle(tiny_config, tiny_data.n_id)
        with torch.no_grad():
            for p in bundle.g_n.parameters():
                p.fill_(float("inf"))
        with pytest.raises(TrainingError):
            train_stage_one(tiny_config, tiny_data, bundle)


class TestTrainLogger:
    def test_append_and_exact_once(self, tmp_path, tiny_config, tiny_data):
        path = tmp_path / "train.jsonl"
        logger = TrainLogger(path)
        run_variant(tiny_config, tiny_data, logger=logger)
        logger.close()
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(lines) == tiny_config.stage1_iters + tiny_config.stage2_iters
        seen = [(e["stage"], e["iteration"]) for e in lines]
        assert len(set(seen)) == len(seen)
        assert seen == sorted(seen)

    def test_resume_truncates(self, tmp_path):
        path = tmp_path / "train.jsonl"
        logger = TrainLogger(path)
        for stage, it in [(1, 1), (1, 2), (2, 1), (2, 2), (2, 3)]:
            logger.log(stage, it, {"g_n": 0.0})
        logger.close()
        logger = TrainLogger(path, resume_point=(2, 1))
        logger.log(2, 2, {"g_n": 1.0})
        logger.close()
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert [(e["stage"], e["iteration"]) for e in lines] == [(1, 1), (1, 2), (2, 1), (2, 2)]
        assert lines[-1]["g_n"] == 1.0

    def test_fresh_logger_truncates_stale_file(self, tmp_path):
        path = tmp_path / "train.jsonl"
        path.write_text('{"stage": 1, "iteration": 1}\n')
        TrainLogger(path).close()
        assert path.read_text() == ""
