"""Shared fixtures.

Training fixtures are session scoped because each desk-budget run takes a
few minutes on one CPU core. Set LBGAN_TEST_CACHE=<dir> to reuse trained
checkpoints across local pytest invocations; the cache key includes the
config digest, so any config change invalidates it.
"""

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import pytest

from lbgan.dataset import FaceDataset, generate_synthetic_dataset
from lbgan.evaluation import EvalModels, evaluate_model, train_eval_models
from lbgan.training import (
    ModelBundle,
    TrainConfig,
    config_digest,
    load_checkpoint,
    run_variant,
    save_checkpoint,
)

N_IDENTITIES = 30
DESK = dict(
    image_size=32,
    base_channels=24,
    d_base_channels=8,
    n_blocks=3,
    bottleneck_dim=128,
    stage1_iters=2000,
    stage2_iters=4000,
    color_jitter=0.5,
)
HASH_TRACE_ITERS = 25  # stage-2 iterations with per-net digests recorded
MID_STAGE2_SAVE = 2001  # mid-cycle point used by the resume check


def desk_train_config(variant: str = "full", seed: int = 1) -> TrainConfig:
    return TrainConfig(variant=variant, seed=seed, **DESK)


class ListLogger:
    """Collects log entries in memory, mirroring TrainLogger.log."""

    def __init__(self):
        self.entries: list[dict] = []

    def log(self, stage: int, iteration: int, report: dict) -> None:
        entry = {"stage": stage, "iteration": iteration}
        entry.update(report)
        self.entries.append(entry)


@dataclass
class RunArtifacts:
    bundle: ModelBundle
    log: list[dict]
    ckpt_dir: Path
    initial_digests: dict
    post_stage1_digests: dict = field(default_factory=dict)
    stage2_hash_trace: list[dict] = field(default_factory=list)
    mid_ckpt: Path | None = None
    stage1_ckpt: Path | None = None
    duration_seconds: float = 0.0


def _cache_dir(label: str, config: TrainConfig) -> Path | None:
    root = os.environ.get("LBGAN_TEST_CACHE")
    if not root:
        return None
    return Path(root) / f"{label}_{config_digest(config)[:16]}"


def _run_instrumented(config: TrainConfig, data: FaceDataset, out: Path) -> RunArtifacts:
    logger = ListLogger()
    from lbgan.training import build_bundle

    bundle = build_bundle(config, data.n_id)
    art = RunArtifacts(
        bundle=bundle,
        log=logger.entries,
        ckpt_dir=out / "final",
        initial_digests=bundle.parameter_digests(),
    )

    def on_stage1_done(b: ModelBundle) -> None:
        art.post_stage1_digests = b.parameter_digests()
        art.stage1_ckpt = save_checkpoint(b, out / "stage1")

    def on_iteration(b: ModelBundle) -> None:
        if b.stage == "stage2" and 0 < b.stage2_iter <= HASH_TRACE_ITERS:
            art.stage2_hash_trace.append(
                {"iteration": b.stage2_iter, "digests": b.parameter_digests()}
            )
        if b.stage == "stage2" and b.stage2_iter == MID_STAGE2_SAVE:
            art.mid_ckpt = save_checkpoint(b, out / "mid")

    start = time.monotonic()
    run_variant(
        config,
        data,
        logger=logger,
        bundle=bundle,
        on_iteration=on_iteration,
        on_stage1_done=on_stage1_done,
    )
    art.duration_seconds = time.monotonic() - start
    save_checkpoint(bundle, art.ckpt_dir)
    return art


def _load_cached_run(cache: Path, out: Path) -> RunArtifacts:
    meta = json.loads((cache / "artifacts.json").read_text())
    bundle = load_checkpoint(cache / "final")
    art = RunArtifacts(
        bundle=bundle,
        log=meta["log"],
        ckpt_dir=cache / "final",
        initial_digests=meta["initial_digests"],
        post_stage1_digests=meta["post_stage1_digests"],
        stage2_hash_trace=meta["stage2_hash_trace"],
        duration_seconds=meta["duration_seconds"],
    )
    if (cache / "mid" / "manifest.json").exists():
        art.mid_ckpt = cache / "mid"
    if (cache / "stage1" / "manifest.json").exists():
        art.stage1_ckpt = cache / "stage1"
    return art


def _store_cached_run(cache: Path, art: RunArtifacts) -> None:
    cache.mkdir(parents=True, exist_ok=True)
    save_checkpoint(art.bundle, cache / "final")
    if art.mid_ckpt is not None:
        save_checkpoint(load_checkpoint(art.mid_ckpt), cache / "mid")
    if art.stage1_ckpt is not None:
        save_checkpoint(load_checkpoint(art.stage1_ckpt), cache / "stage1")
    (cache / "artifacts.json").write_text(
        json.dumps(
            {
                "log": art.log,
                "initial_digests": art.initial_digests,
                "post_stage1_digests": art.post_stage1_digests,
                "stage2_hash_trace": art.stage2_hash_trace,
                "duration_seconds": art.duration_seconds,
            }
        )
    )


def _trained_run(label: str, config: TrainConfig, data, tmp_path_factory) -> RunArtifacts:
    out = tmp_path_factory.mktemp(label)
    cache = _cache_dir(label, config)
    if cache is not None and (cache / "artifacts.json").exists():
        return _load_cached_run(cache, out)
    art = _run_instrumented(config, data, out)
    if cache is not None:
        _store_cached_run(cache, art)
    return art


# ---------------------------------------------------------------------------
# Datasets


@pytest.fixture(scope="session")
def train_data_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("data_train")
    generate_synthetic_dataset(N_IDENTITIES, 1, 32, out, split="train")
    return out


@pytest.fixture(scope="session")
def test_data_dir(tmp_path_factory) -> Path:
    out = tmp_path_factory.mktemp("data_test")
    generate_synthetic_dataset(N_IDENTITIES, 2, 32, out, split="test")
    return out


@pytest.fixture(scope="session")
def train_data(train_data_dir) -> FaceDataset:
    return FaceDataset.load(train_data_dir)


@pytest.fixture(scope="session")
def test_data(test_data_dir) -> FaceDataset:
    return FaceDataset.load(test_data_dir)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory) -> FaceDataset:
    out = tmp_path_factory.mktemp("data_tiny")
    generate_synthetic_dataset(4, 3, 16, out)
    return FaceDataset.load(out)


@pytest.fixture(scope="session")
def tiny_config() -> TrainConfig:
    return TrainConfig(
        image_size=16,
        base_channels=8,
        n_blocks=2,
        bottleneck_dim=32,
        stage1_iters=6,
        stage2_iters=12,
        batch_size=4,
        seed=5,
    )


# ---------------------------------------------------------------------------
# Trained models (desk profile)


@pytest.fixture(scope="session")
def full_run(train_data, tmp_path_factory) -> RunArtifacts:
    return _trained_run("full_a", desk_train_config("full"), train_data, tmp_path_factory)


@pytest.fixture(scope="session")
def full_run_b(train_data, tmp_path_factory) -> RunArtifacts:
    return _trained_run("full_b", desk_train_config("full"), train_data, tmp_path_factory)


@pytest.fixture(scope="session")
def single_stage_run(train_data, tmp_path_factory) -> RunArtifacts:
    return _trained_run(
        "single_stage", desk_train_config("single_stage"), train_data, tmp_path_factory
    )


@pytest.fixture(scope="session")
def no_regularizers_run(train_data, tmp_path_factory) -> RunArtifacts:
    return _trained_run(
        "no_regularizers", desk_train_config("no_regularizers"), train_data, tmp_path_factory
    )


@pytest.fixture(scope="session")
def full_bundle(full_run) -> ModelBundle:
    return full_run.bundle


# ---------------------------------------------------------------------------
# Evaluation


@pytest.fixture(scope="session")
def eval_models(train_data) -> EvalModels:
    return train_eval_models(train_data, seed=7)


def _cached_report(label, bundle, config, train_data, test_data, eval_models):
    from lbgan.evaluation import EvalReport

    cache = _cache_dir(f"report_{label}", config)
    if cache is not None and (cache / "report.json").exists():
        return EvalReport.from_json(json.loads((cache / "report.json").read_text()))
    report = evaluate_model(
        bundle, train_data, test_data, models=eval_models, variant=label
    )
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
        (cache / "report.json").write_text(json.dumps(report.to_json()))
    return report


@pytest.fixture(scope="session")
def full_report(full_run, train_data, test_data, eval_models):
    return _cached_report(
        "full", full_run.bundle, desk_train_config("full"), train_data, test_data, eval_models
    )


@pytest.fixture(scope="session")
def all_reports(full_report, single_stage_run, no_regularizers_run, train_data, test_data, eval_models):
    reports = {"full": full_report}
    for label, run in (
        ("single_stage", single_stage_run),
        ("no_regularizers", no_regularizers_run),
    ):
        reports[label] = _cached_report(
            label, run.bundle, desk_train_config(label), train_data, test_data, eval_models
        )
    return reports
