"""Two-stage adversarial training.

Stage 1 trains only the normalizer pair (G_N, D_N), alternating one
discriminator and one generator update per iteration, with D_N's real
samples drawn from the frontal-only pool. Stage 2 trains all four networks
with the normalizer pair's learning rate cut to a quarter, cycling four
generator updates then one discriminator update, and adds the masked
reconstruction and self-cycle regularizers.

Batches can optionally be hue-rotated per sample (color_jitter), with an
input and its reconstruction target always shifted together; small closed
identity sets otherwise let the editor memorize per-identity color instead
of learning to carry it through the bottleneck.

Every run is driven by a single numpy Generator carried in the bundle and
serialized into checkpoints, so fixed (seed, config, data) reproduces
parameters bit for bit and resumed runs continue exactly where they left
off.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses
from .dataset import FaceDataset, N_POSES, sample_batch
from .losses import LossWeights
from .networks import Discriminator, EncoderConfig, Generator, init_weights

CHECKPOINT_VERSION = 1
VARIANTS = ("full", "single_stage", "no_regularizers")

NETWORK_NAMES = ("g_n", "g_e", "d_n", "d_e")


class ConfigError(ValueError):
    """Bad configuration or mismatched artifacts."""


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or version-mismatched checkpoint."""


class TrainingError(RuntimeError):
    """Training diverged or hit a non-finite loss."""


@dataclass(frozen=True)
class TrainConfig:
    stage1_iters: int = 20000
    stage2_iters: int = 20000
    batch_size: int = 24
    lr: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    stage2_gn_lr_factor: float = 0.25
    g_steps_per_d_step: int = 4
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 1
    variant: str = "full"
    image_size: int = 96
    base_channels: int = 32
    n_blocks: int = 5
    bottleneck_dim: int = 256
    d_base_channels: int | None = None  # discriminator width; None = base_channels
    color_jitter: float = 0.0  # max hue rotation applied to training batches

    def validate(self) -> None:
        if self.stage1_iters < 0 or self.stage2_iters < 0:
            raise ConfigError("iteration budgets must be >= 0")
        if not 0.0 <= self.color_jitter <= 0.5:
            raise ConfigError("color_jitter must lie in [0, 0.5]")
        if self.batch_size < 1 or self.g_steps_per_d_step < 1:
            raise ConfigError("batch_size and g_steps_per_d_step must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be > 0")
        if not 0.0 < self.stage2_gn_lr_factor <= 1.0:
            raise ConfigError("stage2_gn_lr_factor must lie in (0, 1]")
        for b in (self.adam_beta1, self.adam_beta2):
            if not 0.0 <= b < 1.0:
                raise ConfigError("Adam betas must lie in [0, 1)")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}, expected {VARIANTS}")
        try:
            self.weights.validate()
            self.encoder_config().validate()
            self.discriminator_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size,
            base_channels=self.base_channels,
            n_blocks=self.n_blocks,
            bottleneck_dim=self.bottleneck_dim,
        )

    def discriminator_config(self) -> EncoderConfig:
        return EncoderConfig(
            image_size=self.image_size,
            base_channels=self.d_base_channels or self.base_channels,
            n_blocks=self.n_blocks,
            bottleneck_dim=self.bottleneck_dim,
        )

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = {"lambda_rec": self.weights.lambda_rec, "lambda_csc": self.weights.lambda_csc}
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        w = obj.pop("weights", {})
        cfg = cls(weights=LossWeights(**w), **obj)
        cfg.validate()
        return cfg


def config_digest(config: TrainConfig) -> str:
    blob = json.dumps(config.to_json(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def parameter_digest(module: torch.nn.Module) -> str:
    """sha256 over the module's parameters in a canonical order."""
    h = hashlib.sha256()
    sd = module.state_dict()
    for key in sorted(sd):
        t = sd[key].detach().cpu().contiguous()
        h.update(key.encode())
        h.update(str(t.dtype).encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def _derived_seeds(seed: int):
    """(per-network init seeds, data-sampling seed sequence)."""
    children = np.random.SeedSequence(seed).spawn(len(NETWORK_NAMES) + 1)
    net_seeds = {}
    for name, child in zip(NETWORK_NAMES, children):
        a, b = child.generate_state(2)
        net_seeds[name] = int(a) | (int(b) << 32)
    return net_seeds, children[-1]


@dataclass
class ModelBundle:
    g_n: Generator
    g_e: Generator
    d_n: Discriminator
    d_e: Discriminator
    config: TrainConfig
    n_id: int
    rng: np.random.Generator
    stage: str = "stage1"  # stage1 | stage2
    stage1_iter: int = 0
    stage2_iter: int = 0
    optimizers: dict = field(default_factory=dict)
    optimizer_steps: dict = field(default_factory=lambda: {n: 0 for n in NETWORK_NAMES})

    def networks(self) -> dict[str, torch.nn.Module]:
        return {"g_n": self.g_n, "g_e": self.g_e, "d_n": self.d_n, "d_e": self.d_e}

    def parameter_digests(self) -> dict[str, str]:
        return {name: parameter_digest(net) for name, net in self.networks().items()}


def build_bundle(config: TrainConfig, n_id: int) -> ModelBundle:
    """Fresh networks and RNG, all seeded from config.seed."""
    config.validate()
    if n_id < 2:
        raise ConfigError("need at least 2 identities")
    enc = config.encoder_config()
    dcfg = config.discriminator_config()
    net_seeds, data_seed = _derived_seeds(config.seed)
    g_n = Generator(enc, in_channels=3)
    g_e = Generator(enc, in_channels=6, code_dim=N_POSES)
    d_n = Discriminator(dcfg, n_identities=n_id)
    d_e = Discriminator(dcfg, n_identities=n_id, with_pose_head=True)
    for name, net in (("g_n", g_n), ("g_e", g_e), ("d_n", d_n), ("d_e", d_e)):
        init_weights(net, net_seeds[name])
    rng = np.random.default_rng(data_seed)
    stage = "stage2" if config.variant == "single_stage" else "stage1"
    return ModelBundle(
        g_n=g_n, g_e=g_e, d_n=d_n, d_e=d_e,
        config=config, n_id=n_id, rng=rng, stage=stage,
    )


def _adam(net: torch.nn.Module, lr: float, config: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(
        net.parameters(), lr=lr, betas=(config.adam_beta1, config.adam_beta2)
    )


def _ensure_stage1_optimizers(bundle: ModelBundle) -> None:
    cfg = bundle.config
    if "g_n" not in bundle.optimizers:
        bundle.optimizers["g_n"] = _adam(bundle.g_n, cfg.lr, cfg)
        bundle.optimizers["d_n"] = _adam(bundle.d_n, cfg.lr, cfg)


def _ensure_stage2_optimizers(bundle: ModelBundle) -> None:
    """Stage-2 optimizer set.

    For the two-stage variants the normalizer pair keeps its stage-1 Adam
    state and only the learning rate drops; the editor pair starts fresh.
    single_stage runs everything at the full rate.
    """
    cfg = bundle.config
    factor = 1.0 if cfg.variant == "single_stage" else cfg.stage2_gn_lr_factor
    if "g_n" not in bundle.optimizers:
        bundle.optimizers["g_n"] = _adam(bundle.g_n, cfg.lr * factor, cfg)
        bundle.optimizers["d_n"] = _adam(bundle.d_n, cfg.lr * factor, cfg)
    else:
        for name in ("g_n", "d_n"):
            for group in bundle.optimizers[name].param_groups:
                group["lr"] = cfg.lr * factor
    if "g_e" not in bundle.optimizers:
        bundle.optimizers["g_e"] = _adam(bundle.g_e, cfg.lr, cfg)
        bundle.optimizers["d_e"] = _adam(bundle.d_e, cfg.lr, cfg)


def _zero_all(bundle: ModelBundle) -> None:
    for net in bundle.networks().values():
        net.zero_grad(set_to_none=True)


def _step(bundle: ModelBundle, names: tuple[str, ...]) -> None:
    for name in names:
        bundle.optimizers[name].step()
        bundle.optimizer_steps[name] += 1


class _NonFiniteLoss(Exception):
    def __init__(self, value: float):
        super().__init__(value)
        self.value = value


def _require_finite(total: torch.Tensor) -> float:
    value = float(total.item())
    if not math.isfinite(value):
        raise _NonFiniteLoss(value)
    return value


def _abort_non_finite(exc: _NonFiniteLoss, bundle: ModelBundle, diagnostics_dir):
    where = ""
    if diagnostics_dir is not None:
        path = Path(diagnostics_dir) / "diagnostic"
        save_checkpoint(bundle, path)
        where = f"; diagnostic checkpoint written to {path}"
    raise TrainingError(f"non-finite training loss {exc.value}{where}") from None


def _codes_tensor(code_indices: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.eye(N_POSES, dtype=np.float32)[code_indices])


def _rotate_hue(images: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Per-sample hue rotation of [-1, 1] RGB batches.

    Value and saturation are preserved, so gray pixels (including the zero
    rows that pad unpaired reconstruction targets) come back unchanged.
    """
    u = np.clip((images.astype(np.float64) + 1.0) / 2.0, 0.0, 1.0)
    r, g, b = u[:, 0], u[:, 1], u[:, 2]
    v = u.max(axis=1)
    c = v - u.min(axis=1)
    s = np.where(v > 0, c / np.where(v > 0, v, 1.0), 0.0)
    safe = np.where(c > 0, c, 1.0)
    rc, gc, bc = (v - r) / safe, (v - g) / safe, (v - b) / safe
    h = np.where(v == r, bc - gc, np.where(v == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(c > 0, (h / 6.0) % 1.0, 0.0)
    h = (h + deltas[:, None, None]) % 1.0
    sextant = np.floor(h * 6.0)
    f = h * 6.0 - sextant
    i = sextant.astype(np.int64) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    branches = [i == k for k in range(6)]
    out = np.stack(
        [
            np.select(branches, [v, q, p, p, t, v]),
            np.select(branches, [t, v, v, q, p, p]),
            np.select(branches, [p, p, t, v, v, q]),
        ],
        axis=1,
    )
    return (out * 2.0 - 1.0).astype(np.float32)


def _jitter(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    s = bundle.config.color_jitter
    if s <= 0.0:
        return images
    deltas = bundle.rng.uniform(-s, s, size=images.shape[0])
    return _rotate_hue(images, deltas)


class TrainLogger:
    """JSON-lines training log, one entry per iteration.

    On resume the file is rewritten up to the checkpoint's position so every
    iteration appears exactly once.
    """

    def __init__(self, path, resume_point: tuple[int, int] | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if resume_point is not None and self.path.exists():
            kept = []
            for line in self.path.read_text().splitlines():
                if not line.strip():
                    continue
                entry = json.loads(line)
                if (entry["stage"], entry["iteration"]) <= tuple(resume_point):
                    kept.append(line)
            self.path.write_text("".join(k + "\n" for k in kept))
        elif resume_point is None:
            self.path.write_text("")
        self._fh = self.path.open("a")

    def log(self, stage: int, iteration: int, report: dict) -> None:
        entry = {"stage": stage, "iteration": iteration}
        entry.update(report)
        self._fh.write(json.dumps(entry) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _stage1_iteration(bundle: ModelBundle, data: FaceDataset) -> dict:
    cfg = bundle.config

    # Discriminator update: real frontal faces vs frozen normalizer output.
    real = sample_batch(data, cfg.batch_size, True, bundle.rng)
    inputs = sample_batch(data, cfg.batch_size, False, bundle.rng)
    x_real = torch.from_numpy(_jitter(bundle, real.images))
    x_in = torch.from_numpy(_jitter(bundle, inputs.images))
    with torch.no_grad():
        fake = bundle.g_n(x_in)
    _zero_all(bundle)
    d_loss = losses.d_n_loss(
        bundle.d_n(x_real), torch.from_numpy(real.identities), bundle.d_n(fake)
    )
    _require_finite(d_loss)
    d_loss.backward()
    _step(bundle, ("d_n",))

    # Generator update on a fresh batch.
    inputs_g = sample_batch(data, cfg.batch_size, False, bundle.rng)
    x_g = torch.from_numpy(_jitter(bundle, inputs_g.images))
    _zero_all(bundle)
    g_loss = losses.g_n_loss(
        bundle.d_n(bundle.g_n(x_g)), torch.from_numpy(inputs_g.identities)
    )
    _require_finite(g_loss)
    g_loss.backward()
    _step(bundle, ("g_n",))

    return losses.make_report(
        d_n=d_loss.item(), g_n=g_loss.item(),
        total_d=d_loss.item(), total_g=g_loss.item(),
    )


def train_stage_one(
    config: TrainConfig,
    data: FaceDataset,
    bundle: ModelBundle,
    logger: TrainLogger | None = None,
    diagnostics_dir=None,
    on_iteration=None,
) -> ModelBundle:
    """Adversarial training of (G_N, D_N) alone; G_E and D_E are untouched."""
    config.validate()
    if bundle.stage != "stage1":
        if bundle.stage == "stage2":
            return bundle  # already past stage 1 (resume case)
        raise ConfigError(f"bundle in unexpected stage {bundle.stage!r}")
    _ensure_stage1_optimizers(bundle)
    while bundle.stage1_iter < config.stage1_iters:
        try:
            report = _stage1_iteration(bundle, data)
        except _NonFiniteLoss as exc:
            _abort_non_finite(exc, bundle, diagnostics_dir)
        bundle.stage1_iter += 1
        if logger is not None:
            logger.log(1, bundle.stage1_iter, report)
        if on_iteration is not None:
            on_iteration(bundle)
    bundle.stage = "stage2"
    return bundle


def _paired_targets(
    data: FaceDataset, identities: np.ndarray, code_indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Ground-truth images and masks at the requested poses.

    Unpaired samples get zero masks, so they contribute nothing to the
    reconstruction term; returns (targets, masks, any_paired).
    """
    b = len(identities)
    size = data.image_size
    targets = np.zeros((b, 3, size, size), dtype=np.float32)
    masks = np.zeros((b, size, size), dtype=np.float32)
    any_paired = False
    for i in range(b):
        idx = data.pair_lookup(int(identities[i]), int(code_indices[i]))
        if idx is not None:
            targets[i] = data.images[idx]
            masks[i] = data.masks[idx]
            any_paired = True
    return targets, masks, any_paired


def _stage2_generator_step(bundle: ModelBundle, data: FaceDataset) -> dict:
    cfg = bundle.config
    batch = sample_batch(data, cfg.batch_size, False, bundle.rng)
    code_idx = bundle.rng.integers(0, N_POSES, size=cfg.batch_size)
    y_id = torch.from_numpy(batch.identities)
    y_p = torch.from_numpy(batch.pose_indices)
    c_star = torch.from_numpy(code_idx.astype(np.int64))
    codes = _codes_tensor(code_idx)

    targets, masks, any_paired = _paired_targets(data, batch.identities, code_idx)
    images = batch.images
    if cfg.color_jitter > 0.0:
        # input and its reconstruction target must shift hue together
        deltas = bundle.rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=len(images))
        images = _rotate_hue(images, deltas)
        targets = _rotate_hue(targets, deltas)
    x = torch.from_numpy(images)
    if cfg.variant == "no_regularizers":
        masks = np.ones_like(masks)
        weights = LossWeights(cfg.weights.lambda_rec, 0.0)
    else:
        weights = cfg.weights

    x_front = bundle.g_n(x)
    x_hat = bundle.g_e(torch.cat([x, x_front], dim=1), codes)
    gn_probs = bundle.d_n(x_front)
    ge_id_probs, ge_pose_probs = bundle.d_e(x_hat)

    _zero_all(bundle)
    total, report = losses.total_generator_loss(
        gn_probs, ge_pose_probs, ge_id_probs,
        y_id, y_p, c_star,
        x, x_hat, torch.from_numpy(masks),
        weights,
        paired_target=torch.from_numpy(targets) if any_paired else None,
    )
    _require_finite(total)
    total.backward()
    _step(bundle, ("g_n", "g_e"))
    return report


def _stage2_discriminator_step(bundle: ModelBundle, data: FaceDataset) -> dict:
    cfg = bundle.config
    frontal = sample_batch(data, cfg.batch_size, True, bundle.rng)
    anypose = sample_batch(data, cfg.batch_size, False, bundle.rng)
    inputs = sample_batch(data, cfg.batch_size, False, bundle.rng)
    code_idx = bundle.rng.integers(0, N_POSES, size=cfg.batch_size)

    x_frontal = torch.from_numpy(_jitter(bundle, frontal.images))
    x_any = torch.from_numpy(_jitter(bundle, anypose.images))
    x_in = torch.from_numpy(_jitter(bundle, inputs.images))
    codes = _codes_tensor(code_idx)
    with torch.no_grad():
        fake_front = bundle.g_n(x_in)
        fake_rot = bundle.g_e(torch.cat([x_in, fake_front], dim=1), codes)

    de_id_real, de_pose_real = bundle.d_e(x_any)
    _zero_all(bundle)
    total, report = losses.total_discriminator_loss(
        bundle.d_n(x_frontal), torch.from_numpy(frontal.identities),
        bundle.d_n(fake_front),
        de_id_real, torch.from_numpy(anypose.identities),
        de_pose_real, torch.from_numpy(anypose.pose_indices),
        bundle.d_e(fake_rot)[0],
    )
    _require_finite(total)
    total.backward()
    _step(bundle, ("d_n", "d_e"))
    return report


def stage2_cycle_position(iteration: int, g_steps_per_d_step: int) -> str:
    """'g' for the first g_steps_per_d_step slots of each cycle, then 'd'."""
    return "g" if iteration % (g_steps_per_d_step + 1) < g_steps_per_d_step else "d"


def train_stage_two(
    config: TrainConfig,
    data: FaceDataset,
    bundle: ModelBundle,
    logger: TrainLogger | None = None,
    diagnostics_dir=None,
    on_iteration=None,
) -> ModelBundle:
    """Joint training of all four networks on the 4:1 update cycle."""
    config.validate()
    if bundle.stage != "stage2":
        raise ConfigError("bundle has not completed stage 1")
    _ensure_stage2_optimizers(bundle)
    budget = config.stage2_iters
    if config.variant == "single_stage":
        budget = config.stage1_iters + config.stage2_iters
    while bundle.stage2_iter < budget:
        pos = stage2_cycle_position(bundle.stage2_iter, config.g_steps_per_d_step)
        try:
            if pos == "g":
                report = _stage2_generator_step(bundle, data)
            else:
                report = _stage2_discriminator_step(bundle, data)
        except _NonFiniteLoss as exc:
            _abort_non_finite(exc, bundle, diagnostics_dir)
        bundle.stage2_iter += 1
        if logger is not None:
            logger.log(2, bundle.stage2_iter, report)
        if on_iteration is not None:
            on_iteration(bundle)
    return bundle


def run_variant(
    config: TrainConfig,
    data: FaceDataset,
    logger: TrainLogger | None = None,
    diagnostics_dir=None,
    bundle: ModelBundle | None = None,
    on_iteration=None,
    on_stage1_done=None,
) -> ModelBundle:
    """Train a variant end to end, optionally resuming a loaded bundle.

    full and no_regularizers run both stages; single_stage runs the joint
    stage-2 loop from scratch for the combined budget at full learning
    rates, so total optimizer steps match the two-stage variants.
    """
    config.validate()
    if bundle is None:
        bundle = build_bundle(config, data.n_id)
    if config.variant != "single_stage":
        was_stage1 = bundle.stage == "stage1"
        train_stage_one(config, data, bundle, logger, diagnostics_dir, on_iteration)
        if was_stage1 and on_stage1_done is not None:
            on_stage1_done(bundle)
    train_stage_two(config, data, bundle, logger, diagnostics_dir, on_iteration)
    return bundle


# ---------------------------------------------------------------------------
# Checkpoints


def _atomic_write_bytes(path: Path, blob: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def save_checkpoint(bundle: ModelBundle, directory) -> Path:
    """Write one blob per network plus a digest-carrying manifest.

    Files are written via temp-then-rename, manifest last, so a checkpoint
    directory with a readable manifest is always complete.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    digests = {}
    for name, net in bundle.networks().items():
        opt = bundle.optimizers.get(name)
        payload = {
            "model": net.state_dict(),
            "optimizer": opt.state_dict() if opt is not None else None,
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        _atomic_write_bytes(directory / f"{name}.pt", buf.getvalue())
        digests[name] = parameter_digest(net)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "stage": bundle.stage,
        "iteration": bundle.stage1_iter if bundle.stage == "stage1" else bundle.stage2_iter,
        "stage1_iter": bundle.stage1_iter,
        "stage2_iter": bundle.stage2_iter,
        "n_id": bundle.n_id,
        "config": bundle.config.to_json(),
        "config_digest": config_digest(bundle.config),
        "rng_state": bundle.rng.bit_generator.state,
        "optimizer_steps": dict(bundle.optimizer_steps),
        "digests": digests,
    }
    path = directory / "manifest.json"
    _atomic_write_bytes(path, json.dumps(manifest, indent=1).encode())
    return path


def load_checkpoint(directory, expected_image_size: int | None = None) -> ModelBundle:
    """Rebuild a bundle from disk, verifying version and parameter digests."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise CheckpointError(f"no checkpoint manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest: {exc}") from exc
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {manifest.get('version')} != {CHECKPOINT_VERSION}"
        )
    try:
        config = TrainConfig.from_json(manifest["config"])
    except (KeyError, TypeError, ConfigError) as exc:
        raise CheckpointError(f"bad checkpoint config: {exc}") from exc
    if expected_image_size is not None and config.image_size != expected_image_size:
        raise ConfigError(
            f"checkpoint image_size {config.image_size} != expected {expected_image_size}"
        )

    bundle = build_bundle(config, int(manifest["n_id"]))
    bundle.stage = manifest["stage"]
    bundle.stage1_iter = int(manifest["stage1_iter"])
    bundle.stage2_iter = int(manifest["stage2_iter"])
    bundle.optimizer_steps = {k: int(v) for k, v in manifest["optimizer_steps"].items()}
    bundle.rng.bit_generator.state = manifest["rng_state"]

    for name, net in bundle.networks().items():
        blob_path = directory / f"{name}.pt"
        if not blob_path.exists():
            raise CheckpointError(f"missing parameter blob {blob_path}")
        try:
            payload = torch.load(blob_path, weights_only=False)
        except Exception as exc:
            raise CheckpointError(f"corrupt parameter blob {blob_path}: {exc}") from exc
        net.load_state_dict(payload["model"])
        if parameter_digest(net) != manifest["digests"][name]:
            raise CheckpointError(f"digest mismatch for {name}: checkpoint corrupt")
        if payload["optimizer"] is not None:
            # load_state_dict restores param_groups, learning rate included.
            opt = _adam(net, config.lr, config)
            opt.load_state_dict(payload["optimizer"])
            bundle.optimizers[name] = opt
    return bundle
