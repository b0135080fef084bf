"""Measurement stack for trained models.

Locally trained stand-ins for the third-party tools the protocols assume: a
small identity embedder trained on near-frontal real images (so, like its
big-world counterpart, it degrades on extreme profiles), a yaw regressor
restricted to +/-30 degrees, and a 13-way pose-bin classifier. On top of
those: rank-1 identification per pose bin with a one-image-per-identity
gallery, head-pose error tables for genuine vs synthesized images, and the
variant comparison. Evaluation identities are disjoint from training
identities; the embedder and pose models never see generated images during
their own training.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .dataset import FRONTAL_INDEX, N_POSES, POSE_DEGREES, FaceDataset, build_mask
from .inference import code_for_degrees, frontalize, rotate_batch
from .networks import EncoderConfig, _Encoder, editor_forward, init_weights, normalizer_forward

POSE_RANGE_LIMIT = 30  # yaw regressor training range, degrees
EMBEDDER_YAW_LIMIT = 30  # embedder sees only near-frontal training images
CONVERGENCE_ACCURACY = 0.95


class ProtocolError(ValueError):
    """Evaluation protocol violated (e.g. probe identity missing a gallery)."""


class _EvalNet(nn.Module):
    """Shared shape for all measurement models: encoder trunk + linear head."""

    def __init__(self, config: EncoderConfig, n_out: int):
        super().__init__()
        self.trunk = _Encoder(config, in_channels=3)
        self.head = nn.Linear(config.bottleneck_dim, n_out)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.trunk(x))


def _eval_net_config(image_size: int) -> EncoderConfig:
    return EncoderConfig(
        image_size=image_size, base_channels=16, n_blocks=3, bottleneck_dim=64
    )


def _batched_apply(fn, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    outs = []
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            x = torch.from_numpy(images[i : i + chunk])
            outs.append(fn(x).numpy())
    return np.concatenate(outs, axis=0)


@dataclass
class EmbedderModel:
    net: _EvalNet
    embedding_dim: int
    train_accuracy: float
    converged: bool

    def embed(self, images: np.ndarray) -> np.ndarray:
        return _batched_apply(self.net.features, np.asarray(images, dtype=np.float32))


@dataclass
class PoseEstimatorModel:
    net: _EvalNet
    range_limit: float

    def predict_degrees(self, images: np.ndarray) -> np.ndarray:
        out = _batched_apply(self.net, np.asarray(images, dtype=np.float32))
        return out[:, 0] * 90.0


@dataclass
class PoseClassifierModel:
    net: _EvalNet
    train_accuracy: float

    def predict_bins(self, images: np.ndarray) -> np.ndarray:
        logits = _batched_apply(self.net, np.asarray(images, dtype=np.float32))
        return logits.argmax(axis=1)


def train_embedder(
    data: FaceDataset, seed: int = 0, max_iters: int = 600, lr: float = 2e-3
) -> EmbedderModel:
    """Identity classifier on near-frontal real images; embeddings come from
    the penultimate layer. Converged means >= 95% accuracy on the real
    frontal images; past the budget the model is returned flagged."""
    if data.n_id < 2:
        raise ProtocolError("need at least 2 identities to train an embedder")
    keep = np.abs(np.array([POSE_DEGREES[p] for p in data.pose_indices])) <= EMBEDDER_YAW_LIMIT
    images = data.images[keep]
    labels = data.identities[keep]
    net = _EvalNet(_eval_net_config(data.image_size), data.n_id)
    init_weights(net, seed)

    x = torch.from_numpy(images)
    y = torch.from_numpy(labels)
    frontal = torch.from_numpy(data.images[data.frontal_indices])
    frontal_y = torch.from_numpy(data.identities[data.frontal_indices])
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    accuracy = 0.0
    for _ in range(max_iters):
        logits = net(x)
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            accuracy = float((net(frontal).argmax(1) == frontal_y).float().mean())
        if accuracy >= 0.99:
            break
    cfg = net.trunk.config
    return EmbedderModel(
        net=net,
        embedding_dim=cfg.bottleneck_dim,
        train_accuracy=accuracy,
        converged=accuracy >= CONVERGENCE_ACCURACY,
    )


def train_pose_regressor(
    data: FaceDataset, seed: int = 0, max_iters: int = 600, lr: float = 2e-3
) -> PoseEstimatorModel:
    """Continuous yaw regressor trained on real images within +/-30 degrees
    only, mirroring a pose tool with a restricted training range."""
    degrees = np.array([POSE_DEGREES[p] for p in data.pose_indices], dtype=np.float32)
    keep = np.abs(degrees) <= POSE_RANGE_LIMIT
    net = _EvalNet(_eval_net_config(data.image_size), 1)
    init_weights(net, seed)
    x = torch.from_numpy(data.images[keep])
    y = torch.from_numpy(degrees[keep] / 90.0).unsqueeze(1)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(max_iters):
        loss = F.mse_loss(net(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    return PoseEstimatorModel(net=net, range_limit=POSE_RANGE_LIMIT)


def train_pose_classifier(
    data: FaceDataset, seed: int = 0, max_iters: int = 600, lr: float = 2e-3
) -> PoseClassifierModel:
    """13-way pose-bin classifier on real images at all poses."""
    net = _EvalNet(_eval_net_config(data.image_size), N_POSES)
    init_weights(net, seed)
    x = torch.from_numpy(data.images)
    y = torch.from_numpy(data.pose_indices)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    accuracy = 0.0
    for _ in range(max_iters):
        logits = net(x)
        loss = F.cross_entropy(logits, y)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with torch.no_grad():
            accuracy = float((logits.argmax(1) == y).float().mean())
        if accuracy >= 0.999:
            break
    return PoseClassifierModel(net=net, train_accuracy=accuracy)


@dataclass
class EvalModels:
    embedder: EmbedderModel
    pose_regressor: PoseEstimatorModel
    pose_classifier: PoseClassifierModel


def train_eval_models(train_data: FaceDataset, seed: int = 0) -> EvalModels:
    children = np.random.SeedSequence(seed).spawn(3)
    seeds = [int(c.generate_state(1)[0]) for c in children]
    return EvalModels(
        embedder=train_embedder(train_data, seeds[0]),
        pose_regressor=train_pose_regressor(train_data, seeds[1]),
        pose_classifier=train_pose_classifier(train_data, seeds[2]),
    )


def rank1_identification(
    embedder: EmbedderModel,
    gallery_images: np.ndarray,
    gallery_ids: np.ndarray,
    probe_images: np.ndarray,
    probe_ids: np.ndarray,
    probe_degrees: np.ndarray,
):
    """Nearest-gallery match by cosine similarity, scored per |yaw| bin.

    Duplicate gallery entries for one identity are collapsed by taking the
    best-matching one, so adding duplicates cannot change the result.
    Returns (rates per bin, per-probe match records).
    """
    gallery_ids = np.asarray(gallery_ids)
    probe_ids = np.asarray(probe_ids)
    probe_degrees = np.asarray(probe_degrees)
    missing = set(probe_ids.tolist()) - set(gallery_ids.tolist())
    if missing:
        raise ProtocolError(f"probe identities missing from gallery: {sorted(missing)}")

    def _unit(v):
        return v / np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-12)

    g = _unit(embedder.embed(gallery_images))
    p = _unit(embedder.embed(probe_images))
    sim = p @ g.T  # (n_probes, n_gallery)

    unique_ids = np.unique(gallery_ids)
    # Best similarity per identity; dedup contract.
    per_id = np.stack(
        [sim[:, gallery_ids == uid].max(axis=1) for uid in unique_ids], axis=1
    )
    predicted = unique_ids[per_id.argmax(axis=1)]

    records = []
    hits_by_bin: dict[int, list[int]] = {}
    for i in range(len(probe_ids)):
        correct = int(predicted[i] == probe_ids[i])
        bin_key = int(abs(probe_degrees[i]))
        hits_by_bin.setdefault(bin_key, []).append(correct)
        records.append(
            {
                "probe_index": i,
                "true_id": int(probe_ids[i]),
                "predicted_id": int(predicted[i]),
                "pose_degrees": float(probe_degrees[i]),
                "correct": correct,
            }
        )
    rates = {b: float(np.mean(h)) for b, h in sorted(hits_by_bin.items())}
    return rates, records


def pose_error_table(
    estimator: PoseEstimatorModel,
    genuine: tuple[np.ndarray, np.ndarray],
    synthesized: tuple[np.ndarray, np.ndarray],
    notes: list[str] | None = None,
):
    """Mean |predicted - target| per |yaw| bin, genuine and synthesized.

    Bins outside the estimator's training range are dropped. Off-grid
    requested angles land in a separate interpolated-bin table.
    """
    limit = estimator.range_limit

    def _table(images, targets, allow_offgrid):
        targets = np.asarray(targets, dtype=np.float64)
        keep = np.abs(targets) <= limit
        if not keep.any():
            return {}, {}
        preds = estimator.predict_degrees(np.asarray(images)[keep])
        errs = np.abs(preds - targets[keep])
        on_grid: dict[int, list[float]] = {}
        off_grid: dict[float, list[float]] = {}
        for err, t in zip(errs, targets[keep]):
            if float(t).is_integer() and int(abs(t)) in _ABS_GRID:
                on_grid.setdefault(int(abs(t)), []).append(float(err))
            elif allow_offgrid:
                off_grid.setdefault(abs(float(t)), []).append(float(err))
        return (
            {b: float(np.mean(v)) for b, v in sorted(on_grid.items())},
            {b: float(np.mean(v)) for b, v in sorted(off_grid.items())},
        )

    genuine_mae, _ = _table(*genuine, allow_offgrid=False)
    synth_mae, synth_interp = _table(*synthesized, allow_offgrid=True)
    if notes is not None:
        for b in sorted(set(genuine_mae) ^ set(synth_mae)):
            notes.append(f"pose bin {b} present in only one of genuine/synthesized")
    return genuine_mae, synth_mae, synth_interp


_ABS_GRID = {abs(d) for d in POSE_DEGREES}


@dataclass
class EvalReport:
    variant: str
    rank1_frontalized: dict
    rank1_raw: dict
    rank1_frontalized_mean: float
    rank1_raw_mean: float
    pose_mae_genuine: dict
    pose_mae_synth: dict
    pose_mae_synth_interp: dict
    pose_bin_accuracy: float
    masked_rec_rmse: float
    embedder_train_accuracy: float
    embedder_converged: bool
    embedding_dim: int
    n_test_identities: int
    notes: list = field(default_factory=list)
    probe_records: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = {
            "variant": self.variant,
            "rank1_frontalized": {str(k): v for k, v in self.rank1_frontalized.items()},
            "rank1_raw": {str(k): v for k, v in self.rank1_raw.items()},
            "rank1_frontalized_mean": self.rank1_frontalized_mean,
            "rank1_raw_mean": self.rank1_raw_mean,
            "pose_mae_genuine": {str(k): v for k, v in self.pose_mae_genuine.items()},
            "pose_mae_synth": {str(k): v for k, v in self.pose_mae_synth.items()},
            "pose_mae_synth_interp": {str(k): v for k, v in self.pose_mae_synth_interp.items()},
            "pose_bin_accuracy": self.pose_bin_accuracy,
            "masked_rec_rmse": self.masked_rec_rmse,
            "embedder_train_accuracy": self.embedder_train_accuracy,
            "embedder_converged": self.embedder_converged,
            "embedding_dim": self.embedding_dim,
            "n_test_identities": self.n_test_identities,
            "notes": self.notes,
        }
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        def bins(table: dict) -> dict:
            out = {}
            for key, value in table.items():
                b = float(key)
                out[int(b) if b.is_integer() else b] = value
            return out

        return cls(
            variant=obj["variant"],
            rank1_frontalized=bins(obj["rank1_frontalized"]),
            rank1_raw=bins(obj["rank1_raw"]),
            rank1_frontalized_mean=obj["rank1_frontalized_mean"],
            rank1_raw_mean=obj["rank1_raw_mean"],
            pose_mae_genuine=bins(obj["pose_mae_genuine"]),
            pose_mae_synth=bins(obj["pose_mae_synth"]),
            pose_mae_synth_interp=bins(obj["pose_mae_synth_interp"]),
            pose_bin_accuracy=obj["pose_bin_accuracy"],
            masked_rec_rmse=obj["masked_rec_rmse"],
            embedder_train_accuracy=obj["embedder_train_accuracy"],
            embedder_converged=obj["embedder_converged"],
            embedding_dim=obj["embedding_dim"],
            n_test_identities=obj["n_test_identities"],
            notes=list(obj.get("notes", [])),
        )

    def format_table(self) -> str:
        bins = sorted(set(self.rank1_frontalized) | set(self.rank1_raw))
        lines = [f"variant: {self.variant}"]
        header = "rank-1        " + "".join(f"{b:>8}" for b in bins) + "    mean"
        lines.append(header)
        for name, rates, mean in (
            ("frontalized", self.rank1_frontalized, self.rank1_frontalized_mean),
            ("raw", self.rank1_raw, self.rank1_raw_mean),
        ):
            row = f"{name:<14}" + "".join(
                f"{rates.get(b, float('nan')):>8.3f}" for b in bins
            )
            lines.append(row + f"{mean:>8.3f}")
        pose_bins = sorted(set(self.pose_mae_genuine) | set(self.pose_mae_synth))
        lines.append("pose MAE (deg)" + "".join(f"{b:>8}" for b in pose_bins))
        for name, table in (("genuine", self.pose_mae_genuine), ("synthesized", self.pose_mae_synth)):
            lines.append(
                f"{name:<14}"
                + "".join(f"{table.get(b, float('nan')):>8.2f}" for b in pose_bins)
            )
        if self.pose_mae_synth_interp:
            interp = ", ".join(
                f"{b:g}: {v:.2f}" for b, v in sorted(self.pose_mae_synth_interp.items())
            )
            lines.append(f"interpolated-bin MAE (deg): {interp}")
        lines.append(f"pose-bin accuracy on generated images: {self.pose_bin_accuracy:.3f}")
        lines.append(f"masked reconstruction RMSE (self-pose): {self.masked_rec_rmse:.4f}")
        lines.append(
            f"embedder train accuracy {self.embedder_train_accuracy:.3f}"
            f" (converged: {self.embedder_converged}, dim {self.embedding_dim})"
        )
        for note in self.notes:
            lines.append(f"note: {note}")
        return "\n".join(lines)


def masked_reconstruction_error(bundle, data: FaceDataset) -> float:
    """Mean per-pixel masked RMSE of identity-matched rotation.

    Every record is rotated to its own pose (c* = y^p) and compared to
    itself inside its attention mask: sqrt(sum((x - x_hat)^2 * M) / (3 |M|)),
    averaged over records. Scale is the [-1, 1] intensity range.
    """
    out = rotate_batch(bundle, data.images, data.pose_indices)
    errs = []
    for i in range(len(data)):
        m = data.masks[i]
        count = float(m.sum())
        if count == 0:
            continue
        diff2 = ((data.images[i] - out[i]) ** 2 * m[None, :, :]).sum()
        errs.append(float(np.sqrt(diff2 / (3.0 * count))))
    return float(np.mean(errs))


def pose_bin_accuracy_on_generated(
    bundle, classifier: PoseClassifierModel, data: FaceDataset, chunk: int = 256
) -> float:
    """Fraction of generated images classified into their requested bin,
    over the full source-pose x target-pose cross of the test split."""
    hits = 0
    total = 0
    n = len(data)
    for target in range(N_POSES):
        out = rotate_batch(bundle, data.images, np.full(n, target))
        pred = classifier.predict_bins(out)
        hits += int((pred == target).sum())
        total += n
    return hits / total


def _offgrid_rotate(bundle, images: np.ndarray, target: float) -> np.ndarray:
    code = code_for_degrees(target).astype(np.float32)
    x = torch.from_numpy(np.asarray(images, dtype=np.float32))
    with torch.no_grad():
        x_front = normalizer_forward(bundle.g_n, x)
        out = editor_forward(bundle.g_e, x, x_front, code)
    return out.numpy()


INTERPOLATED_TARGETS = (-22.5, -7.5, 7.5, 22.5)


def evaluate_model(
    bundle,
    train_data: FaceDataset,
    test_data: FaceDataset,
    models: EvalModels | None = None,
    seed: int = 0,
    variant: str | None = None,
) -> EvalReport:
    """Run the full measurement protocol for one trained model.

    Gallery: the frontal image of each test identity. Probes: all
    non-frontal test images, scored raw and after rotation to 0 degrees
    through the full pipeline. Pose tables use targets within the
    regressor's range; the interpolated angles are scored separately.
    """
    if models is None:
        models = train_eval_models(train_data, seed)
    notes: list[str] = []
    if not models.embedder.converged:
        notes.append(
            f"embedder below convergence target: {models.embedder.train_accuracy:.3f}"
        )

    gallery_idx = test_data.frontal_indices
    gallery_images = test_data.images[gallery_idx]
    gallery_ids = test_data.identities[gallery_idx]

    probe_idx = np.flatnonzero(test_data.pose_indices != FRONTAL_INDEX)
    probe_images = test_data.images[probe_idx]
    probe_ids = test_data.identities[probe_idx]
    probe_degrees = np.array(
        [POSE_DEGREES[p] for p in test_data.pose_indices[probe_idx]], dtype=np.float64
    )

    rank1_raw, _ = rank1_identification(
        models.embedder, gallery_images, gallery_ids, probe_images, probe_ids, probe_degrees
    )
    frontalized = rotate_batch(
        bundle, probe_images, np.full(len(probe_idx), FRONTAL_INDEX)
    )
    rank1_front, probe_records = rank1_identification(
        models.embedder, gallery_images, gallery_ids, frontalized, probe_ids, probe_degrees
    )

    # Pose protocol: genuine test images vs rotations of test images, with
    # requested angle as the target label.
    genuine = (test_data.images, np.array(
        [POSE_DEGREES[p] for p in test_data.pose_indices], dtype=np.float64
    ))
    synth_images = []
    synth_targets = []
    for target_idx, target_deg in enumerate(POSE_DEGREES):
        if abs(target_deg) > models.pose_regressor.range_limit:
            continue
        out = rotate_batch(bundle, test_data.images, np.full(len(test_data), target_idx))
        synth_images.append(out)
        synth_targets.append(np.full(len(test_data), float(target_deg)))
    for target in INTERPOLATED_TARGETS:
        out = _offgrid_rotate(bundle, test_data.images, target)
        synth_images.append(out)
        synth_targets.append(np.full(len(test_data), float(target)))
    synthesized = (np.concatenate(synth_images), np.concatenate(synth_targets))
    mae_genuine, mae_synth, mae_interp = pose_error_table(
        models.pose_regressor, genuine, synthesized, notes
    )

    bin_acc = pose_bin_accuracy_on_generated(bundle, models.pose_classifier, test_data)
    rec_rmse = masked_reconstruction_error(bundle, test_data)

    return EvalReport(
        variant=variant or bundle.config.variant,
        rank1_frontalized=rank1_front,
        rank1_raw=rank1_raw,
        rank1_frontalized_mean=float(np.mean(list(rank1_front.values()))),
        rank1_raw_mean=float(np.mean(list(rank1_raw.values()))),
        pose_mae_genuine=mae_genuine,
        pose_mae_synth=mae_synth,
        pose_mae_synth_interp=mae_interp,
        pose_bin_accuracy=bin_acc,
        masked_rec_rmse=rec_rmse,
        embedder_train_accuracy=models.embedder.train_accuracy,
        embedder_converged=models.embedder.converged,
        embedding_dim=models.embedder.embedding_dim,
        n_test_identities=test_data.n_id,
        notes=notes,
    )


def save_report(report: EvalReport, directory) -> Path:
    """eval.json + eval.txt + per-probe CSV under the given directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    json_path = directory / f"eval_{report.variant}.json"
    json_path.write_text(json.dumps(report.to_json(), indent=1))
    (directory / f"eval_{report.variant}.txt").write_text(report.format_table() + "\n")
    csv_path = directory / f"probes_{report.variant}.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["probe_index", "true_id", "predicted_id", "pose_degrees", "correct"]
        )
        writer.writeheader()
        for rec in report.probe_records:
            writer.writerow(rec)
    return json_path


def ablation_compare(reports: dict[str, EvalReport]) -> dict:
    """Variant comparison: per-bin rank-1, means, and full-vs-ablation flags."""
    if "full" not in reports:
        raise ProtocolError("ablation comparison requires a 'full' report")
    bins = sorted(
        {b for rep in reports.values() for b in rep.rank1_frontalized}
    )
    table = {
        name: {b: rep.rank1_frontalized.get(b) for b in bins}
        for name, rep in reports.items()
    }
    means = {name: rep.rank1_frontalized_mean for name, rep in reports.items()}
    full = reports["full"]
    flags = {}
    violations = []
    for name, rep in reports.items():
        if name == "full":
            continue
        flags[name] = {}
        for b in bins:
            f = full.rank1_frontalized.get(b)
            v = rep.rank1_frontalized.get(b)
            ok = None if f is None or v is None else f >= v
            flags[name][b] = ok
            if ok is False:
                violations.append(f"full < {name} at bin {b}: {f:.3f} vs {v:.3f}")
    return {
        "bins": bins,
        "rank1": table,
        "means": means,
        "full_not_worse_per_bin": flags,
        "full_beats_means": {
            name: means["full"] >= m for name, m in means.items() if name != "full"
        },
        "violations": violations,
    }


def format_comparison_table(cmp: dict) -> str:
    bins = cmp["bins"]
    lines = ["rank-1 by |yaw| bin" + "".join(f"{b:>8}" for b in bins) + "    mean"]
    for name, rates in cmp["rank1"].items():
        row = f"{name:<19}" + "".join(
            f"{(rates[b] if rates[b] is not None else float('nan')):>8.3f}" for b in bins
        )
        lines.append(row + f"{cmp['means'][name]:>8.3f}")
    for v in cmp["violations"]:
        lines.append(f"violation: {v}")
    if not cmp["violations"]:
        lines.append("no bin-level violations")
    return "\n".join(lines)
