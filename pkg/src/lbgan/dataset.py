"""Synthetic multi-view face data.

Pose grid and remote codes, landmark-based preprocessing, attention masks,
and a deterministic procedural face renderer that supplies paired views of
every identity at all 13 yaw angles. The renderer draws parametric 2D face
glyphs; yaw is simulated by sin-proportional horizontal feature travel,
far-eye occlusion past +/-60 degrees, and contour foreshortening. This keeps
landmarks analytic and gives exact multi-view pairing, which the masked
reconstruction losses need.
"""

from __future__ import annotations

import colorsys
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

# 13 yaw bins, 15 degree steps, ascending.
POSE_DEGREES = (-90, -75, -60, -45, -30, -15, 0, 15, 30, 45, 60, 75, 90)
N_POSES = len(POSE_DEGREES)
FRONTAL_DEGREES = 0
FRONTAL_INDEX = POSE_DEGREES.index(0)

# Canonical alignment template, as fractions of image size: (row, col).
TEMPLATE_LEFT_EYE = (0.42, 0.31)
TEMPLATE_RIGHT_EYE = (0.42, 0.69)
TEMPLATE_MOUTH = (0.75, 0.50)

# Attention-mask patch edge lengths at the reference 96px resolution.
REFERENCE_SIZE = 96
EYE_PATCH = 15
MOUTH_PATCH = 20

MANIFEST_VERSION = 1

_DEGREES_TO_INDEX = {deg: i for i, deg in enumerate(POSE_DEGREES)}


def pose_to_index(degrees: int) -> int:
    """Map a yaw angle on the 15-degree grid to its 0-based bin index."""
    try:
        return _DEGREES_TO_INDEX[int(degrees)]
    except (KeyError, TypeError, ValueError):
        raise ValueError(
            f"invalid pose {degrees!r}: expected one of {POSE_DEGREES}"
        ) from None


def index_to_degrees(index: int) -> int:
    """Inverse of :func:`pose_to_index`."""
    if not 0 <= index < N_POSES:
        raise ValueError(f"invalid pose index {index!r}: expected 0..{N_POSES - 1}")
    return POSE_DEGREES[index]


def make_remote_code(target_index: int) -> np.ndarray:
    """One-hot pose-control vector with weight 1 at ``target_index``."""
    if not 0 <= target_index < N_POSES:
        raise ValueError(
            f"invalid code index {target_index!r}: expected 0..{N_POSES - 1}"
        )
    code = np.zeros(N_POSES, dtype=np.float64)
    code[target_index] = 1.0
    return code


def interpolate_codes(a: np.ndarray, b: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination (1-alpha)*a + alpha*b of two remote codes."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"invalid alpha {alpha!r}: expected value in [0, 1]")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != (N_POSES,) or b.shape != (N_POSES,):
        raise ValueError("remote codes must have length 13")
    return (1.0 - alpha) * a + alpha * b


def validate_remote_code(code: np.ndarray) -> np.ndarray:
    """Check non-negativity and unit sum; returns the code as float64."""
    code = np.asarray(code, dtype=np.float64)
    if code.shape != (N_POSES,):
        raise ValueError(f"remote code must have shape ({N_POSES},), got {code.shape}")
    if np.any(code < 0):
        raise ValueError("remote code entries must be non-negative")
    if abs(float(code.sum()) - 1.0) > 1e-6:
        raise ValueError("remote code entries must sum to 1")
    return code


@dataclass(frozen=True)
class LandmarkSet:
    """Eye centers and mouth center as float (row, col) pixel coordinates."""

    left_eye: tuple[float, float]
    right_eye: tuple[float, float]
    mouth: tuple[float, float]

    def as_array(self) -> np.ndarray:
        return np.array([self.left_eye, self.right_eye, self.mouth], dtype=np.float64)

    def within(self, height: int, width: int) -> bool:
        pts = self.as_array()
        return bool(
            np.all(pts[:, 0] >= 0)
            and np.all(pts[:, 0] <= height - 1)
            and np.all(pts[:, 1] >= 0)
            and np.all(pts[:, 1] <= width - 1)
        )

    def to_json(self) -> dict:
        return {
            "left_eye": [float(self.left_eye[0]), float(self.left_eye[1])],
            "right_eye": [float(self.right_eye[0]), float(self.right_eye[1])],
            "mouth": [float(self.mouth[0]), float(self.mouth[1])],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LandmarkSet":
        return cls(
            left_eye=(float(obj["left_eye"][0]), float(obj["left_eye"][1])),
            right_eye=(float(obj["right_eye"][0]), float(obj["right_eye"][1])),
            mouth=(float(obj["mouth"][0]), float(obj["mouth"][1])),
        )


def template_landmarks(image_size: int) -> LandmarkSet:
    """Canonical landmark positions at a given resolution."""
    s = float(image_size)
    return LandmarkSet(
        left_eye=(TEMPLATE_LEFT_EYE[0] * s, TEMPLATE_LEFT_EYE[1] * s),
        right_eye=(TEMPLATE_RIGHT_EYE[0] * s, TEMPLATE_RIGHT_EYE[1] * s),
        mouth=(TEMPLATE_MOUTH[0] * s, TEMPLATE_MOUTH[1] * s),
    )


def _fit_similarity(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares similarity transform mapping src points onto dst.

    Points are (row, col). Returns (A, t) with dst ~= A @ src + t, where A is
    a scaled rotation.
    """
    n = src.shape[0]
    design = np.zeros((2 * n, 4), dtype=np.float64)
    target = np.zeros(2 * n, dtype=np.float64)
    for i in range(n):
        y, x = src[i]
        design[2 * i] = [y, -x, 1.0, 0.0]
        design[2 * i + 1] = [x, y, 0.0, 1.0]
        target[2 * i] = dst[i, 0]
        target[2 * i + 1] = dst[i, 1]
    sol, *_ = np.linalg.lstsq(design, target, rcond=None)
    a, b, ty, tx = sol
    A = np.array([[a, -b], [b, a]], dtype=np.float64)
    t = np.array([ty, tx], dtype=np.float64)
    return A, t


def preprocess(
    image: np.ndarray, landmarks: LandmarkSet, image_size: int = REFERENCE_SIZE
) -> tuple[np.ndarray, LandmarkSet]:
    """Align a raw 8-bit RGB image to the canonical landmark template.

    Fits a similarity transform taking the eye and mouth landmarks onto the
    template, warps with bilinear sampling, and scales intensities with the
    exact linear map v / 127.5 - 1. Returns the aligned (3, H, W) float32
    image in [-1, 1] together with the transformed landmarks.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    if not landmarks.within(h, w):
        raise ValueError("landmarks fall outside the raw image bounds")
    eye_dist = math.dist(landmarks.left_eye, landmarks.right_eye)
    if eye_dist < 0.5:
        raise ValueError("degenerate landmarks: eye centers coincide")

    src = landmarks.as_array()
    dst = template_landmarks(image_size).as_array()
    A, t = _fit_similarity(src, dst)
    scale = math.hypot(A[0, 0], A[1, 0])
    if scale < 1e-8:
        raise ValueError("degenerate landmarks: alignment collapses to a point")

    # scipy maps output coords to input coords, so invert the fitted transform.
    A_inv = np.linalg.inv(A)
    offset = -A_inv @ t
    scaled = image.astype(np.float64) / 127.5 - 1.0
    out = np.empty((3, image_size, image_size), dtype=np.float64)
    for ch in range(3):
        out[ch] = ndimage.affine_transform(
            scaled[:, :, ch],
            A_inv,
            offset=offset,
            output_shape=(image_size, image_size),
            order=1,
            mode="nearest",
        )
    moved = (A @ src.T).T + t
    new_landmarks = LandmarkSet(
        left_eye=(float(moved[0, 0]), float(moved[0, 1])),
        right_eye=(float(moved[1, 0]), float(moved[1, 1])),
        mouth=(float(moved[2, 0]), float(moved[2, 1])),
    )
    return out.astype(np.float32), new_landmarks


def _scale_patch(base: int, image_size: int) -> int:
    """Scale a patch edge from the 96px reference, preserving parity."""
    raw = base * image_size / REFERENCE_SIZE
    if base % 2 == 1:
        size = int(2 * round((raw - 1) / 2) + 1)
    else:
        size = int(2 * round(raw / 2))
    return max(size, 1 if base % 2 == 1 else 2)


def build_mask(landmarks: LandmarkSet, image_size: int = REFERENCE_SIZE) -> np.ndarray:
    """Binary attention mask: square patches over the eyes and mouth.

    Two eye patches (15x15 at 96px) and one mouth patch (20x20 at 96px),
    clipped at the image border. Depends only on landmarks and size, never
    on image content.
    """
    eye = _scale_patch(EYE_PATCH, image_size)
    mouth = _scale_patch(MOUTH_PATCH, image_size)
    mask = np.zeros((image_size, image_size), dtype=np.float32)
    for center, size in (
        (landmarks.left_eye, eye),
        (landmarks.right_eye, eye),
        (landmarks.mouth, mouth),
    ):
        r = int(round(center[0]))
        c = int(round(center[1]))
        r0 = max(r - size // 2, 0)
        c0 = max(c - size // 2, 0)
        r1 = min(r - size // 2 + size, image_size)
        c1 = min(c - size // 2 + size, image_size)
        if r1 > r0 and c1 > c0:
            mask[r0:r1, c0:c1] = 1.0
    return mask


# ---------------------------------------------------------------------------
# Procedural renderer


@dataclass(frozen=True)
class SyntheticFaceSpec:
    """Per-identity appearance parameters, all derived from identity_seed.

    eye_spacing is the azimuthal half-angle (degrees) between the eyes around
    the head's vertical axis. Frontal eye positions are pinned to the
    alignment template for every identity; the spacing angle only controls
    how far the eyes travel horizontally under yaw.
    """

    identity_seed: int
    face_hue: float
    eye_spacing: float
    eye_size: float
    mouth_width: float
    nose_length: float
    background_seed: int

    @classmethod
    def from_seed(cls, identity_seed: int) -> "SyntheticFaceSpec":
        rng = np.random.default_rng(identity_seed)
        return cls(
            identity_seed=identity_seed,
            face_hue=float(rng.uniform(0.0, 1.0)),
            eye_spacing=float(rng.uniform(50.0, 62.0)),
            eye_size=float(rng.uniform(0.040, 0.065)),
            mouth_width=float(rng.uniform(0.10, 0.16)),
            nose_length=float(rng.uniform(0.10, 0.16)),
            background_seed=int(rng.integers(0, 2**31 - 1)),
        )


# Layout constants as fractions of the image size.
_EYE_ROW = TEMPLATE_LEFT_EYE[0]
_MOUTH_ROW = TEMPLATE_MOUTH[0]
_EYE_OFFSET = TEMPLATE_RIGHT_EYE[1] - 0.5  # frontal eye offset from midline
_HEAD_SHIFT = 0.06
_FACE_ROW = 0.52
_FACE_RY = 0.37
_FACE_RX = 0.40
_NOSE_TOP = 0.46
_NOSE_WIDTH = 0.032
_NOSE_DEPTH = 0.19
_MOUTH_DEPTH = 0.13
_MOUTH_RY = 0.035
_OCCLUSION_DEGREES = 60


def _soft_ellipse(rows, cols, cy, cx, ry, rx, edge):
    d = np.sqrt(((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2)
    return np.clip((1.0 - d) * min(ry, rx) / edge, 0.0, 1.0)


def _soft_box(rows, cols, r0, r1, c0, c1, edge):
    ar = np.clip((rows - r0) / edge, 0.0, 1.0) * np.clip((r1 - rows) / edge, 0.0, 1.0)
    ac = np.clip((cols - c0) / edge, 0.0, 1.0) * np.clip((c1 - cols) / edge, 0.0, 1.0)
    return ar * ac


def _blend(img, alpha, color):
    for ch in range(3):
        img[ch] = img[ch] * (1.0 - alpha) + color[ch] * alpha


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64) / size
    c1 = rng.uniform(0.1, 0.9, size=3)
    c2 = rng.uniform(0.1, 0.9, size=3)
    angle = rng.uniform(0.0, 2 * math.pi)
    ramp = (rows - 0.5) * math.cos(angle) + (cols - 0.5) * math.sin(angle) + 0.5
    ramp = np.clip(ramp, 0.0, 1.0)
    img = np.empty((3, size, size), dtype=np.float64)
    for ch in range(3):
        img[ch] = c1[ch] * (1.0 - ramp) + c2[ch] * ramp
    for _ in range(2):
        bc = rng.uniform(0.1, 0.9, size=3)
        cy, cx = rng.uniform(0.0, 1.0, size=2)
        rad = rng.uniform(0.12, 0.35)
        blob = _soft_ellipse(rows, cols, cy, cx, rad, rad, 0.08)
        _blend(img, blob * 0.8, bc)
    return img


def render_face(
    spec: SyntheticFaceSpec, degrees: int, image_size: int
) -> tuple[np.ndarray, LandmarkSet]:
    """Render one identity at one yaw angle.

    Pure function of (spec, degrees, image_size). Returns a (3, H, W)
    float32 image in [-1, 1] and the analytic landmarks.
    """
    pose_index = pose_to_index(degrees)
    s = float(image_size)
    theta = math.radians(degrees)
    sin_t, cos_t = math.sin(theta), math.cos(theta)
    rows, cols = np.mgrid[0:image_size, 0:image_size].astype(np.float64)
    edge = max(1.2 * image_size / REFERENCE_SIZE, 0.8)

    bg_rng = np.random.default_rng(
        np.random.SeedSequence([spec.background_seed, pose_index])
    )
    img = _background(bg_rng, image_size)

    # Head axis shifts with yaw; all features ride on it.
    cx = 0.5 * s + _HEAD_SHIFT * s * sin_t
    face_rx = _FACE_RX * s * (0.42 + 0.58 * cos_t)
    face_ry = _FACE_RY * s
    face_cy = _FACE_ROW * s

    face_rgb = np.array(colorsys.hsv_to_rgb(spec.face_hue, 0.35, 0.85))
    face_alpha = _soft_ellipse(rows, cols, face_cy, cx, face_ry, face_rx, edge)
    # Lateral shading: the trailing side darkens as the head turns.
    shade = np.clip(1.0 + 0.30 * sin_t * (cols - cx) / face_rx, 0.55, 1.25)
    for ch in range(3):
        img[ch] = img[ch] * (1.0 - face_alpha) + face_rgb[ch] * shade * face_alpha

    # Nose: protrudes, so it travels the most under yaw.
    nose_col = cx + _NOSE_DEPTH * s * sin_t
    nose_rgb = np.array(colorsys.hsv_to_rgb(spec.face_hue, 0.45, 0.55))
    nose_alpha = _soft_box(
        rows,
        cols,
        _NOSE_TOP * s,
        (_NOSE_TOP + spec.nose_length) * s,
        nose_col - _NOSE_WIDTH * s,
        nose_col + _NOSE_WIDTH * s,
        edge,
    )
    _blend(img, nose_alpha, nose_rgb)

    # Eyes sit on a cylinder of radius R at azimuth +/- eye_spacing; the
    # radius is fixed so that frontal positions land on the template exactly.
    phi = math.radians(spec.eye_spacing)
    radius = _EYE_OFFSET * s / math.sin(phi)
    left_col = cx + radius * math.sin(theta - phi)
    right_col = cx + radius * math.sin(theta + phi)
    eye_row = _EYE_ROW * s
    eye_rx = spec.eye_size * s * (0.45 + 0.55 * cos_t)
    eye_ry = 0.62 * spec.eye_size * s
    eye_rgb = np.array([0.10, 0.09, 0.12])
    # Past +/-60 degrees the trailing eye goes behind the head.
    left_visible = not (degrees > _OCCLUSION_DEGREES)
    right_visible = not (degrees < -_OCCLUSION_DEGREES)
    if left_visible:
        a = _soft_ellipse(rows, cols, eye_row, left_col, eye_ry, eye_rx, edge)
        _blend(img, a, eye_rgb)
    if right_visible:
        a = _soft_ellipse(rows, cols, eye_row, right_col, eye_ry, eye_rx, edge)
        _blend(img, a, eye_rgb)

    mouth_col = cx + _MOUTH_DEPTH * s * sin_t
    mouth_rx = spec.mouth_width * s * (0.40 + 0.60 * cos_t)
    mouth_rgb = np.array(colorsys.hsv_to_rgb(0.98, 0.60, 0.72))
    a = _soft_ellipse(rows, cols, _MOUTH_ROW * s, mouth_col, _MOUTH_RY * s, mouth_rx, edge)
    _blend(img, a, mouth_rgb)

    img = np.clip(img * 2.0 - 1.0, -1.0, 1.0).astype(np.float32)
    landmarks = LandmarkSet(
        left_eye=(eye_row, float(left_col)),
        right_eye=(eye_row, float(right_col)),
        mouth=(_MOUTH_ROW * s, float(mouth_col)),
    )
    return img, landmarks


# ---------------------------------------------------------------------------
# On-disk dataset


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    identity: int
    pose_degrees: int
    landmarks: LandmarkSet


@dataclass
class DatasetManifest:
    version: int
    n_id: int
    image_size: int
    split: str
    records: list[ManifestRecord]

    def validate(self) -> None:
        if self.version != MANIFEST_VERSION:
            raise ValueError(f"unsupported manifest version {self.version}")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")
        for rec in self.records:
            if not 0 <= rec.identity < self.n_id:
                raise ValueError(
                    f"record identity {rec.identity} outside [0, {self.n_id})"
                )
            pose_to_index(rec.pose_degrees)

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "n_id": self.n_id,
            "image_size": self.image_size,
            "split": self.split,
            "records": [
                {
                    "path": rec.path,
                    "id": rec.identity,
                    "pose_degrees": rec.pose_degrees,
                    "landmarks": rec.landmarks.to_json(),
                }
                for rec in self.records
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        manifest = cls(
            version=int(obj["version"]),
            n_id=int(obj["n_id"]),
            image_size=int(obj["image_size"]),
            split=str(obj.get("split", "train")),
            records=[
                ManifestRecord(
                    path=rec["path"],
                    identity=int(rec["id"]),
                    pose_degrees=int(rec["pose_degrees"]),
                    landmarks=LandmarkSet.from_json(rec["landmarks"]),
                )
                for rec in obj["records"]
            ],
        )
        manifest.validate()
        return manifest

    def save(self, path: Path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def load(cls, path: Path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def image_to_uint8(img: np.ndarray) -> np.ndarray:
    """[-1, 1] float (3, H, W) to (H, W, 3) uint8."""
    arr = np.clip((np.asarray(img) + 1.0) * 127.5, 0.0, 255.0)
    return np.round(arr).astype(np.uint8).transpose(1, 2, 0)


def uint8_to_image(arr: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 to [-1, 1] float32 (3, H, W)."""
    return (arr.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


def identity_seeds(n_identities: int, seed: int) -> list[int]:
    """Stable per-identity seeds derived from the dataset seed."""
    children = np.random.SeedSequence(seed).spawn(n_identities)
    return [int(child.generate_state(1)[0]) for child in children]


def generate_synthetic_dataset(
    n_identities: int,
    seed: int,
    image_size: int,
    out_dir: Path,
    split: str = "train",
) -> DatasetManifest:
    """Render every identity at all 13 poses and write images plus manifest.

    Fully deterministic in (n_identities, seed, image_size): the same
    arguments produce bit-identical PNGs.
    """
    if n_identities < 2:
        raise ValueError("need at least 2 identities")
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)

    records = []
    for identity, id_seed in enumerate(identity_seeds(n_identities, seed)):
        spec = SyntheticFaceSpec.from_seed(id_seed)
        for degrees in POSE_DEGREES:
            img, landmarks = render_face(spec, degrees, image_size)
            name = f"id{identity:04d}_yaw{degrees:+04d}.png"
            Image.fromarray(image_to_uint8(img)).save(image_dir / name)
            records.append(
                ManifestRecord(
                    path=f"images/{name}",
                    identity=identity,
                    pose_degrees=degrees,
                    landmarks=landmarks,
                )
            )
    manifest = DatasetManifest(
        version=MANIFEST_VERSION,
        n_id=n_identities,
        image_size=image_size,
        split=split,
        records=records,
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


@dataclass
class Batch:
    images: np.ndarray  # (B, 3, H, W) float32 in [-1, 1]
    identities: np.ndarray  # (B,) int64
    pose_indices: np.ndarray  # (B,) int64
    landmarks: list[LandmarkSet]
    masks: np.ndarray  # (B, H, W) float32
    indices: np.ndarray  # (B,) record indices into the dataset


class FaceDataset:
    """In-memory view of a dataset directory: images, labels, masks."""

    def __init__(self, manifest: DatasetManifest, root: Path):
        manifest.validate()
        self.manifest = manifest
        self.root = Path(root)
        self.image_size = manifest.image_size
        self.n_id = manifest.n_id
        n = len(manifest.records)
        self.images = np.empty((n, 3, self.image_size, self.image_size), np.float32)
        self.identities = np.empty(n, dtype=np.int64)
        self.pose_indices = np.empty(n, dtype=np.int64)
        self.landmarks: list[LandmarkSet] = []
        self.masks = np.empty((n, self.image_size, self.image_size), np.float32)
        self._pair_index: dict[tuple[int, int], int] = {}
        for i, rec in enumerate(manifest.records):
            arr = np.asarray(Image.open(self.root / rec.path).convert("RGB"))
            if arr.shape[:2] != (self.image_size, self.image_size):
                raise ValueError(f"{rec.path}: size does not match manifest")
            self.images[i] = uint8_to_image(arr)
            self.identities[i] = rec.identity
            self.pose_indices[i] = pose_to_index(rec.pose_degrees)
            self.landmarks.append(rec.landmarks)
            self.masks[i] = build_mask(rec.landmarks, self.image_size)
            self._pair_index[(rec.identity, self.pose_indices[i])] = i
        self.frontal_indices = np.flatnonzero(self.pose_indices == FRONTAL_INDEX)

    @classmethod
    def load(cls, directory: Path) -> "FaceDataset":
        directory = Path(directory)
        return cls(DatasetManifest.load(directory / "manifest.json"), directory)

    def __len__(self) -> int:
        return len(self.manifest.records)

    def pair_lookup(self, identity: int, pose_index: int) -> int | None:
        """Record index of (identity, pose), or None when unpaired."""
        return self._pair_index.get((identity, int(pose_index)))

    def take(self, indices: np.ndarray) -> Batch:
        indices = np.asarray(indices, dtype=np.int64)
        return Batch(
            images=self.images[indices],
            identities=self.identities[indices],
            pose_indices=self.pose_indices[indices],
            landmarks=[self.landmarks[i] for i in indices],
            masks=self.masks[indices],
            indices=indices,
        )


def sample_batch(
    data: FaceDataset,
    batch_size: int,
    restrict_frontal: bool,
    rng: np.random.Generator,
) -> Batch:
    """Uniform sample with replacement, optionally frontal-pose only."""
    pool = data.frontal_indices if restrict_frontal else np.arange(len(data))
    if len(pool) == 0:
        raise ValueError("no records eligible for sampling")
    return data.take(rng.choice(pool, size=batch_size, replace=True))
