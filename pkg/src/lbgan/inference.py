"""Frozen-model synthesis.

Frontalization, rotation to arbitrary yaw (off-grid angles blend the two
bracketing one-hot codes), pose sweep strips, and identity-morph grids from
interpolated bottleneck representations. Everything here is read-only with
respect to the model: no call mutates parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataset import (
    FRONTAL_INDEX,
    N_POSES,
    POSE_DEGREES,
    image_to_uint8,
    make_remote_code,
)
from .networks import (
    editor_decode,
    editor_forward,
    extract_identity_representation,
    interpolate_identities,
    normalizer_forward,
)

POSE_STEP = 15.0


@dataclass(frozen=True)
class RotationRequest:
    image: np.ndarray  # (3, H, W) float in [-1, 1], aligned
    target_degrees: float

    def validate(self) -> None:
        if not -90.0 <= float(self.target_degrees) <= 90.0:
            raise ValueError(
                f"target {self.target_degrees} out of range: yaw must lie in [-90, 90]"
            )


def code_for_degrees(target: float) -> np.ndarray:
    """Remote code for any yaw in [-90, 90].

    On-grid angles give the one-hot code. Off-grid angles mix the two
    bracketing grid codes linearly by distance, e.g. 7.5 degrees gives
    weight 0.5 at the 0-degree index and 0.5 at the 15-degree index.
    """
    target = float(target)
    if not -90.0 <= target <= 90.0:
        raise ValueError(f"target {target} out of range: yaw must lie in [-90, 90]")
    pos = (target - POSE_DEGREES[0]) / POSE_STEP
    lower = int(np.floor(pos))
    frac = pos - lower
    if lower >= N_POSES - 1:
        lower, frac = N_POSES - 2, 1.0
    if frac == 0.0:
        return make_remote_code(lower)
    code = np.zeros(N_POSES, dtype=np.float64)
    code[lower] = 1.0 - frac
    code[lower + 1] = frac
    return code


def _to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def frontalize(bundle, x: np.ndarray) -> np.ndarray:
    """G_N(x) on an aligned input image."""
    with torch.no_grad():
        out = normalizer_forward(bundle.g_n, _to_tensor(x))
    return out.numpy()


def rotate(bundle, request: RotationRequest) -> np.ndarray:
    """Full pipeline: G_E(x, G_N(x), code(target))."""
    request.validate()
    code = code_for_degrees(request.target_degrees)
    x = _to_tensor(request.image)
    with torch.no_grad():
        x_front = normalizer_forward(bundle.g_n, x)
        out = editor_forward(bundle.g_e, x, x_front, code)
    return out.numpy()


def rotate_batch(bundle, images: np.ndarray, code_indices: np.ndarray) -> np.ndarray:
    """Vectorized on-grid rotation of a stack of aligned images."""
    x = _to_tensor(images)
    codes = np.eye(N_POSES, dtype=np.float32)[np.asarray(code_indices, dtype=np.int64)]
    with torch.no_grad():
        x_front = normalizer_forward(bundle.g_n, x)
        out = editor_forward(bundle.g_e, x, x_front, codes)
    return out.numpy()


def pose_sweep_grid(bundle, x: np.ndarray, targets) -> np.ndarray:
    """Input tile followed by one rotated tile per target, side by side."""
    tiles = [np.asarray(x, dtype=np.float32)]
    for target in targets:
        tiles.append(rotate(bundle, RotationRequest(image=x, target_degrees=target)))
    return np.concatenate(tiles, axis=2)


def identity_morph_grid(
    bundle,
    x1: np.ndarray,
    x2: np.ndarray,
    n_steps: int,
    code_index: int = FRONTAL_INDEX,
) -> np.ndarray:
    """Source images framing n_steps decoded interpolants.

    Step k uses alpha = k / (n_steps - 1), so the first and last interior
    tiles decode the unmixed representations of x1 and x2.
    """
    if n_steps < 2:
        raise ValueError("n_steps must be >= 2")
    code = make_remote_code(code_index)
    t1, t2 = _to_tensor(x1), _to_tensor(x2)
    with torch.no_grad():
        f1 = normalizer_forward(bundle.g_n, t1)
        f2 = normalizer_forward(bundle.g_n, t2)
        r1 = extract_identity_representation(bundle.g_e, t1, f1)
        r2 = extract_identity_representation(bundle.g_e, t2, f2)
        tiles = [np.asarray(x1, dtype=np.float32)]
        for k in range(n_steps):
            alpha = k / (n_steps - 1)
            rep = interpolate_identities(r1, r2, alpha)
            tiles.append(editor_decode(bundle.g_e, rep, code).numpy())
        tiles.append(np.asarray(x2, dtype=np.float32))
    return np.concatenate(tiles, axis=2)


def format_degrees(degrees: float) -> str:
    """Signed zero-padded tag for filenames: +030, -090, -007.5."""
    d = float(degrees)
    if d.is_integer():
        return f"{int(d):+04d}"
    sign = "+" if d >= 0 else "-"
    return f"{sign}{abs(d):05.1f}"


def save_png(img: np.ndarray, path) -> Path:
    """Write a [-1, 1] float image as an 8-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(image_to_uint8(img)).save(path)
    return path
