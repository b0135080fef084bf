"""The four networks: normalizer G_N, editor G_E, discriminators D_N and D_E.

Generators are stride-2 convolutional encoders mirrored by transposed
convolutions, with a fully connected bottleneck. The editor takes the raw
and frontalized images stacked on the channel axis and has the pose-control
code concatenated onto its bottleneck vector before decoding. Discriminators
share the encoder trunk shape and end in softmax classifier heads: D_N has
one identity head with an extra fake class, D_E adds a 13-way pose head.

Activations are ELU and instance norm so every forward pass is C1-smooth,
which the finite-difference gradient checks rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .dataset import N_POSES

INIT_STD = 0.02


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int
    base_channels: int
    n_blocks: int
    bottleneck_dim: int

    def validate(self) -> None:
        if self.bottleneck_dim < 1:
            raise ValueError("bottleneck_dim must be >= 1")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        size = self.image_size
        for _ in range(self.n_blocks):
            if size % 2 != 0:
                raise ValueError(
                    f"image_size {self.image_size} not halvable {self.n_blocks} times"
                )
            size //= 2
        if size < 1:
            raise ValueError("final spatial size must be >= 1")

    @property
    def final_spatial(self) -> int:
        return self.image_size // (2 ** self.n_blocks)

    @property
    def channel_schedule(self) -> list[int]:
        # Doubles per block, capped at 4x base.
        return [min(self.base_channels * 2**i, self.base_channels * 4) for i in range(self.n_blocks)]


def _conv_block(in_ch: int, out_ch: int, spatial_out: int) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.Conv2d(in_ch, out_ch, 4, stride=2, padding=1)]
    if spatial_out >= 2:
        layers.append(nn.InstanceNorm2d(out_ch, affine=True, track_running_stats=False))
    layers.append(nn.ELU())
    return layers


def _deconv_block(in_ch: int, out_ch: int, spatial_out: int) -> list[nn.Module]:
    layers: list[nn.Module] = [nn.ConvTranspose2d(in_ch, out_ch, 4, stride=2, padding=1)]
    if spatial_out >= 2:
        layers.append(nn.InstanceNorm2d(out_ch, affine=True, track_running_stats=False))
    layers.append(nn.ELU())
    return layers


class _Encoder(nn.Module):
    def __init__(self, config: EncoderConfig, in_channels: int):
        super().__init__()
        config.validate()
        self.config = config
        chans = config.channel_schedule
        layers: list[nn.Module] = []
        prev = in_channels
        size = config.image_size
        for ch in chans:
            size //= 2
            layers += _conv_block(prev, ch, size)
            prev = ch
        self.conv = nn.Sequential(*layers)
        self.flat_dim = chans[-1] * config.final_spatial**2
        self.fc = nn.Linear(self.flat_dim, config.bottleneck_dim)
        self.act = nn.ELU()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.conv(x)
        return self.act(self.fc(h.flatten(1)))


class Generator(nn.Module):
    """Encoder-decoder with an optional conditioning code at the bottleneck.

    ``code_dim`` = 0 gives the normalizer (plain autoencoder shape, 3 input
    channels); the editor uses ``in_channels`` = 6 and ``code_dim`` = 13.
    """

    def __init__(self, config: EncoderConfig, in_channels: int = 3, code_dim: int = 0):
        super().__init__()
        config.validate()
        self.config = config
        self.in_channels = in_channels
        self.code_dim = code_dim
        self.encoder = _Encoder(config, in_channels)

        chans = config.channel_schedule
        self.fc_dec = nn.Linear(config.bottleneck_dim + code_dim, self.encoder.flat_dim)
        self.fc_act = nn.ELU()
        layers: list[nn.Module] = []
        rev = list(reversed(chans))
        size = config.final_spatial
        for i, ch in enumerate(rev):
            size *= 2
            out_ch = rev[i + 1] if i + 1 < len(rev) else 3
            if i + 1 < len(rev):
                layers += _deconv_block(ch, out_ch, size)
            else:
                layers.append(nn.ConvTranspose2d(ch, 3, 4, stride=2, padding=1))
        layers.append(nn.Tanh())
        self.deconv = nn.Sequential(*layers)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        self._check_input(x)
        return self.encoder(x)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        want = self.config.bottleneck_dim + self.code_dim
        if z.shape[-1] != want:
            raise ValueError(f"decoder expects width {want}, got {z.shape[-1]}")
        h = self.fc_act(self.fc_dec(z))
        s = self.config.final_spatial
        h = h.view(z.shape[0], -1, s, s)
        return self.deconv(h)

    def forward(self, x: torch.Tensor, code: torch.Tensor | None = None) -> torch.Tensor:
        z = self.encode(x)
        if self.code_dim:
            if code is None:
                raise ValueError("this generator requires a conditioning code")
            z = torch.cat([z, code], dim=1)
        elif code is not None:
            raise ValueError("this generator takes no conditioning code")
        return self.decode(z)

    def _check_input(self, x: torch.Tensor) -> None:
        s = self.config.image_size
        if x.dim() != 4 or x.shape[1] != self.in_channels or x.shape[2:] != (s, s):
            raise ValueError(
                f"expected (B, {self.in_channels}, {s}, {s}) input, got {tuple(x.shape)}"
            )


class Discriminator(nn.Module):
    """Encoder trunk with an identity head and an optional pose head.

    The identity head has n_id + 1 classes; the last index is the fake
    class. Heads output probabilities (softmax).
    """

    def __init__(
        self,
        config: EncoderConfig,
        n_identities: int,
        with_pose_head: bool = False,
    ):
        super().__init__()
        if n_identities < 1:
            raise ValueError("need at least one identity class")
        self.config = config
        self.n_identities = n_identities
        self.trunk = _Encoder(config, in_channels=3)
        self.id_head = nn.Linear(config.bottleneck_dim, n_identities + 1)
        self.pose_head = (
            nn.Linear(config.bottleneck_dim, N_POSES) if with_pose_head else None
        )

    @property
    def fake_index(self) -> int:
        return self.n_identities

    def forward(self, x: torch.Tensor):
        feat = self.trunk(x)
        id_probs = torch.softmax(self.id_head(feat), dim=1)
        if self.pose_head is None:
            return id_probs
        return id_probs, torch.softmax(self.pose_head(feat), dim=1)


def init_weights(module: nn.Module, seed: int) -> None:
    """Gaussian init, std 0.02, from an explicit seeded torch generator.

    Norm scale parameters start at 1 with the same jitter; all biases zero.
    Iterates parameters in registration order, so the draw sequence is
    stable for a fixed architecture.
    """
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                noise = torch.empty_like(m.weight).normal_(0.0, INIT_STD, generator=gen)
                m.weight.copy_(noise)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.InstanceNorm2d) and m.affine:
                noise = torch.empty_like(m.weight).normal_(0.0, INIT_STD, generator=gen)
                m.weight.copy_(1.0 + noise)
                m.bias.zero_()


def _as_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    return x, False


def _as_code(c, batch: int, like: torch.Tensor) -> torch.Tensor:
    code = torch.as_tensor(np.asarray(c), dtype=like.dtype, device=like.device)
    if code.dim() == 1:
        code = code.unsqueeze(0).expand(batch, -1)
    if code.shape != (batch, N_POSES):
        raise ValueError(f"remote code must have shape ({batch}, {N_POSES})")
    return code


def normalizer_forward(g_n: Generator, x: torch.Tensor) -> torch.Tensor:
    """Frontalize: G_N(x)."""
    xb, squeeze = _as_batched(x)
    out = g_n(xb)
    return out.squeeze(0) if squeeze else out


def editor_forward(
    g_e: Generator, x: torch.Tensor, x_frontal: torch.Tensor, c
) -> torch.Tensor:
    """Rotate: G_E applied to channel-stacked (x, x_frontal) under code c."""
    xb, squeeze = _as_batched(x)
    fb, _ = _as_batched(x_frontal)
    if xb.shape != fb.shape:
        raise ValueError("x and x_frontal must have identical shapes")
    code = _as_code(c, xb.shape[0], xb)
    out = g_e(torch.cat([xb, fb], dim=1), code)
    return out.squeeze(0) if squeeze else out


def extract_identity_representation(
    g_e: Generator, x: torch.Tensor, x_frontal: torch.Tensor
) -> torch.Tensor:
    """Editor bottleneck vector, taken before the code is attached."""
    xb, squeeze = _as_batched(x)
    fb, _ = _as_batched(x_frontal)
    if xb.shape != fb.shape:
        raise ValueError("x and x_frontal must have identical shapes")
    rep = g_e.encode(torch.cat([xb, fb], dim=1))
    return rep.squeeze(0) if squeeze else rep


def editor_decode(g_e: Generator, representation: torch.Tensor, c) -> torch.Tensor:
    """Decode an identity representation under a remote code."""
    rep, squeeze = (
        (representation.unsqueeze(0), True)
        if representation.dim() == 1
        else (representation, False)
    )
    code = _as_code(c, rep.shape[0], rep)
    out = g_e.decode(torch.cat([rep, code], dim=1))
    return out.squeeze(0) if squeeze else out


def interpolate_identities(r1: torch.Tensor, r2: torch.Tensor, alpha: float) -> torch.Tensor:
    if r1.shape != r2.shape:
        raise ValueError("identity representations must have equal lengths")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"invalid alpha {alpha!r}: expected value in [0, 1]")
    if torch.equal(r1, r2):
        return r1.clone()  # exact degenerate case, no rounding noise
    return (1.0 - alpha) * r1 + alpha * r2


def disc_n_forward(d_n: Discriminator, x: torch.Tensor) -> torch.Tensor:
    xb, squeeze = _as_batched(x)
    probs = d_n(xb)
    return probs.squeeze(0) if squeeze else probs


def disc_e_forward(d_e: Discriminator, x: torch.Tensor):
    if d_e.pose_head is None:
        raise ValueError("discriminator has no pose head")
    xb, squeeze = _as_batched(x)
    id_probs, pose_probs = d_e(xb)
    if squeeze:
        return id_probs.squeeze(0), pose_probs.squeeze(0)
    return id_probs, pose_probs
