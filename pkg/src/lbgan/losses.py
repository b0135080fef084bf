"""Training objectives.

Adversarial identity/pose classification losses for both GAN pairs, the
attention-masked L2, the conditional self-cycle term, and a generic central
finite-difference gradient checker. All adversarial terms are the negated
log-likelihood forms, so every loss is minimized and is zero exactly when
the relevant probability hits 1.

Probabilities are clamped at LOG_EPS before the log, which bounds any
single term at -ln(1e-12) ~= 27.63.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

LOG_EPS = 1e-12

# Guards the sqrt in attention_l2 so a zero-difference input cannot emit
# non-finite gradients.
_SQRT_FLOOR = 1e-24


@dataclass(frozen=True)
class LossWeights:
    lambda_rec: float = 10.0
    lambda_csc: float = 10.0

    def validate(self) -> None:
        if self.lambda_rec < 0 or self.lambda_csc < 0:
            raise ValueError("loss weights must be non-negative")


LOSS_REPORT_KEYS = (
    "d_n",
    "g_n",
    "d_e_id",
    "d_e_pose",
    "d_e_fake",
    "g_e_pose",
    "g_e_id",
    "rec",
    "csc",
    "total_g",
    "total_d",
)


def make_report(**values: float) -> dict[str, float]:
    """LossReport: every named scalar present, unset entries zero.

    Finiteness is the training loop's job; a diverged report must still be
    representable so the abort path can record it.
    """
    unknown = set(values) - set(LOSS_REPORT_KEYS)
    if unknown:
        raise ValueError(f"unknown loss report keys: {sorted(unknown)}")
    return {key: float(values.get(key, 0.0)) for key in LOSS_REPORT_KEYS}


def _as_prob_matrix(probs) -> torch.Tensor:
    p = torch.as_tensor(probs) if not isinstance(probs, torch.Tensor) else probs
    if not p.is_floating_point():
        p = p.double()
    if p.dim() == 1:
        p = p.unsqueeze(0)
    if p.dim() != 2:
        raise ValueError(f"expected a probability vector or batch, got shape {tuple(p.shape)}")
    return p


def _as_index(idx, batch: int, device) -> torch.Tensor:
    t = torch.as_tensor(idx, dtype=torch.long, device=device)
    if t.dim() == 0:
        t = t.expand(batch)
    if t.shape != (batch,):
        raise ValueError("class index batch does not match probability batch")
    return t


def nll(probs, index) -> torch.Tensor:
    """Mean over the batch of -log probs[index], with the epsilon clamp."""
    p = _as_prob_matrix(probs)
    idx = _as_index(index, p.shape[0], p.device)
    picked = p.gather(1, idx.unsqueeze(1)).squeeze(1)
    return -torch.log(torch.clamp(picked, min=LOG_EPS)).mean()


def d_n_loss(probs_real, y_id, probs_fake) -> torch.Tensor:
    """Normalizer-discriminator objective, negated for minimization.

    Real frontal samples should be classified as their identity and
    generated samples as the extra fake class (last index).
    """
    p_real = _as_prob_matrix(probs_real)
    p_fake = _as_prob_matrix(probs_fake)
    fake_index = p_fake.shape[1] - 1
    return nll(p_real, y_id) + nll(p_fake, fake_index)


def g_n_loss(probs_fake_as_seen_by_d, y_id) -> torch.Tensor:
    """Normalizer objective: claim the input's true identity."""
    return nll(probs_fake_as_seen_by_d, y_id)


def d_e_loss(id_probs_real, y_id, pose_probs_real, y_p_index, id_probs_fake) -> torch.Tensor:
    """Editor-discriminator objective: identity + pose on real, fake on generated."""
    parts = d_e_loss_parts(id_probs_real, y_id, pose_probs_real, y_p_index, id_probs_fake)
    return parts[0] + parts[1] + parts[2]


def d_e_loss_parts(
    id_probs_real, y_id, pose_probs_real, y_p_index, id_probs_fake
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """(identity-on-real, pose-on-real, fake-on-generated) components."""
    p_fake = _as_prob_matrix(id_probs_fake)
    fake_index = p_fake.shape[1] - 1
    return (
        nll(id_probs_real, y_id),
        nll(pose_probs_real, y_p_index),
        nll(p_fake, fake_index),
    )


def g_e_loss(pose_probs_fake, c_star_index, id_probs_fake, y_id) -> torch.Tensor:
    """Editor objective: hit the requested pose and keep the true identity."""
    parts = g_e_loss_parts(pose_probs_fake, c_star_index, id_probs_fake, y_id)
    return parts[0] + parts[1]


def g_e_loss_parts(
    pose_probs_fake, c_star_index, id_probs_fake, y_id
) -> tuple[torch.Tensor, torch.Tensor]:
    """(pose, identity) components of the editor objective."""
    return nll(pose_probs_fake, c_star_index), nll(id_probs_fake, y_id)


def _as_image_batch(x) -> torch.Tensor:
    t = torch.as_tensor(x) if not isinstance(x, torch.Tensor) else x
    if not t.is_floating_point():
        t = t.double()
    if t.dim() == 2:
        t = t.unsqueeze(0)  # single channel plane
    if t.dim() == 3:
        t = t.unsqueeze(0)
    if t.dim() != 4:
        raise ValueError(f"expected an image or image batch, got shape {tuple(t.shape)}")
    return t


def attention_l2(x, x_hat, m) -> torch.Tensor:
    """Euclidean norm of the masked difference, per image, batch-averaged.

    The mask broadcasts across channels. The value is exactly 0 when the
    masked regions agree, and its gradient there is 0 rather than NaN.
    """
    xb = _as_image_batch(x)
    hb = _as_image_batch(x_hat)
    if xb.shape != hb.shape:
        raise ValueError(f"image shapes differ: {tuple(xb.shape)} vs {tuple(hb.shape)}")
    mask = torch.as_tensor(m) if not isinstance(m, torch.Tensor) else m
    if not mask.is_floating_point():
        mask = mask.double()
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    if mask.dim() != 3 or mask.shape[0] not in (1, xb.shape[0]):
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match images")
    if mask.shape[-2:] != xb.shape[-2:]:
        raise ValueError(f"mask shape {tuple(mask.shape)} does not match images")
    diff = (xb - hb) * mask.unsqueeze(1)
    sq = diff.pow(2).flatten(1).sum(dim=1)
    root = torch.sqrt(torch.clamp(sq, min=_SQRT_FLOOR))
    per_image = torch.where(sq > 0, root, sq)
    return per_image.mean()


def csc_loss(x, x_hat, m, y_p_index, c_star_index) -> torch.Tensor:
    """Self-cycle: attention_l2 when the requested pose equals the input
    pose, exactly zero (value and gradient) otherwise."""
    xb = _as_image_batch(x)
    hb = _as_image_batch(x_hat)
    if xb.shape != hb.shape:
        raise ValueError(f"image shapes differ: {tuple(xb.shape)} vs {tuple(hb.shape)}")
    y_p = _as_index(y_p_index, xb.shape[0], xb.device)
    c_star = _as_index(c_star_index, xb.shape[0], xb.device)
    match = (y_p == c_star).to(xb.dtype)
    if not bool(match.any()):
        # Keep both inputs in the graph so callers can always backprop.
        return (xb.sum() + hb.sum()) * 0.0
    mask = torch.as_tensor(m) if not isinstance(m, torch.Tensor) else m
    if not mask.is_floating_point():
        mask = mask.double()
    if mask.dim() == 2:
        mask = mask.unsqueeze(0)
    diff = (xb - hb) * mask.unsqueeze(1)
    sq = diff.pow(2).flatten(1).sum(dim=1)
    root = torch.sqrt(torch.clamp(sq, min=_SQRT_FLOOR))
    per_image = torch.where(sq > 0, root, sq)
    return (per_image * match).mean()


def total_generator_loss(
    gn_id_probs,
    ge_pose_probs,
    ge_id_probs,
    y_id,
    y_p_index,
    c_star_index,
    x,
    x_hat,
    mask,
    weights: LossWeights,
    paired_target=None,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Stage-2 generator objective and its itemized report.

    total_g = g_n + g_e + lambda_rec * attention_l2(paired_target, x_hat, M)
                        + lambda_csc * csc_loss(x, x_hat, M, y_p, c*)
    The reconstruction term is present only when a ground-truth image at the
    requested pose exists. Report entries hold the unweighted values; the
    discriminator-side entries are zero.
    """
    weights.validate()
    g_n = g_n_loss(gn_id_probs, y_id)
    g_e_pose, g_e_id = g_e_loss_parts(ge_pose_probs, c_star_index, ge_id_probs, y_id)
    total = g_n + g_e_pose + g_e_id

    # A zero weight means the term is removed, not merely unweighted, so the
    # report shows 0 for it and no gradient machinery runs.
    zero = torch.zeros((), dtype=total.dtype)
    rec = zero
    if paired_target is not None and weights.lambda_rec > 0:
        rec = attention_l2(paired_target, x_hat, mask)
    csc = zero
    if weights.lambda_csc > 0:
        csc = csc_loss(x, x_hat, mask, y_p_index, c_star_index)
    total = total + weights.lambda_rec * rec + weights.lambda_csc * csc

    report = make_report(
        g_n=g_n.item(),
        g_e_pose=g_e_pose.item(),
        g_e_id=g_e_id.item(),
        rec=rec.item(),
        csc=csc.item(),
        total_g=total.item(),
    )
    return total, report


def total_discriminator_loss(
    dn_probs_real,
    y_id_frontal,
    dn_probs_fake,
    de_id_probs_real,
    y_id,
    de_pose_probs_real,
    y_p_index,
    de_id_probs_fake,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Stage-2 discriminator objective (both discriminators) and report."""
    d_n = d_n_loss(dn_probs_real, y_id_frontal, dn_probs_fake)
    d_e_id, d_e_pose, d_e_fake = d_e_loss_parts(
        de_id_probs_real, y_id, de_pose_probs_real, y_p_index, de_id_probs_fake
    )
    total = d_n + d_e_id + d_e_pose + d_e_fake
    report = make_report(
        d_n=d_n.item(),
        d_e_id=d_e_id.item(),
        d_e_pose=d_e_pose.item(),
        d_e_fake=d_e_fake.item(),
        total_d=total.item(),
    )
    return total, report


def finite_difference_check(
    loss_fn,
    params: list[torch.Tensor],
    inputs: tuple = (),
    epsilon: float = 1e-5,
    n_samples: int = 100,
    rng: np.random.Generator | None = None,
) -> float:
    """Central-difference check of the analytic gradient.

    ``loss_fn(*params, *inputs)`` must return a scalar tensor. Each entry of
    ``params`` is checked at up to ``n_samples`` randomly sampled
    coordinates. Returns the max relative error
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8). 64-bit inputs
    expected; non-finite losses fail the check outright.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    params = [p.detach().clone().double().requires_grad_(True) for p in params]
    value = loss_fn(*params, *inputs)
    if not torch.isfinite(value):
        raise ValueError(f"loss is not finite: {value}")
    grads = torch.autograd.grad(value, params, allow_unused=True)

    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.detach().flatten()
        n = flat.numel()
        coords = rng.choice(n, size=min(n_samples, n), replace=False)
        for i in coords:
            i = int(i)
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + epsilon
                up = float(loss_fn(*params, *inputs))
                flat[i] = orig - epsilon
                down = float(loss_fn(*params, *inputs))
                flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise ValueError("loss is not finite near the evaluation point")
            numeric = (up - down) / (2.0 * epsilon)
            analytic = 0.0 if g is None else g.flatten()[i].item()
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
