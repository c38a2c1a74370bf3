"""Adversarial training objectives for the paired and unpaired translators.

All losses are computed on score-map logits (a sigmoid turns them into
real/fake probabilities under the default binary cross-entropy mode; a
least-squares mode is available behind the objective flag). Every returned
total is the exact sum of its exposed terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as tf

from .errors import StructureError

ADVERSARIAL_MODES = ("bce", "lsgan")


@dataclass(frozen=True)
class Pix2PixObjective:
    lambda_l1: float = 100.0
    adversarial: str = "bce"

    def __post_init__(self):
        if self.lambda_l1 < 0:
            raise StructureError(f"lambda_l1 must be >= 0, got {self.lambda_l1}")
        if self.adversarial not in ADVERSARIAL_MODES:
            raise StructureError(f"unknown adversarial mode {self.adversarial!r}")


@dataclass(frozen=True)
class CycleGANObjective:
    lambda_cycle: float = 10.0
    lambda_identity: float = 5.0
    adversarial: str = "bce"

    def __post_init__(self):
        if self.lambda_cycle < 0 or self.lambda_identity < 0:
            raise StructureError("cycle/identity weights must be >= 0")
        if self.adversarial not in ADVERSARIAL_MODES:
            raise StructureError(f"unknown adversarial mode {self.adversarial!r}")


def adversarial_loss(logits: torch.Tensor, real: bool, mode: str = "bce") -> torch.Tensor:
    """Mean real/fake loss over a score map of logits."""
    target = torch.ones_like(logits) if real else torch.zeros_like(logits)
    if mode == "bce":
        return tf.binary_cross_entropy_with_logits(logits, target)
    return tf.mse_loss(logits, target)


def _check_aligned(x: torch.Tensor, y: torch.Tensor) -> None:
    if x.shape != y.shape:
        raise StructureError(f"misaligned batches: {tuple(x.shape)} vs {tuple(y.shape)}")


def pix2pix_losses(G, D, x: torch.Tensor, y: torch.Tensor, obj: Pix2PixObjective):
    """Conditional GAN losses.

    The discriminator scores (input, output) channel concatenations; its
    loss averages the real and fake halves. The generator pays the
    adversarial term plus an L1 reconstruction term weighted by lambda_l1.
    Returns (loss_G, loss_D, terms) where the totals equal the sums of the
    exposed term tensors exactly.
    """
    _check_aligned(x, y)
    fake = G(x)
    _check_aligned(fake, y)
    mode = obj.adversarial

    d_real = 0.5 * adversarial_loss(D(torch.cat([x, y], dim=1)), True, mode)
    d_fake = 0.5 * adversarial_loss(D(torch.cat([x, fake.detach()], dim=1)), False, mode)
    g_adv = adversarial_loss(D(torch.cat([x, fake], dim=1)), True, mode)
    g_l1 = obj.lambda_l1 * torch.mean(torch.abs(fake - y))

    loss_d = d_real + d_fake
    loss_g = g_adv + g_l1
    terms = {"d_real": d_real, "d_fake": d_fake, "g_adv": g_adv, "g_l1": g_l1}
    return loss_g, loss_d, terms


def cyclegan_losses(G, F, D_X, D_Y, x: torch.Tensor, y: torch.Tensor, obj: CycleGANObjective):
    """Unpaired two-generator losses.

    G maps domain X to Y, F maps Y back to X. The generator total combines
    both adversarial terms, both cycle reconstruction terms (weighted by
    lambda_cycle) and both identity terms (weighted by lambda_identity);
    discriminators score plain images. Returns
    (loss_G_total, loss_DX, loss_DY, terms), totals equal to term sums.
    """
    mode = obj.adversarial
    fake_y = G(x)
    fake_x = F(y)

    g_adv = adversarial_loss(D_Y(fake_y), True, mode)
    f_adv = adversarial_loss(D_X(fake_x), True, mode)
    cycle_x = obj.lambda_cycle * torch.mean(torch.abs(F(fake_y) - x))
    cycle_y = obj.lambda_cycle * torch.mean(torch.abs(G(fake_x) - y))
    ident_x = obj.lambda_identity * torch.mean(torch.abs(F(x) - x))
    ident_y = obj.lambda_identity * torch.mean(torch.abs(G(y) - y))

    dx_real = 0.5 * adversarial_loss(D_X(x), True, mode)
    dx_fake = 0.5 * adversarial_loss(D_X(fake_x.detach()), False, mode)
    dy_real = 0.5 * adversarial_loss(D_Y(y), True, mode)
    dy_fake = 0.5 * adversarial_loss(D_Y(fake_y.detach()), False, mode)

    loss_g_total = g_adv + f_adv + cycle_x + cycle_y + ident_x + ident_y
    loss_dx = dx_real + dx_fake
    loss_dy = dy_real + dy_fake
    terms = {
        "g_adv": g_adv,
        "f_adv": f_adv,
        "cycle_x": cycle_x,
        "cycle_y": cycle_y,
        "ident_x": ident_x,
        "ident_y": ident_y,
        "dx_real": dx_real,
        "dx_fake": dx_fake,
        "dy_real": dy_real,
        "dy_fake": dy_fake,
    }
    return loss_g_total, loss_dx, loss_dy, terms
