"""Loss terms for both training stages."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from vqfill.errors import ConfigError

LAMBDA_EPS = 1e-6


@dataclass
class LossBreakdown:
    recon: float = 0.0
    codebook: float = 0.0
    commitment: float = 0.0
    perceptual: float = 0.0
    gan_generator: float = 0.0
    gan_discriminator: float = 0.0
    lambda_used: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _weighted_mean(values: torch.Tensor, weight: torch.Tensor | None) -> torch.Tensor:
    if weight is None:
        return values.mean()
    weight = weight.expand_as(values)
    denom = weight.sum()
    if denom == 0:
        return (values * weight).sum()  # zero, but keeps the graph connected
    return (values * weight).sum() / denom


def vq_loss(
    x: torch.Tensor,
    x_rec: torch.Tensor,
    z_c: torch.Tensor,
    z: torch.Tensor,
    pixel_weight: torch.Tensor | None = None,
    latent_weight: torch.Tensor | None = None,
) -> dict[str, torch.Tensor]:
    """Reconstruction, codebook and (unweighted) commitment terms.

    ``recon`` is the per-pixel mean squared error (restricted to ``pixel_weight``
    cells when given). The latent terms average the squared Euclidean distance
    over latent cells; the codebook term sees ``z_c`` as a constant and the
    commitment term sees ``z`` as a constant. Latents are (B, d, h, w).
    """
    if x.shape != x_rec.shape or z_c.shape != z.shape:
        raise ConfigError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_rec.shape)}, {tuple(z_c.shape)} vs {tuple(z.shape)}")
    recon = _weighted_mean((x - x_rec) ** 2, pixel_weight)
    codebook = _weighted_mean(((z_c.detach() - z) ** 2).sum(1, keepdim=True), latent_weight)
    commitment = _weighted_mean(((z_c - z.detach()) ** 2).sum(1, keepdim=True), latent_weight)
    return {"recon": recon, "codebook": codebook, "commitment": commitment}


def generator_loss(fake_logits: torch.Tensor) -> torch.Tensor:
    return -F.logsigmoid(fake_logits).mean()


def gan_loss(real_logits: torch.Tensor, fake_logits: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(generator_term, discriminator_term)`` from patch logits.

    ``discriminator_term`` is the patch average of ``log D(x) + log(1 - D(x_rec))``,
    which the discriminator maximises. ``generator_term`` is the non-saturating
    ``-log D(x_rec)``, which the generator minimises.
    """
    generator = generator_loss(fake_logits)
    discriminator = F.logsigmoid(real_logits).mean() + F.logsigmoid(-fake_logits).mean()
    return generator, discriminator


def adaptive_lambda(recon_grad_norm: float, gan_grad_norm: float, clamp: float) -> float:
    lam = float(recon_grad_norm) / (float(gan_grad_norm) + LAMBDA_EPS)
    return min(max(lam, 0.0), float(clamp))


def grad_norm(loss: torch.Tensor, param: torch.Tensor) -> float:
    if not loss.requires_grad:
        return 0.0
    (g,) = torch.autograd.grad(loss, param, retain_graph=True, allow_unused=True)
    return 0.0 if g is None else float(torch.linalg.vector_norm(g))


def masked_composite(x_mask: torch.Tensor, x_rec: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Ground truth on known cells, prediction on missing cells."""
    if x_mask.shape[-2:] != x_rec.shape[-2:] or x_rec.shape[-2:] != m.shape[-2:]:
        raise ConfigError("masked_composite: spatial shapes differ")
    return x_mask + x_rec * m
