import math

import numpy as np
import pytest
import torch

from vqfill.errors import ConfigError
from vqfill.losses import LossBreakdown, adaptive_lambda, gan_loss, generator_loss, grad_norm, masked_composite, vq_loss
from vqfill.model import ArchSpec, VQModel, straight_through

MICRO_ARCH = ArchSpec(grid=8, ch=4, ch_mult=(1,), z_dim=2, codebook_size=4, disc_ndf=4, disc_layers=1)


# -- vq_loss -----------------------------------------------------------------

def test_vq_loss_hand_example():
    x = torch.ones(1, 1, 1, 1)
    x_rec = torch.zeros(1, 1, 1, 1)
    z_c = torch.tensor([1.0, 0.0]).view(1, 2, 1, 1)
    z = torch.zeros(1, 2, 1, 1)
    parts = vq_loss(x, x_rec, z_c, z)
    assert parts["recon"].item() == 1.0
    assert parts["codebook"].item() == 1.0
    assert 0.25 * parts["commitment"].item() == 0.25


def test_vq_loss_zero_when_perfect(rng):
    x = torch.from_numpy(rng.standard_normal((2, 1, 4, 4)))
    z = torch.from_numpy(rng.standard_normal((2, 3, 2, 2)))
    parts = vq_loss(x, x.clone(), z, z.clone())
    assert all(v.item() == 0.0 for v in parts.values())


def test_vq_loss_latent_terms_match_manual(rng):
    z_c = torch.from_numpy(rng.standard_normal((2, 3, 2, 2)))
    z = torch.from_numpy(rng.standard_normal((2, 3, 2, 2)))
    x = torch.zeros(2, 1, 4, 4)
    parts = vq_loss(x, x, z_c, z)
    expect = np.mean(np.sum((z_c.numpy() - z.numpy()) ** 2, axis=1))
    assert parts["codebook"].item() == pytest.approx(expect, rel=1e-12)
    assert parts["commitment"].item() == pytest.approx(expect, rel=1e-12)


def test_vq_loss_masked_normalisation(rng):
    x = torch.from_numpy(rng.standard_normal((1, 1, 4, 4)))
    x_rec = torch.from_numpy(rng.standard_normal((1, 1, 4, 4)))
    m = torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    m[..., :2, :2] = 1
    z = torch.zeros(1, 1, 1, 1)
    recon = vq_loss(x, x_rec, z, z, pixel_weight=m)["recon"].item()
    expect = ((x - x_rec) ** 2)[..., :2, :2].sum().item() / 4
    assert recon == pytest.approx(expect, rel=1e-12)


def test_vq_loss_shape_check():
    with pytest.raises(ConfigError):
        vq_loss(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 1, 1), torch.zeros(1, 1, 1, 1))


def test_loss_breakdown_fields():
    assert set(LossBreakdown().as_dict()) == {
        "recon", "codebook", "commitment", "perceptual", "gan_generator", "gan_discriminator", "lambda_used", "total",
    }


# -- GAN ---------------------------------------------------------------------

def test_gan_half_probability():
    _, d = gan_loss(torch.zeros(1, 1, 6, 6), torch.zeros(1, 1, 6, 6))
    assert d.item() == pytest.approx(-2 * math.log(2), abs=1e-7)


def test_gan_perfect_discriminator_supremum():
    _, d = gan_loss(torch.full((1, 1, 3, 3), 40.0), torch.full((1, 1, 3, 3), -40.0))
    assert -1e-12 < d.item() <= 0.0


def test_generator_term_decreases_with_fake_probability():
    vals = [generator_loss(torch.full((1, 1, 2, 2), t)).item() for t in (-3.0, -1.0, 0.0, 2.0, 5.0)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[2] == pytest.approx(math.log(2), rel=1e-6)


def test_gan_matches_log_sigmoid_formula(rng):
    real = rng.standard_normal((2, 1, 3, 3))
    fake = rng.standard_normal((2, 1, 3, 3))
    g, d = gan_loss(torch.from_numpy(real), torch.from_numpy(fake))
    sig = lambda v: 1 / (1 + np.exp(-v))
    assert d.item() == pytest.approx(np.mean(np.log(sig(real))) + np.mean(np.log(1 - sig(fake))), rel=1e-12)
    assert g.item() == pytest.approx(-np.mean(np.log(sig(fake))), rel=1e-12)


# -- adaptive lambda ---------------------------------------------------------

def test_adaptive_lambda_examples():
    assert adaptive_lambda(0.0, 3.0, 1e4) == 0.0
    assert adaptive_lambda(5.0, 5.0, 1e4) == pytest.approx(1.0, rel=1e-6)
    assert adaptive_lambda(2.0, 0.5, 1e4) == pytest.approx(4.0, rel=1e-5)
    assert adaptive_lambda(1.0, 0.0, 1e4) == 1e4
    assert adaptive_lambda(1.0, 0.0, 50.0) == 50.0


@pytest.mark.parametrize("c", [0.5, 3.0, 1e3])
def test_adaptive_lambda_scale_invariant(c):
    assert adaptive_lambda(2.0 * c, 0.7 * c, 1e9) == pytest.approx(2.0 / 0.7, rel=1e-5)


def test_grad_norm():
    p = torch.tensor([3.0, 4.0], requires_grad=True)
    assert grad_norm((p**2).sum() / 2, p) == pytest.approx(5.0)
    assert grad_norm(torch.tensor(1.0), p) == 0.0


# -- masked composite --------------------------------------------------------

def test_masked_composite_cases(rng):
    x = torch.from_numpy(rng.standard_normal((1, 1, 4, 4)))
    x_rec = torch.from_numpy(rng.standard_normal((1, 1, 4, 4)))
    zeros, ones = torch.zeros(1, 1, 4, 4, dtype=torch.float64), torch.ones(1, 1, 4, 4, dtype=torch.float64)
    assert torch.equal(masked_composite(x * (1 - zeros), x_rec, zeros), x)
    assert torch.equal(masked_composite(x * (1 - ones), x_rec, ones), x_rec)
    m = zeros.clone()
    m[..., 1, 2] = 1
    base = masked_composite(x * (1 - m), x_rec, m)
    bumped = x_rec.clone()
    bumped[..., 0, 0] += 10
    assert torch.equal(masked_composite(x * (1 - m), bumped, m), base)
    assert base[..., 1, 2] == x_rec[..., 1, 2]


def test_masked_composite_shape_check():
    with pytest.raises(ConfigError):
        masked_composite(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2))


# -- gradient routing (finite differences, float64) --------------------------

@pytest.fixture
def micro_model():
    torch.manual_seed(3)
    model = VQModel(MICRO_ARCH).double().train()
    # Spread the codes so that small perturbations do not flip assignments.
    model.codebook.embedding.weight.data = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]],
                                                        dtype=torch.float64)
    return model


def fd_grad(fn, tensor, eps=1e-5):
    grad = torch.zeros_like(tensor)
    flat, gflat = tensor.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = fn()
        flat[i] = orig - eps
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * eps)
    return grad


def rel_err(a, b):
    return (torch.linalg.vector_norm(a - b) / torch.linalg.vector_norm(b)).item()


def test_straight_through_pass_through_fd(micro_model):
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64)
    target = torch.randn(2, 1, 8, 8, generator=g, dtype=torch.float64)
    z_c = micro_model.encode(x).detach().requires_grad_(True)
    z, _ = micro_model.quantize(z_c)
    loss = ((micro_model.decode(straight_through(z_c, z)) - target) ** 2).mean()
    (g_zc,) = torch.autograd.grad(loss, z_c)
    z_fd = z.detach().clone().contiguous()
    with torch.no_grad():
        g_z = fd_grad(lambda: ((micro_model.decode(z_fd) - target) ** 2).mean().item(), z_fd)
    assert rel_err(g_zc, g_z) < 1e-4


def test_codebook_term_routes_only_to_codes(micro_model):
    x = torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(1), dtype=torch.float64)
    _, z_c, z, idx = micro_model(x)
    codebook = vq_loss(x, x, z_c, z)["codebook"]
    enc_params = list(micro_model.encoder.parameters())
    grads = torch.autograd.grad(codebook, enc_params + [micro_model.codebook.codes], allow_unused=True)
    assert all(gr is None or torch.all(gr == 0) for gr in grads[:-1])
    # The code gradient matches finite differences of |sg(z_c) - c_idx|^2 with z_c frozen.
    z_c_fixed = z_c.detach()
    codes = micro_model.codebook.codes.detach().clone()

    def value():
        zq = codes[idx].permute(0, 3, 1, 2)  # (B, h, w, d) -> (B, d, h, w)
        return ((z_c_fixed - zq) ** 2).sum(1).mean().item()

    assert rel_err(grads[-1], fd_grad(value, codes)) < 1e-4


def test_commitment_term_routes_only_to_encoder(micro_model):
    x = torch.randn(2, 1, 8, 8, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
    _, z_c, z, _ = micro_model(x)
    commitment = vq_loss(x, x, z_c, z)["commitment"]
    w = micro_model.encoder.conv_out.weight
    g_codes, g_w = torch.autograd.grad(commitment, [micro_model.codebook.codes, w], allow_unused=True)
    assert g_codes is None or torch.all(g_codes == 0)
    z_fixed = z.detach()
    with torch.no_grad():
        fd = fd_grad(lambda: ((micro_model.encode(x) - z_fixed) ** 2).sum(1).mean().item(), w.data)
    assert rel_err(g_w, fd) < 1e-4
