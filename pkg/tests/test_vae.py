import math

import numpy as np
import pytest
import torch

from latentuda.losses import NonFiniteLossError, to_luma
from latentuda.vae import (
    SOBEL_MAX_MAGNITUDE,
    VAE,
    GaussianPosterior,
    VaeConfig,
    extract_edges,
    reparameterize,
    vae_training_step,
)
from oracles import sobel_magnitude_direct

SMALL = VaeConfig(latent_dim=8, encoder_channels=[8, 16], decoder_channels=[16, 8], input_size=(16, 16))


def test_edges_match_direct_sobel():
    x = torch.rand(2, 3, 12, 10, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    got = extract_edges(x)
    gray = to_luma(x)
    for b in range(2):
        want = np.clip(sobel_magnitude_direct(gray[b, 0].numpy()) / math.sqrt(20), 0, 1)
        np.testing.assert_allclose(got[b, 0].numpy(), want, atol=1e-12)


def test_edges_flat_image_is_zero():
    assert extract_edges(torch.full((1, 3, 9, 9), 0.37)).abs().max() == 0


def test_edges_step_image():
    x = torch.zeros(1, 3, 8, 8)
    x[..., 4:] = 1.0
    e = extract_edges(x)[0, 0]
    # columns 3 and 4 straddle the step; |gx| = 4 there
    assert torch.allclose(e[:, 3], torch.full((8,), 4 / SOBEL_MAX_MAGNITUDE))
    assert torch.allclose(e[:, 4], torch.full((8,), 4 / SOBEL_MAX_MAGNITUDE))
    assert e[:, :3].abs().max() == 0 and e[:, 5:].abs().max() == 0


def test_edges_normalization_is_tight():
    # gx = 4 and gy = 2 at the centre: the largest magnitude a [0, 1] image allows
    patch = torch.tensor([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    assert extract_edges(patch.expand(1, 3, 3, 3))[0, 0, 1, 1] == pytest.approx(1.0)
    rng = torch.Generator().manual_seed(1)
    assert extract_edges(torch.rand(64, 3, 16, 16, generator=rng).round()).max() <= 1.0


def test_edges_carry_no_gradient():
    x = torch.rand(1, 3, 8, 8, requires_grad=True)
    assert not extract_edges(x).requires_grad


def test_reparameterize():
    q = GaussianPosterior(torch.tensor([[1.0, -2.0]]), torch.log(torch.tensor([[4.0, 0.25]])))
    z = reparameterize(q, noise=torch.tensor([[1.0, 2.0]]))
    assert torch.allclose(z, torch.tensor([[3.0, -1.0]]))
    with pytest.raises(ValueError):
        reparameterize(q, noise=torch.zeros(1, 3))


def test_reparameterize_moments():
    g = torch.Generator().manual_seed(0)
    mu = torch.full((20000, 1), 0.5)
    q = GaussianPosterior(mu, torch.full_like(mu, math.log(0.09)))
    z = reparameterize(q, generator=g)
    assert z.mean().item() == pytest.approx(0.5, abs=0.01)
    assert z.std().item() == pytest.approx(0.3, abs=0.01)


@pytest.mark.parametrize("stage", [0, 1, -1])
def test_vae_shapes(stage):
    cfg = VaeConfig(latent_dim=8, encoder_channels=[8, 16], decoder_channels=[16, 8], input_size=(16, 16),
                    edge_injection_stage=stage)
    vae = VAE(cfg)
    x = torch.rand(3, 3, 16, 16)
    x_hat, q, z = vae(x)
    assert x_hat.shape == x.shape
    assert q.mu.shape == q.log_var.shape == z.shape == (3, 8)
    assert 0 <= x_hat.min() and x_hat.max() <= 1


def test_decoder_uses_edges():
    torch.manual_seed(0)
    vae = VAE(SMALL).eval()
    z = torch.zeros(1, 8)
    a = vae.decode(z, torch.zeros(1, 1, 16, 16))
    b = vae.decode(z, torch.ones(1, 1, 16, 16))
    assert not torch.allclose(a, b)


def test_vae_input_errors():
    vae = VAE(SMALL)
    with pytest.raises(ValueError, match="expects"):
        vae.encode(torch.rand(1, 3, 32, 32))
    with pytest.raises(ValueError, match="latent"):
        vae.decode(torch.zeros(1, 4), torch.zeros(1, 1, 16, 16))
    with pytest.raises(ValueError, match="edge map"):
        vae.decode(torch.zeros(1, 8), torch.zeros(1, 1, 8, 8))


def test_vae_config_errors():
    with pytest.raises(ValueError):
        VaeConfig(input_size=(60, 60))
    with pytest.raises(ValueError):
        VaeConfig(encoder_channels=[8], decoder_channels=[8, 4])
    with pytest.raises(ValueError):
        VaeConfig(edge_injection_stage=9)


def test_reconstruct_is_deterministic():
    torch.manual_seed(0)
    vae = VAE(SMALL).eval()
    x = torch.rand(2, 3, 16, 16)
    assert torch.equal(vae.reconstruct(x), vae.reconstruct(x))


def test_training_step_report():
    torch.manual_seed(0)
    vae = VAE(SMALL)
    x = torch.rand(4, 3, 16, 16)
    rep = vae_training_step(vae, x, (1.0, 0.01, 0.0), generator=torch.Generator().manual_seed(0))
    v = rep.values
    assert set(v) == {"reconstruction", "kl", "perceptual", "vae_total"}
    assert v["perceptual"] == 0
    assert v["vae_total"] == pytest.approx(v["reconstruction"] + 0.01 * v["kl"], rel=1e-5)
    rep.total.backward()
    assert all(p.grad is not None for p in vae.encoder.parameters())


def test_training_step_perceptual():
    torch.manual_seed(0)
    vae = VAE(SMALL)
    x = torch.rand(2, 3, 16, 16)
    rep = vae_training_step(vae, x, (1.0, 0.0, 1.0), feature_fn=lambda im: im.mean(dim=1))
    assert rep.values["perceptual"] > 0


def test_training_step_rejects_non_finite():
    vae = VAE(SMALL)
    with torch.no_grad():
        vae.fc_log_var.bias.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError):
        vae_training_step(vae, torch.rand(2, 3, 16, 16), (1.0, 0.01, 0.0))


def test_vae_overfits_small_batch():
    torch.manual_seed(0)
    vae = VAE(SMALL)
    x = torch.rand(4, 3, 16, 16, generator=torch.Generator().manual_seed(1)) * 0.5 + 0.25
    opt = torch.optim.RMSprop(vae.parameters(), lr=1e-3)
    g = torch.Generator().manual_seed(2)
    first = None
    for _ in range(150):
        rep = vae_training_step(vae, x, (1.0, 1e-4, 0.0), generator=g)
        opt.zero_grad()
        rep.total.backward()
        opt.step()
        first = first if first is not None else rep.values["reconstruction"]
    assert rep.values["reconstruction"] < 0.5 * first
