import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import gaussian_kl_quadrature, gradient_check
from protovae.vae import Decoder, Encoder, ModelDims, elbo_loss, kl_per_dim, reparameterize

TINY = ModelDims(data_shape=(8, 8, 1), latent_dim=3, metric_dim=2, conv_channels=(2, 3), hidden_dim=6)


def tiny_nets(seed=0):
    torch.manual_seed(seed)
    return Encoder(TINY).double(), Decoder(TINY).double()


def tiny_images(b=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, 8, 8, 1, generator=g, dtype=torch.float64)


def test_default_dims():
    dims = ModelDims()
    assert dims.conv_channels == (32, 32, 64, 64)
    assert dims.hidden_dim == 128
    assert dims.feature_shape == (64, 2, 2)


@pytest.mark.parametrize("kw", [
    dict(latent_dim=1), dict(metric_dim=1), dict(data_shape=(24, 24, 1)), dict(data_shape=(8, 8, 1)),
])
def test_model_dims_rejects(kw):
    with pytest.raises(ValueError):
        ModelDims(**kw)


def test_encoder_shapes_and_determinism():
    enc, _ = tiny_nets()
    x = tiny_images(5)
    x[1] = x[0]
    mu, log_var = enc(x)
    assert mu.shape == log_var.shape == (5, 3)
    torch.testing.assert_close(mu[0], mu[1], rtol=0, atol=0)
    torch.testing.assert_close(log_var[0], log_var[1], rtol=0, atol=0)
    mu2, _ = enc(x)
    assert torch.equal(mu, mu2)


def test_encoder_rejects_shape():
    enc, _ = tiny_nets()
    with pytest.raises(ValueError, match="shape"):
        enc(torch.zeros(2, 16, 16, 1, dtype=torch.float64))


def test_log_var_clamped():
    enc, _ = tiny_nets()
    with torch.no_grad():
        enc.head.bias[3:] = 1e3
    _, log_var = enc(tiny_images())
    assert torch.all(log_var == 10.0)


def test_decoder_shapes_and_determinism():
    _, dec = tiny_nets()
    z = torch.randn(6, 3, dtype=torch.float64)
    out = dec(z)
    assert out.shape == (6, 8, 8, 1)
    assert torch.equal(out, dec(z))
    with pytest.raises(ValueError, match="width|shape"):
        dec(torch.zeros(2, 4, dtype=torch.float64))


def test_encoder_pixel_gradient():
    enc, _ = tiny_nets()
    x = tiny_images().requires_grad_(True)
    err = gradient_check(lambda: enc(x)[0].mean(), [x], h=1e-5)
    assert err < 1e-4


def test_decoder_code_gradient():
    _, dec = tiny_nets()
    z = torch.randn(3, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1)).requires_grad_(True)
    err = gradient_check(lambda: torch.sigmoid(dec(z)).mean(), [z], h=1e-5)
    assert err < 1e-4


def test_elbo_parameter_gradient():
    enc, dec = tiny_nets()
    x = (tiny_images() > 0.5).double()
    eps = torch.randn(4, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(2))

    def neg_elbo():
        mu, log_var = enc(x)
        return -elbo_loss(x, dec(reparameterize(mu, log_var, eps)), mu, log_var)

    params = [p for m in (enc, dec) for p in m.parameters()]
    assert gradient_check(neg_elbo, params, h=1e-5) < 1e-4


def test_reparameterize_cases():
    mu = torch.tensor([[0.3, -1.0, 2.0]], dtype=torch.float64)
    lv = torch.tensor([[0.5, 0.1, -0.7]], dtype=torch.float64)
    assert torch.equal(reparameterize(mu, lv, torch.zeros_like(mu)), mu)
    ones = torch.ones(1, 3, dtype=torch.float64)
    assert torch.equal(reparameterize(torch.zeros_like(mu), torch.zeros_like(mu), ones), ones)
    e1 = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    z = reparameterize(mu, torch.full_like(mu, 2 * math.log(3)), e1)
    torch.testing.assert_close(z, mu + 3 * e1, rtol=0, atol=1e-12)


def test_reparameterize_moments():
    mu = torch.tensor([0.5, -2.0], dtype=torch.float64)
    lv = torch.tensor([0.3, -1.2], dtype=torch.float64)
    eps = torch.randn(100_000, 2, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    z = reparameterize(mu, lv, eps)
    sigma = torch.exp(0.5 * lv)
    assert torch.all((z.mean(0) - mu).abs() < 4 * sigma / math.sqrt(len(z)))
    assert torch.all(((z.var(0) / lv.exp()) - 1).abs() < 0.05)


def test_kl_closed_form_cases():
    zeros = torch.zeros(5, 3, dtype=torch.float64)
    assert torch.equal(kl_per_dim(zeros, zeros), torch.zeros(3, dtype=torch.float64))
    mu = torch.zeros(2, 3, dtype=torch.float64)
    mu[:, 1] = 1.0
    torch.testing.assert_close(kl_per_dim(mu, torch.zeros_like(mu)),
                               torch.tensor([0.0, 0.5, 0.0], dtype=torch.float64))


def test_kl_matches_quadrature():
    rng = np.random.default_rng(3)
    mu = rng.uniform(-2, 2, size=(6, 1))
    lv = rng.uniform(-2, 1.5, size=(6, 1))
    kl = kl_per_dim(torch.tensor(mu), torch.tensor(lv))
    # batch-averaged: compare each example separately
    for i in range(6):
        ref = gaussian_kl_quadrature(mu[i, 0], lv[i, 0])
        got = float(kl_per_dim(torch.tensor(mu[i : i + 1]), torch.tensor(lv[i : i + 1]))[0])
        assert abs(got - ref) < 1e-6
    ref_mean = np.mean([gaussian_kl_quadrature(m, v) for m, v in zip(mu[:, 0], lv[:, 0])])
    assert abs(float(kl[0]) - ref_mean) < 1e-6


def test_elbo_two_pixel_chance():
    x = torch.tensor([[[[1.0], [0.0]]]], dtype=torch.float64)
    zeros = torch.zeros(1, 2, dtype=torch.float64)
    val = elbo_loss(x, torch.zeros_like(x), zeros, zeros)
    assert float(val) == pytest.approx(-2 * math.log(2), abs=1e-12)


def test_elbo_perfect_reconstruction_limit():
    x = torch.tensor([[[[1.0], [0.0]]]], dtype=torch.float64)
    zeros = torch.zeros(1, 2, dtype=torch.float64)
    vals = [float(elbo_loss(x, (2 * x - 1) * s, zeros, zeros)) for s in (5, 10, 30)]
    assert all(v < 0 for v in vals)
    assert vals[0] < vals[1] < vals[2]
    assert vals[2] > -1e-12


def test_elbo_rejects_bad_pixels():
    x = torch.full((1, 2, 2, 1), 1.5, dtype=torch.float64)
    zeros = torch.zeros(1, 2, dtype=torch.float64)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        elbo_loss(x, torch.zeros_like(x), zeros, zeros)
    with pytest.raises(ValueError, match="shape"):
        elbo_loss(torch.zeros(1, 2, 2, 1), torch.zeros(1, 2, 2, 2), zeros, zeros)


finite = st.floats(-8, 8, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(finite, st.floats(-10, 10)), min_size=1, max_size=6))
def test_kl_nonnegative(rows):
    mu = torch.tensor([[m] for m, _ in rows], dtype=torch.float64)
    lv = torch.tensor([[v] for _, v in rows], dtype=torch.float64)
    assert float(kl_per_dim(mu, lv)[0]) >= 0


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.booleans(), min_size=4, max_size=4),
    st.lists(st.floats(-30, 30), min_size=4, max_size=4),
    st.tuples(finite, st.floats(-10, 10)),
)
def test_elbo_nonpositive_on_binary(pixels, logits, post):
    x = torch.tensor(pixels, dtype=torch.float64).view(1, 2, 2, 1)
    lg = torch.tensor(logits, dtype=torch.float64).view(1, 2, 2, 1)
    mu = torch.tensor([[post[0]]], dtype=torch.float64)
    lv = torch.tensor([[post[1]]], dtype=torch.float64)
    assert float(elbo_loss(x, lg, mu, lv)) <= 0
