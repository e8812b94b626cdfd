"""Convolutional VAE: shapes, reparameterization, loss values, training."""

import numpy as np
import pytest

from gradcheck import fd_gradcheck
from gridlight.autodiff import Tensor
from gridlight.vae import ConvVae, LossRecord, reparameterize, vae_loss

TINY = dict(grid_shape=(2, 2), channels=2, hidden_channels=(2, 3, 4),
            latent_dim=3, seed=3)


def zero_params(net):
    for p in net.parameters():
        p.data[...] = 0.0


def sparse_batch(rng, n, shape):
    """Synthetic city matrices: mostly empty with occasional saturated cells,
    the texture the loss is designed for."""
    x = np.zeros((n, *shape))
    mask = rng.random(x.shape) < 0.12
    x[mask] = 1.0
    x += rng.random(x.shape) * 0.05
    return np.clip(x, 0.0, 1.0)


# --- architecture shapes --------------------------------------------------

def test_default_flatten_and_latent_sizes():
    net = ConvVae()
    assert net.flat_dim == 1024
    assert net.feature_shape == (256, 2, 2)
    assert net.fc_mu.W.shape == (1024, 16)
    assert net.fc_logvar.W.shape == (1024, 16)
    assert net.fc_up.W.shape == (16, 1024)


def test_encode_decode_shapes_roundtrip():
    net = ConvVae()
    x = np.random.default_rng(0).random((4, 4, 33))
    mu, logvar = net.encode(x)
    assert mu.shape == (1, 16) and logvar.shape == (1, 16)
    out = net.decode(mu)
    assert out.shape == (1, 4, 4, 33)
    batch = np.random.default_rng(1).random((5, 4, 4, 33))
    mu_b, _ = net.encode(batch)
    assert mu_b.shape == (5, 16)
    assert net.decode(mu_b).shape == (5, 4, 4, 33)
    assert net.posterior_mean(x).shape == (16,)
    assert net.posterior_mean(batch).shape == (5, 16)


def test_decoder_output_in_unit_interval():
    net = ConvVae(**TINY)
    z = Tensor(np.random.default_rng(2).normal(size=(3, 3)))
    out = net.decode(z).data
    assert np.all(out > 0.0) and np.all(out < 1.0)


def test_rejects_undersized_grid():
    with pytest.raises(ValueError):
        ConvVae(grid_shape=(1, 1), channels=2)


def test_zero_weights_give_neutral_outputs():
    net = ConvVae(**TINY)
    zero_params(net)
    x = np.random.default_rng(3).random((2, 2, 2))
    mu, logvar = net.encode(x)
    assert not mu.data.any()
    assert not logvar.data.any()
    out = net.decode(mu)
    np.testing.assert_allclose(out.data, 0.5)


def test_named_parameters_cover_all_layers():
    net = ConvVae(**TINY)
    named = net.named_parameters()
    assert len(named) == 18
    assert set(named) == {
        f"{layer}.{suffix}"
        for layer in ("enc1", "enc2", "enc3", "fc_mu", "fc_logvar", "fc_up",
                      "dec1", "dec2", "dec3")
        for suffix in ("w", "b")
    }
    assert all(id(named[k]) in {id(p) for p in net.parameters()} for k in named)


# --- reparameterization ---------------------------------------------------

def test_reparameterize_identity():
    rng = np.random.default_rng(5)
    mu = Tensor(rng.normal(size=(4, 6)))
    logvar = Tensor(np.zeros((4, 6)))
    s = reparameterize(mu, logvar, rng)
    np.testing.assert_allclose(s.z.data, mu.data + s.eps)  # unit sigma
    lv = Tensor(np.full((4, 6), np.log(4.0)))
    s2 = reparameterize(mu, lv, rng)
    np.testing.assert_allclose(s2.z.data, mu.data + 2.0 * s2.eps)


def test_reparameterize_statistics():
    rng = np.random.default_rng(6)
    n = 100_000
    mu = Tensor(np.full((n,), 2.0))
    logvar = Tensor(np.full((n,), np.log(4.0)))
    z = reparameterize(mu, logvar, rng).z.data
    assert abs(z.mean() - 2.0) < 3.0 * 2.0 / np.sqrt(n)
    assert abs(z.var() - 4.0) < 3.0 * np.sqrt(2.0) * 4.0 / np.sqrt(n)


def test_reparameterize_is_differentiable():
    rng = np.random.default_rng(7)
    mu = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    logvar = Tensor(rng.normal(size=(2, 3)) * 0.1, requires_grad=True)
    fd_gradcheck(lambda: reparameterize(mu, logvar,
                                        np.random.default_rng(0)).z.exp().sum(),
                 [mu, logvar], rng)


# --- loss -------------------------------------------------------------------

def test_vae_loss_reference_values():
    x = np.full((2, 3), 0.5)
    recon = Tensor(np.full((2, 3), 0.5))
    mu = Tensor(np.zeros((1, 4)))
    logvar = Tensor(np.zeros((1, 4)))
    total, rec, kl = vae_loss(x, recon, mu, logvar)
    assert rec.item() == pytest.approx(6.0 * np.log(2.0))
    assert kl.item() == pytest.approx(0.0)
    assert total.item() == pytest.approx(rec.item())

    mu1 = Tensor(np.ones((1, 4)))
    _, _, kl1 = vae_loss(x, recon, mu1, logvar)
    assert kl1.item() == pytest.approx(2.0)  # 0.5 per latent element


def test_vae_loss_validation():
    ok = Tensor(np.full((2, 2), 0.5))
    mu = Tensor(np.zeros((1, 2)))
    with pytest.raises(ValueError):
        vae_loss(np.full((2, 3), 0.5), ok, mu, mu)
    with pytest.raises(ValueError):
        vae_loss(np.full((2, 2), 1.5), ok, mu, mu)
    with pytest.raises(ValueError):
        vae_loss(np.full((2, 2), -0.1), ok, mu, mu)


def test_kl_nonnegative_on_random_inputs():
    rng = np.random.default_rng(8)
    x = np.full((1, 1), 0.5)
    recon = Tensor(x.copy())
    for _ in range(1000):
        mu = Tensor(rng.normal(scale=2.0, size=(1, 5)))
        logvar = Tensor(rng.normal(scale=2.0, size=(1, 5)))
        _, _, kl = vae_loss(x, recon, mu, logvar)
        assert kl.item() >= 0.0


def test_full_loss_gradients_fd():
    rng = np.random.default_rng(9)
    net = ConvVae(**TINY)
    x = sparse_batch(rng, 2, (2, 2, 2))
    eps = rng.standard_normal((2, 3))

    def build():
        mu, logvar = net.encode(x)
        z = mu + Tensor(eps) * (logvar * 0.5).exp()
        recon = net.decode(z)
        total, _, _ = vae_loss(x, recon, mu, logvar)
        return total

    fd_gradcheck(build, net.parameters(), rng, n_coords=3)


# --- training ---------------------------------------------------------------

def test_train_step_reduces_loss_on_fixed_batch():
    rng = np.random.default_rng(10)
    net = ConvVae(grid_shape=(2, 2), channels=4, hidden_channels=(6, 8, 10),
                  latent_dim=4, lr=1e-2, seed=4)
    batch = sparse_batch(rng, 16, (2, 2, 4))
    first: LossRecord | None = None
    last: LossRecord | None = None
    step_rng = np.random.default_rng(11)
    for _ in range(200):
        latent, rec = net.train_step(batch, step_rng)
        if first is None:
            first = rec
        last = rec
    assert isinstance(latent, np.ndarray) and latent.shape == (16, 4)
    assert last.total < 0.7 * first.total
    assert last.recon >= 0.0 and last.kl >= 0.0


def test_train_step_zero_lr_freezes_params():
    rng = np.random.default_rng(12)
    net = ConvVae(**TINY, lr=0.0)
    before = [p.data.copy() for p in net.parameters()]
    net.train_step(sparse_batch(rng, 4, (2, 2, 2)), rng)
    for p, b in zip(net.parameters(), before):
        np.testing.assert_array_equal(p.data, b)


def test_training_deterministic_for_seed():
    def run():
        rng = np.random.default_rng(13)
        net = ConvVae(**TINY, lr=1e-3)
        batch = sparse_batch(np.random.default_rng(14), 4, (2, 2, 2))
        for _ in range(5):
            net.train_step(batch, rng)
        return [p.data.copy() for p in net.parameters()]

    for a, b in zip(run(), run()):
        np.testing.assert_array_equal(a, b)


def test_posterior_mean_detached_and_deterministic():
    net = ConvVae(**TINY)
    x = np.random.default_rng(15).random((2, 2, 2))
    z1 = net.posterior_mean(x)
    z2 = net.posterior_mean(x)
    assert isinstance(z1, np.ndarray)
    np.testing.assert_array_equal(z1, z2)
    # using the latent downstream must not touch the VAE graph
    t = Tensor(z1, requires_grad=True)
    (t * t).sum().backward()
    assert all(p.grad is None for p in net.parameters())
