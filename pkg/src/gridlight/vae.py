"""Convolutional variational autoencoder over the global observation matrix.

The encoder maps a (rows, cols, 33) intersection-observation stack through
three 3x3 conv layers (strides 1, 2, 1; ReLU after the first two only),
flattens, and projects to a mean and log-variance of the latent posterior.
The decoder mirrors it with transposed convs and a sigmoid output, so
reconstructions live in (0, 1) like the densities and flags they model.

Training is online: one gradient step per call, on whatever batch the
caller hands in. Downstream consumers get the posterior MEAN as a plain
numpy vector (detached); the reparameterized sample only feeds the VAE's
own loss. With the default 4x4 grid the flattened feature size is 1024 and
the latent dimension 16.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Conv2d, ConvTranspose2d, Linear, Tensor


@dataclass(frozen=True)
class LatentSample:
    mu: Tensor
    logvar: Tensor
    eps: np.ndarray
    z: Tensor


@dataclass(frozen=True)
class LossRecord:
    total: float
    recon: float
    kl: float


def reparameterize(mu: Tensor, logvar: Tensor, rng: np.random.Generator) -> LatentSample:
    """z = mu + eps * exp(logvar / 2), eps ~ N(0, I)."""
    eps = rng.standard_normal(mu.shape)
    z = mu + Tensor(eps) * (logvar * 0.5).exp()
    return LatentSample(mu, logvar, eps, z)


def vae_loss(x, x_recon: Tensor, mu: Tensor, logvar: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """(total, reconstruction, kl) losses as graph Tensors.

    Reconstruction is the Bernoulli negative log-likelihood summed over all
    elements; KL is the closed-form divergence from the unit Gaussian. The
    input must lie in [0, 1]."""
    xt = x if isinstance(x, Tensor) else Tensor(x)
    if xt.shape != x_recon.shape:
        raise ValueError(f"input shape {xt.shape} != reconstruction shape {x_recon.shape}")
    if np.any(xt.data < 0.0) or np.any(xt.data > 1.0):
        raise ValueError("vae_loss input must lie in [0, 1]")
    rc = x_recon.clamp(1e-12, 1.0 - 1e-12)
    recon = -(xt * rc.log() + (1.0 - xt) * (1.0 - rc).log()).sum()
    kl = (-0.5) * (1.0 + logvar - mu * mu - logvar.exp()).sum()
    return recon + kl, recon, kl


class ConvVae:
    def __init__(
        self,
        grid_shape: tuple[int, int] = (4, 4),
        channels: int = 33,
        latent_dim: int = 16,
        hidden_channels: tuple[int, int, int] = (64, 128, 256),
        strides: tuple[int, int, int] = (1, 2, 1),
        lr: float = 1e-3,
        seed: int = 0,
    ) -> None:
        h, w = grid_shape
        c0, c1, c2 = hidden_channels
        s0, s1, s2 = strides
        rng = np.random.default_rng(seed)
        self.grid_shape = grid_shape
        self.channels = channels
        self.latent_dim = latent_dim
        self.strides = strides
        self.enc1 = Conv2d(channels, c0, 3, s0, 1, rng)
        self.enc2 = Conv2d(c0, c1, 3, s1, 1, rng)
        self.enc3 = Conv2d(c1, c2, 3, s2, 1, rng)
        fh, fw = h, w
        for s in strides:
            fh = (fh + 2 - 3) // s + 1
            fw = (fw + 2 - 3) // s + 1
            if fh <= 0 or fw <= 0:
                raise ValueError(f"grid {grid_shape} too small for encoder strides {strides}")
        self.feature_shape = (c2, fh, fw)
        self.flat_dim = c2 * fh * fw
        self.fc_mu = Linear(self.flat_dim, latent_dim, rng, init="xavier")
        self.fc_logvar = Linear(self.flat_dim, latent_dim, rng, init="xavier")
        self.fc_up = Linear(latent_dim, self.flat_dim, rng, init="xavier")
        # Decoder mirrors the encoder; output_padding = stride-1 undoes the
        # floor in each strided conv, restoring the input shape exactly.
        self.dec1 = ConvTranspose2d(c2, c1, 3, s2, 1, s2 - 1, rng)
        self.dec2 = ConvTranspose2d(c1, c0, 3, s1, 1, s1 - 1, rng)
        self.dec3 = ConvTranspose2d(c0, channels, 3, s0, 1, s0 - 1, rng)
        dh, dw = fh, fw
        for s in reversed(strides):
            dh = (dh - 1) * s - 2 + 3 + (s - 1)
            dw = (dw - 1) * s - 2 + 3 + (s - 1)
        if (dh, dw) != (h, w):
            raise ValueError(
                f"decoder restores {dh}x{dw} but encoder consumed {h}x{w}; adjust strides"
            )
        self.optimizer = Adam(self.parameters(), lr)

    def _layers(self) -> dict[str, object]:
        return {
            "enc1": self.enc1, "enc2": self.enc2, "enc3": self.enc3,
            "fc_mu": self.fc_mu, "fc_logvar": self.fc_logvar, "fc_up": self.fc_up,
            "dec1": self.dec1, "dec2": self.dec2, "dec3": self.dec3,
        }

    def parameters(self) -> list[Tensor]:
        out = []
        for layer in self._layers().values():
            out.extend(layer.parameters())
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for name, layer in self._layers().items():
            params = layer.parameters()
            out[f"{name}.w"] = params[0]
            out[f"{name}.b"] = params[1]
        return out

    def _to_batch(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[np.newaxis]
        h, w = self.grid_shape
        if x.shape[1:] != (h, w, self.channels):
            raise ValueError(
                f"expected observation stack (*, {h}, {w}, {self.channels}), got {x.shape}"
            )
        return x, single

    def encode(self, x) -> tuple[Tensor, Tensor]:
        """x: (N, rows, cols, channels) or a single (rows, cols, channels)."""
        xb, _ = self._to_batch(x)
        t = Tensor(np.ascontiguousarray(xb.transpose(0, 3, 1, 2)))
        h = self.enc3(self.enc2(self.enc1(t).relu()).relu())  # no ReLU on the code
        flat = h.reshape((xb.shape[0], self.flat_dim))
        return self.fc_mu(flat), self.fc_logvar(flat)

    def decode(self, z) -> Tensor:
        """Latent (N, latent_dim) to reconstruction (N, rows, cols, channels)."""
        zt = z if isinstance(z, Tensor) else Tensor(np.atleast_2d(z))
        n = zt.shape[0]
        h = self.fc_up(zt).reshape((n,) + self.feature_shape)
        h = self.dec2(self.dec1(h).relu()).relu()
        out = self.dec3(h).sigmoid()
        return out.transpose((0, 2, 3, 1))

    def posterior_mean(self, x) -> np.ndarray:
        """Detached latent mean for downstream consumers; no graph is built."""
        _, single = self._to_batch(x)
        with ad.no_grad():
            mu, _ = self.encode(x)
        return mu.data[0].copy() if single else mu.data.copy()

    def train_step(self, x, rng: np.random.Generator) -> tuple[np.ndarray, LossRecord]:
        """One online gradient step on `x`; returns the detached posterior
        mean and the loss breakdown."""
        xb, single = self._to_batch(x)
        mu, logvar = self.encode(xb)
        sample = reparameterize(mu, logvar, rng)
        recon = self.decode(sample.z)
        total, rec, kl = vae_loss(xb, recon, mu, logvar)
        if not np.isfinite(total.data):
            raise FloatingPointError(
                f"VAE loss diverged: total={total.data}, recon={rec.data}, kl={kl.data}"
            )
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        latent = mu.data[0].copy() if single else mu.data.copy()
        return latent, LossRecord(total.item(), rec.item(), kl.item())
