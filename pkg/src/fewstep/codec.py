"""Pixel <-> latent codecs: identity for 2D data, a frozen autoencoder for sprites.

The autoencoder is trained once, its latent statistics are folded into
encode/decode so latents are roughly unit scale, and it is then frozen for the
rest of the pipeline.  Diffusion, distillation, and latent rewards all operate
on these codes.
"""
import numpy as np

import fewstep.engine as E
from fewstep.engine import Tensor
from . import nn
from .checkpoint import param_hash
from .optim import AdamW


class CodecError(RuntimeError):
    pass


class LatentCodec:
    """Deterministic encoder/decoder pair with recorded reconstruction quality.

    kind "identity" passes data through untouched (the 2D domain); kind
    "trained-ae" wraps a small MLP autoencoder with latent whitening stats.
    """

    def __init__(self, kind, latent_dim, encoder=None, decoder=None,
                 pixel_dim=None, latent_mean=None, latent_std=None):
        if kind not in ("identity", "trained-ae"):
            raise CodecError(f"unknown codec kind {kind!r}")
        if kind == "trained-ae" and (encoder is None or decoder is None):
            raise CodecError("trained-ae codec needs encoder and decoder nets")
        self.kind = kind
        self.latent_dim = latent_dim
        self.encoder = encoder
        self.decoder = decoder
        self.pixel_dim = pixel_dim if pixel_dim is not None else latent_dim
        self.latent_mean = latent_mean
        self.latent_std = latent_std
        self.frozen = kind == "identity"
        self.usable = True
        self.recon_mse = 0.0

    @property
    def compression_factor(self):
        return self.pixel_dim / self.latent_dim

    def _check(self):
        if not self.usable:
            raise CodecError("codec failed pretraining and is marked unusable")
        if not self.frozen:
            raise CodecError("codec must be frozen before use")

    def freeze(self, recon_mse):
        self.recon_mse = float(recon_mse)
        self.frozen = True

    def param_hash(self):
        if self.kind == "identity":
            return "identity"
        return param_hash(list(self.encoder.named_parameters())
                          + list(self.decoder.named_parameters()))

    def encode(self, x):
        """Pixels (n, pixel_dim) -> whitened latents (n, latent_dim)."""
        self._check()
        x = np.asarray(x, dtype=np.float64)
        if self.kind == "identity":
            return x
        with E.no_grad():
            z = self.encoder(Tensor(x)).data
        return (z - self.latent_mean) / self.latent_std

    def decode(self, z):
        self._check()
        z = np.asarray(z, dtype=np.float64)
        if self.kind == "identity":
            return z
        with E.no_grad():
            return self.decoder(Tensor(z * self.latent_std + self.latent_mean)).data

    def decode_tensor(self, z):
        """Differentiable decode for gradient-carrying latents."""
        self._check()
        if self.kind == "identity":
            return E.as_tensor(z)
        z = E.as_tensor(z)
        scaled = z * Tensor(self.latent_std) + Tensor(self.latent_mean)
        return self.decoder(scaled)


def identity_codec(dim):
    return LatentCodec("identity", dim)


def pretrain_codec(dataset, rng, latent_dim=16, hidden_enc=(256, 128),
                   hidden_dec=(256, 512), iters=2500, batch=128, lr=1e-3,
                   holdout_frac=0.1, mse_budget=0.01, callback=None):
    """Train the sprite autoencoder, whiten its latents, and freeze it.

    Returns (codec, loss history).  If the held-out reconstruction MSE misses
    the budget the codec is returned marked unusable; callers decide whether
    to abort.
    """
    if dataset.pixels is None:
        raise CodecError("autoencoder pretraining needs pixel data")
    pix = dataset.pixels
    n_hold = max(1, int(len(pix) * holdout_frac))
    hold, train = pix[:n_hold], pix[n_hold:]
    pixel_dim = pix.shape[1]

    enc = nn.MLP([pixel_dim] + list(hidden_enc) + [latent_dim], rng)
    dec = nn.MLP([latent_dim] + list(hidden_dec) + [pixel_dim], rng)
    params = list(enc.named_parameters()) + list(dec.named_parameters())
    opt = AdamW(params, lr=lr)

    losses = []
    for it in range(iters):
        idx = rng.integers(0, len(train), size=batch)
        x = Tensor(train[idx])
        enc.zero_grad()
        dec.zero_grad()
        loss = E.mean(E.square(dec(enc(x)) - x))
        loss.backward()
        opt.step()
        losses.append(loss.item())
        if callback is not None:
            callback(it, losses[-1])

    with E.no_grad():
        z_all = enc(Tensor(train)).data
        recon = dec(Tensor(enc(Tensor(hold)).data)).data
    held_mse = float(np.mean((recon - hold) ** 2))

    codec = LatentCodec(
        "trained-ae", latent_dim, encoder=enc, decoder=dec, pixel_dim=pixel_dim,
        latent_mean=z_all.mean(axis=0), latent_std=z_all.std(axis=0) + 1e-8,
    )
    codec.freeze(held_mse)
    if held_mse >= mse_budget:
        codec.usable = False
    return codec, losses
