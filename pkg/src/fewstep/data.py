"""Toy datasets: a 2D Gaussian mixture and a tiny labeled sprite corpus.

Both generators are deterministic functions of (seed, size) so any dataset
can be rebuilt bit-exactly from its recipe.
"""
import numpy as np


class DataError(RuntimeError):
    pass


NUM_CLASSES = 8
SPRITE_SHAPE = (8, 8)
SPRITE_DIM = SPRITE_SHAPE[0] * SPRITE_SHAPE[1]


class ToyDataset:
    """A finite labeled corpus with optional cached latent codes.

    `latents` is what the diffusion models train on.  For the 2D domain it is
    the data itself; for the sprite domain it is attached after encoding.
    """

    def __init__(self, kind, seed, labels, pixels=None, latents=None, meta=None):
        self.kind = kind
        self.seed = seed
        self.labels = np.asarray(labels, dtype=np.int64)
        self.pixels = pixels
        self.latents = latents
        self.meta = dict(meta or {})

    @property
    def size(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return NUM_CLASSES

    def attach_latents(self, latents):
        latents = np.asarray(latents, dtype=np.float64)
        if len(latents) != self.size:
            raise DataError("latent count does not match dataset size")
        self.latents = latents

    def sample(self, rng, n):
        """Draw a training batch of (latents, labels) with replacement."""
        if self.latents is None:
            raise DataError("dataset has no latents attached")
        idx = rng.integers(0, self.size, size=n)
        return self.latents[idx], self.labels[idx]

    def sample_pixels(self, rng, n):
        if self.pixels is None:
            raise DataError("dataset has no pixel data")
        idx = rng.integers(0, self.size, size=n)
        return self.pixels[idx], self.labels[idx]


def _balanced_labels(rng, n):
    reps = -(-n // NUM_CLASSES)
    labels = np.tile(np.arange(NUM_CLASSES, dtype=np.int64), reps)[:n]
    return rng.permutation(labels)


def gauss2d_means(radius=4.0):
    """Mixture means: eight points equally spaced on a circle."""
    ang = 2.0 * np.pi * np.arange(NUM_CLASSES) / NUM_CLASSES
    return radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def gen_gauss2d(seed, n, radius=4.0, comp_std=0.1):
    """Eight Gaussian modes on a circle, rescaled to unit global std.

    The class label is the mode index.  The rescale factor is recorded in
    meta["scale"] together with the scaled per-class means so downstream
    rewards and metrics can work in training coordinates.
    """
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, n)
    means = gauss2d_means(radius)
    raw = means[labels] + comp_std * rng.standard_normal((n, 2))
    scale = float(raw.std())
    latents = raw / scale
    meta = {
        "scale": scale,
        "radius": radius,
        "comp_std": comp_std,
        "class_means": means / scale,
        "raw_class_means": means,
        "latent_dim": 2,
    }
    return ToyDataset("gauss2d", seed, labels, latents=latents, meta=meta)


def _sprite_templates():
    """Eight 8x8 binary shapes: bars, cross, boxes, dots, stripes, checker."""
    t = np.zeros((NUM_CLASSES,) + SPRITE_SHAPE)
    t[0, 3:5, :] = 1.0                      # horizontal bar
    t[1, :, 3:5] = 1.0                      # vertical bar
    t[2, 3:5, :] = 1.0                      # cross
    t[2, :, 3:5] = 1.0
    t[3, 1, 1:7] = t[3, 6, 1:7] = 1.0       # hollow box
    t[3, 1:7, 1] = t[3, 1:7, 6] = 1.0
    t[4, 2:6, 2:6] = 1.0                    # filled box
    for r, c in ((1, 1), (1, 5), (5, 1), (5, 5)):   # four dots
        t[5, r:r + 2, c:c + 2] = 1.0
    idx = np.arange(8)
    t[6, idx, idx] = 1.0                    # diagonal, two pixels wide
    t[6, idx[:-1], idx[:-1] + 1] = 1.0
    t[7] = (idx[:, None] // 2 + idx[None, :] // 2) % 2   # coarse checker
    return t.reshape(NUM_CLASSES, SPRITE_DIM)


SPRITE_TEMPLATES = _sprite_templates()


def gen_sprites8(seed, n, brightness_lo=0.35, brightness_span=0.55, noise_std=0.02):
    """Labeled 8x8 sprites: template x random brightness + pixel noise.

    Pixels are clipped to [0, 1].  Latents are attached later by an encoder.
    """
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, n)
    bright = brightness_lo + brightness_span * rng.random((n, 1))
    pix = SPRITE_TEMPLATES[labels] * bright
    pix = pix + noise_std * rng.standard_normal((n, SPRITE_DIM))
    pix = np.clip(pix, 0.0, 1.0)
    meta = {
        "templates": SPRITE_TEMPLATES,
        "image_shape": SPRITE_SHAPE,
        "pixel_dim": SPRITE_DIM,
        "brightness_lo": brightness_lo,
        "brightness_span": brightness_span,
        "noise_std": noise_std,
    }
    return ToyDataset("sprites8", seed, labels, pixels=pix, meta=meta)


def make_dataset(kind, seed, n):
    if kind == "gauss2d":
        return gen_gauss2d(seed, n)
    if kind == "sprites8":
        return gen_sprites8(seed, n)
    raise DataError(f"unknown dataset kind {kind!r}")
