"""Small deterministic models and datasets for oracle checks.

Everything here is regenerated from seeds on demand, so the fixture is the
same on every machine without shipping binary files.
"""

from __future__ import annotations

import numpy as np

from . import nn
from .data import generate_dataset
from .nn import BatchNorm, Conv2d, Dense, ELU, Flatten, NetworkSpec, Residual, Reshape, Upsample
from .vae import TrainConfig, build_model, default_perceptual, freeze_batchnorm, train

TINY_SHAPE = (8, 8, 1)
TINY_ARCH = dict(width=2, latent_dim=2, stages=1)


def tiny_dataset(n_train=32, n_test=16, seed=0, image_shape=TINY_SHAPE):
    return generate_dataset(mix_ratio=0.5, sizes=(n_train, n_test), seed=seed, image_shape=image_shape)


def tiny_model(seed=0, epochs=40, data_seed=0):
    """A briefly trained tiny VAE (549 decoder / 680 encoder parameters)."""
    ds = tiny_dataset(seed=data_seed)
    train_x = ds.split("train").images
    model = build_model(TINY_SHAPE, seed=seed, **TINY_ARCH)
    cfg = TrainConfig(epochs=epochs, batch_size=8, lr=3e-3, beta=1e-3)
    model, _ = train(model, default_perceptual(TINY_SHAPE), train_x, cfg, seed=seed)
    if epochs == 0:
        freeze_batchnorm(model, train_x)
    return model, ds


def mlp_spec(inputs=5, hidden=7, outputs=4):
    return NetworkSpec((inputs,), [Dense(hidden), ELU(), Dense(hidden), ELU(), Dense(outputs)])


def conv_spec(shape=(6, 6, 2)):
    """Exercises every layer type, with batchnorm in inference mode."""
    return NetworkSpec(
        shape,
        [
            Conv2d(3), BatchNorm(), ELU(),
            Residual([Conv2d(3), BatchNorm(), ELU(), Conv2d(3)]),
            Conv2d(4, stride=2), ELU(), Flatten(), Dense(8), ELU(),
            Dense(3 * 3 * 2), Reshape((3, 3, 2)), Upsample(2), Conv2d(1),
        ],
    )


def randomize_batchnorm(net: NetworkSpec, seed):
    """Give frozen batchnorm layers non-trivial statistics."""
    rng = np.random.default_rng(seed)
    for layer in net.batchnorm_layers():
        layer.mean = rng.normal(0.0, 0.3, size=layer.mean.shape)
        layer.var = rng.uniform(0.5, 2.0, size=layer.var.shape)
    return net


def random_params(net: NetworkSpec, seed):
    params = nn.init_params(net, seed)
    # move scales/shifts away from their trivial init values
    params.values += 0.1 * np.random.default_rng(seed + 1).standard_normal(params.values.size)
    return params
