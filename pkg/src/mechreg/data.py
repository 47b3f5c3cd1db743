"""Synthetic datasets used by the demos and the command-line experiments."""

from __future__ import annotations

import numpy as np


def swissroll(
    n_per_class=100,
    turns=1.5,
    radius_rate=0.5,
    theta_start=0.5 * np.pi,
    jitter=0.05,
    seed=0,
):
    """Two interleaved planar spirals; the second class is the first rotated by pi.

    Returns (X, labels) with X of shape (2 n, 2) and labels in {0, 1}.
    """
    rng = np.random.default_rng(seed)
    theta = np.linspace(theta_start, theta_start + 2.0 * np.pi * turns, n_per_class)
    r = radius_rate * theta
    arm = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)
    x = np.concatenate([arm, -arm])
    x = x + jitter * rng.standard_normal(x.shape)
    labels = np.concatenate([np.zeros(n_per_class, int), np.ones(n_per_class, int)])
    return x, labels


def labels_to_targets(labels):
    """{0,1} class labels to regression targets {-1,+1} as one column."""
    return np.where(np.asarray(labels) > 0, 1.0, -1.0)[:, None]


def cosine_samples(n=100, frequency=20.0, noise=0.1, seed=0):
    """1-D regression benchmark: x_i = i/n, y = cos(frequency x) + noise.

    Noise is uniform on [-noise/2, noise/2]. Returns (X (n,1), y (n,1)).
    """
    rng = np.random.default_rng(seed)
    x = (np.arange(1, n + 1) / n)[:, None]
    y = np.cos(frequency * x) + noise * (rng.uniform(size=(n, 1)) - 0.5)
    return x, y


def cosine_test_grid(n=100, frequency=20.0):
    """Off-sample grid x_i = i/n - 1/(2n) with noiseless targets."""
    x = (np.arange(1, n + 1) / n - 0.5 / n)[:, None]
    return x, np.cos(frequency * x)
