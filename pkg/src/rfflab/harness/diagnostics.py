"""Feature-space diagnostics: a domain-discriminator divergence proxy and an
emitter/receiver feature independence score."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError
from ..numerics import LayerSpec, Mode, Sequential, sgd_update, softmax

# Fixed discriminator settings so values are comparable across runs.
DISC_HIDDEN = 32
DISC_EPOCHS = 20
DISC_BATCH = 32
DISC_STEPSIZE = 0.1


def _discriminator(width, rng):
    specs = [LayerSpec.dense(width, DISC_HIDDEN), LayerSpec.relu(), LayerSpec.dense(DISC_HIDDEN, 2)]
    return Sequential.build(specs, rng, "disc")


def proxy_divergence(features_a, features_b, rng: np.random.Generator) -> float:
    """``2 (1 - 2 err)`` clipped to [0, 2], where ``err`` is the held-out error
    of a small dense classifier trained to tell the two sets apart.

    Both sets are subsampled to the smaller size, pooled, shuffled and split
    50/50 into discriminator train and test halves. Inputs are standardized
    with train-half statistics.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise InvalidInputError("both feature sets must be nonempty (n, F) arrays")
    if a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"feature widths differ: {a.shape[1]} vs {b.shape[1]}")
    n = min(len(a), len(b))
    if n < 2:
        raise InvalidInputError("need at least two samples per set")
    a = a[rng.choice(len(a), n, replace=False)]
    b = b[rng.choice(len(b), n, replace=False)]
    X = np.concatenate([a, b])
    y = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    perm = rng.permutation(2 * n)
    X, y = X[perm], y[perm]
    half = n
    Xtr, ytr, Xte, yte = X[:half], y[:half], X[half:], y[half:]
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd[sd == 0] = 1.0
    Xtr, Xte = (Xtr - mu) / sd, (Xte - mu) / sd

    net = _discriminator(X.shape[1], rng)
    for _ in range(DISC_EPOCHS):
        order = rng.permutation(half)
        for i in range(0, half, DISC_BATCH):
            idx = order[i:i + DISC_BATCH]
            logits, caches = net.forward(Xtr[idx], Mode.TRAIN)
            p = softmax(logits)
            p[np.arange(len(idx)), ytr[idx]] -= 1.0
            net.backward(caches, p / len(idx), input_grad=False)
            sgd_update(net.blocks(), DISC_STEPSIZE)
    pred = net.forward(Xte, Mode.INFER)[0].argmax(axis=1)
    err = float(np.mean(pred != yte))
    return float(np.clip(2.0 * (1.0 - 2.0 * err), 0.0, 2.0))


def per_sample_abs_cosine(z_emitter, z_receiver, eps=1e-12):
    a = np.asarray(z_emitter, dtype=np.float64)
    b = np.asarray(z_receiver, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise InvalidInputError("feature parts must be (n, F) arrays of equal shape")
    num = np.abs(np.sum(a * b, axis=1))
    den = np.maximum(np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1), eps)
    return num / den


def independence_score(pair, eps=1e-12) -> float:
    """Mean per-sample |cos(z_emitter, z_receiver)|; 0 means orthogonal parts."""
    if len(pair.z_emitter) == 0:
        raise InvalidInputError("no features given")
    return float(np.mean(per_sample_abs_cosine(pair.z_emitter, pair.z_receiver, eps)))


def cross_covariance_norm(pair) -> float:
    """Spectral norm of the empirical cross-covariance between the two parts."""
    a = np.asarray(pair.z_emitter, dtype=np.float64)
    b = np.asarray(pair.z_receiver, dtype=np.float64)
    if len(a) < 2:
        return 0.0
    C = (a - a.mean(axis=0)).T @ (b - b.mean(axis=0)) / (len(a) - 1)
    return float(np.linalg.norm(C, 2))


def random_split(Z, width, rng: np.random.Generator):
    """Split feature columns into two random disjoint groups of ``width`` each."""
    Z = np.asarray(Z)
    if 2 * width > Z.shape[1]:
        raise InvalidInputError("not enough feature columns for the requested split")
    cols = rng.permutation(Z.shape[1])
    return Z[:, cols[:width]], Z[:, cols[width:2 * width]]
