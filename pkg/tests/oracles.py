"""Reference computations written independently of the package code.

Plain loops and the math module only: no shared helpers with otafl.
"""

import itertools
import math
import struct


def quad_loss(theta, x, y):
    return 0.5 * sum((t - y * xi) ** 2 for t, xi in zip(theta, x))


def logistic_loss(theta, x, y, lam):
    m = y * sum(t * xi for t, xi in zip(theta, x))
    base = math.log1p(math.exp(-m)) if m > -30 else -m + math.log1p(math.exp(m))
    return base + lam * sum(t * t / (1 + t * t) for t in theta)


def loss(kind, theta, x, y, lam=0.1):
    return quad_loss(theta, x, y) if kind == "quadratic" else logistic_loss(theta, x, y, lam)


def sample_grad(kind, theta, x, y, lam=0.1):
    if kind == "quadratic":
        return [t - y * xi for t, xi in zip(theta, x)]
    m = y * sum(t * xi for t, xi in zip(theta, x))
    s = 1.0 / (1.0 + math.exp(m))
    return [-y * s * xi + lam * 2 * t / (1 + t * t) ** 2 for t, xi in zip(theta, x)]


def global_grad(kind, theta, shards, lam=0.1):
    """sum over devices of the mean per-sample gradient."""
    total = [0.0] * len(theta)
    for X, y in shards:
        for xi, yi in zip(X, y):
            g = sample_grad(kind, theta, xi, yi, lam)
            for j in range(len(theta)):
                total[j] += g[j] / len(X)
    return total


def exact_mean_estimate(kind, theta, shards, gamma, zeroth_order=True, lam=0.1):
    """E[g] for the synchronous estimator with a_i = 1/E[h_i^2].

    Channel coefficients are shared by both minislots and independent of the
    noise, so E[slot1 * slot2 | phi, xi] = sum_i payload_i. The perturbation
    expectation is an exact average over the 2^d sign patterns, and the
    sample expectation an exact average over each shard.
    """
    d = len(theta)
    out = [0.0] * d
    for signs in itertools.product((-1.0, 1.0), repeat=d):
        total = 0.0
        for X, y in shards:
            acc = 0.0
            for xi, yi in zip(X, y):
                if zeroth_order:
                    up = [t + gamma * s for t, s in zip(theta, signs)]
                    dn = [t - gamma * s for t, s in zip(theta, signs)]
                    acc += loss(kind, up, xi, yi, lam) - loss(kind, dn, xi, yi, lam)
                else:
                    g = sample_grad(kind, theta, xi, yi, lam)
                    acc += sum(a * s for a, s in zip(g, signs))
            total += acc / len(X)
        for j in range(d):
            out[j] += signs[j] * total / 2 ** d
    return out


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)
