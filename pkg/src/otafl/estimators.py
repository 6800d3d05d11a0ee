"""Scalar-feedback gradient estimators and their moment checks.

Every device sends two scalars per round: the precoder constant a_i in the
first minislot and a payload in the second. The payload is either the
two-point loss difference (zeroth-order variant) or the projection of the
local stochastic gradient on the shared perturbation (first-order variant).
The server multiplies the real parts of the two superposed slots and
broadcasts the product; every device multiplies it by the perturbation to
get a rank-one gradient estimate.

In the asynchronous protocol a late subset transmits one slot behind, so the
server listens for three slots and broadcasts
``slot1 * slot2 + slot3 * slot2``.

The core helpers are vectorized over a leading trial axis so the same code
path serves the training loop (one trial) and Monte-Carlo moment estimates.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import rng as _rng
from .channel import ChannelConfig, SlotDraws, precoder_constants
from .core_model import LossModel

VARIANTS = ("ezofl", "efofl", "ezofl-async", "efofl-async")
PERTURBATIONS = ("rademacher", "sphere")


def _base(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown estimator variant {variant!r}; expected one of {VARIANTS}")
    return variant.split("-")[0]


def is_async(variant: str) -> bool:
    _base(variant)
    return variant.endswith("-async")


# ---------------------------------------------------------------------------
# perturbations


def draw_perturbation(d: int, gen: np.random.Generator, kind: str = "rademacher", size: int | None = None) -> np.ndarray:
    shape = (d,) if size is None else (size, d)
    if kind == "rademacher":
        return np.where(gen.random(shape) < 0.5, -1.0, 1.0)
    if kind == "sphere":
        z = gen.standard_normal(shape)
        return z / np.linalg.norm(z, axis=-1, keepdims=True)
    raise ValueError(f"unknown perturbation kind {kind!r}")


def perturbation(d: int, seed: int, round_: int, kind: str = "rademacher") -> np.ndarray:
    """The direction shared by all devices in round ``round_``."""
    return draw_perturbation(d, _rng.stream(seed, _rng.PHI, round_), kind)


def perturbation_moments(kind: str, d: int) -> tuple[float, float]:
    """(b1, b2): per-coordinate second moment and norm bound."""
    if kind == "rademacher":
        return 1.0, float(np.sqrt(d))
    if kind == "sphere":
        return 1.0 / d, 1.0
    raise ValueError(f"unknown perturbation kind {kind!r}")


# ---------------------------------------------------------------------------
# device payloads


def two_point_delta(model: LossModel, X, y, theta, gamma: float, phi) -> float:
    """f(theta + gamma phi) - f(theta - gamma phi), averaged over the batch (X, y)."""
    X = np.atleast_2d(X)
    y = np.atleast_1d(y)
    up = model.losses(np.asarray(theta) + gamma * np.asarray(phi), X, y)
    down = model.losses(np.asarray(theta) - gamma * np.asarray(phi), X, y)
    return float(np.mean(up - down))


def device_payloads(base: str, model: LossModel, Xs: np.ndarray, ys: np.ndarray, theta: np.ndarray,
                    gamma: float, phi: np.ndarray) -> np.ndarray:
    """Second-slot payload of every device in every trial.

    Xs is (M, N, B, d) sampled features, ys is (M, N, B), phi is (M, d).
    Returns (M, N). The same sample batch enters both loss queries.
    """
    M, N, B, d = Xs.shape
    Xf = Xs.reshape(-1, d)
    yf = ys.reshape(-1)
    phi_rows = np.repeat(phi, N * B, axis=0)
    if base == "ezofl":
        up = model.losses(theta + gamma * phi_rows, Xf, yf)
        down = model.losses(theta - gamma * phi_rows, Xf, yf)
        per = up - down
    else:
        per = np.einsum("ij,ij->i", model.grads(theta, Xf, yf), phi_rows)
    return per.reshape(M, N, B).mean(axis=2)


# ---------------------------------------------------------------------------
# minislot products


def sync_slots(a: np.ndarray, payloads: np.ndarray, h_real: np.ndarray, noise_real: np.ndarray):
    """Real received scalars of the two synchronous minislots.

    payloads (M, N); h_real (M, N), the same in every minislot; noise_real (M, >=2).
    """
    s1 = (a * h_real).sum(axis=1) + noise_real[:, 0]
    s2 = (payloads * h_real).sum(axis=1) + noise_real[:, 1]
    return s1, s2


def async_slots(a: np.ndarray, payloads: np.ndarray, h_real: np.ndarray, noise_real: np.ndarray, late: np.ndarray):
    """Real received scalars of the three asynchronous slots.

    ``late`` (M, N) marks devices transmitting one slot behind. On-time
    devices send (a, payload) in slots 1-2; late ones send (a, payload) in
    slots 2-3.
    """
    on = ~late
    a_on = np.where(on, a, 0.0)
    a_late = np.where(late, a, 0.0)
    p_on = np.where(on, payloads, 0.0)
    p_late = np.where(late, payloads, 0.0)
    s1 = (a_on * h_real).sum(axis=1) + noise_real[:, 0]
    s2 = ((p_on + a_late) * h_real).sum(axis=1) + noise_real[:, 1]
    s3 = (p_late * h_real).sum(axis=1) + noise_real[:, 2]
    return s1, s2, s3


def broadcast_scalar(slots) -> np.ndarray:
    if len(slots) == 2:
        s1, s2 = slots
        return s1 * s2
    s1, s2, s3 = slots
    return s1 * s2 + s3 * s2


@dataclass(frozen=True)
class GradEstimate:
    """A rank-one estimate ``g = phi * scalar`` and the slot values behind it."""

    g: np.ndarray
    scalar: float
    slots: tuple[float, ...]
    phi: np.ndarray = field(repr=False, default=None)


def _round(base, model, batches, theta, gamma, phi, draws: SlotDraws, a, late=None) -> GradEstimate:
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    Bmax = max(len(np.atleast_1d(y)) for _, y in batches)
    if any(len(np.atleast_1d(y)) != Bmax for _, y in batches):
        raise ValueError("all devices must use the same batch size")
    Xs = np.stack([np.atleast_2d(X) for X, _ in batches])[None]
    ys = np.stack([np.atleast_1d(y) for _, y in batches]).astype(float)[None]
    payloads = device_payloads(base, model, Xs, ys, theta, gamma, phi[None])
    return estimate_from_payloads(payloads[0], phi, draws, a, late)


def estimate_from_payloads(payloads, phi, draws: SlotDraws, a, late=None) -> GradEstimate:
    payloads = np.asarray(payloads, dtype=float)
    a = np.asarray(a, dtype=float)
    n = payloads.shape[0]
    if draws.h.shape != (n,) or a.shape != (n,):
        raise ValueError("payload, precoder and channel counts disagree")
    hr = draws.h_real[None]
    nr = draws.noise_real[None]
    if late is None:
        slots = sync_slots(a, payloads[None], hr, nr)
    else:
        late = np.asarray(late, dtype=bool)
        if late.shape != (n,):
            raise ValueError("late mask must have one entry per device")
        if draws.noise.shape[0] < 3:
            raise ValueError("asynchronous rounds need three slots of draws")
        slots = async_slots(a, payloads[None], hr, nr, late[None])
    scalar = float(broadcast_scalar(slots)[0])
    return GradEstimate(np.asarray(phi) * scalar, scalar, tuple(float(s[0]) for s in slots), np.asarray(phi))


def _late_mask(n: int, n1: Sequence[int], n2: Sequence[int]) -> np.ndarray:
    n1, n2 = set(n1), set(n2)
    if n1 & n2:
        raise ValueError("on-time and late device sets overlap")
    if n1 | n2 != set(range(n)):
        raise ValueError("on-time and late device sets must cover all devices")
    late = np.zeros(n, dtype=bool)
    late[list(n2)] = True
    return late


def ezofl_round(model, batches, theta, gamma, phi, draws: SlotDraws, a) -> GradEstimate:
    """Zeroth-order estimate; ``batches`` holds one (X, y) batch per device."""
    return _round("ezofl", model, batches, theta, gamma, phi, draws, a)


def efofl_round(model, batches, theta, phi, draws: SlotDraws, a) -> GradEstimate:
    return _round("efofl", model, batches, theta, 0.0, phi, draws, a)


def ezofl_async_round(model, batches, theta, gamma, phi, draws: SlotDraws, a, n1, n2) -> GradEstimate:
    late = _late_mask(len(batches), n1, n2)
    return _round("ezofl", model, batches, theta, gamma, phi, draws, a, late)


def efofl_async_round(model, batches, theta, phi, draws: SlotDraws, a, n1, n2) -> GradEstimate:
    late = _late_mask(len(batches), n1, n2)
    return _round("efofl", model, batches, theta, 0.0, phi, draws, a, late)


# ---------------------------------------------------------------------------
# Monte-Carlo moments


@dataclass(frozen=True)
class Moments:
    variant: str
    M: int
    mean: np.ndarray
    se: np.ndarray
    sqnorm: float
    sqnorm_se: float
    bound: float | None = None

    @property
    def se_norm(self) -> float:
        """Aggregated standard error of the mean vector (2-norm of coordinate SEs)."""
        return float(np.linalg.norm(self.se))


def estimator_moments_mc(variant: str, model: LossModel, shards, theta, cfg: ChannelConfig, gamma: float,
                         M: int, seed: int, *, batch_size: int = 1, late: Sequence[int] = (),
                         perturbation_kind: str = "rademacher", chunk: int | None = None,
                         min_trials: int = 10_000) -> Moments:
    """Empirical E[g] and E[||g||^2] at a fixed theta over M independent rounds.

    Each trial draws a fresh perturbation, fresh local samples and fresh
    channel/noise values. ``late`` lists the devices of the late subset for
    the asynchronous variants (ignored otherwise).
    """
    base = _base(variant)
    if M < min_trials:
        raise ValueError(f"need at least {min_trials} trials, got {M}")
    theta = np.asarray(theta, dtype=float)
    n = len(shards)
    d = theta.size
    a = precoder_constants(cfg.sigma_h_per_device(n))
    sig_h = cfg.sigma_h_per_device(n)
    noise_std = np.array([cfg.noise_std(s) for s in (1, 2, 3)])
    late_mask = np.zeros(n, dtype=bool)
    if is_async(variant):
        late_mask[list(late)] = True
    if chunk is None:
        chunk = int(max(256, min(20_000, 4_000_000 // (n * batch_size * d))))

    total = np.zeros(d)
    total_sq = np.zeros(d)
    nsq = 0.0
    nsq_sq = 0.0
    done = 0
    c = 0
    while done < M:
        m = min(chunk, M - done)
        gen = _rng.stream(seed, _rng.MONTE_CARLO, c)
        phi = draw_perturbation(d, gen, perturbation_kind, size=m)
        Xs = np.empty((m, n, batch_size, d))
        ys = np.empty((m, n, batch_size))
        for i, shard in enumerate(shards):
            idx = gen.integers(0, len(shard), size=(m, batch_size))
            Xs[:, i] = shard.X[idx]
            ys[:, i] = shard.y[idx]
        hr = gen.standard_normal((m, n)) * sig_h
        nr = gen.standard_normal((m, 3)) * noise_std
        p = device_payloads(base, model, Xs, ys, theta, gamma, phi)
        if is_async(variant):
            slots = async_slots(a, p, hr, nr, np.broadcast_to(late_mask, (m, n)))
        else:
            slots = sync_slots(a, p, hr, nr)
        s = broadcast_scalar(slots)
        g = phi * s[:, None]
        sq = np.einsum("ij,ij->i", g, g)
        total += g.sum(axis=0)
        total_sq += np.square(g).sum(axis=0)
        nsq += sq.sum()
        nsq_sq += np.square(sq).sum()
        done += m
        c += 1

    mean = total / M
    var = np.maximum(total_sq / M - np.square(mean), 0.0) * M / (M - 1)
    sq_mean = nsq / M
    sq_var = max(nsq_sq / M - sq_mean**2, 0.0) * M / (M - 1)
    return Moments(variant, M, mean, np.sqrt(var / M), float(sq_mean), float(np.sqrt(sq_var / M)))


def write_moments_csv(path, rows: Sequence[Moments]) -> None:
    """CSV with header ``variant,M,mean_j...,se_j...,sqnorm,bound``."""
    d = rows[0].mean.size
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "M"] + [f"mean_{j}" for j in range(d)] + [f"se_{j}" for j in range(d)]
                   + ["sqnorm", "bound"])
        for r in rows:
            w.writerow([r.variant, r.M] + [repr(float(v)) for v in r.mean] + [repr(float(v)) for v in r.se]
                       + [repr(r.sqnorm), "" if r.bound is None else repr(float(r.bound))])


# ---------------------------------------------------------------------------
# closed-form constants and second-moment bounds


@dataclass(frozen=True)
class TheoryConstants:
    """Constants of the convergence analysis.

    ``L`` is the smoothness constant of the global objective (also called mu),
    ``b`` bounds the local Hessian norms, ``L_xi`` is the per-sample loss
    Lipschitz constant and ``A`` bounds per-sample gradient norms.
    ``c1`` and ``c3`` default to 2 b1 and b b2^3 N / (2 b1); pass them
    explicitly to evaluate the calculators at other values.
    """

    L: float
    b: float
    L_xi: float
    A: float
    b1: float
    b2: float
    n_devices: int
    sigma1: float = 0.0
    sigma2: float = 0.0
    sigma3: float = 0.0
    delta_hat: float = 1.0
    c1: float | None = None
    c3: float | None = None

    def __post_init__(self):
        for name in ("L", "b", "L_xi", "A", "b1", "b2", "delta_hat"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.n_devices < 1 or min(self.sigma1, self.sigma2, self.sigma3) < 0:
            raise ValueError("invalid device count or noise level")
        if self.c1 is None:
            object.__setattr__(self, "c1", 2.0 * self.b1)
        if self.c3 is None:
            object.__setattr__(self, "c3", self.b * self.b2**3 * self.n_devices / (2.0 * self.b1))
        if not self.c1 > 0 or self.c3 < 0:
            raise ValueError("c1 must be positive and c3 non-negative")

    @property
    def mu(self) -> float:
        return self.L


def _split_sets(n: int, late: Sequence[int]):
    late = sorted(set(late))
    if any(not 0 <= j < n for j in late):
        raise ValueError("late device index out of range")
    on = [i for i in range(n) if i not in late]
    return np.array(on, dtype=int), np.array(late, dtype=int)


def second_moment_bound(variant: str, consts: TheoryConstants, sigma_h, gamma: float = 0.0,
                        late: Sequence[int] = ()) -> float:
    """Closed-form bound on E[||g||^2] for one of the four estimators.

    ``sigma_h`` gives per-device channel standard deviations (scalar
    broadcasts). The zeroth-order bounds use the per-sample Lipschitz
    constant, the first-order ones the gradient bound A.
    """
    base = _base(variant)
    n = consts.n_devices
    sig = np.broadcast_to(np.asarray(sigma_h, dtype=float), (n,))
    E = np.square(sig)
    a = precoder_constants(sig)
    b2 = consts.b2
    s1, s2, s3 = consts.sigma1, consts.sigma2, consts.sigma3
    on, lt = (np.arange(n), np.array([], dtype=int)) if not is_async(variant) else _split_sets(n, late)

    def sum_E(S):
        return float(E[S].sum())

    def sum_a2E(S):
        return float((a[S] ** 2 * E[S]).sum())

    def sum_aE(S):
        return float((a[S] * E[S]).sum())

    def dbl_a2(S, T):
        # sum_{i in S} sum_{j in T} a_i^2 E_i E_j
        return float((a[S] ** 2 * E[S]).sum() * E[T].sum())

    def dbl_aa(S, T):
        return float((a[S] * E[S]).sum() * (a[T] * E[T]).sum())

    if base == "ezofl":
        # (delta f)^2 <= (2 gamma L_xi ||phi||)^2 <= q
        q = 4.0 * b2**2 * consts.L_xi**2 * gamma**2
        if not is_async(variant):
            inner = (s1**2 * s2**2 + q * s1**2 * sum_E(on) + s2**2 * sum_a2E(on)
                     + q * dbl_a2(on, on) + q * dbl_aa(on, on))
        else:
            inner = (s1**2 * s2**2 + q * s1**2 * sum_E(on) + s2**2 * sum_a2E(on)
                     + q * dbl_a2(on, on) + q * dbl_aa(on, on)
                     + (sum_a2E(on) + s1**2) * sum_a2E(lt)
                     + q * s2**2 * sum_E(lt) + s3**2 * sum_a2E(lt) + s3**2 * s2**2
                     + q * dbl_a2(lt, lt) + q * dbl_aa(lt, lt)
                     + q * s3**2 * sum_E(on)
                     + q**2 * sum_E(lt) * sum_E(on)
                     + 4.0 * q * sum_aE(lt) * sum_aE(on))
        return b2**2 * inner

    r = b2**2 * consts.A**2
    if not is_async(variant):
        inner = (s1**2 * s2**2 + r * s1**2 * sum_E(on) + s2**2 * sum_a2E(on)
                 + r * dbl_a2(on, on) + r * dbl_aa(on, on))
    else:
        inner = (s1**2 * s2**2 + r * s1**2 * sum_E(on) + s2**2 * sum_a2E(on)
                 + r * dbl_a2(on, on) + r * dbl_aa(on, on)
                 + (sum_a2E(on) + s1**2) * sum_a2E(lt)
                 + s3**2 * s2**2 + r * s2**2 * sum_E(lt) + s3**2 * sum_a2E(lt)
                 + r * dbl_a2(lt, lt) + r * dbl_aa(lt, lt)
                 + r * s3**2 * sum_E(lt)
                 + r**2 * sum_E(on) * sum_E(lt)
                 + 4.0 * r * dbl_aa(on, lt))
    return b2**2 * inner


def constants_for(model: LossModel, shards, theta, cfg: ChannelConfig, perturbation_kind: str = "rademacher",
                  delta_hat: float | None = None, safety: float = 1.0) -> TheoryConstants:
    """TheoryConstants for a concrete task, valid at ``theta``.

    The quadratic loss has no global Lipschitz or gradient bound, so L_xi
    and A are the largest per-sample gradient norm at ``theta``. That is
    exactly what the conditional moments at ``theta`` need. ``delta_hat``
    defaults to F(theta), an upper bound on F(theta) - F* since losses are
    non-negative. ``safety`` multiplies A (use 2 when the constants must
    cover a whole run rather than the single point ``theta``).
    """
    theta = np.asarray(theta, dtype=float)
    X = np.vstack([s.X for s in shards])
    y = np.concatenate([s.y for s in shards])
    n = len(shards)
    b = model.hessian_bound(X)
    if model.kind == "quadratic":
        A = model.lipschitz_bound(X, y, theta)
        L_xi = A
    else:
        L_xi = model.lipschitz_bound(X, y)
        A = L_xi
    b1, b2 = perturbation_moments(perturbation_kind, theta.size)
    if delta_hat is None:
        delta_hat = sum(model.mean_loss(theta, s.X, s.y) for s in shards)
    return TheoryConstants(L=n * b, b=b, L_xi=max(L_xi, 1e-12), A=max(safety * A, 1e-12), b1=b1, b2=b2, n_devices=n,
                           sigma1=cfg.noise_std(1), sigma2=cfg.noise_std(2), sigma3=cfg.noise_std(3),
                           delta_hat=max(delta_hat, 1e-12))
