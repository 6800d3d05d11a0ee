"""Simulated fading channel and over-the-air minislot aggregation.

A device's channel coefficient is constant over the minislots of a round
and redrawn every round; the receiver noise is fresh in every minislot.
Round k draws its coefficients from key ``(seed, CHANNEL, k, 0)``, two
normals per device in device order, so a device's draw is fixed by
(seed, device, round) and does not depend on the device count. Noise of
minislot s comes from key ``(seed, CHANNEL, k, s)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import rng as _rng

MAX_SLOTS = 3


@dataclass(frozen=True)
class ChannelConfig:
    """Real and imaginary parts of h are each N(0, sigma_h^2); same for noise.

    ``sigma_h`` is a scalar (common to all devices) or one value per device.
    ``slot_sigma_n`` optionally overrides the noise level of minislots 1..3.
    """

    sigma_h: float | tuple[float, ...] = 1.0
    sigma_n: float = 0.0
    slot_sigma_n: tuple[float, float, float] | None = None

    def __post_init__(self):
        if np.any(np.asarray(self.sigma_h, dtype=float) <= 0):
            raise ValueError("sigma_h must be positive")
        if self.sigma_n < 0:
            raise ValueError("sigma_n must be non-negative")
        if self.slot_sigma_n is not None:
            if len(self.slot_sigma_n) != MAX_SLOTS or min(self.slot_sigma_n) < 0:
                raise ValueError("slot_sigma_n needs three non-negative values")

    def sigma_h_per_device(self, n_devices: int) -> np.ndarray:
        s = np.asarray(self.sigma_h, dtype=float)
        if s.ndim == 0:
            return np.full(n_devices, float(s))
        if s.shape != (n_devices,):
            raise ValueError(f"sigma_h has {s.size} entries for {n_devices} devices")
        return s

    def noise_std(self, slot: int) -> float:
        """Noise standard deviation of minislot ``slot`` (1-based)."""
        if not 1 <= slot <= MAX_SLOTS:
            raise ValueError("slot must be 1, 2 or 3")
        if self.slot_sigma_n is not None:
            return float(self.slot_sigma_n[slot - 1])
        return float(self.sigma_n)


@dataclass(frozen=True)
class ChannelDraw:
    h_complex: complex

    @property
    def h_real(self) -> float:
        return float(np.real(self.h_complex))


@dataclass(frozen=True)
class SlotDraws:
    """Channel coefficients (devices,) and receiver noise (slots,) of one round."""

    h: np.ndarray
    noise: np.ndarray

    @property
    def h_real(self) -> np.ndarray:
        return self.h.real

    @property
    def noise_real(self) -> np.ndarray:
        return self.noise.real


def sample_channel(device: int, round_: int, cfg: ChannelConfig, seed: int, n_devices: int | None = None) -> ChannelDraw:
    """Channel coefficient of one device in one round."""
    if device < 0:
        raise ValueError("device index must be non-negative")
    sig = cfg.sigma_h_per_device(n_devices)[device] if n_devices else float(np.asarray(cfg.sigma_h).flat[0])
    z = _rng.stream(seed, _rng.CHANNEL, round_, 0).standard_normal(2 * (device + 1))
    re, im = z[-2:]
    return ChannelDraw(complex(sig * re, sig * im))


def draw_round(cfg: ChannelConfig, seed: int, round_: int, n_devices: int, n_slots: int = MAX_SLOTS) -> SlotDraws:
    """All channel coefficients and minislot noise samples of one round."""
    if not 1 <= n_slots <= MAX_SLOTS:
        raise ValueError("a round has 1 to 3 minislots")
    sig = cfg.sigma_h_per_device(n_devices)
    z = _rng.stream(seed, _rng.CHANNEL, round_, 0).standard_normal(2 * n_devices).reshape(n_devices, 2)
    h = sig * z[:, 0] + 1j * sig * z[:, 1]
    noise = np.zeros(n_slots, dtype=complex)
    for s in range(1, n_slots + 1):
        std = cfg.noise_std(s)
        if std:
            re, im = _rng.stream(seed, _rng.CHANNEL, round_, s).standard_normal(2)
            noise[s - 1] = complex(std * re, std * im)
    return SlotDraws(h, noise)


def precoder_constants(sigma_h: Sequence[float] | np.ndarray) -> np.ndarray:
    """a_i = 1 / E[h_i^2] = 1 / sigma_{h,i}^2 for the real channel part."""
    s = np.atleast_1d(np.asarray(sigma_h, dtype=float))
    if np.any(s <= 0):
        raise ValueError("zero channel variance has no precoder")
    return 1.0 / np.square(s)


def ota_minislot(payloads, h, noise: complex = 0.0) -> float:
    """Real part of the superposed signal sum_i payload_i * h_i + noise.

    ``h`` may be complex coefficients or ChannelDraw objects; the imaginary
    parts never reach the output because payloads are real.
    """
    payloads = np.atleast_1d(np.asarray(payloads, dtype=float))
    if len(h) and isinstance(h[0], ChannelDraw):
        h = [d.h_complex for d in h]
    h = np.atleast_1d(np.asarray(h, dtype=complex))
    if payloads.shape != h.shape:
        raise ValueError(f"{payloads.size} payloads for {h.size} channel draws")
    return float(payloads @ h.real + np.real(noise))
