"""Step-size schedules and iteration-count calculators.

The model step size and the perturbation radius follow either polynomially
decaying schedules or horizon-dependent constants. The calculators turn the
convergence bounds into required round counts K for a target accuracy
``eps`` reached with probability at least ``1 - beta``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .estimators import TheoryConstants

SCHEDULE_KINDS = ("diminishing", "constant-thm2", "constant-thm4")


def diminishing(k: int, a0: float, upsilon: float) -> float:
    """a0 * (1 + k) ** -upsilon."""
    if not (a0 > 0 and upsilon > 0 and k >= 0):
        raise ValueError("need a0 > 0, upsilon > 0 and k >= 0")
    return a0 * (1.0 + k) ** (-upsilon)


@dataclass(frozen=True)
class Schedule:
    """Model step eta_k and perturbation radius gamma_k.

    ``diminishing``: eta_k = eta0 (1+k)^-u1, gamma_k = gamma0 (1+k)^-u2.
    ``constant-thm2``: eta = eta0 K^-1/4 and gamma = gamma0 K^-1/4.
    ``constant-thm4``: eta = eta0 K^-1/2; gamma = gamma0 (unused by
    first-order methods).
    """

    kind: str = "diminishing"
    eta0: float = 0.5
    gamma0: float = 2.5
    upsilon1: float = 0.5
    upsilon2: float = 0.25
    horizon: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.eta0 < 0 or self.gamma0 < 0:
            raise ValueError("step sizes must be non-negative")
        if self.kind == "diminishing" and not (self.upsilon1 > 0 and self.upsilon2 > 0):
            raise ValueError("decay exponents must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")

    def eta(self, k: int) -> float:
        if self.kind == "diminishing":
            return self.eta0 * (1.0 + k) ** (-self.upsilon1)
        if self.kind == "constant-thm2":
            return self.eta0 * self.horizon ** -0.25
        return self.eta0 * self.horizon ** -0.5

    def gamma(self, k: int) -> float:
        if self.kind == "diminishing":
            return self.gamma0 * (1.0 + k) ** (-self.upsilon2)
        if self.kind == "constant-thm2":
            return self.gamma0 * self.horizon ** -0.25
        return self.gamma0


@dataclass(frozen=True)
class Assumption3Report:
    ok: bool
    violated: tuple[str, ...]


def validate_assumption3(upsilon1: float, upsilon2: float) -> Assumption3Report:
    """Check the sufficient conditions on polynomial decay exponents."""
    checks = {
        "u1 > 0 and u2 > 0": upsilon1 > 0 and upsilon2 > 0,
        "0 < u1 + u2 <= 1": 0 < upsilon1 + upsilon2 <= 1,
        "u1 + 3 u2 > 1": upsilon1 + 3 * upsilon2 > 1,
        "u1 + u2 > 0.5": upsilon1 + upsilon2 > 0.5,
    }
    violated = tuple(name for name, ok in checks.items() if not ok)
    return Assumption3Report(not violated, violated)


def _check_prob(eps: float, beta: float) -> None:
    if not (0 < eps < 1 and 0 < beta < 1):
        raise ValueError("eps and beta must lie in (0, 1)")


def _thm2_core(c: TheoryConstants, C: float, eta0: float, gamma0: float) -> float:
    if not (eta0 > 0 and gamma0 > 0) or C < 0:
        raise ValueError("eta0, gamma0 must be positive and C non-negative")
    return 2 * c.delta_hat / (eta0 * gamma0 * c.c1) + c.c3**2 * gamma0**2 + C * c.mu / c.c1 * eta0 * gamma0


def _thm4_core(c: TheoryConstants, C2: float, eta0: float) -> float:
    if not eta0 > 0 or C2 < 0:
        raise ValueError("eta0 must be positive and C2 non-negative")
    return c.delta_hat / (c.b1 * eta0) + eta0 * c.mu * C2 / (2 * c.b1)


def _ceil(x: float) -> int:
    # guard against 40000.000000000004 style round-off before taking the ceiling
    r = round(x)
    return int(r) if math.isclose(x, r, rel_tol=1e-12, abs_tol=0.0) else int(math.ceil(x))


def theorem2_iterations(eps: float, beta: float, consts: TheoryConstants, C: float, eta0: float, gamma0: float) -> int:
    """Rounds K for the zeroth-order method (pass C' for the asynchronous one)."""
    _check_prob(eps, beta)
    return _ceil(_thm2_core(consts, C, eta0, gamma0) ** 2 / (eps**2 * beta**2))


def theorem2_beta(K: int, eps: float, consts: TheoryConstants, C: float, eta0: float, gamma0: float) -> float:
    """Failure probability bound after K rounds; inverse of ``theorem2_iterations``."""
    if K < 1 or not eps > 0:
        raise ValueError("need K >= 1 and eps > 0")
    return _thm2_core(consts, C, eta0, gamma0) / (eps * math.sqrt(K))


def theorem4_iterations(eps: float, beta: float, consts: TheoryConstants, C2: float, eta0: float) -> int:
    """Rounds K for the first-order method (pass C2' for the asynchronous one)."""
    _check_prob(eps, beta)
    return _ceil(_thm4_core(consts, C2, eta0) ** 2 / (eps**2 * beta**2))


def theorem4_beta(K: int, eps: float, consts: TheoryConstants, C2: float, eta0: float) -> float:
    if K < 1 or not eps > 0:
        raise ValueError("need K >= 1 and eps > 0")
    return _thm4_core(consts, C2, eta0) / (eps * math.sqrt(K))


def rate_bound_thm2(K: int, eta0: float, gamma0: float, consts: TheoryConstants, C: float) -> float:
    """Upper bound on min_k E||grad F||^2 after K zeroth-order rounds."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return _thm2_core(consts, C, eta0, gamma0) / math.sqrt(K)


def rate_bound_thm4(K: int, eta0: float, consts: TheoryConstants, C2: float) -> float:
    """Upper bound on min_k E||grad F||^2 after K first-order rounds."""
    if K < 1:
        raise ValueError("K must be at least 1")
    return (2 * consts.delta_hat / (eta0 * consts.b1) + eta0 * consts.mu * C2 / (2 * consts.b1)) / math.sqrt(K)
