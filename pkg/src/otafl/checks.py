"""Monte-Carlo verification suites for the estimator lemmas.

Each suite returns a list of :class:`Check` rows; a suite passes iff every
row passes. The suites share one setup: the task, loss and channel of a
:class:`~otafl.trainer.RunConfig`, evaluated at ``points`` random model
vectors drawn from the INIT stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as _rng
from .core_model import global_grad
from .data import partition_equal
from .estimators import constants_for, estimator_moments_mc, second_moment_bound
from .trainer import RunConfig, Task, async_partition, build_task

SUITES = ("lemma1", "lemma2", "lemma3", "lemma4", "async-moments")
SE_FACTOR = 3.0
# accepted window for the bias ratio at gamma/2 versus gamma
BIAS_RATIO = 0.5
BIAS_RATIO_TOL = 0.25


@dataclass(frozen=True)
class VerifyOptions:
    trials: int = 100_000
    gamma: float = 0.1
    points: int = 10
    theta_scale: float = 1.0
    late_fraction: float = 0.3


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    measured: float
    reference: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return f"{verdict} {self.suite}/{self.name}: measured={self.measured:.6g} reference={self.reference:.6g} {self.detail}"


class _Setup:
    def __init__(self, config: RunConfig, opts: VerifyOptions, seed: int, task: Task | None):
        if task is None:
            task = build_task(config.task, config.task_seed, config.loss.kind)
        self.config = config
        self.opts = opts
        self.seed = seed
        self.model = config.loss
        self.shards = partition_equal(task.train, config.n_devices, config.task_seed).shards
        self.d = task.train.dim
        self.sigma_h = config.channel.sigma_h_per_device(config.n_devices)

    def thetas(self):
        for p in range(self.opts.points):
            yield p, self.opts.theta_scale * _rng.stream(self.seed, _rng.INIT, p).standard_normal(self.d)

    def moments(self, variant, theta, p, gamma=None, late=()):
        g = self.opts.gamma if gamma is None else gamma
        return estimator_moments_mc(variant, self.model, self.shards, theta, self.config.channel, g,
                                    self.opts.trials, self.seed + p, late=late,
                                    perturbation_kind=self.config.perturbation,
                                    batch_size=self.config.batch_size)

    def consts(self, theta):
        return constants_for(self.model, self.shards, theta, self.config.channel, self.config.perturbation)

    def grad(self, theta):
        return global_grad(self.model, theta, self.shards)

    def late(self):
        _, late = async_partition(self.config.n_devices, self.opts.late_fraction, self.seed, 0)
        return late


def _mean_check(suite, name, m, target) -> Check:
    err = float(np.linalg.norm(m.mean - target))
    tol = SE_FACTOR * m.se_norm
    return Check(suite, name, err, tol, err <= tol, f"(||mean - target|| vs {SE_FACTOR:g} SE, M={m.M})")


def _bound_check(suite, name, m, bound) -> Check:
    return Check(suite, name, m.sqnorm, bound, m.sqnorm <= bound, f"(E||g||^2 +/- {m.sqnorm_se:.3g} vs bound)")


def _lemma1(s: _Setup) -> list[Check]:
    out = []
    g = s.opts.gamma
    if s.model.kind == "quadratic":
        # constant Hessians: the two-point estimate is exactly unbiased for c1 gamma grad F
        for p, theta in s.thetas():
            c = s.consts(theta)
            m = s.moments("ezofl", theta, p)
            out.append(_mean_check("lemma1", f"unbiased[{p}]", m, c.c1 * g * s.grad(theta)))
        return out
    # nonconvex loss: compare the bias norm at gamma and gamma/2 at one point
    p, theta = next(s.thetas())
    c = s.consts(theta)
    grad = s.grad(theta)
    norms = []
    for gg in (g, g / 2):
        m = s.moments("ezofl", theta, p, gamma=gg)
        norms.append(float(np.linalg.norm(m.mean / (c.c1 * gg) - grad)))
    ratio = norms[1] / norms[0] if norms[0] > 0 else float("nan")
    ok = abs(ratio - BIAS_RATIO) <= BIAS_RATIO_TOL * BIAS_RATIO
    out.append(Check("lemma1", "bias-ratio", ratio, BIAS_RATIO, ok,
                     f"(||delta|| at gamma={g:g}: {norms[0]:.4g}, at gamma={g / 2:g}: {norms[1]:.4g})"))
    return out


def _bound_suite(suite: str, variant: str, s: _Setup) -> list[Check]:
    out = []
    for p, theta in s.thetas():
        m = s.moments(variant, theta, p)
        bound = second_moment_bound(variant, s.consts(theta), s.sigma_h, s.opts.gamma)
        out.append(_bound_check(suite, f"second-moment[{p}]", m, bound))
    return out


def _lemma3(s: _Setup) -> list[Check]:
    out = []
    for p, theta in s.thetas():
        m = s.moments("efofl", theta, p)
        out.append(_mean_check("lemma3", f"unbiased[{p}]", m, s.consts(theta).b1 * s.grad(theta)))
    return out


def _async(s: _Setup) -> list[Check]:
    out = []
    late = s.late()
    g = s.opts.gamma
    for p, theta in s.thetas():
        c = s.consts(theta)
        grad = s.grad(theta)
        mz = s.moments("ezofl-async", theta, p, late=late)
        mf = s.moments("efofl-async", theta, p, late=late)
        if s.model.kind == "quadratic":
            out.append(_mean_check("async-moments", f"ezofl-async-unbiased[{p}]", mz, c.c1 * g * grad))
        out.append(_mean_check("async-moments", f"efofl-async-unbiased[{p}]", mf, c.b1 * grad))
        Cp = second_moment_bound("ezofl-async", c, s.sigma_h, g, late)
        C2p = second_moment_bound("efofl-async", c, s.sigma_h, g, late)
        out.append(_bound_check("async-moments", f"ezofl-async-second-moment[{p}]", mz, Cp))
        out.append(_bound_check("async-moments", f"efofl-async-second-moment[{p}]", mf, C2p))
        if late:
            C = second_moment_bound("ezofl", c, s.sigma_h, g)
            C2 = second_moment_bound("efofl", c, s.sigma_h, g)
            out.append(Check("async-moments", f"C'>=C[{p}]", Cp, C, Cp >= C))
            out.append(Check("async-moments", f"C2'>=C2[{p}]", C2p, C2, C2p >= C2))
    return out


def run_suite(suite: str, config: RunConfig, opts: VerifyOptions = VerifyOptions(), seed: int = 0,
              task: Task | None = None) -> list[Check]:
    """Run one verification suite and return its checks."""
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")
    if opts.trials < 10_000:
        raise ValueError("verification needs at least 10^4 Monte-Carlo trials")
    s = _Setup(config, opts, seed, task)
    if suite == "lemma1":
        return _lemma1(s)
    if suite == "lemma2":
        return _bound_suite("lemma2", "ezofl", s)
    if suite == "lemma3":
        return _lemma3(s)
    if suite == "lemma4":
        return _bound_suite("lemma4", "efofl", s)
    return _async(s)
