"""Federated training loop over the simulated channel.

Devices and server live in one process; a broadcast is a return value. Each
device keeps its own copy of the model and applies the broadcast update
itself, and the loop asserts after every round that all copies agree.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import rng as _rng
from .channel import ChannelConfig, SlotDraws, draw_round, precoder_constants
from .core_model import DivergenceError, GlobalObjective, LossModel, check_finite
from .data import Dataset, Partition, add_bias, load_csv, load_mnist_idx, make_binary_task, partition_equal, \
    split_train_test, synth_dataset
from .estimators import PERTURBATIONS, device_payloads, draw_perturbation, estimate_from_payloads
from .schedules import Schedule

log = logging.getLogger(__name__)

ALGORITHMS = ("ezofl", "efofl", "ezofl-async", "efofl-async", "fedavg")
TRACE_HEADER = ("k", "eta", "gamma", "slot1", "slot2", "slot3", "grad_norm_sq", "train_loss", "test_acc")


@dataclass(frozen=True)
class TaskConfig:
    """Where the training data comes from.

    ``kind`` is ``synthetic`` (teacher-labelled Gaussian features),
    ``mnist`` (IDX files, two digit classes) or ``csv``. For the quadratic
    loss ``target`` chooses between the +/-1 labels (``label``) and an
    all-zero target (``zero``) whose minimizer is the origin.
    """

    kind: str = "synthetic"
    n: int = 1000
    d: int = 10
    target: str = "label"
    images: str = ""
    labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    csv_path: str = ""
    class_a: int = 0
    class_b: int = 1
    bias: bool = True
    test_fraction: float = 0.2
    max_samples: int = 0
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "mnist", "csv"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.target not in ("label", "zero"):
            raise ValueError("target must be 'label' or 'zero'")


@dataclass(frozen=True)
class Task:
    train: Dataset
    test: Dataset | None


@dataclass(frozen=True)
class RunConfig:
    algorithm: str = "ezofl"
    n_devices: int = 10
    rounds: int = 100
    schedule: Schedule = field(default_factory=Schedule)
    channel: ChannelConfig = field(default_factory=lambda: ChannelConfig(1.0, 0.1))
    loss: LossModel = field(default_factory=LossModel)
    task: TaskConfig = field(default_factory=TaskConfig)
    async_fraction: float = 0.0
    seed: int = 0
    eval_every: int = 10
    batch_size: int = 1
    perturbation: str = "rademacher"
    theta0: float = 0.0
    local_steps: int = 1
    divergence_limit: float = 1e6

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.n_devices < 1 or self.rounds < 0 or self.eval_every < 1 or self.batch_size < 1:
            raise ValueError("need n_devices >= 1, rounds >= 0, eval_every >= 1, batch_size >= 1")
        if not 0 <= self.async_fraction < 1:
            raise ValueError("async_fraction must lie in [0, 1)")
        if self.async_fraction and not self.algorithm.endswith("-async"):
            raise ValueError("async_fraction is only meaningful for the asynchronous variants")
        if self.perturbation not in PERTURBATIONS:
            raise ValueError(f"unknown perturbation {self.perturbation!r}")
        if self.local_steps < 1:
            raise ValueError("local_steps must be at least 1")

    @property
    def task_seed(self) -> int:
        return self.seed if self.task.seed is None else self.task.seed


@dataclass
class RoundTrace:
    """One row per completed round.

    Row ``k`` (1..K) describes the update that produced theta_k: it used
    step sizes eta_{k-1}, gamma_{k-1}. Metrics are evaluated at theta_k on
    rounds divisible by ``eval_every`` and on the last round, else None.
    """

    k: int
    eta: float
    gamma: float | None
    slots: tuple[float, ...] = ()
    grad_norm_sq: float | None = None
    train_loss: float | None = None
    test_acc: float | None = None
    uplink_per_device: int = 0
    uplink_slots: int = 0
    downlink_scalars: int = 0
    n_late: int = 0

    def csv_row(self) -> list[str]:
        slots = list(self.slots) + [None] * (3 - len(self.slots))
        vals = [self.eta, self.gamma, *slots, self.grad_norm_sq, self.train_loss, self.test_acc]
        return [str(self.k)] + ["" if v is None else repr(float(v)) for v in vals]


@dataclass
class TrainResult:
    traces: list[RoundTrace]
    theta: np.ndarray
    initial_grad_norm_sq: float
    shards: Partition = field(repr=False, default=None)
    test: Dataset | None = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# task construction


def build_task(cfg: TaskConfig, seed: int, loss_kind: str = "logistic") -> Task:
    if cfg.kind == "synthetic":
        ds = synth_dataset(cfg.n, cfg.d, seed)
        if loss_kind == "quadratic" and cfg.target == "zero":
            ds = Dataset(ds.X, np.zeros(len(ds)), ds.name, ds.index, ds.teacher)
        if cfg.bias and loss_kind == "logistic":
            ds = add_bias(ds)
        train, test = split_train_test(ds, cfg.test_fraction, seed)
        return Task(train, test)
    if cfg.kind == "csv":
        ds = load_csv(cfg.csv_path)
        if cfg.bias and loss_kind == "logistic":
            ds = add_bias(ds)
        train, test = split_train_test(ds, cfg.test_fraction, seed)
        return Task(train, test)

    ds = make_binary_task(load_mnist_idx(cfg.images, cfg.labels), cfg.class_a, cfg.class_b)
    if cfg.max_samples:
        ds = ds.subset(np.arange(min(cfg.max_samples, len(ds))))
    test = None
    if cfg.test_images:
        test = make_binary_task(load_mnist_idx(cfg.test_images, cfg.test_labels), cfg.class_a, cfg.class_b)
        train = ds
    else:
        train, test = split_train_test(ds, cfg.test_fraction, seed)
    if cfg.bias:
        train, test = add_bias(train), add_bias(test)
    return Task(train, test)


# ---------------------------------------------------------------------------
# helpers


def async_partition(n_devices: int, fraction: float, seed: int, k: int) -> tuple[list[int], list[int]]:
    """Fresh random (on-time, late) split of the devices for round k."""
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    n_late = int(round(fraction * n_devices))
    if n_late == 0:
        return list(range(n_devices)), []
    perm = _rng.stream(seed, _rng.SPLIT, k).permutation(n_devices)
    late = sorted(int(i) for i in perm[:n_late])
    on = sorted(int(i) for i in perm[n_late:])
    return on, late


def evaluate_accuracy(theta: np.ndarray, test: Dataset) -> float:
    """Share of samples with sign(theta . x) equal to the label; sign(0) counts as +1."""
    if len(test) == 0:
        raise ValueError("empty test set")
    pred = np.where(test.X @ theta >= 0, 1.0, -1.0)
    return float(np.mean(pred == test.y))


def _sample_batches(objective: GlobalObjective, sizes: np.ndarray, offsets: np.ndarray, seed: int, k: int,
                    batch_size: int):
    """One uniformly drawn local batch per device, from the stacked shards."""
    gen = _rng.stream(seed, _rng.DATA, k)
    idx = offsets[:, None] + gen.integers(0, sizes[:, None], size=(sizes.size, batch_size))
    return objective.X[idx], objective.y[idx]


def communication(config: RunConfig, d: int, n_late: int = 0) -> dict:
    """Scalars exchanged per round."""
    if config.algorithm == "fedavg":
        return {"uplink_per_device": d, "uplink_slots": 0, "downlink_scalars": d}
    slots = 3 if n_late else 2
    return {"uplink_per_device": 2, "uplink_slots": slots, "downlink_scalars": 1}


# ---------------------------------------------------------------------------
# training


def train(config: RunConfig, task: Task | None = None) -> TrainResult:
    """Run ``config.rounds`` rounds and return the trace and the final model."""
    if task is None:
        task = build_task(config.task, config.task_seed, config.loss.kind)
    shards = partition_equal(task.train, config.n_devices, config.task_seed)
    d = task.train.dim
    model = config.loss
    n = config.n_devices
    thetas = np.full((n, d), float(config.theta0))
    objective = GlobalObjective(model, shards.shards)
    sizes = np.array([len(s) for s in shards])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    g0 = objective.grad_norm_sq(thetas[0])
    traces: list[RoundTrace] = []
    a = precoder_constants(config.channel.sigma_h_per_device(n))
    base = config.algorithm.split("-")[0]
    is_async = config.algorithm.endswith("-async")
    weights = np.array([len(s) for s in shards], dtype=float)
    weights /= weights.sum()

    for r in range(config.rounds):
        k = r + 1
        eta = config.schedule.eta(r)
        gamma = config.schedule.gamma(r) if base == "ezofl" else None
        if config.algorithm == "fedavg":
            local = thetas.copy()
            for _ in range(config.local_steps):
                for i, s in enumerate(shards):
                    local[i] -= eta * model.mean_grad(local[i], s.X, s.y)
            # server average, then broadcast the full vector
            thetas[:] = weights @ local
            row = RoundTrace(k, eta, None, **communication(config, d))
        else:
            phi = draw_perturbation(d, _rng.stream(config.seed, _rng.PHI, r), config.perturbation)
            Xs, ys = _sample_batches(objective, sizes, offsets, config.seed, r, config.batch_size)
            payloads = device_payloads(base, model, Xs[None], ys[None], thetas[0], gamma or 0.0, phi[None])[0]
            late = None
            n_late = 0
            if is_async:
                _, late_ids = async_partition(n, config.async_fraction, config.seed, r)
                n_late = len(late_ids)
                late = np.zeros(n, dtype=bool)
                late[late_ids] = True
            draws = draw_round(config.channel, config.seed, r, n, 3 if is_async else 2)
            if is_async and not n_late:
                # nobody is late: the third slot is never scheduled
                draws = SlotDraws(draws.h, np.concatenate([draws.noise[:2], [0j]]))
            est = estimate_from_payloads(payloads, phi, draws, a, late)
            # every device applies the broadcast scalar to its own copy
            thetas -= eta * est.g
            slots = est.slots if (n_late or not is_async) else est.slots[:2]
            row = RoundTrace(k, eta, gamma, slots, n_late=n_late, **communication(config, d, n_late))
        if not (thetas == thetas[0]).all():
            raise AssertionError(f"device models diverged from each other at round {k}")
        try:
            check_finite(thetas[0], config.divergence_limit)
        except DivergenceError as err:
            traces.append(row)
            err.trace = traces
            err.round = k
            raise
        if k % config.eval_every == 0 or k == config.rounds:
            row.grad_norm_sq = objective.grad_norm_sq(thetas[0])
            row.train_loss = objective.loss(thetas[0])
            if task.test is not None and model.kind == "logistic":
                row.test_acc = evaluate_accuracy(thetas[0], task.test)
        traces.append(row)
    return TrainResult(traces, thetas[0].copy(), g0, shards, task.test)


def run_training(config: RunConfig, task: Task | None = None) -> list[RoundTrace]:
    return train(config, task).traces


def fedavg_baseline(config: RunConfig, task: Task | None = None) -> list[RoundTrace]:
    if config.algorithm != "fedavg":
        config = replace(config, algorithm="fedavg", async_fraction=0.0)
    return run_training(config, task)


# ---------------------------------------------------------------------------
# trace export and rate measurement


def traces_to_csv(traces: Sequence[RoundTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for t in traces:
        w.writerow(t.csv_row())
    return buf.getvalue()


@dataclass(frozen=True)
class RateEstimate:
    slope: float
    se: float
    ks: np.ndarray = field(repr=False)
    values: np.ndarray = field(repr=False)


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    A = np.vstack([x, np.ones_like(x)]).T
    coef, res, *_ = np.linalg.lstsq(A, y, rcond=None)
    n = x.size
    if n <= 2:
        return float(coef[0]), float("nan")
    resid = y - A @ coef
    s2 = float(resid @ resid) / (n - 2)
    se = math.sqrt(s2 / float(np.sum(np.square(x - x.mean()))))
    return float(coef[0]), se


def measure_rate(traces: Sequence[Sequence], burn_in: int = 0, min_replicates: int = 10) -> RateEstimate:
    """Log-log slope of the replicate mean of the running-min ||grad F||^2.

    ``traces`` holds one sequence per replicate, each either RoundTrace rows
    or (k, value) pairs evaluated at the same rounds. Rows with
    k <= burn_in are not fitted.
    """
    if len(traces) < min_replicates:
        raise ValueError(f"need at least {min_replicates} replicates")
    ks, runs = _replicate_series(traces)
    return _fit(ks, np.minimum.accumulate(runs, axis=1).mean(axis=0), burn_in)


def _replicate_series(traces):
    series = []
    for tr in traces:
        pairs = [(t.k, t.grad_norm_sq) if isinstance(t, RoundTrace) else (t[0], t[1]) for t in tr]
        pairs = [(k, v) for k, v in pairs if v is not None]
        series.append((np.array([p[0] for p in pairs], dtype=float), np.array([p[1] for p in pairs], dtype=float)))
    ks = series[0][0]
    if any(not np.array_equal(s[0], ks) for s in series):
        raise ValueError("replicates were evaluated at different rounds")
    return ks, np.array([s[1] for s in series])


def _fit(ks, values, burn_in):
    keep = (ks > burn_in) & (ks > 0)
    if keep.sum() < 2:
        raise ValueError("fewer than two evaluated rounds after burn-in")
    if not np.all(values[keep] > 0):
        raise ValueError("degenerate trace: non-positive gradient norms cannot be fitted on a log scale")
    slope, se = _ols(np.log(ks[keep]), np.log(values[keep]))
    return RateEstimate(slope, se, ks[keep], values[keep])


class RateFailure(RuntimeError):
    """Too many replicates diverged for a rate measurement to be meaningful."""


def _run_replicate(args):
    cfg, task = args
    try:
        return run_training(cfg, task)
    except DivergenceError as err:
        return err


def run_replicates(configs: Sequence[RunConfig], task: Task | None = None, jobs: int = 1) -> list:
    """Run independent configs, in worker processes when ``jobs > 1``.

    Each entry of the result is a trace list or the DivergenceError that
    stopped that run. Results do not depend on ``jobs``.
    """
    work = [(c, task) for c in configs]
    if jobs <= 1 or len(work) <= 1:
        return [_run_replicate(w) for w in work]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_replicate, work))


def horizon_sweep(config: RunConfig, horizons: Sequence[int], replicates: int, seed0: int = 0,
                  task: Task | None = None, jobs: int = 1, max_divergence: float = 0.2) -> list[tuple[int, float]]:
    """(K, replicate mean of min_{k<=K} ||grad F(theta_k)||^2) per horizon K.

    Horizon-dependent constant schedules are rebuilt for every K, so each
    horizon is a fresh set of ``replicates`` runs of exactly K rounds.
    Diverged replicates are left out of the mean; more than
    ``max_divergence`` of them at any horizon raises RateFailure.
    """
    if task is None:
        task = build_task(config.task, config.task_seed, config.loss.kind)
    out = []
    for K in horizons:
        cfgs = [replace(config, rounds=K, seed=seed0 + rep, eval_every=1, schedule=replace(config.schedule, horizon=K))
                for rep in range(replicates)]
        results = run_replicates(cfgs, task, jobs)
        failed = [r for r in results if isinstance(r, DivergenceError)]
        if len(failed) > max_divergence * replicates:
            rounds = sorted(getattr(e, "round", -1) for e in failed)
            raise RateFailure(f"{len(failed)}/{replicates} replicates diverged at K={K} "
                              f"(divergence rounds {rounds}): {failed[0]}")
        _, series = _replicate_series([r for r in results if not isinstance(r, DivergenceError)])
        out.append((K, float(series.min(axis=1).mean())))
    return out


def horizon_rate(sweep: Sequence[tuple[int, float]]) -> RateEstimate:
    """Log-log slope of the horizon sweep."""
    ks = np.array([k for k, _ in sweep], dtype=float)
    vals = np.array([v for _, v in sweep], dtype=float)
    return _fit(ks, vals, 0)
