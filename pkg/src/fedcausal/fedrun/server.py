"""Server side of federated training: aggregate, update, broadcast."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import (
    InvalidConfig,
    IoError,
    MissingReport,
    NonFiniteLoss,
    NonFiniteParameters,
    RoundMismatch,
    ValidationError,
    WorkerFailure,
)
from ..model import PriorConfig, SourceData, SourceSummary
from ..variational import GlobalParams, VariationalConfig
from .messages import GradientReport, ParamBroadcast, WorkerError
from .transport import make_transport
from .worker import SourceWorker

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    rounds: int = 500
    mc_samples: int = 16
    optimizer: str = "sgd"
    seed: int = 0
    ablate_g: bool = False
    transport: str = "inproc"
    d_q: float = 5.0
    n_q: float = 5.0
    grad_mode: str = "autodiff"
    fixed_noise: bool = False
    grad_tol: float | None = None
    jitter: float = 1e-6

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidConfig("learning_rate must be positive")
        if self.rounds < 1 or self.mc_samples < 1:
            raise InvalidConfig("rounds and mc_samples must be positive")
        if self.optimizer not in ("sgd", "adam"):
            raise InvalidConfig(f"unknown optimizer {self.optimizer!r}")
        if self.transport not in ("inproc", "tcp"):
            raise InvalidConfig(f"unknown transport {self.transport!r}")
        if self.grad_mode not in ("autodiff", "fd"):
            raise InvalidConfig(f"unknown grad_mode {self.grad_mode!r}")

    @property
    def vcfg(self) -> VariationalConfig:
        return VariationalConfig(self.d_q, self.n_q, self.mc_samples, self.jitter)


@dataclass
class TrainTrace:
    elbo: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    wall_time: list[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.elbo)

    def record(self, elbo: float, grad_norm: float, wall: float) -> None:
        self.elbo.append(float(elbo))
        self.grad_norm.append(float(grad_norm))
        self.wall_time.append(float(wall))

    def to_csv(self, path) -> Path:
        path = Path(path)
        try:
            with path.open("w", newline="", encoding="utf-8") as fh:
                out = csv.writer(fh, lineterminator="\n")
                out.writerow(["round", "elbo", "grad_norm", "wall_s"])
                for r, (e, g, t) in enumerate(zip(self.elbo, self.grad_norm, self.wall_time)):
                    out.writerow([r, repr(e), repr(g), f"{t:.3f}"])
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
        return path


def noise_seed_for(seed: int, round_: int) -> int:
    """Common-random-number seed broadcast to every worker for one round."""
    return int(np.random.SeedSequence([seed, round_]).generate_state(1)[0])


def aggregate_gradients(
    reports: Sequence[GradientReport],
    expected_sources: Sequence[int] | None = None,
    round_: int | None = None,
) -> np.ndarray:
    """Elementwise sum of one report per source, reduced in ascending source order."""
    if not reports:
        raise MissingReport("no gradient reports")
    rounds = {r.round for r in reports}
    if len(rounds) != 1 or (round_ is not None and rounds != {round_}):
        raise RoundMismatch(f"reports from rounds {sorted(rounds)}, expected {round_}")
    ids = [r.source_id for r in reports]
    if len(set(ids)) != len(ids):
        raise ValidationError(f"duplicate reports for sources {ids}")
    if expected_sources is not None:
        missing = sorted(set(expected_sources) - set(ids))
        if missing:
            raise MissingReport(f"no report from sources {missing}")
        extra = sorted(set(ids) - set(expected_sources))
        if extra:
            raise ValidationError(f"reports from unknown sources {extra}")
    ordered = sorted(reports, key=lambda r: r.source_id)
    total = np.zeros_like(np.asarray(ordered[0].grad, dtype=float))
    for r in ordered:
        g = np.asarray(r.grad, dtype=float)
        if g.shape != total.shape:
            raise ValidationError(f"source {r.source_id} sent a gradient of shape {g.shape}")
        total = total + g
    return total


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return _checked(theta + self.lr * grad)


class Adam:
    """Adam in ascent orientation."""

    def __init__(self, lr: float, betas=ADAM_BETAS, eps: float = ADAM_EPS):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * grad
        self.v = self.b2 * self.v + (1.0 - self.b2) * grad**2
        m_hat = self.m / (1.0 - self.b1**self.t)
        v_hat = self.v / (1.0 - self.b2**self.t)
        return _checked(theta + self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def _checked(theta: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(theta)):
        raise NonFiniteParameters("parameter update produced non-finite values")
    return theta


def make_optimizer(cfg: TrainConfig):
    return Adam(cfg.learning_rate) if cfg.optimizer == "adam" else SGD(cfg.learning_rate)


def step(theta, grad, cfg: TrainConfig, optimizer=None) -> np.ndarray:
    """One ascent update; pass ``optimizer`` to keep Adam moments across calls."""
    grad = np.asarray(grad, dtype=float)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteParameters("gradient has non-finite entries")
    opt = optimizer or make_optimizer(cfg)
    return opt.step(np.asarray(theta, dtype=float), grad)


def _collect(replies, round_: int, expected: Sequence[int]) -> list[GradientReport]:
    failures = [r for r in replies if isinstance(r, WorkerError)]
    if failures:
        detail = "; ".join(f"source {f.source_id}: {f.message}" for f in failures)
        raise WorkerFailure(f"round {round_} aborted: {detail}")
    return list(replies)


def train(
    sources: Sequence[SourceData],
    summaries: Sequence[SourceSummary],
    priors: PriorConfig,
    cfg: TrainConfig,
    theta0: GlobalParams | None = None,
) -> tuple[GlobalParams, TrainTrace]:
    """Federated gradient ascent on the ELBO.

    Every round the server broadcasts the parameters and a shared noise seed,
    each source worker returns the gradient of its own ELBO term, and the
    server sums the gradients in ascending source order before stepping.
    """
    if not sources:
        raise ValidationError("need at least one source")
    ids = sorted(s.source_id for s in sources)
    if ids != list(range(len(summaries))):
        raise ValidationError(
            f"source ids {ids} must be 0..m-1 and match {len(summaries)} summaries"
        )
    for s in sources:
        if s.n == 0:
            raise ValidationError(f"source {s.source_id} has no rows")
    vcfg = cfg.vcfg
    theta = (theta0 or GlobalParams.initial(sources[0].d_x, vcfg)).copy()
    workers = [
        SourceWorker(s, summaries, priors, theta.layout, vcfg, cfg.ablate_g, cfg.grad_mode)
        for s in sorted(sources, key=lambda s: s.source_id)
    ]
    optimizer = make_optimizer(cfg)
    trace = TrainTrace()
    transport = make_transport(cfg.transport, workers)
    try:
        for r in range(cfg.rounds):
            t0 = time.perf_counter()
            seed = noise_seed_for(cfg.seed, 0 if cfg.fixed_noise else r)
            replies = transport.exchange(ParamBroadcast(r, theta.vector.copy(), seed))
            reports = _collect(replies, r, ids)
            grad = aggregate_gradients(reports, ids, r)
            elbo = sum(rep.elbo_value for rep in sorted(reports, key=lambda x: x.source_id))
            if not np.isfinite(elbo):
                raise NonFiniteLoss(f"round {r}: total ELBO is not finite")
            gnorm = float(np.linalg.norm(grad))
            theta.vector = step(theta.vector, grad, cfg, optimizer)
            trace.record(elbo, gnorm, time.perf_counter() - t0)
            if r % 50 == 0:
                log.info("round %d  elbo %.4f  |grad| %.3e", r, elbo, gnorm)
            if cfg.grad_tol is not None and gnorm < cfg.grad_tol:
                log.info("gradient norm %.2e below tolerance; stopping after round %d", gnorm, r)
                break
    finally:
        transport.close()
    return theta, trace
