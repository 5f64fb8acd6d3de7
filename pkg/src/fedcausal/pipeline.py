"""End-to-end experiment steps shared by the command line and the test suite."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data, dedup, evaluation, predictor
from .config import RunConfig
from .errors import IoError, MissingTruth, ValidationError
from .fedrun import TrainConfig, TrainTrace, train
from .model import PriorConfig, SourceData, SourceSummary
from .variational import GlobalParams, VariationalConfig

log = logging.getLogger(__name__)

PARTS = ("train", "test", "val")

# stream tags for derive_seed, so no two consumers share a random stream
_SPLIT, _PREDICT, _DEDUP = 1, 2, 3


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=tuple(tags)).generate_state(1)[0])


@dataclass
class Prepared:
    """Sources with their train/test/val row assignments."""

    sources: list[SourceData]
    splits: dict[int, data.Split]

    def part(self, name: str) -> list[SourceData]:
        return [s.take(self.splits[s.source_id].part(name)) for s in self.sources]


def prepare(sources: Sequence[SourceData], split_counts, seed: int) -> Prepared:
    ids = [s.source_id for s in sources]
    if ids != list(range(len(sources))):
        raise ValidationError(f"source ids must be 0..m-1 in order, got {ids}")
    splits = {s.source_id: data.split_source(s, split_counts, derive_seed(seed, _SPLIT, s.source_id)) for s in sources}
    return Prepared(list(sources), splits)


def train_config(cfg: RunConfig) -> TrainConfig:
    t, v = cfg.train, cfg.variational
    return TrainConfig(
        learning_rate=t.learning_rate,
        rounds=t.rounds,
        mc_samples=v.mc_samples,
        optimizer=t.optimizer,
        seed=cfg.seed,
        ablate_g=t.ablate_g,
        transport=t.transport,
        d_q=v.d_q,
        n_q=v.n_q,
        grad_mode=t.grad_mode,
        grad_tol=t.grad_tol,
        jitter=v.jitter,
    )


@dataclass
class FittedModel:
    theta: GlobalParams
    priors: PriorConfig
    summaries: list[SourceSummary]
    vcfg: VariationalConfig
    ablate_g: bool
    seed: int
    splits: dict[int, data.Split]
    config: dict

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.to_dict(),
            "priors": self.priors.to_dict(),
            "summaries": [s.to_dict() for s in self.summaries],
            "variational": {
                "d_q": self.vcfg.d_q,
                "n_q": self.vcfg.n_q,
                "mc_samples": self.vcfg.mc_samples,
                "jitter": self.vcfg.jitter,
            },
            "ablate_g": self.ablate_g,
            "seed": self.seed,
            "splits": {
                str(sid): {p: sp.part(p).tolist() for p in PARTS} for sid, sp in self.splits.items()
            },
            "config": self.config,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedModel":
        splits = {
            int(sid): data.Split(*(np.asarray(sp[p], dtype=int) for p in PARTS))
            for sid, sp in d["splits"].items()
        }
        return cls(
            GlobalParams.from_dict(d["theta"]),
            PriorConfig.from_dict(d["priors"]),
            [SourceSummary.from_dict(s) for s in d["summaries"]],
            VariationalConfig(**d["variational"]),
            bool(d["ablate_g"]),
            int(d["seed"]),
            splits,
            d.get("config", {}),
        )

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.write_text(json.dumps(self.to_dict(), indent=1) + "\n", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
        return path

    @classmethod
    def load(cls, path) -> "FittedModel":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text(encoding="utf-8")))
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc

    def prepared(self, sources: Sequence[SourceData]) -> Prepared:
        if sorted(self.splits) != [s.source_id for s in sources]:
            raise ValidationError(
                f"model was trained on sources {sorted(self.splits)}, got {[s.source_id for s in sources]}"
            )
        return Prepared(list(sources), self.splits)


def fit(prepared: Prepared, cfg: RunConfig) -> tuple[FittedModel, TrainTrace]:
    """Summarize the training rows of every source and run federated training."""
    train_parts = prepared.part("train")
    summaries = [data.summarize(s) for s in train_parts]
    priors = cfg.priors.build()
    tcfg = train_config(cfg)
    theta, trace = train(train_parts, summaries, priors, tcfg)
    model = FittedModel(
        theta, priors, summaries, tcfg.vcfg, tcfg.ablate_g, cfg.seed, prepared.splits, cfg.to_json()
    )
    return model, trace


@dataclass
class PartPrediction:
    part: str
    sources: list[SourceData]
    draws: predictor.PredictiveDraws
    effects: predictor.EffectEstimate


def predict_part(model: FittedModel, prepared: Prepared, part: str, draws: int) -> PartPrediction:
    """Posterior-predictive draws and effect estimates for one split."""
    if part not in PARTS:
        raise ValidationError(f"unknown split part {part!r}")
    rows = prepared.part(part)
    if any(s.n == 0 for s in rows):
        raise ValidationError(f"split {part!r} is empty for at least one source")
    pd = predictor.predict_missing(
        rows,
        model.theta,
        model.summaries,
        S=draws,
        seed=derive_seed(model.seed, _PREDICT, PARTS.index(part)),
        vcfg=model.vcfg,
        ablate_g=model.ablate_g,
    )
    return PartPrediction(part, rows, pd, predictor.estimate_effects(rows, pd))


def score(pred: PartPrediction) -> evaluation.SplitMetrics:
    if not all(s.has_truth for s in pred.sources):
        raise MissingTruth("evaluation needs y0 and y1 columns for every source")
    truth = [s.true_ite() for s in sorted(pred.sources, key=lambda s: s.source_id)]
    return evaluation.split_metrics(truth, pred.effects.ite_mean, pred.effects.ate_mean)


@dataclass
class ExperimentResult:
    model: FittedModel
    trace: TrainTrace
    predictions: dict[str, PartPrediction]
    report: evaluation.MetricsReport


def synthetic_sources(cfg: RunConfig) -> list[SourceData]:
    d = cfg.data
    scfg = data.SyntheticConfig(d.variant, d.n, d.m, d.d_x, cfg.seed, d.split)
    sources = data.generate_synthetic(scfg)
    if d.m_used is not None:
        if d.m_used > d.m:
            raise ValidationError(f"m_used={d.m_used} exceeds m={d.m}")
        sources = sources[: d.m_used]
    return sources


def run_experiment(cfg: RunConfig, sources: Sequence[SourceData] | None = None) -> ExperimentResult:
    """Generate (unless ``sources`` is given), train, predict every configured part and score."""
    t0 = time.perf_counter()
    if sources is None:
        sources = synthetic_sources(cfg)
    prepared = prepare(sources, cfg.data.split, cfg.seed)
    model, trace = fit(prepared, cfg)
    preds = {p: predict_part(model, prepared, p, cfg.predict.draws) for p in cfg.predict.parts}
    report = evaluation.MetricsReport(
        cfg.seed,
        cfg.data.variant,
        len(sources),
        evaluation.config_digest(cfg.to_json()),
        {p: score(pr) for p, pr in preds.items()},
        cfg.eval.headline,
        time.perf_counter() - t0,
    )
    return ExperimentResult(model, trace, preds, report)


def deduplicate(sources: Sequence[SourceData], cfg: RunConfig) -> list[SourceData]:
    return dedup.run_protocol(sources, cfg.dedup.k_keep, derive_seed(cfg.seed, _DEDUP), cfg.dedup.salt)


# --- prediction files ---------------------------------------------------------


def write_effects_csv(pred: PartPrediction, splits: dict[int, data.Split], path) -> Path:
    """One row per unit: source, row index in the source file, ITE mean and variance."""
    path = Path(path)
    units = [
        (s.source_id, int(r)) for s in sorted(pred.sources, key=lambda s: s.source_id)
        for r in splits[s.source_id].part(pred.part)
    ]
    eff = pred.effects
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["source_id", "unit", "ite_mean", "ite_var"])
            for (sid, row), mu, var in zip(units, eff.ite_mean, eff.ite_var):
                out.writerow([sid, row, repr(float(mu)), repr(float(var))])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def read_effects_csv(path) -> dict[int, np.ndarray]:
    """Per-source ITE means keyed by source id, in file order."""
    path = Path(path)
    out: dict[int, list[float]] = {}
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                out.setdefault(int(row["source_id"]), []).append(float(row["ite_mean"]))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return {k: np.asarray(v) for k, v in out.items()}


def ate_summary(pred: PartPrediction) -> dict:
    eff = pred.effects
    per_source = {}
    for s in pred.sources:
        dist = predictor.ate_distribution(pred.sources, pred.draws, s.source_id)
        per_source[str(s.source_id)] = {"mean": dist["mean"], "sd": dist["sd"]}
    return {
        "part": pred.part,
        "draws": pred.draws.S,
        "ate_mean": eff.ate_mean,
        "ate_var": eff.ate_var,
        "interval": list(eff.interval),
        "per_source": per_source,
    }


def write_hist_csv(pred: PartPrediction, path, source_filter=None) -> Path:
    path = Path(path)
    dist = predictor.ate_distribution(pred.sources, pred.draws, source_filter)
    edges, counts = dist["bin_edges"], dist["counts"]
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                out.writerow([repr(float(lo)), repr(float(hi)), int(c)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def write_prediction(pred: PartPrediction, splits, out_dir, hist_source=None) -> dict[str, Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        ate_path = out_dir / "ate.json"
        ate_path.write_text(json.dumps(ate_summary(pred), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write to {out_dir}: {exc}") from exc
    return {
        "effects": write_effects_csv(pred, splits, out_dir / "effects.csv"),
        "ate": ate_path,
        "hist": write_hist_csv(pred, out_dir / "hist.csv", hist_source),
    }
