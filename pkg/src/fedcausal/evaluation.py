"""Error metrics for treatment-effect estimates and report files."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import IoError, MissingTruth, ShapeMismatch

CSV_COLUMNS = ("seed", "variant", "m_used", "sqrt_pehe", "ate_error", "wall_s")


def pehe(true_ite, est_ite) -> tuple[float, float]:
    """Mean squared ITE error over every unit of every source, and its square root.

    Both arguments are either one vector or a sequence of per-source vectors;
    the mean divides by the total number of units.
    """
    grouped = isinstance(true_ite, (list, tuple))
    if true_ite is None or (grouped and any(t is None for t in true_ite)):
        raise MissingTruth("true individual effects are not available")
    if grouped and isinstance(est_ite, (list, tuple)):
        if [np.size(a) for a in true_ite] != [np.size(b) for b in est_ite]:
            raise ShapeMismatch("true and estimated effects are grouped differently")
    t = _flatten(true_ite)
    e = _flatten(est_ite)
    if t.shape != e.shape:
        raise ShapeMismatch(f"true effects {t.shape} vs estimates {e.shape}")
    if t.size == 0:
        raise ShapeMismatch("no units to evaluate")
    eps = float(np.mean((t - e) ** 2))
    return eps, float(np.sqrt(eps))


def _flatten(v) -> np.ndarray:
    if isinstance(v, (list, tuple)):
        return np.concatenate([np.asarray(a, dtype=float).ravel() for a in v]) if v else np.zeros(0)
    return np.asarray(v, dtype=float).ravel()


def ate_error(true_ate: float, est_ate: float) -> float:
    return float(abs(float(true_ate) - float(est_ate)))


def config_digest(config: Mapping) -> str:
    """Short stable fingerprint of a JSON-serializable configuration."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass
class SplitMetrics:
    sqrt_pehe: float
    ate_error: float
    n_units: int


@dataclass
class MetricsReport:
    seed: int
    variant: str
    m_used: int
    config_digest: str
    per_split: dict[str, SplitMetrics] = field(default_factory=dict)
    headline: str = "test"
    wall_s: float = 0.0

    @property
    def sqrt_pehe(self) -> float:
        return self.per_split[self.headline].sqrt_pehe

    @property
    def ate_error(self) -> float:
        return self.per_split[self.headline].ate_error

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sqrt_pehe"] = self.sqrt_pehe
        d["ate_error"] = self.ate_error
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(
            int(d["seed"]),
            str(d["variant"]),
            int(d["m_used"]),
            str(d["config_digest"]),
            {k: SplitMetrics(**v) for k, v in d["per_split"].items()},
            str(d.get("headline", "test")),
            float(d.get("wall_s", 0.0)),
        )


def split_metrics(true_ite: Sequence, ite_mean, ate_mean: float) -> SplitMetrics:
    """PEHE and ATE error for one split; the true ATE is the mean true ITE."""
    _, root = pehe(list(true_ite), _regroup(ite_mean, true_ite))
    true_ate = float(_flatten(list(true_ite)).mean())
    return SplitMetrics(root, ate_error(true_ate, ate_mean), int(sum(np.size(t) for t in true_ite)))


def _regroup(flat, like: Sequence) -> list[np.ndarray]:
    flat = np.asarray(flat, dtype=float).ravel()
    sizes = [np.size(t) for t in like]
    if flat.size != sum(sizes):
        raise ShapeMismatch(f"{flat.size} estimates for {sum(sizes)} units")
    return np.split(flat, np.cumsum(sizes)[:-1])


def emit_report(report: MetricsReport, json_path, csv_path=None) -> Path:
    """Write the JSON report and append one row to the aggregation CSV."""
    json_path = Path(json_path)
    try:
        json_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {json_path}: {exc}") from exc
    if csv_path is not None:
        append_csv_row(report, csv_path)
    return json_path


def append_csv_row(report: MetricsReport, csv_path) -> Path:
    csv_path = Path(csv_path)
    row = [report.seed, report.variant, report.m_used, repr(report.sqrt_pehe), repr(report.ate_error), f"{report.wall_s:.3f}"]
    try:
        fresh = not csv_path.exists() or csv_path.stat().st_size == 0
        with csv_path.open("a", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            if fresh:
                out.writerow(CSV_COLUMNS)
            out.writerow(row)
    except OSError as exc:
        raise IoError(f"cannot write {csv_path}: {exc}") from exc
    return csv_path


def load_report(path) -> MetricsReport:
    path = Path(path)
    try:
        return MetricsReport.from_dict(json.loads(path.read_text(encoding="utf-8")))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and standard error of the mean across replications."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ShapeMismatch("nothing to aggregate")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se
