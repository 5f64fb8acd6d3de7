"""Synthetic data generation, CSV ingestion, source splitting and summaries."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .errors import (
    InsufficientData,
    InvalidConfig,
    IoError,
    NonBinaryTreatment,
    SchemaError,
)
from .mathcore import MomentVector, moments4
from .model import SourceData, SourceSummary

log = logging.getLogger(__name__)

VARIANTS = ("data1", "data2")


@dataclass(frozen=True)
class SyntheticConfig:
    variant: str = "data1"
    n: int = 5000
    m: int = 5
    d_x: int = 20
    seed: int = 0
    split: tuple[int, int, int] = (50, 450, 400)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise InvalidConfig(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.m < 1 or self.n < self.m or self.n % self.m:
            raise InvalidConfig(f"n={self.n} records cannot be divided into m={self.m} equal sources")
        if self.d_x < 1:
            raise InvalidConfig("d_x must be positive")
        split = tuple(int(c) for c in self.split)
        if len(split) != 3 or min(split) < 0 or sum(split) > self.n // self.m:
            raise InvalidConfig(f"split {split} does not fit sources of {self.n // self.m} rows")
        object.__setattr__(self, "split", split)

    @property
    def n_s(self) -> int:
        return self.n // self.m

    def manifest(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "m": self.m,
            "n_s": self.n_s,
            "d_x": self.d_x,
            "split": list(self.split),
        }


def _softplus(z):
    return np.logaddexp(0.0, z)


def generate_synthetic(cfg: SyntheticConfig) -> list[SourceData]:
    """Simulate potential outcomes under unconfounded treatment and cut them into sources.

    Outcome coefficients are drawn once per dataset seed; ``y_obs`` picks the
    potential outcome matching each unit's treatment.
    """
    rng = np.random.default_rng(cfg.seed)
    d = cfg.d_x
    a0, b0, c0 = 0.6, 0.9, 2.0
    b_shift, c_shift = 0.0, 1.0
    if cfg.variant == "data2":
        b0, c0 = 6.0, 30.0
        b_shift, c_shift = 10.0, 15.0
    sd = np.sqrt(2.0)
    a1 = rng.normal(0.0, sd, d)
    b1 = rng.normal(b_shift, sd, d)
    c1 = rng.normal(c_shift, sd, d)

    X = rng.uniform(-1.0, 1.0, (cfg.n, d))
    w = (rng.uniform(size=cfg.n) < expit(a0 + X @ a1)).astype(float)
    y0 = rng.normal(_softplus(b0 + X @ b1), 1.0)
    y1 = rng.normal(_softplus(c0 + X @ c1), 1.0)
    y_obs = np.where(w == 1.0, y1, y0)

    sources = []
    for s in range(cfg.m):
        rows = slice(s * cfg.n_s, (s + 1) * cfg.n_s)
        keys = [f"{cfg.variant}-{cfg.seed}-{i}" for i in range(rows.start, rows.stop)]
        sources.append(SourceData(s, w[rows], y_obs[rows], X[rows], y0[rows], y1[rows], keys))
    return sources


@dataclass(frozen=True)
class Split:
    train: np.ndarray
    test: np.ndarray
    val: np.ndarray

    def part(self, name: str) -> np.ndarray:
        if name not in ("train", "test", "val"):
            raise InvalidConfig(f"unknown split part {name!r}")
        return getattr(self, name)


def split_source(src: SourceData, split_counts: Sequence[int], seed: int) -> Split:
    """Seeded permutation of the rows, then contiguous train/test/val blocks."""
    counts = [int(c) for c in split_counts]
    if len(counts) != 3 or min(counts) < 0 or sum(counts) > src.n:
        raise InvalidConfig(f"split {counts} does not fit a source of {src.n} rows")
    perm = np.random.default_rng(seed).permutation(src.n)
    a, b = counts[0], counts[0] + counts[1]
    return Split(
        np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b : b + counts[2]])
    )


def _arm_moments(y: np.ndarray, source_id: int, arm: str) -> MomentVector:
    if y.size < 2:
        log.warning(
            "source %d has %d %s unit(s); using zero outcome moments for that arm",
            source_id,
            y.size,
            arm,
        )
        return MomentVector.zeros()
    return moments4(y)


def summarize(src: SourceData) -> SourceSummary:
    """Four moments per covariate column, per observed-outcome arm and of the treatments."""
    if src.n < 2:
        raise InsufficientData(f"source {src.source_id} has {src.n} rows; need at least 2")
    x_tilde = np.concatenate([moments4(src.X[:, j]).as_array() for j in range(src.d_x)])
    return SourceSummary(
        x_tilde,
        _arm_moments(src.y_obs[src.w == 0.0], src.source_id, "control"),
        _arm_moments(src.y_obs[src.w == 1.0], src.source_id, "treated"),
        moments4(src.w),
    )


# --- CSV ----------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def write_csv(src: SourceData, path) -> Path:
    path = Path(path)
    header = []
    if src.keys is not None:
        header.append("id")
    header += ["w", "y_obs"]
    if src.has_truth:
        header += ["y0", "y1"]
    header += [f"x{j + 1}" for j in range(src.d_x)]
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(header)
            for i in range(src.n):
                row = [] if src.keys is None else [src.keys[i]]
                row += [str(int(src.w[i])), _fmt(src.y_obs[i])]
                if src.has_truth:
                    row += [_fmt(src.y0[i]), _fmt(src.y1[i])]
                row += [_fmt(v) for v in src.X[i]]
                out.writerow(row)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def load_csv(path, source_id: int = 0) -> SourceData:
    """Read one source file: ``id?, w, y_obs, y0?, y1?, x1..x_d`` with a header row."""
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    for required in ("w", "y_obs"):
        if required not in header:
            raise SchemaError(f"{path}: missing column {required!r}")
    x_cols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
    expected = [f"x{j + 1}" for j in range(len(x_cols))]
    if not x_cols or x_cols != expected:
        raise SchemaError(f"{path}: covariate columns must be x1..xd in order, got {x_cols}")
    known = {"id", "w", "y_obs", "y0", "y1", *x_cols}
    unknown = [h for h in header if h not in known]
    if unknown:
        raise SchemaError(f"{path}: unexpected columns {unknown}")
    has_truth = "y0" in header and "y1" in header
    if ("y0" in header) != ("y1" in header):
        raise SchemaError(f"{path}: truth needs both y0 and y1 columns")
    col = {h: i for i, h in enumerate(header)}

    def num(r: list[str], lineno: int, name: str) -> float:
        try:
            return float(r[col[name]])
        except (ValueError, IndexError):
            raise SchemaError(f"{path}:{lineno}: column {name!r} is not a number") from None

    w, y, y0, y1, X, keys = [], [], [], [], [], []
    for lineno, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        if len(r) != len(header):
            raise SchemaError(f"{path}:{lineno}: expected {len(header)} fields, got {len(r)}")
        wv = num(r, lineno, "w")
        if wv not in (0.0, 1.0):
            raise NonBinaryTreatment(f"{path}:{lineno}: treatment {r[col['w']]!r} is not 0/1")
        w.append(wv)
        y.append(num(r, lineno, "y_obs"))
        if has_truth:
            y0.append(num(r, lineno, "y0"))
            y1.append(num(r, lineno, "y1"))
        X.append([num(r, lineno, c) for c in x_cols])
        if "id" in col:
            keys.append(r[col["id"]])
    X = np.asarray(X, dtype=float).reshape(len(w), len(x_cols))
    return SourceData(
        source_id,
        np.asarray(w),
        np.asarray(y),
        X,
        np.asarray(y0) if has_truth else None,
        np.asarray(y1) if has_truth else None,
        keys if "id" in col else None,
    )


def write_manifest(cfg: SyntheticConfig, files: Sequence[Path], path) -> Path:
    path = Path(path)
    body = dict(cfg.manifest(), files=[Path(f).name for f in files])
    try:
        path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    return path


def split_equal(src: SourceData, parts: int) -> list[SourceData]:
    """Cut one source into ``parts`` contiguous sources of equal size (IHDP-style)."""
    if parts < 1 or src.n % parts:
        raise InvalidConfig(f"{src.n} rows cannot be divided into {parts} equal sources")
    size = src.n // parts
    out = []
    for s in range(parts):
        sub = src.take(np.arange(s * size, (s + 1) * size))
        sub.source_id = s
        out.append(sub)
    return out
