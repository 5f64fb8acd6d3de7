"""Run configuration: one JSON file with nested sections, overridable from flags."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticError, field_validator

from .errors import InvalidConfig, IoError
from .model import PriorConfig
from .variational import VariationalConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Section):
    variant: Literal["data1", "data2"] = "data1"
    n: int = Field(5000, gt=0)
    m: int = Field(5, gt=0)
    d_x: int = Field(20, gt=0)
    split: tuple[int, int, int] = (50, 450, 400)
    m_used: Optional[int] = Field(None, gt=0)

    @field_validator("split")
    @classmethod
    def _split_nonnegative(cls, v):
        if min(v) < 0:
            raise ValueError("split counts must be non-negative")
        return v


class PriorSection(_Section):
    V0: tuple[tuple[float, float], tuple[float, float]] = ((0.5, 0.0), (0.0, 0.5))
    S0: tuple[tuple[float, float], tuple[float, float]] = ((0.5, 0.0), (0.0, 0.5))
    d0: float = 2.0
    n0: float = 2.0

    def build(self) -> PriorConfig:
        return PriorConfig.from_dict(self.model_dump())


class VariationalSection(_Section):
    d_q: float = 5.0
    n_q: float = 5.0
    mc_samples: int = Field(16, gt=0)
    jitter: float = Field(1e-6, ge=0)

    def build(self) -> VariationalConfig:
        return VariationalConfig(**self.model_dump())


class TrainSection(_Section):
    learning_rate: float = Field(0.01, gt=0)
    rounds: int = Field(500, gt=0)
    optimizer: Literal["sgd", "adam"] = "adam"
    transport: Literal["inproc", "tcp"] = "inproc"
    ablate_g: bool = False
    grad_mode: Literal["autodiff", "fd"] = "autodiff"
    grad_tol: Optional[float] = Field(None, gt=0)


class PredictSection(_Section):
    draws: int = Field(500, gt=0)
    parts: tuple[Literal["train", "test", "val"], ...] = ("train", "test")


class EvalSection(_Section):
    headline: Literal["train", "test", "val"] = "test"


class DedupSection(_Section):
    k_keep: int = Field(1, ge=1)
    salt: Optional[str] = None


class RunConfig(_Section):
    seed: int = 0
    data: DataSection = DataSection()
    priors: PriorSection = PriorSection()
    variational: VariationalSection = VariationalSection()
    train: TrainSection = TrainSection()
    predict: PredictSection = PredictSection()
    eval: EvalSection = EvalSection()
    dedup: DedupSection = DedupSection()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except OSError as exc:
            raise IoError(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InvalidConfig(f"{path}: not valid JSON: {exc}") from exc
        return cls.parse(raw)

    @classmethod
    def parse(cls, raw: Any) -> "RunConfig":
        try:
            return cls.model_validate(raw)
        except PydanticError as exc:
            raise InvalidConfig(str(exc)) from exc

    def override(self, updates: dict[str, Any]) -> "RunConfig":
        """Apply dotted-key overrides such as ``{"train.rounds": 200}``; ``None`` values are skipped."""
        body = self.model_dump()
        for key, value in updates.items():
            if value is None:
                continue
            node = body
            *path, leaf = key.split(".")
            for part in path:
                node = node[part]
            if leaf not in node:
                raise InvalidConfig(f"unknown setting {key!r}")
            node[leaf] = value
        return RunConfig.parse(body)

    def to_json(self) -> dict:
        return self.model_dump(mode="json")
