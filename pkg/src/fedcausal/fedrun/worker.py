"""Source-side computation: one worker per data source."""

from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from ..model import PriorConfig, SourceData, SourceSummary
from ..variational import Objective, ParamLayout, VariationalConfig, draw_noise_set, grad_fd
from .messages import GradientReport, ParamBroadcast

log = logging.getLogger(__name__)


class SourceWorker:
    """Holds one source's rows and answers parameter broadcasts with gradients.

    The rows never leave this object; the only outputs are
    :class:`GradientReport` messages.
    """

    def __init__(
        self,
        src: SourceData,
        summaries: Sequence[SourceSummary],
        priors: PriorConfig,
        layout: ParamLayout,
        vcfg: VariationalConfig,
        ablate_g: bool = False,
        grad_mode: str = "autodiff",
        fd_eps: float = 1e-5,
    ):
        if grad_mode not in ("autodiff", "fd"):
            raise ValueError(f"unknown grad_mode {grad_mode!r}")
        self.source_id = src.source_id
        self._src = src
        self._objective = Objective(summaries, priors, layout, vcfg, ablate_g)
        self._grad_mode = grad_mode
        self._fd_eps = fd_eps

    def handle(self, msg: ParamBroadcast) -> GradientReport:
        obj = self._objective
        noise = draw_noise_set(msg.noise_seed, obj.vcfg.mc_samples, obj.m, obj.vcfg)
        if self._grad_mode == "autodiff":
            value, grad = obj.value_and_grad(msg.theta, self._src, noise)
        else:
            value = obj.value(msg.theta, self._src, noise)
            grad = grad_fd(lambda th: obj.value(th, self._src, noise), msg.theta, self._fd_eps)
        return GradientReport(self.source_id, msg.round, np.asarray(grad, dtype=float), value)
