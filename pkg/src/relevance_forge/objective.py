"""Composite generator objective: perturbation, L1, and indecisive terms.

All three terms are batch means and are summed without weights by default.
Every function accepts :class:`Tensor` inputs (so gradients flow back to the
mask) or plain floats/arrays (returned as constant tensors).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import tensor as T
from .nn.models import ModelParams, classify
from .nn.tensor import Tensor

L1_MODES = ("mean", "sum")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 4.0
    beta: float = 0.5
    delta: float = 1.0
    epsilon_gap: float = 1e-6
    l1_mode: str = "mean"
    # Per-term weights; the unweighted sum is the reference objective.
    w_perturbation: float = 1.0
    w_l1: float = 1.0
    w_indecisive: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.epsilon_gap > 0:
            raise ConfigError(f"epsilon_gap must be > 0, got {self.epsilon_gap}")
        if self.l1_mode not in L1_MODES:
            raise ConfigError(f"l1_mode must be one of {L1_MODES}, got {self.l1_mode!r}")


@dataclass(frozen=True)
class LossBreakdown:
    perturbation: float
    l1: float
    indecisive: float
    total: float
    y_p: float
    y_np: float

    TSV_HEADER = ("step", "y_np", "y_p", "perturbation", "l1", "indecisive", "total")

    def tsv_row(self, step: int) -> str:
        vals = (self.y_np, self.y_p, self.perturbation, self.l1, self.indecisive, self.total)
        return "\t".join([str(step)] + [repr(float(v)) for v in vals])

    def as_dict(self) -> dict:
        return asdict(self)


def perturbation_loss(y_p, y_np, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean of log(1 / max(|y_p - y_np|, epsilon_gap)) over the batch."""
    y_p = T.as_tensor(y_p, np.float64)
    y_np = T.as_tensor(y_np, y_p.dtype)
    gap = T.clamp_min(T.absolute(y_p - y_np), cfg.epsilon_gap)
    return T.mean_all(-T.log(gap))


def l1_loss(mri_p, mri_np, cfg: LossConfig = LossConfig()) -> Tensor:
    """Absolute difference between perturbed and original volumes.

    ``mean`` mode averages over every voxel of the batch; ``sum`` mode sums
    each item's voxels and averages over items.
    """
    mri_p = T.as_tensor(mri_p, np.float64)
    mri_np = T.as_tensor(mri_np, mri_p.dtype)
    if mri_p.shape != mri_np.shape:
        raise DimensionError(f"l1_loss shapes differ: {mri_p.shape} vs {mri_np.shape}")
    diff = T.absolute(mri_p - mri_np)
    if cfg.l1_mode == "mean":
        return T.mean_all(diff)
    items = mri_p.shape[0] if mri_p.data.ndim > 4 else 1
    return T.sum_all(diff) * (1.0 / items)


def indecisive_penalty(y_p, cfg: LossConfig = LossConfig()) -> Tensor:
    """Batch mean of the downward parabola -alpha * (y_p - beta)^2 + delta."""
    y_p = T.as_tensor(y_p, np.float64)
    return T.mean_all(T.square(y_p - cfg.beta) * (-cfg.alpha) + cfg.delta)


def total_loss(
    mri_np,
    mask,
    classifier: ModelParams,
    cfg: LossConfig = LossConfig(),
    y_np=None,
) -> tuple[Tensor, LossBreakdown]:
    """Score a batch of masks against a frozen classifier.

    ``y_np`` may be passed in when the unperturbed predictions are already
    known; they are constants either way. Returns the differentiable total
    and a float breakdown of its parts.
    """
    mask = T.as_tensor(mask, classifier.dtype)
    mri_np = T.as_tensor(mri_np, mask.dtype)
    if mask.shape != mri_np.shape:
        raise DimensionError(f"mask shape {mask.shape} does not match volume shape {mri_np.shape}")
    if y_np is None:
        with T.no_grad():
            y_np = classify(classifier, mri_np).data
    y_np = np.asarray(y_np, dtype=mask.dtype)
    mri_p = T.mul(mri_np, mask)
    y_p = classify(classifier, mri_p)
    return combine_terms(y_p, y_np, mri_p, mri_np, cfg)


def combine_terms(y_p, y_np, mri_p, mri_np, cfg: LossConfig = LossConfig()) -> tuple[Tensor, LossBreakdown]:
    y_p = T.as_tensor(y_p)
    pert = perturbation_loss(y_p, y_np, cfg)
    l1 = l1_loss(mri_p, mri_np, cfg)
    indec = indecisive_penalty(y_p, cfg)
    total = pert * cfg.w_perturbation + l1 * cfg.w_l1 + indec * cfg.w_indecisive
    parts = float(pert), float(l1), float(indec)
    breakdown = LossBreakdown(
        perturbation=parts[0],
        l1=parts[1],
        indecisive=parts[2],
        # Recombined in float64 so the reported total matches its parts exactly.
        total=cfg.w_perturbation * parts[0] + cfg.w_l1 * parts[1] + cfg.w_indecisive * parts[2],
        y_p=float(np.mean(y_p.data)),
        y_np=float(np.mean(y_np)),
    )
    return total, breakdown
