"""Training loops for the classifier and the frozen-classifier mask generator.

Epoch 0 is the untrained initialization, evaluated before any update, so the
best-epoch search always has the starting point as a candidate.
"""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteError, TrainingError, UsageError
from ..objective import LossConfig, combine_terms, total_loss
from . import tensor as T
from .metrics import auc, bce_loss
from .models import (
    ClassifierSpec,
    GeneratorSpec,
    ModelParams,
    build_classifier,
    build_generator,
    classify,
    generate_mask,
    predict,
)
from .optim import AdamState

log = logging.getLogger(__name__)


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_metric: float
    wall_seconds: float
    extra: dict = field(default_factory=dict)

    TSV_HEADER = ("epoch", "train_loss", "val_metric", "wall_seconds")

    def tsv_row(self) -> str:
        return f"{self.epoch}\t{self.train_loss!r}\t{self.val_metric!r}\t{self.wall_seconds:.3f}"


def write_metrics_tsv(metrics: list[EpochMetrics], path) -> None:
    lines = ["\t".join(EpochMetrics.TSV_HEADER)] + [m.tsv_row() for m in metrics]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_classifier(
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    spec: ClassifierSpec | None = None,
    lr: float = 0.01,
    epochs: int = 100,
    batch_size: int = 4,
    seed: int = 0,
) -> tuple[ModelParams, list[EpochMetrics]]:
    """Adam on binary cross-entropy; returns the snapshot with the best validation AUC.

    AUC ties (common once a small validation split is perfectly ranked) go to
    the lower validation cross-entropy, then to the earliest epoch.
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise UsageError("classifier training needs nonempty train and validation splits")
    spec = spec or ClassifierSpec(in_channels=train_x.shape[1], dims=tuple(train_x.shape[2:]))
    model = build_classifier(spec, seed=seed)
    opt = AdamState(lr=lr)
    rng = np.random.default_rng([seed, 1])
    train_y = np.asarray(train_y, dtype=np.float32)

    def validate() -> tuple[float, float]:
        p = predict(model, val_x)
        with T.no_grad():
            return auc(p, val_y), float(bce_loss(p, val_y))

    t0 = time.perf_counter()
    with T.no_grad():
        initial = float(bce_loss(predict(model, train_x), train_y))
    best_key = validate()
    metrics = [EpochMetrics(0, initial, best_key[0], time.perf_counter() - t0, {"val_bce": best_key[1]})]
    best = model.copy()
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in _batches(len(train_x), batch_size, rng):
            model.zero_grad()
            try:
                loss = bce_loss(classify(model, train_x[idx]), train_y[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(str(exc), epoch=epoch) from exc
            if not np.isfinite(float(loss)):
                raise TrainingError("classifier loss is NaN", epoch=epoch)
            opt.step(model)
            losses.append(float(loss) * len(idx))
        model.epoch = epoch
        score, val_bce = validate()
        metrics.append(
            EpochMetrics(epoch, sum(losses) / len(train_x), score, time.perf_counter() - t0, {"val_bce": val_bce})
        )
        log.info("classifier epoch %d loss %.4f val_auc %.4f val_bce %.4f", epoch, metrics[-1].train_loss, score, val_bce)
        if score > best_key[0] or (score == best_key[0] and val_bce < best_key[1]):
            best_key, best = (score, val_bce), model.copy()
    return best, metrics


def evaluate_objective(
    generator: ModelParams,
    classifier: ModelParams,
    x: np.ndarray,
    y_np: np.ndarray,
    cfg: LossConfig,
    batch_size: int = 4,
) -> tuple[float, float]:
    """Item-weighted mean total objective and mean |y_p - y_np| over ``x``."""
    totals, gaps = [], []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size]
            yb = y_np[start : start + batch_size]
            mri_p = xb * generate_mask(generator, xb).data
            y_p = classify(classifier, mri_p)
            _, parts = combine_terms(y_p, yb, mri_p, xb, cfg)
            totals.append(parts.total * len(xb))
            gaps.append(np.abs(y_p.data - yb))
    return sum(totals) / len(x), float(np.mean(np.concatenate(gaps)))


def train_generator(
    train_x: np.ndarray,
    val_x: np.ndarray,
    classifier: ModelParams,
    spec: GeneratorSpec | None = None,
    lr: float = 0.1,
    epochs: int = 200,
    batch_size: int = 4,
    loss_cfg: LossConfig = LossConfig(),
    seed: int = 0,
    step_log: list | None = None,
) -> tuple[ModelParams, list[EpochMetrics]]:
    """Train the mask generator against a frozen classifier.

    Returns the snapshot with the lowest validation objective. Each metric's
    ``extra`` carries the validation mean |y_p - y_np| under ``"val_gap"``.
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise UsageError("generator training needs nonempty train and validation splits")
    spec = spec or GeneratorSpec(in_channels=train_x.shape[1], dims=tuple(train_x.shape[2:]))
    classifier = classifier.copy().requires_grad(False)
    frozen = classifier.checksum()
    generator = build_generator(spec, seed=seed)
    opt = AdamState(lr=lr)
    rng = np.random.default_rng([seed, 2])
    train_ynp = predict(classifier, train_x)
    val_ynp = predict(classifier, val_x)

    t0 = time.perf_counter()
    initial, _ = evaluate_objective(generator, classifier, train_x, train_ynp, loss_cfg, batch_size)
    best_total, gap = evaluate_objective(generator, classifier, val_x, val_ynp, loss_cfg, batch_size)
    metrics = [EpochMetrics(0, initial, best_total, time.perf_counter() - t0, {"val_gap": gap})]
    best = generator.copy()
    step = 0
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for idx in _batches(len(train_x), batch_size, rng):
            generator.zero_grad()
            try:
                mask = generate_mask(generator, train_x[idx])
                loss, parts = total_loss(train_x[idx], mask, classifier, loss_cfg, y_np=train_ynp[idx])
                loss.backward()
            except NonFiniteError as exc:
                raise TrainingError(str(exc), epoch=epoch) from exc
            if not np.isfinite(parts.total):
                raise TrainingError("generator objective is NaN", epoch=epoch)
            opt.step(generator)
            losses.append(parts.total * len(idx))
            step += 1
            if step_log is not None:
                step_log.append((step, parts))
        generator.epoch = epoch
        val_total, gap = evaluate_objective(generator, classifier, val_x, val_ynp, loss_cfg, batch_size)
        metrics.append(
            EpochMetrics(epoch, sum(losses) / len(train_x), val_total, time.perf_counter() - t0, {"val_gap": gap})
        )
        log.info("generator epoch %d loss %.4f val_total %.4f val_gap %.4f", epoch, metrics[-1].train_loss, val_total, gap)
        if val_total < best_total:
            best_total, best = val_total, generator.copy()
    if classifier.checksum() != frozen:
        raise AssertionError("frozen classifier parameters changed during generator training")
    return best, metrics
