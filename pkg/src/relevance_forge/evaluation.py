"""Dice scoring of relevance maps against ground truth, and the blank baseline.

Both methods produce a :class:`RelevanceMap` through the same
paint/combine/bin functions, so their scores are directly comparable.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateMapError, DimensionError, UsageError
from .nn.models import ModelParams, predict, predict_masks
from .relevance import (
    RelevanceConfig,
    RelevanceMap,
    bin_ranks,
    combine_sequences,
    generate_relevance,
    paint_regions,
    segment_channels,
    top_regions,
)
from .slic3d import SuperpixelMap
from .volume import Volume, as_volume

log = logging.getLogger(__name__)

METHODS = ("ours", "blank")


def dice(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"dice shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def optimal_threshold_dice(rm: RelevanceMap, truth) -> tuple[float, int]:
    """Best DSC over the nested unions of ranks 0..k-1, k = 1..B; ties keep the smallest k."""
    truth = np.asarray(truth, dtype=bool)
    if truth.shape != rm.bins.shape:
        raise DimensionError(f"truth shape {truth.shape} does not match relevance map {rm.bins.shape}")
    best, best_k = -1.0, 0
    for k in range(1, rm.bin_count + 1):
        score = dice(rm.bins < k, truth)
        if score > best:
            best, best_k = score, k
    return best, best_k


def ranked_dice_table(rm: RelevanceMap, truth) -> list[float]:
    return [dice(top_regions(rm, r), truth) for r in range(rm.bin_count)]


def blank_scores(volume: Volume, classifier: ModelParams, maps: list[SuperpixelMap], batch_size: int = 8) -> list[np.ndarray]:
    """Per channel, |y(volume) - y(volume with one superpixel zeroed)| for every superpixel."""
    base = volume.voxels
    y0 = float(predict(classifier, base[None])[0])
    out = []
    for c, sp in enumerate(maps):
        scores = np.empty(sp.count, dtype=np.float64)
        for start in range(0, sp.count, batch_size):
            ids = range(start, min(start + batch_size, sp.count))
            batch = np.repeat(base[None], len(ids), axis=0)
            for row, s in enumerate(ids):
                batch[row, c][sp.labels == s] = 0.0
            scores[start : start + len(ids)] = np.abs(predict(classifier, batch, batch_size) - y0)
        out.append(scores)
    return out


def blank_perturbation_baseline(
    volume,
    classifier: ModelParams,
    cfg: RelevanceConfig = RelevanceConfig(),
    superpixels: list[SuperpixelMap] | None = None,
) -> RelevanceMap:
    """Occlusion-style relevance: a larger prediction change means more relevant, so no inversion."""
    volume = as_volume(volume)
    maps = superpixels if superpixels is not None else segment_channels(volume, cfg.slic)
    painted = [paint_regions(s, sp) for s, sp in zip(blank_scores(volume, classifier, maps), maps)]
    baseline_cfg = RelevanceConfig(cfg.bins, False, cfg.slic, cfg.paint_mode)
    return bin_ranks(combine_sequences(painted), baseline_cfg, painted, maps)


@dataclass(frozen=True)
class EvalCase:
    case_id: int
    volume: Volume
    truth: np.ndarray


@dataclass
class CaseResult:
    case_id: int
    method: str
    dsc_optimal: float
    k_star: int
    dsc_ranks: list[float]
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class EvalReport:
    bins: int
    rows: list[CaseResult] = field(default_factory=list)

    def methods(self) -> list[str]:
        seen = []
        for r in self.rows:
            if r.method not in seen:
                seen.append(r.method)
        return seen

    def summary(self, method: str) -> dict:
        """Column means over the method's successful rows (NaN when none succeeded)."""
        ok = [r for r in self.rows if r.method == method and r.ok]
        if not ok:
            nan = float("nan")
            return {"dsc_optimal": nan, "k_star": nan, "dsc_ranks": [nan] * self.bins, "cases": 0}
        return {
            "dsc_optimal": float(np.mean([r.dsc_optimal for r in ok])),
            "k_star": float(np.mean([r.k_star for r in ok])),
            "dsc_ranks": [float(np.mean([r.dsc_ranks[i] for r in ok])) for i in range(self.bins)],
            "cases": len(ok),
        }

    def header(self) -> list[str]:
        return ["case_id", "method", "dsc_optimal", "k_star"] + [f"dsc_rank_{i}" for i in range(self.bins)]

    def to_tsv(self) -> str:
        lines = ["\t".join(self.header())]
        for r in self.rows:
            if r.ok:
                vals = [repr(r.dsc_optimal), str(r.k_star)] + [repr(v) for v in r.dsc_ranks]
            else:
                vals = ["nan", "0"] + ["nan"] * self.bins
            lines.append("\t".join([str(r.case_id), r.method] + vals))
        for m in self.methods():
            s = self.summary(m)
            vals = [repr(s["dsc_optimal"]), repr(s["k_star"])] + [repr(v) for v in s["dsc_ranks"]]
            lines.append("\t".join(["MEAN", m] + vals))
        return "\n".join(lines) + "\n"

    def write_tsv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_tsv())

    def format_table(self, show_ranks: int = 3) -> str:
        """Aligned text: mean optimal DSC per method, then mean DSC of the first few ranks."""
        shown = min(show_ranks, self.bins)
        head = ["method", "cases", "dsc_optimal", "k_star"] + [f"rank_{i}" for i in range(shown)]
        body = []
        for m in self.methods():
            s = self.summary(m)
            failed = sum(1 for r in self.rows if r.method == m and not r.ok)
            cases = f"{s['cases']}" + (f" ({failed} failed)" if failed else "")
            body.append(
                [m, cases, f"{s['dsc_optimal']:.4f}", f"{s['k_star']:.2f}"]
                + [f"{v:.4f}" for v in s["dsc_ranks"][:shown]]
            )
        widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
        fmt = lambda row: "  ".join(v.ljust(w) for v, w in zip(row, widths)).rstrip()
        return "\n".join([fmt(head), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]) + "\n"


def score_case(case_id: int, method: str, rm_factory, truth) -> CaseResult:
    try:
        rm = rm_factory()
    except DegenerateMapError as exc:
        log.warning("case %s method %s: %s", case_id, method, exc)
        return CaseResult(case_id, method, math.nan, 0, [], error=str(exc))
    dsc, k = optimal_threshold_dice(rm, truth)
    return CaseResult(case_id, method, dsc, k, ranked_dice_table(rm, truth))


def evaluate_case(case: EvalCase, mask, classifier, cfg: RelevanceConfig, methods) -> list[CaseResult]:
    """All requested methods for one case; both share the case's superpixel maps."""
    maps = segment_channels(case.volume, cfg.slic)
    rows = []
    if "ours" in methods:
        rows.append(score_case(case.case_id, "ours", lambda: generate_relevance(case.volume, mask, cfg, maps), case.truth))
    if "blank" in methods:
        rows.append(
            score_case(
                case.case_id, "blank", lambda: blank_perturbation_baseline(case.volume, classifier, cfg, maps), case.truth
            )
        )
    return rows


def evaluate_dataset(
    cases: list[EvalCase],
    generator: ModelParams | None,
    classifier: ModelParams | None,
    cfg: RelevanceConfig = RelevanceConfig(),
    methods=METHODS,
    workers: int = 1,
) -> EvalReport:
    """Score every case with every requested method; rows stay in case order for any ``workers``."""
    cfg.validate()
    methods = tuple(methods)
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise ConfigError(f"unknown evaluation methods {sorted(unknown)}")
    if not cases:
        raise DimensionError("evaluation needs at least one case")
    if "ours" in methods and generator is None:
        raise UsageError("method 'ours' needs a generator")
    if "blank" in methods and classifier is None:
        raise UsageError("method 'blank' needs a classifier")
    if "ours" in methods:
        masks = list(predict_masks(generator, np.stack([c.volume.voxels for c in cases])))
    else:
        masks = [None] * len(cases)
    n = len(cases)
    report = EvalReport(cfg.bins)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = pool.map(evaluate_case, cases, masks, [classifier] * n, [cfg] * n, [methods] * n)
            for rows in results:
                report.rows.extend(rows)
    else:
        for case, mask in zip(cases, masks):
            report.rows.extend(evaluate_case(case, mask, classifier, cfg, methods))
            log.info("evaluated case %s", case.case_id)
    return report
