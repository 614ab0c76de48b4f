import numpy as np
import pytest

from oracles import dice_oracle
from relevance_forge import evaluation, relevance
from relevance_forge.errors import DimensionError
from relevance_forge.evaluation import (
    CaseResult,
    EvalCase,
    EvalReport,
    blank_perturbation_baseline,
    blank_scores,
    dice,
    evaluate_dataset,
    optimal_threshold_dice,
    ranked_dice_table,
)
from relevance_forge.nn.models import ClassifierSpec, GeneratorSpec, build_classifier, build_generator
from relevance_forge.relevance import RelevanceConfig, bin_ranks, segment_channels
from relevance_forge.slic3d import SlicConfig
from relevance_forge.volume import Volume

RAW3 = RelevanceConfig(bins=3, low_mask_is_relevant=False)


def test_dice_examples():
    a = np.zeros(10, dtype=bool)
    a[:4] = True
    b = np.zeros(10, dtype=bool)
    b[2:6] = True
    assert dice(a, a) == 1.0
    assert dice(a, ~a) == 0.0
    assert dice(a, b) == 0.5
    assert dice(np.zeros(5), np.zeros(5)) == 1.0
    with pytest.raises(DimensionError):
        dice(np.zeros(3), np.zeros(4))


@pytest.mark.parametrize("seed", range(100))
def test_dice_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in rng.integers(1, 7, size=3))
    a = rng.random(shape) < rng.random()
    b = rng.random(shape) < rng.random()
    assert dice(a, b) == dice_oracle(a, b)
    assert dice(a, b) == dice(b, a)


def nested_fixture():
    """Values 2 on region A, 1 on region B, 0 elsewhere; truth is A | B."""
    values = np.zeros((4, 4, 4))
    values[:1] = 2.0
    values[1:2, :2] = 1.0
    truth = values > 0
    return bin_ranks(values, RAW3), truth


def exhaustive(rm, truth):
    scores = [dice_oracle(rm.bins < k, truth) for k in range(1, rm.bin_count + 1)]
    best = max(scores)
    return best, scores.index(best) + 1


def test_optimal_threshold_picks_union_of_two_ranks():
    rm, truth = nested_fixture()
    assert optimal_threshold_dice(rm, truth) == (1.0, 2)
    assert optimal_threshold_dice(rm, truth) == exhaustive(rm, truth)


def test_truth_equals_rank_zero():
    rm, _ = nested_fixture()
    truth = rm.bins == 0
    assert optimal_threshold_dice(rm, truth) == (1.0, 1)
    table = ranked_dice_table(rm, truth)
    assert table[0] == 1.0


@pytest.mark.parametrize("seed", range(30))
def test_optimal_threshold_matches_exhaustive(seed):
    rng = np.random.default_rng(seed)
    rm = bin_ranks(rng.random((4, 4, 4)) ** (1 + seed % 4), RelevanceConfig(bins=int(rng.integers(2, 8))))
    truth = rng.random((4, 4, 4)) < 0.3
    dsc, k = optimal_threshold_dice(rm, truth)
    assert (dsc, k) == exhaustive(rm, truth)
    table = ranked_dice_table(rm, truth)
    assert table[0] == dice_oracle(rm.bins < 1, truth)
    assert dsc >= table[0]
    for r, value in enumerate(table):
        assert value == dice_oracle(rm.bins == r, truth)


def test_ties_keep_smallest_k():
    values = np.zeros((2, 2, 2))
    values[0, 0, 0] = 3.0
    rm = bin_ranks(values, RelevanceConfig(bins=4, low_mask_is_relevant=False))
    truth = np.zeros((2, 2, 2), dtype=bool)
    truth[0, 0, 0] = True
    # ranks 1 and 2 are empty, so k = 1, 2, 3 give the same DSC
    assert optimal_threshold_dice(rm, truth) == (1.0, 1)


def test_empty_rank_scores_zero_against_nonempty_truth():
    rm, truth = nested_fixture()
    table = ranked_dice_table(rm, truth)
    assert table[2] == 0.0


def tiny_classifier(dead_channel=None):
    spec = ClassifierSpec(in_channels=2, dims=(8, 8, 8), stem_width=2, block_widths=(2, 2))
    clf = build_classifier(spec, seed=0)
    if dead_channel is not None:
        clf.params["stem.w"].data[:, dead_channel] = 0.0
    return clf


def test_baseline_dead_channel_scores_zero():
    vol = Volume(np.random.default_rng(0).random((2, 8, 8, 8)))
    clf = tiny_classifier(dead_channel=1)
    maps = segment_channels(vol, SlicConfig(k=4))
    scores = blank_scores(vol, clf, maps)
    assert np.all(np.abs(scores[1]) <= 1e-6)
    assert np.any(scores[0] > 0)


def test_baseline_zeroing_zero_region_is_exactly_zero():
    voxels = np.zeros((2, 8, 8, 8))
    voxels[:, :, :, 4:] = 0.8
    vol = Volume(voxels)
    maps = segment_channels(vol, SlicConfig(k=2, m=0.01))
    scores = blank_scores(vol, tiny_classifier(), maps)
    zero_regions = [s for s in range(maps[0].count) if not voxels[0][maps[0].labels == s].any()]
    assert zero_regions
    for s in zero_regions:
        assert scores[0][s] == 0.0


def test_baseline_shares_binning_code_path(monkeypatch):
    assert evaluation.bin_ranks is relevance.bin_ranks
    assert evaluation.top_regions is relevance.top_regions
    calls = []

    def spy(*args, **kwargs):
        calls.append(args)
        return relevance.bin_ranks(*args, **kwargs)

    monkeypatch.setattr(evaluation, "bin_ranks", spy)
    vol = Volume(np.random.default_rng(2).random((2, 8, 8, 8)))
    rm = blank_perturbation_baseline(vol, tiny_classifier(), RelevanceConfig(slic=SlicConfig(k=4)))
    assert len(calls) == 1
    assert rm.score_direction == "high-mask-is-relevant"


def test_report_tsv_layout_and_means():
    rep = EvalReport(3)
    rep.rows.append(CaseResult(0, "ours", 0.5, 2, [0.4, 0.2, 0.0]))
    rep.rows.append(CaseResult(1, "ours", 0.7, 1, [0.6, 0.0, 0.2]))
    rep.rows.append(CaseResult(2, "ours", float("nan"), 0, [], error="constant"))
    lines = rep.to_tsv().splitlines()
    assert lines[0].split("\t") == ["case_id", "method", "dsc_optimal", "k_star", "dsc_rank_0", "dsc_rank_1", "dsc_rank_2"]
    mean = lines[-1].split("\t")
    assert mean[:2] == ["MEAN", "ours"]
    assert float(mean[2]) == pytest.approx(0.6)
    assert float(mean[4]) == pytest.approx(0.5)
    assert "1 failed" in rep.format_table()


def small_cases(n=2):
    rng = np.random.default_rng(3)
    cases = []
    for i in range(n):
        vox = rng.random((2, 8, 8, 8)).astype(np.float32)
        truth = np.zeros((8, 8, 8), dtype=bool)
        truth[2:5, 2:5, 2:5] = True
        cases.append(EvalCase(i, Volume(vox), truth))
    return cases


def test_evaluate_dataset_single_case_aggregate_equals_case():
    gen = build_generator(GeneratorSpec(2, (8, 8, 8), (2, 4), 2), seed=0)
    cfg = RelevanceConfig(slic=SlicConfig(k=4))
    rep = evaluate_dataset(small_cases(1), gen, tiny_classifier(), cfg)
    for method in ("ours", "blank"):
        row = [r for r in rep.rows if r.method == method][0]
        s = rep.summary(method)
        assert s["dsc_optimal"] == row.dsc_optimal
        assert s["dsc_ranks"] == row.dsc_ranks


def test_evaluate_dataset_parallel_matches_serial():
    gen = build_generator(GeneratorSpec(2, (8, 8, 8), (2, 4), 2), seed=0)
    cfg = RelevanceConfig(slic=SlicConfig(k=4))
    cases = small_cases(3)
    serial = evaluate_dataset(cases, gen, tiny_classifier(), cfg)
    parallel = evaluate_dataset(cases, gen, tiny_classifier(), cfg, workers=2)
    assert serial.to_tsv() == parallel.to_tsv()


def test_degenerate_case_recorded_not_raised():
    gen = build_generator(GeneratorSpec(2, (8, 8, 8), (2, 4), 2), seed=0)
    gen.params["out.w"].data[:] = 0.0  # constant mask everywhere
    cases = [EvalCase(0, Volume(np.zeros((2, 8, 8, 8))), np.ones((8, 8, 8), dtype=bool))]
    rep = evaluate_dataset(cases, gen, None, RelevanceConfig(slic=SlicConfig(k=8)), methods=("ours",))
    assert not rep.rows[0].ok
    assert "MEAN\tours\tnan" in rep.to_tsv()
