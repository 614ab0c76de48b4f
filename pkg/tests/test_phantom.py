import numpy as np
import pytest
from scipy import ndimage

from relevance_forge.errors import SpecError
from relevance_forge.phantom import (
    PhantomSpec,
    assign_labels,
    generate,
    highpass_energy,
    largest_remainder,
    make_case,
    split,
)

SMALL = PhantomSpec(seed=3, count=20, dims=(16, 16, 16), blob_radius_range=(3.0, 5.0))


@pytest.fixture(scope="module")
def small_cases():
    return generate(SMALL)


def test_deterministic(small_cases):
    again = generate(SMALL)
    for a, b in zip(small_cases, again):
        assert a.volume == b.volume and a.label == b.label
        np.testing.assert_array_equal(a.truth, b.truth)


def test_case_independent_of_generation_order(small_cases):
    labels = assign_labels(SMALL)
    for i in (7, 0, 13):
        assert make_case(SMALL, i, labels[i]).volume == small_cases[i].volume


def test_seed_changes_output(small_cases):
    other = generate(PhantomSpec(seed=4, count=20, dims=(16, 16, 16), blob_radius_range=(3.0, 5.0)))
    assert other[0].volume != small_cases[0].volume


def test_labels_follow_class_ratio():
    labels = assign_labels(PhantomSpec(count=200))
    assert labels.sum() == 120
    assert set(np.unique(labels)) == {0, 1}


def test_truth_is_one_connected_blob(small_cases):
    for case in small_cases:
        assert case.truth.shape == SMALL.dims
        assert case.volume.shape == (2, *SMALL.dims)
        _, n = ndimage.label(case.truth)
        assert n == 1
        # blob stays off the boundary faces
        assert not case.truth[0].any() and not case.truth[-1].any()
        assert not case.truth[:, :, 0].any() and not case.truth[:, :, -1].any()


def test_classes_separable_by_texture(small_cases):
    energy = {0: [], 1: []}
    for case in small_cases:
        energy[case.label].append(highpass_energy(case.volume.voxels[0], case.truth))
    assert min(energy[1]) > max(energy[0])


def test_zero_contrast_classes_indistinguishable():
    cases = generate(PhantomSpec(seed=3, count=20, dims=(16, 16, 16), blob_radius_range=(3.0, 5.0), texture_contrast=0.0))
    e = {0: [], 1: []}
    for c in cases:
        e[c.label].append(highpass_energy(c.volume.voxels[0], c.truth))
    assert max(e[1]) > min(e[0]) and max(e[0]) > min(e[1])


@pytest.mark.parametrize(
    "bad",
    [
        PhantomSpec(count=1),
        PhantomSpec(class_ratio=1.0),
        PhantomSpec(dims=(8, 8, 8)),
        PhantomSpec(blob_radius_range=(4.0, 2.0)),
        PhantomSpec(texture_contrast=-0.1),
    ],
)
def test_spec_validation(bad):
    with pytest.raises(SpecError):
        bad.validate()


def test_largest_remainder():
    assert largest_remainder(200, (0.7, 0.1, 0.2)) == [140, 20, 40]
    assert largest_remainder(10, (1, 1, 1)) == [4, 3, 3]
    assert sum(largest_remainder(37, (0.7, 0.1, 0.2))) == 37


def test_split_sizes_and_stratification():
    class C:
        def __init__(self, i, label):
            self.index, self.label = i, label

    labels = assign_labels(PhantomSpec(count=200))
    cases = [C(i, int(l)) for i, l in enumerate(labels)]
    train, val, test = split(cases)
    assert (len(train), len(val), len(test)) == (140, 20, 40)
    assert [sum(c.label for c in part) for part in (train, val, test)] == [84, 12, 24]
    seen = sorted(c.index for part in (train, val, test) for c in part)
    assert seen == list(range(200))
    assert [c.index for c in split(cases)[2]] == [c.index for c in test]


def test_split_rejects_bad_fractions(small_cases):
    with pytest.raises(SpecError):
        split(small_cases, (0.5, 0.5, 0.5))
    with pytest.raises(SpecError):
        split(small_cases[:2], (0.7, 0.1, 0.2))
