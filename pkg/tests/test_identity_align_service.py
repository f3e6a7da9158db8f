import itertools

import numpy as np
import pytest

from app.helpers.exceptions import ShapeMismatchError
from app.services.identity_align_service import IdentityAlignService


def _blocks(n_ids, size=40):
    """Label map with n_ids vertical stripes of instance ids 1..n_ids on a background border."""
    labels = np.zeros((size, size), dtype=np.int64)
    width = (size - 4) // n_ids
    for d in range(1, n_ids + 1):
        labels[2:-2, 2 + (d - 1) * width:2 + d * width - 1] = d
    return labels


def test_recovers_a_view_permutation(rng):
    canonical = _blocks(4)
    permutation = np.array([0, 3, 1, 4, 2])
    view = permutation[canonical]
    mapping = IdentityAlignService().match_canonical_to_view(canonical, view)
    for c in range(1, 5):
        assert mapping.mapping[int(permutation[c])] == c
    assert mapping.unmatched_view == [] and mapping.unmatched_canonical == []
    assert all(score == pytest.approx(1.0) for score in mapping.scores.values())


def test_greedy_matches_exhaustive_assignment_on_shifted_masks():
    canonical = _blocks(3)
    view = np.zeros_like(canonical)
    view[:, 1:] = canonical[:, :-1]
    relabel = np.array([0, 2, 3, 1])
    view = relabel[view]
    service = IdentityAlignService()
    mapping = service.match_canonical_to_view(canonical, view)
    ious = service.geometry.label_iou_matrix(canonical, view, 3, 3)
    best = max(itertools.permutations(range(1, 4)),
               key=lambda perm: sum(ious[c, v] for c, v in zip(range(1, 4), perm)))
    assert {v: c for c, v in zip(range(1, 4), best)} == mapping.mapping


def test_extra_view_label_is_unmatched_and_dropped():
    canonical = _blocks(2)
    view = canonical.copy()
    view[0:2, 0:6] = 5
    service = IdentityAlignService()
    mapping = service.match_canonical_to_view(canonical, view)
    assert mapping.unmatched_view == [5]
    relabeled, dropped = service.propagate_ids(mapping, [view, view])
    assert dropped == 2 * 12
    assert not np.any(relabeled[0] == 5)
    np.testing.assert_array_equal(relabeled[1], np.where(view == 5, 0, view))


def test_low_overlap_pairs_are_not_matched():
    canonical = np.zeros((20, 20), dtype=np.int64)
    canonical[0:4, 0:4] = 1
    view = np.zeros_like(canonical)
    view[15:20, 15:20] = 1
    mapping = IdentityAlignService().match_canonical_to_view(canonical, view)
    assert mapping.mapping == {}
    assert mapping.unmatched_canonical == [1]


def test_inverse_swaps_the_direction():
    canonical = _blocks(3)
    view = np.array([0, 2, 3, 1])[canonical]
    mapping = IdentityAlignService().match_canonical_to_view(canonical, view)
    inverse = mapping.inverse()
    assert inverse.mapping == {1: 2, 2: 3, 3: 1}


def test_align_views_uses_first_frame_and_rewrites_every_frame():
    canonical = _blocks(2)
    swap = np.array([0, 2, 1])
    frames = [swap[canonical], swap[np.roll(canonical, 1, axis=1)]]
    mappings, aligned, dropped = IdentityAlignService().align_views(canonical, [frames, [canonical, canonical]])
    assert dropped == 0
    assert mappings[0].mapping == {2: 1, 1: 2}
    np.testing.assert_array_equal(aligned[0][0], canonical)
    np.testing.assert_array_equal(aligned[0][1], np.roll(canonical, 1, axis=1))
    np.testing.assert_array_equal(aligned[1][1], canonical)


def test_align_views_checks_counts_and_shapes():
    service = IdentityAlignService()
    with pytest.raises(ShapeMismatchError):
        service.align_views([_blocks(2)] * 3, [[_blocks(2)]])
    with pytest.raises(ShapeMismatchError):
        service.match_canonical_to_view(_blocks(2, 40), _blocks(2, 30))
