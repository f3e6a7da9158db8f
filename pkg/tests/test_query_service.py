import math

import numpy as np
import pytest

from app.helpers.exceptions import QueryError
from app.services.query_service import QueryService
from app.services.scene_service import SceneService
from tests.helpers import one_hot_heads, pinhole_camera, two_instance_scene


def _cameras():
    return [pinhole_camera(width=32, height=32, focal=40.0, yaw_deg=yaw) for yaw in (0.0, 20.0)]


def test_intervals_above_the_mean():
    threshold, intervals = QueryService.intervals_above([0.0, 0.0, 1.0, 1.0], [0, 1, 2, 3])
    assert threshold == 0.5
    assert intervals == [(2, 3)]


def test_constant_scores_select_everything():
    threshold, intervals = QueryService.intervals_above([0.25] * 5, [10, 11, 12, 13, 14])
    assert threshold == 0.25
    assert intervals == [(10, 14)]


def test_nan_scores_are_never_selected():
    threshold, intervals = QueryService.intervals_above([1.0, math.nan, 1.0, 0.0])
    assert threshold == pytest.approx(2.0 / 3.0)
    assert intervals == [(0, 0), (2, 2)]
    assert math.isnan(QueryService.intervals_above([math.nan])[0])


def test_query_vector_is_checked():
    heads = one_hot_heads()
    with pytest.raises(QueryError):
        QueryService.check_query(np.zeros(6), heads)
    with pytest.raises(QueryError):
        QueryService.check_query(np.ones(5), heads)
    heads.autoencoder = None
    with pytest.raises(QueryError):
        QueryService.check_query(np.ones(6), heads)


def test_relevance_is_scale_invariant(rng):
    service = QueryService()
    heads = one_hot_heads()
    feature = rng.normal(size=(5, 6, 8))
    alpha = rng.uniform(0.0, 1.0, size=(5, 6))
    query = rng.normal(size=6)
    first = service.relevance_map(feature, alpha, heads, query)
    second = service.relevance_map(feature, alpha, heads, 7.5 * query)
    np.testing.assert_allclose(first, second, atol=1e-12)
    assert np.all(first[alpha <= 1e-3] == -1.0)
    assert np.all(np.abs(first) <= 1.0)


def test_identity_query_picks_the_matching_instance():
    service = QueryService()
    heads = one_hot_heads()
    query = np.eye(6)[2]
    result = service.identity_query(two_instance_scene(), heads, _cameras(), query)
    assert result.instance == 2
    assert result.scores[2] > 0.99
    assert result.scores[1] < result.scores[2]


def test_instance_render_contains_only_the_instance():
    service = QueryService()
    render = service.render_instance(two_instance_scene(), one_hot_heads(), _cameras()[0], 1)
    np.testing.assert_array_equal(render.selected, [True, False])
    assert render.audit_ok
    assert render.target.alpha.max() > 0.5


def test_missing_instance_scores_nan():
    scene = two_instance_scene()
    scene.fg.features[1] = scene.fg.features[0]
    score = QueryService().frame_score(scene, one_hot_heads(), _cameras(), 2, np.eye(6)[2])
    assert math.isnan(score)


@pytest.mark.parametrize("threads", [1, 2])
def test_segment_query_over_checkpoints(tmp_path, threads):
    scene_service = SceneService()
    heads = one_hot_heads()
    paths = []
    for t in range(3):
        scene = two_instance_scene(frame_index=t)
        if t == 1:
            scene.fg.features[1, 5] = 0.8
        path = tmp_path / f"frame_{t:04d}.g4d"
        scene_service.save_checkpoint(path, scene, heads.to_sections())
        paths.append(path)
    result = QueryService(threads=threads).segment_query(list(reversed(paths)), 2, np.eye(6)[2], _cameras())
    assert result.frames == [0, 1, 2]
    assert result.scores[0] == pytest.approx(1.0, abs=1e-6)
    assert result.scores[1] == pytest.approx(1.0 / math.sqrt(1.64), abs=1e-6)
    assert result.intervals == [(0, 0), (2, 2)]
