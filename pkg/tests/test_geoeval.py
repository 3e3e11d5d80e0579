import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gp3.geoeval import (
    SimilarityTransform,
    chamfer_metrics,
    decoy_relief,
    eval_pointmaps,
    height_variance,
    oracle_model,
    umeyama,
    view_overlap,
)
from gp3.scenegen import CameraParams, ViewRender, make_geo_sample


def brute_chamfer(pred, gt):
    d = np.sqrt(((pred[:, None, :] - gt[None, :, :]) ** 2).sum(-1))
    acc, comp = d.min(axis=1).mean(), d.min(axis=0).mean()
    return acc, comp, 0.5 * (acc + comp)


def test_chamfer_examples():
    z = np.zeros((1, 3))
    assert chamfer_metrics(z, z) == {"accuracy": 0.0, "completeness": 0.0, "overall": 0.0}
    m = chamfer_metrics(z, np.array([[1.0, 0, 0]]))
    assert (m["accuracy"], m["completeness"], m["overall"]) == (1.0, 1.0, 1.0)
    m = chamfer_metrics(np.array([[0.0, 0, 0], [2, 0, 0]]), z)
    assert (m["accuracy"], m["completeness"], m["overall"]) == (1.0, 0.0, 0.5)
    with pytest.raises(ValueError, match="empty"):
        chamfer_metrics(np.zeros((0, 3)), z)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_chamfer_symmetry(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(rng.integers(1, 50), 3)), rng.normal(size=(rng.integers(1, 50), 3))
    assert chamfer_metrics(a, b)["accuracy"] == chamfer_metrics(b, a)["completeness"]


def test_umeyama_examples():
    src = np.random.default_rng(0).normal(size=(20, 3))
    t = umeyama(src, src)
    assert t.scale == pytest.approx(1, abs=1e-12)
    np.testing.assert_allclose(t.rotation, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(t.translation, 0, atol=1e-12)
    t = umeyama(src, src + [1, 2, 3])
    np.testing.assert_allclose(t.translation, [1, 2, 3], atol=1e-12)
    with pytest.raises(ValueError, match="at least 3"):
        umeyama(src[:2], src[:2])
    with pytest.raises(ValueError, match="coincident"):
        umeyama(np.ones((5, 3)), src[:5])


def test_umeyama_rotation_is_proper():
    rng = np.random.default_rng(1)
    src = rng.normal(size=(30, 3))
    dst = src * [-1, 1, 1] + rng.normal(0, 0.01, src.shape)  # a reflection cannot be matched by a rotation
    r = umeyama(src, dst).rotation
    assert np.max(np.abs(r.T @ r - np.eye(3))) <= 1e-9 and np.linalg.det(r) == pytest.approx(1, abs=1e-9)


def test_umeyama_residual_is_a_global_minimum():
    rng = np.random.default_rng(2)
    src = rng.normal(size=(40, 3))
    dst = 1.7 * src @ Rotation.random(random_state=3).as_matrix().T + 0.3 + rng.normal(0, 0.05, src.shape)
    t = umeyama(src, dst)

    def resid(tr):
        return ((tr.apply(src) - dst) ** 2).sum()

    best = resid(t)
    for _ in range(100):
        dr = Rotation.from_rotvec(rng.normal(0, 0.01, 3)).as_matrix()
        pert = SimilarityTransform(t.scale * (1 + rng.normal(0, 0.01)), dr @ t.rotation,
                                   t.translation + rng.normal(0, 0.01, 3))
        assert resid(pert) >= best


def _plane_view(eye_x: float, rot_q=(1.0, 0, 0, 0), res=16):
    cam = CameraParams(np.array(rot_q), -Rotation.from_quat([*rot_q[1:], rot_q[0]]).as_matrix() @ [eye_x, 0, 0],
                       np.pi / 2)
    return ViewRender(np.zeros((res, res, 3)), np.full((res, res), 2.0), cam)


def test_view_overlap_examples():
    main = _plane_view(0.0)
    assert view_overlap(main, main) == 1.0
    assert view_overlap(_plane_view(0.0, (0.0, 0.0, 1.0, 0.0)), main) == 0.0
    # the side camera sees x in (0, 4) at depth 2; main covers x in (-2, 2)
    assert view_overlap(_plane_view(2.0), main) == pytest.approx(0.5, abs=0.02)
    empty = ViewRender(np.zeros((4, 4, 3)), np.zeros((4, 4)), main.camera)
    assert view_overlap(empty, main) == 0.0


@pytest.mark.parametrize("seed", range(5))
def test_view_overlap_self_is_one(seed):
    for view in make_geo_sample(seed).views():
        assert view_overlap(view, view) == 1.0


@pytest.fixture(scope="module")
def scenes():
    return [make_geo_sample(500 + i) for i in range(4)]


def test_eval_pointmaps_oracle_is_zero(scenes):
    rep = eval_pointmaps(oracle_model, scenes)
    assert rep["skipped"] == 0 and len(rep["per_scene"]) == 4
    for k in ("accuracy", "completeness", "overall"):
        assert rep["aggregate"][k] <= 1e-9


def test_eval_pointmaps_single_view_scale_is_exact():
    samples = [make_geo_sample(600 + i, n_views=1) for i in range(3)]
    rep = eval_pointmaps(lambda s: (2 * s.depths, s.cameras.copy()), samples)
    assert rep["aggregate"]["overall"] <= 1e-9


def test_eval_pointmaps_threshold_skips(scenes):
    rep = eval_pointmaps(oracle_model, scenes, threshold=1.01)
    assert rep["skipped"] == 4 and rep["per_scene"] == []


def test_height_variance_and_decoy_relief_on_ground_truth():
    assert np.isnan(height_variance(np.zeros((1, 3))))
    samples = [make_geo_sample(700 + i, n_objects=2, decoy=True) for i in range(4)]
    rep = decoy_relief(oracle_model, samples, decoy_id=2)
    assert rep["decoy"] <= 1e-18 and rep["real"] > 1e-4
