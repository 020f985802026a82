import numpy as np
import pytest

from povl.features import FeatureTable, build_window
from povl.geometry import ExtrapolationError, ReferencePath, SegmentKind
from povl.metrics import rmse
from povl.predictor import (
    PredictionError,
    Source,
    T_PRED,
    cv_frenet_prior,
    predict_cv,
    predict_gt,
    predict_povl,
    predict_povl_batch,
    reconstruct,
)
from povl.scene import Track
from povl.synthetic import GeneratorConfig, generate_synthetic
from povl.transformer import GaussianTrajectory, ModelConfig, POVLModel

SMALL = ModelConfig(d_model=16, n_heads=2, d_ff=32)


def line_track(n=40, v=(20.0, 0.5), vid=1):
    t = np.arange(n) * 0.2
    pos = np.stack([v[0] * t, v[1] * t], 1)
    return Track(vid, np.arange(n), pos, np.tile(v, (n, 1)), np.zeros((n, 2)), np.full(n, 3))


@pytest.fixture(scope="module")
def scene():
    s = generate_synthetic(GeneratorConfig(density="sparse"), seed=42)
    return s, FeatureTable(s.tracks, s.map)


def test_cv_closed_form():
    tr = line_track()
    p = predict_cv(tr, 5)
    k = np.arange(1, 26)[:, None] * 0.2
    assert np.allclose(p.positions, tr.pos[5] + k * np.array([20.0, 0.5]), atol=1e-12)
    assert p.source is Source.CV and p.covariance.shape == (T_PRED, 2, 2)


def test_cv_stationary_vehicle():
    tr = Track(2, np.arange(10), np.tile([3.0, 4.0], (10, 1)), np.zeros((10, 2)),
               np.zeros((10, 2)), np.full(10, 3))
    assert np.all(predict_cv(tr, 9).positions == [3.0, 4.0])


def test_gt_is_exact_and_needs_a_future():
    tr = line_track(n=40)
    p = predict_gt(tr, 10)
    assert rmse(p.positions, tr.pos[11:36]) == 0.0
    with pytest.raises(PredictionError, match="25 needed"):
        predict_gt(tr, 20)


def test_cv_prior_on_straight_path_is_constant():
    path = ReferencePath.from_points([[-100.0, 0.0], [500.0, 0.0]], SegmentKind.MAIN_CARRIAGEWAY)
    pr = cv_frenet_prior(path, np.array([0.0, 10.0]), np.array([1.0, -0.5]),
                         np.array([20.0, 25.0]), np.array([0.5, 0.0]))
    assert np.allclose(pr[0], [4.0, 0.1]) and np.allclose(pr[1], [5.0, 0.0])


def test_cv_prior_reconstructs_cartesian_cv_on_a_curve():
    th = np.linspace(0, np.pi / 2, 2001)
    path = ReferencePath.from_points(np.stack([200 * np.sin(th), 200 * (1 - np.cos(th))], 1),
                                     SegmentKind.SLIP_ROAD)
    s0, d0, vl, vt = 30.0, 0.8, 15.0, -0.3
    pr = cv_frenet_prior(path, [s0], [d0], [vl], [vt])[0]
    s = s0 + np.cumsum(pr[:, 0])
    d = d0 + np.cumsum(pr[:, 1])
    p0 = path.evaluate(s0, d0)
    t = path.tangent(s0)
    v = vl * t + vt * np.array([-t[1], t[0]])
    cv = p0 + np.arange(1, 26)[:, None] * 0.2 * v
    assert np.allclose(path.evaluate(s, d), cv, atol=1e-6)


def test_reconstruct_extrapolation_needs_clamp(scene):
    s, table = scene
    vid = s.ego_id
    tr = s.tracks[vid]
    frame = int(tr.frames[20])
    w = build_window(table, vid, frame, 5)
    g = GaussianTrajectory(np.tile([500.0, 0.0], (25, 1)), np.ones((25, 2)), np.zeros(25))
    path = s.map.paths[w.origin.associated_path]
    with pytest.raises(ExtrapolationError):
        reconstruct(g, w, path)
    p = reconstruct(g, w, path, clamp=True)
    assert np.all(np.isfinite(p.positions))


def test_three_predictors_share_a_shape(scene):
    s, table = scene
    model = POVLModel(SMALL)
    shapes = set()
    for vid in sorted(s.tracks)[:4]:
        tr = s.tracks[vid]
        if len(tr) < 40:
            continue
        frame = int(tr.frames[10])
        w = build_window(table, vid, frame, 2)  # the shortest admissible observation
        pv = predict_povl(w, model, s.map.paths[w.origin.associated_path], clamp=True)
        for p in (predict_cv(tr, frame), predict_gt(tr, frame), pv):
            shapes.add((p.positions.shape, p.covariance.shape))
    assert shapes == {((25, 2), (25, 2, 2))}


def test_batch_matches_single(scene):
    s, table = scene
    model = POVLModel(SMALL)
    vids = [v for v in sorted(s.tracks) if len(s.tracks[v]) > 30][:3]
    ws = [build_window(table, v, int(s.tracks[v].frames[15]), 15 if k else 3) for k, v in enumerate(vids)]
    batch = predict_povl_batch(ws, model, s.map, clamp=True)
    for w, b in zip(ws, batch):
        single = predict_povl(w, model, s.map.paths[w.origin.associated_path], clamp=True)
        assert np.allclose(single.positions, b.positions, atol=1e-9)
        assert np.all(np.linalg.eigvalsh(b.covariance) > 0)


def test_untrained_model_predicts_cv(scene):
    s, table = scene
    model = POVLModel(SMALL)
    model.params["head.w"].data[...] = 0.0
    model.params["head.b"].data[...] = 0.0
    vid = next(v for v in sorted(s.tracks) if len(s.tracks[v]) > 30)
    tr = s.tracks[vid]
    frame = int(tr.frames[12])
    w = build_window(table, vid, frame, 10)
    p = predict_povl(w, model, s.map.paths[w.origin.associated_path])
    assert np.allclose(p.positions, predict_cv(tr, frame).positions, atol=1e-6)
