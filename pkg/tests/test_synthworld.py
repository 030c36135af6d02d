import numpy as np
import pytest

from landmark_srt.camera_geometry import project, triangulate_dlt
from landmark_srt.rng import stream
from landmark_srt.synthworld import (
    AugmentDraw,
    ConfigInfeasibleError,
    EltConfig,
    SceneConfig,
    affine_apply,
    affine_invert,
    apply_homography,
    augment,
    bbox_scale,
    elt_theta,
    elt_transform_pair,
    generate_image_set,
    generate_scene,
    perturb_annotations,
    read_image_set,
    read_scene,
    write_image_set,
    write_scene,
)
from landmark_srt.tensor_core import sample

SMALL = dict(M=3, T=6, seed=3)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneConfig(**SMALL))


def test_static_scene_has_zero_flow():
    s = generate_scene(SceneConfig(M=2, T=1))
    assert not s.flow.any()
    s = generate_scene(SceneConfig(M=2, T=3, rot_amp_deg=(0, 0, 0), trans_amp=(0, 0, 0)))
    np.testing.assert_allclose(s.flow, 0.0, atol=1e-9)
    np.testing.assert_array_equal(s.images[:, 0], s.images[:, 2])


def test_single_view_scene():
    s = generate_scene(SceneConfig(M=1, T=4))
    assert s.images.shape == (1, 4, 64, 64)
    assert s.landmarks2d.shape == (1, 4, 5, 2)


def test_gt2d_is_projection_of_gt3d(scene):
    M, T = scene.shape
    for m in range(M):
        for t in range(T):
            for k in range(scene.config.K):
                d = scene.landmarks2d[m, t, k] - project(scene.cameras[m], scene.landmarks3d[t, k])
                assert np.abs(d).max() < 1e-10


def test_triangulating_gt2d_recovers_gt3d(scene):
    M, T = scene.shape
    for t in range(T):
        for k in range(scene.config.K):
            X = triangulate_dlt(scene.cameras, scene.landmarks2d[:, t, k])
            np.testing.assert_allclose(X, scene.landmarks3d[t, k], atol=1e-6)


def test_flow_moves_landmark_texture(scene):
    M, T = scene.shape
    for m in range(M):
        for t in range(1, T):
            prev, cur = scene.landmarks2d[m, t - 1], scene.landmarks2d[m, t]
            # the homography part of the flow carries landmarks exactly
            Hrel = scene.homographies[m, t] @ np.linalg.inv(scene.homographies[m, t - 1])
            x, y = apply_homography(Hrel, prev[:, 0], prev[:, 1])
            np.testing.assert_allclose(np.stack([x, y], 1), cur, atol=1e-9)
            # and the texture seen there is the same
            np.testing.assert_allclose(scene.render_points(m, t, cur),
                                       scene.render_points(m, t - 1, prev), atol=1e-3)
            # the rasterised flow interpolates to the same displacement
            u = sample(scene.flow[m, t, 0], prev[:, 0], prev[:, 1])
            v = sample(scene.flow[m, t, 1], prev[:, 0], prev[:, 1])
            np.testing.assert_allclose(prev + np.stack([u, v], 1), cur, atol=0.05)


def test_backward_flow_inverts_forward(scene):
    ys, xs = np.mgrid[10:50, 10:50].astype(float)
    bu, bv = scene.bflow[0, 2]
    src_x, src_y = xs - bu[10:50, 10:50], ys - bv[10:50, 10:50]
    fu = sample(scene.flow[0, 2, 0], src_x, src_y, padding="border")
    fv = sample(scene.flow[0, 2, 1], src_x, src_y, padding="border")
    np.testing.assert_allclose(src_x + fu, xs, atol=0.05)
    np.testing.assert_allclose(src_y + fv, ys, atol=0.05)


def test_raster_matches_continuous_render(scene):
    ys, xs = np.mgrid[0:64, 0:64].astype(float)
    ref = scene.render_points(1, 3, np.stack([xs, ys], -1))
    np.testing.assert_allclose(scene.images[1, 3], ref, atol=1e-12)


def test_deterministic():
    a = generate_scene(SceneConfig(**SMALL))
    b = generate_scene(SceneConfig(**SMALL))
    assert np.array_equal(a.images, b.images) and np.array_equal(a.flow, b.flow)
    c = generate_scene(SceneConfig(**{**SMALL, "seed": 4}))
    assert not np.array_equal(a.images, c.images)


def test_infeasible_motion():
    with pytest.raises(ConfigInfeasibleError):
        generate_scene(SceneConfig(M=2, T=20, trans_amp=(3.0, 3.0, 0.0)))


def test_bbox_is_expanded_tight_box(scene):
    L = scene.landmarks2d[0, 2]
    b = scene.bboxes[0, 2]
    lo, hi = L.min(0), L.max(0)
    np.testing.assert_allclose(b[2:] - b[:2], (hi - lo) * 1.25)
    np.testing.assert_allclose((b[2:] + b[:2]) / 2, (hi + lo) / 2)


def test_corruptions_recorded():
    cfg = SceneConfig(M=2, T=4, corruption_frac=1.0)
    s = generate_scene(cfg)
    clean = generate_scene(SceneConfig(M=2, T=4))
    assert len(s.corruptions) == 2 * 3
    for m, t, k in s.corruptions:
        x, y = np.round(s.landmarks2d[m, t, k]).astype(int)
        assert not np.allclose(s.images[m, t, y - 2:y + 3, x - 2:x + 3], clean.images[m, t, y - 2:y + 3, x - 2:x + 3])
    np.testing.assert_array_equal(s.images[:, 0], clean.images[:, 0])


def test_image_set_in_frame_and_distinct():
    cfg = SceneConfig()
    iset = generate_image_set(cfg, 12)
    assert iset.images.shape == (12, 64, 64)
    assert iset.landmarks.min() >= cfg.margin and iset.landmarks.max() <= 63 - cfg.margin
    test = generate_image_set(cfg, 12, name="test")
    assert not np.array_equal(iset.images, test.images)


def test_scene_directory_round_trip(tmp_path):
    s = generate_scene(SceneConfig(M=2, T=3, corruption_frac=0.5, seed=8))
    write_scene(s, tmp_path / "s")
    r = read_scene(tmp_path / "s")
    assert r.config == s.config
    for name in ("cameras", "images", "landmarks2d", "landmarks3d", "flow", "bflow", "bboxes", "homographies"):
        assert np.array_equal(getattr(r, name), getattr(s, name)), name
    assert r.corruptions == s.corruptions
    assert (tmp_path / "s" / "view1" / "frame2.pf2").exists()
    assert (tmp_path / "s" / "view1" / "flow2.flow").exists()


def test_image_set_round_trip(tmp_path):
    iset = generate_image_set(SceneConfig(), 3)
    write_image_set(iset, tmp_path / "i")
    r = read_image_set(tmp_path / "i")
    for name in ("images", "landmarks", "bboxes"):
        assert np.array_equal(getattr(r, name), getattr(iset, name))


# --- label noise -----------------------------------------------------------

def test_perturb_annotations():
    L = np.random.default_rng(0).uniform(0, 64, (100, 5, 2))
    assert np.array_equal(perturb_annotations(L, 0.0, 1), L)
    a = perturb_annotations(L, 5.0, 1)
    assert np.array_equal(a, perturb_annotations(L, 5.0, 1))
    big = np.zeros((5000, 2))
    assert abs(perturb_annotations(big, 5.0, 2).std() - 5.0) < 0.15
    with pytest.raises(ValueError):
        perturb_annotations(L, -1.0, 1)


# --- augmentation ----------------------------------------------------------

def test_augment_identity_draw_is_plain_crop():
    img = np.random.default_rng(1).random((64, 64))
    # expanded box: side 32, top-left pixel (10, 14)
    side = 32 / 1.2
    c = np.array([10 + 15.5, 14 + 15.5])
    bbox = np.concatenate([c - side / 2, c + side / 2])
    labels = np.array([[20.3, 30.1], [33.0, 17.5]])
    out = augment(img, bbox, labels, draw=AugmentDraw())
    np.testing.assert_allclose(out.image, img[14:46, 10:42], atol=1e-12)
    np.testing.assert_allclose(out.labels, labels - [10, 14], atol=1e-12)


def test_augment_rotation_about_crop_center():
    img = np.random.default_rng(2).random((64, 64))
    bbox = np.array([20.0, 18.0, 44.0, 42.0])
    labels = np.array([[25.0, 22.0], [40.0, 37.0], [32.0, 30.0]])
    out = augment(img, bbox, labels, draw=AugmentDraw(angle_deg=40.0))
    c = np.array([32.0, 30.0])
    s = 32 / (24 * 1.2)
    a = np.deg2rad(40.0)
    R = np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
    expected = 15.5 + s * (labels - c) @ R.T
    np.testing.assert_allclose(out.labels, expected, atol=1e-12)
    # the box centre stays at the crop centre
    np.testing.assert_allclose(out.labels[2], [15.5, 15.5], atol=1e-12)


def test_augment_intensity_scaling():
    img = np.random.default_rng(3).random((64, 64))
    bbox = np.array([20.0, 18.0, 44.0, 42.0])
    a = augment(img, bbox, None, draw=AugmentDraw(angle_deg=10.0))
    b = augment(img, bbox, None, draw=AugmentDraw(angle_deg=10.0, intensity=0.6))
    np.testing.assert_array_equal(b.image, a.image * 0.6)


def test_augment_marker_survives():
    rng = np.random.default_rng(4)
    ys, xs = np.mgrid[0:64, 0:64].astype(float)
    for _ in range(30):
        p = rng.uniform(26, 38, 2)
        img = np.exp(-((xs - p[0]) ** 2 + (ys - p[1]) ** 2) / (2 * 2.0 ** 2))
        out = augment(img, [20.0, 20.0, 44.0, 44.0], p[None], rng)
        w = out.image
        cy, cx = np.mgrid[0:32, 0:32]
        centroid = np.array([(w * cx).sum(), (w * cy).sum()]) / w.sum()
        assert np.linalg.norm(centroid - out.labels[0]) < 0.2


def test_augment_rejects_bad_boxes():
    img = np.zeros((64, 64))
    with pytest.raises(ValueError):
        augment(img, [10, 10, 10, 20], None, np.random.default_rng(0))
    with pytest.raises(ValueError):
        augment(img, [-5, 10, 30, 20], None, np.random.default_rng(0))


def test_augment_draw_ranges():
    from landmark_srt.synthworld import draw_augment

    rng = stream(0, "t")
    draws = [draw_augment(rng) for _ in range(2000)]
    s = np.array([d.scale for d in draws])
    assert s.min() >= 0.9 and s.max() <= 1.1
    assert 0.45 < np.mean(s == 1.0) < 0.55
    assert max(abs(d.angle_deg) for d in draws) <= 40
    assert max(np.abs(d.shift).max() for d in draws) <= 0.1
    i = np.array([d.intensity for d in draws])
    assert i.min() >= 0.6 and i.max() <= 1.4


# --- ELT pairs -------------------------------------------------------------

def test_affine_inverse_round_trip():
    rng = np.random.default_rng(5)
    for _ in range(100):
        th = elt_theta([20, 20, 44, 44], rng)
        x = rng.uniform(0, 64, (10, 2))
        np.testing.assert_allclose(affine_apply(affine_invert(th), affine_apply(th, x)), x, atol=1e-10)


def test_elt_scale_bounds():
    rng = stream(1, "elt")
    bbox = np.array([20.0, 20.0, 44.0, 44.0])
    base = 24 * 1.2
    for _ in range(10000):
        th = elt_theta(bbox, rng)
        side = 32 / np.sqrt(abs(np.linalg.det(th[:, :2])))
        u = side / base
        assert 0.8 - 1e-9 <= u <= 1.2 + 1e-9


def test_elt_pair_consistent_with_thetas():
    rng = np.random.default_rng(6)
    img = rng.random((64, 64))
    a, ta, b, tb = elt_transform_pair(img, [20, 20, 44, 44], rng, EltConfig())
    assert a.shape == b.shape == (32, 32)
    p = affine_apply(affine_invert(ta), [[15.0, 15.0]])[0]
    assert a[15, 15] == pytest.approx(sample(img, p[0], p[1]), abs=1e-12)


def test_bbox_scale():
    assert bbox_scale([0, 0, 4, 9]) == 6.0
