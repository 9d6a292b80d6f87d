import numpy as np
import pytest

from _support import fd_check_2d, fd_check_3d, random_2d, random_cloud, small_camera
from augsplat.camera import Camera
from augsplat.primitives import SH_C0, Gaussian2DSet, GaussianCloud, logit
from augsplat.render import backward_2d, backward_3d, render_2d, render_3d


def one_gaussian(pos, scale=0.3, opacity=0.99, color=(0.2, 0.6, 0.9)):
    sh = ((np.array(color) - 0.5) / SH_C0).reshape(1, 1, 3)
    return GaussianCloud(np.array([pos], float), np.array([[1.0, 0, 0, 0]]), np.log(np.full((1, 3), scale)),
                         np.array([logit(opacity)]), sh)


def test_empty_scene_is_background():
    cam = small_camera(6)
    out = render_3d(GaussianCloud.empty(), cam, (0.1, 0.2, 0.3))
    assert np.array_equal(out.rgb, np.broadcast_to([0.1, 0.2, 0.3], (6, 6, 3)))
    assert np.all(out.final_transmittance == 1.0) and np.all(out.median_depth == 0.0)


def test_single_opaque_gaussian_center_pixel():
    cam = Camera(9, 9, 20.0, 20.0, 4.0, 4.0)
    out = render_3d(one_gaussian([0, 0, 3.0], scale=0.5), cam)
    assert np.allclose(out.rgb[4, 4], 0.99 * np.array([0.2, 0.6, 0.9]), atol=1e-9)
    assert out.median_depth[4, 4] == pytest.approx(3.0)


def test_lobe_facing_away_renders_background_exactly():
    cam = Camera(9, 9, 20.0, 20.0, 4.0, 4.0)
    g = one_gaussian([0, 0, 3.0])
    g.has_lobe[:] = True
    g.lobe_dirs[:] = [0.0, 0.0, 1.0]   # points away from the camera at the origin
    g.lobe_T[:] = 0.3
    out = render_3d(g, cam, (0.4, 0.4, 0.4))
    assert np.array_equal(out.rgb, np.full((9, 9, 3), 0.4))
    grads = backward_3d(g, cam, (0.4, 0.4, 0.4), np.ones((9, 9, 3)), out=out)
    for f in ("sh", "lobe_dirs", "lobe_T", "lobe_beta", "opacity_logits"):
        assert np.all(getattr(grads, f) == 0.0)


def test_compositing_conservation():
    rng = np.random.default_rng(0)
    cam = small_camera(12)
    cloud = random_cloud(rng, 8, order=0, camera=cam)
    white = cloud.copy()
    white.sh[:] = (1.0 - 0.5) / SH_C0
    black = cloud.copy()
    black.sh[:] = (0.0 - 0.5) / SH_C0
    weights = render_3d(white, cam, (0, 0, 0)).rgb[..., 0]
    out = render_3d(black, cam, (1, 1, 1))
    assert np.allclose(out.rgb[..., 0], out.final_transmittance, atol=1e-12)
    assert np.allclose(weights + out.final_transmittance, 1.0, atol=1e-6)


def test_peak_lobe_equals_plain_opacity():
    rng = np.random.default_rng(1)
    cam = small_camera(10)
    cloud = random_cloud(rng, 6, order=1, lobed_fraction=0.0)
    lobed = cloud.copy()
    lobed.has_lobe[:] = True
    lobed.lobe_T[:] = 1.0
    lobed.lobe_beta[:] = 0.0
    lobed.lobe_dirs = cam.center - cloud.positions
    assert np.allclose(render_3d(cloud, cam).rgb, render_3d(lobed, cam).rgb, atol=1e-12)


def test_render_2d_basics():
    bg = np.full((8, 8, 3), 0.25)
    assert np.array_equal(render_2d(Gaussian2DSet.empty(), bg), bg)
    one = Gaussian2DSet([[3.0, 4.0]], np.log([[2.0, 2.0]]), [0.0], [logit(0.99)], [[0.9, 0.1, 0.3]], [1.0])
    assert np.allclose(render_2d(one, bg)[4, 3], 0.99 * np.array([0.9, 0.1, 0.3]) + 0.01 * 0.25)


def test_render_2d_depth_order_swaps_result():
    bg = np.zeros((5, 5, 3))
    a1, a2 = 0.6, 0.5
    c1, c2 = np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0])
    g = Gaussian2DSet([[2, 2], [2, 2]], np.log([[1.5, 1.5], [1.5, 1.5]]), [0, 0], logit(np.array([a1, a2])),
                      [c1, c2], [1.0, 2.0])
    near_first = render_2d(g, bg)[2, 2]
    assert np.allclose(near_first, a1 * c1 + (1 - a1) * a2 * c2)
    g.depths = np.array([2.0, 1.0])
    assert np.allclose(render_2d(g, bg)[2, 2], a2 * c2 + (1 - a2) * a1 * c1)


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(2)
    cam = small_camera(8)
    cloud = random_cloud(rng, 5, order=2, camera=cam)
    g = backward_3d(cloud, cam, (0.1, 0.1, 0.1), np.zeros((8, 8, 3)))
    assert all(np.all(v == 0) for v in g.as_dict().values())
    g2 = random_2d(rng, 5)
    bg = rng.random((8, 8, 3))
    assert all(np.all(v == 0) for v in backward_2d(g2, bg, np.zeros((8, 8, 3))).values())


def test_offscreen_2d_primitive_has_zero_gradient():
    rng = np.random.default_rng(3)
    g2 = random_2d(rng, 3)
    g2.centers[1] = [500.0, 500.0]
    bg = rng.random((8, 8, 3))
    grads = backward_2d(g2, bg, rng.normal(size=(8, 8, 3)))
    assert all(np.all(v[1] == 0) for v in grads.values())


@pytest.mark.parametrize("seed", range(3))
def test_backward_3d_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    cam = small_camera(8)
    checked, skipped, failures = fd_check_3d(random_cloud(rng, 3, order=seed, camera=cam), cam, rng.random(3))
    assert not failures, failures[:5]
    assert checked > 5 * skipped


@pytest.mark.parametrize("seed", range(3))
def test_backward_2d_finite_differences(seed):
    rng = np.random.default_rng(200 + seed)
    checked, skipped, failures = fd_check_2d(random_2d(rng, 5), rng.random((8, 8, 3)))
    assert not failures, failures[:5]
    assert checked > 5 * skipped
