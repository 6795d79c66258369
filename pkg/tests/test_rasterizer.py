"""Splatting rasterizer: projection, compositing oracle agreement, backward."""
import numpy as np
import pytest

from audiosplat import scene as sc
from audiosplat import rasterizer as ra
from audiosplat.autodiff import numeric_gradient


def identity_camera(fx=48.0, w=32, h=32):
    return sc.Camera(extrinsic=np.eye(4), fx=fx, fy=fx, cx=w / 2, cy=h / 2,
                     width=w, height=h)


def random_set(n, rng, spread=0.2, logit_mean=0.0, degree=1):
    return sc.GaussianSet(
        positions=rng.normal(0, spread, (n, 3)),
        rotations=rng.normal(0, 1, (n, 4)),
        log_scales=rng.uniform(np.log(0.03), np.log(0.15), (n, 3)),
        sh_coeffs=rng.normal(0, 0.3, (n, 3 * sc.sh_coeff_count(degree))),
        opacity_logits=rng.normal(logit_mean, 1.0, (n, 1)),
        sh_degree=degree,
    )


def orbit_camera(rng, w=64, h=64, dist=1.5):
    ang = rng.uniform(0, 2 * np.pi)
    eye = [dist * np.sin(ang), rng.uniform(-0.4, 0.4), -dist * np.cos(ang)]
    return sc.Camera(extrinsic=sc.look_at_extrinsic(eye, [0, 0, 0]),
                     fx=rng.uniform(40, 90), fy=rng.uniform(40, 90),
                     cx=w / 2, cy=h / 2, width=w, height=h)


# ---------------------------------------------------------------- projection

def test_project_on_axis_isotropic_closed_form():
    # frozen from tests/oracles/projection_oracle.py: (fx*sigma/d)^2 = 14.7456
    sigma, d = 0.2, 2.5
    gset = sc.GaussianSet(
        positions=np.array([[0.0, 0.0, d]]),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.full((1, 3), np.log(sigma)),
        sh_coeffs=np.zeros((1, 3)),
        opacity_logits=np.zeros((1, 1)),
        sh_degree=0,
    )
    proj = ra.project(gset, identity_camera(), lowpass=0.0)
    assert np.allclose(proj.cov2d[0], [14.7456, 0.0, 14.7456], atol=1e-9)
    assert np.allclose(proj.screen_xy[0], [16.0, 16.0])
    assert np.allclose(proj.depth[0], d)


def test_project_off_axis_matches_numeric_jacobian():
    # frozen from tests/oracles/projection_oracle.py (off-axis block)
    gset = sc.GaussianSet(
        positions=np.array([[0.3, -0.2, 1.7]]),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=0.5 * np.log(np.array([[0.05, 0.02, 0.09]])),
        sh_coeffs=np.zeros((1, 3)),
        opacity_logits=np.zeros((1, 1)),
        sh_degree=0,
    )
    proj = ra.project(gset, identity_camera(), lowpass=0.0)
    assert np.allclose(proj.cov2d[0], [42.09604771, -1.48963734, 16.93772824],
                       atol=1e-6)


def test_project_culls_behind_camera():
    rng = np.random.default_rng(0)
    gset = random_set(5, rng)
    gset.positions[:, 2] = [1.0, -1.0, 2.0, 0.005, 1.5]  # id 1 behind, id 3 near-plane
    proj = ra.project(gset, identity_camera())
    assert proj.n_culled == 2
    assert set(proj.ids) == {0, 2, 4}


def test_project_world_translation_invariance():
    rng = np.random.default_rng(1)
    gset = random_set(8, rng)
    gset.positions[:, 2] += 2.0
    cam = identity_camera()
    proj_a = ra.project(gset, cam)

    shift = np.array([0.7, -1.3, 0.4])
    moved = gset.copy()
    moved.positions += shift
    ext = np.eye(4)
    ext[:3, 3] = -shift  # camera translated by the same world vector
    cam_b = sc.Camera(extrinsic=ext, fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                      width=cam.width, height=cam.height)
    proj_b = ra.project(moved, cam_b)
    assert np.allclose(proj_a.screen_xy, proj_b.screen_xy, atol=1e-9)
    assert np.allclose(proj_a.cov2d, proj_b.cov2d, atol=1e-9)
    assert np.allclose(proj_a.rgb, proj_b.rgb, atol=1e-9)


def test_projected_covariance_eigenvalues_at_least_floor():
    rng = np.random.default_rng(2)
    proj = ra.project(random_set(50, rng), identity_camera())
    a, b, c = proj.cov2d[:, 0], proj.cov2d[:, 1], proj.cov2d[:, 2]
    lam_min = (a + c) / 2 - np.sqrt(((a - c) / 2) ** 2 + b ** 2)
    assert np.all(lam_min >= ra.LOWPASS_FLOOR - 1e-9)


# --------------------------------------------------------------- compositing

def test_reference_no_gaussians_is_background():
    gset = random_set(3, np.random.default_rng(3))
    gset.positions[:, 2] = -5.0  # all culled
    bg = np.random.default_rng(4).uniform(0, 1, (32, 32, 3))
    frame = ra.composite_reference(ra.project(gset, identity_camera()), bg)
    assert np.array_equal(frame.image, bg)


def test_reference_single_opaque_gaussian_saturates():
    gset = sc.GaussianSet(
        positions=np.array([[0.0, 0.0, 1.0]]),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.full((1, 3), np.log(5.0)),   # huge support
        sh_coeffs=np.zeros((1, 3)),
        opacity_logits=np.full((1, 1), 40.0),      # alpha ~ 1
        sh_degree=0,
    )
    bg = np.zeros((32, 32, 3))
    frame = ra.composite_reference(ra.project(gset, identity_camera()), bg)
    assert np.allclose(frame.image[16, 16], 0.5, atol=1e-6)  # dc=0 shades 0.5


def test_reference_two_coincident_half_alpha():
    # frozen from tests/oracles/compositing_oracle.py: (0.5, 0.25, 0)
    logit = 0.0  # sigmoid(0) = 0.5
    gset = sc.GaussianSet(
        positions=np.zeros((2, 3)) + [0, 0, 1.0],
        rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
        log_scales=np.full((2, 3), np.log(5.0)),
        sh_coeffs=np.zeros((2, 3)),
        opacity_logits=np.full((2, 1), logit),
        sh_degree=0,
    )
    colors = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    proj = ra.project(gset, identity_camera(), colors=colors)
    frame = ra.composite_reference(proj, np.zeros((32, 32, 3)))
    assert np.allclose(frame.image[16, 16], [0.5, 0.25, 0.0], atol=1e-9)


def test_reference_three_layer_blend_with_background():
    # frozen from tests/oracles/compositing_oracle.py: (0.385, 0.57, 0.345)
    def logit(a):
        return np.log(a / (1 - a))
    gset = sc.GaussianSet(
        positions=np.array([[0, 0, 1.0], [0, 0, 2.0], [0, 0, 3.0]]),
        rotations=np.tile([1.0, 0, 0, 0], (3, 1)),
        log_scales=np.full((3, 3), np.log(50.0)),
        sh_coeffs=np.zeros((3, 3)),
        opacity_logits=np.array([[logit(0.25)], [logit(0.5)], [logit(0.8)]]),
        sh_degree=0,
    )
    colors = np.array([[1.0, 0, 0], [0, 1.0, 0], [0.2, 0.4, 0.9]])
    proj = ra.project(gset, identity_camera(), colors=colors)
    frame = ra.composite_reference(proj, np.ones((32, 32, 3)))
    assert np.allclose(frame.image[16, 16], [0.385, 0.57, 0.345], atol=1e-6)


def test_depth_ties_broken_by_id():
    gset = sc.GaussianSet(
        positions=np.zeros((2, 3)) + [0, 0, 1.0],
        rotations=np.tile([1.0, 0, 0, 0], (2, 1)),
        log_scales=np.full((2, 3), np.log(5.0)),
        sh_coeffs=np.zeros((2, 3)),
        opacity_logits=np.full((2, 1), 40.0),  # both opaque: front one wins
        sh_degree=0,
    )
    colors = np.array([[1.0, 0, 0], [0, 1.0, 0]])
    proj = ra.project(gset, identity_camera(), colors=colors)
    frame = ra.composite_reference(proj, np.zeros((32, 32, 3)))
    assert frame.image[16, 16, 0] > 0.99  # id 0 blended first


# ------------------------------------------------------------ tiled renderer

def test_tiled_matches_reference_on_random_scenes():
    rng = np.random.default_rng(10)
    for trial in range(50):
        n = int(rng.integers(1, 201))
        gset = random_set(n, rng, spread=0.3, logit_mean=float(rng.normal(0, 1)))
        cam = orbit_camera(rng)
        bg = rng.uniform(0, 1, (64, 64, 3))
        proj = ra.project(gset, cam)
        tiled = ra.render_tiled(proj, bg)
        ref = ra.composite_reference(proj, bg)
        diff = np.abs(tiled.image - ref.image).max()
        assert diff <= 1e-5, f"trial {trial}: {diff}"


def test_tiled_empty_tile_is_background_passthrough():
    gset = random_set(1, np.random.default_rng(11), spread=0.01)
    gset.positions[0] = [0, 0, 1.0]
    gset.log_scales[:] = np.log(0.005)  # tiny: covers only central tiles
    bg = np.random.default_rng(12).uniform(0, 1, (64, 64, 3))
    frame = ra.render_tiled(ra.project(gset, identity_camera(fx=60, w=64, h=64)), bg)
    assert np.array_equal(frame.image[:16, :16], bg[:16, :16])


def test_tiled_gaussian_spanning_four_tiles():
    gset = sc.GaussianSet(
        positions=np.array([[0.0, 0.0, 1.0]]),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.full((1, 3), np.log(0.3)),
        sh_coeffs=np.random.default_rng(13).normal(0, 0.4, (1, 12)),
        opacity_logits=np.array([[1.0]]),
        sh_degree=1,
    )
    cam = identity_camera(fx=60, w=64, h=64)  # center (32,32) = 4-tile corner
    bg = np.random.default_rng(14).uniform(0, 1, (64, 64, 3))
    proj = ra.project(gset, cam)
    tiled = ra.render_tiled(proj, bg)
    ref = ra.composite_reference(proj, bg)
    assert np.abs(tiled.image - ref.image).max() <= 1e-5


def test_tiled_output_in_unit_range_and_transmittance_nonnegative():
    rng = np.random.default_rng(15)
    gset = random_set(80, rng, logit_mean=2.0)
    frame = ra.render_tiled(ra.project(gset, orbit_camera(rng)),
                            rng.uniform(0, 1, (64, 64, 3)))
    assert frame.image.min() >= 0.0 and frame.image.max() <= 1.0
    assert frame.transmittance.min() >= 0.0


def test_tiled_deterministic():
    rng = np.random.default_rng(16)
    gset = random_set(60, rng)
    cam = orbit_camera(rng)
    bg = rng.uniform(0, 1, (64, 64, 3))
    a = ra.render_tiled(ra.project(gset, cam), bg).image
    b = ra.render_tiled(ra.project(gset, cam), bg).image
    assert np.array_equal(a, b)


def test_blend_records_transmittance_strictly_decreasing():
    rng = np.random.default_rng(17)
    gset = random_set(40, rng, logit_mean=1.0)
    cam = orbit_camera(rng)
    bg = np.zeros((64, 64, 3))
    frame = ra.render_tiled(ra.project(gset, cam), bg, retain_records=True)
    checked = 0
    for y in range(0, 64, 7):
        for x in range(0, 64, 7):
            recs = frame.blend_records_for_pixel(x, y)
            ts = [t for (_, _, t) in recs]
            assert all(t1 > t2 for t1, t2 in zip(ts, ts[1:]))
            checked += len(recs)
    assert checked > 0


# ------------------------------------------------------------------ backward

def test_backward_zero_grad_image_gives_zero_grads():
    rng = np.random.default_rng(20)
    gset = random_set(10, rng)
    cam = orbit_camera(rng, w=32, h=32)
    proj = ra.project(gset, cam)
    frame = ra.render_tiled(proj, np.zeros((32, 32, 3)), retain_records=True)
    grads = ra.render_backward(frame, np.zeros((32, 32, 3)), proj, gset, cam)
    for field in ("positions", "rotations", "log_scales", "sh_coeffs", "opacity_logits"):
        assert np.all(getattr(grads, field) == 0.0), field


def test_backward_requires_records():
    rng = np.random.default_rng(21)
    gset = random_set(4, rng)
    cam = orbit_camera(rng, w=32, h=32)
    proj = ra.project(gset, cam)
    frame = ra.render_tiled(proj, np.zeros((32, 32, 3)))
    with pytest.raises(ValueError):
        ra.render_backward(frame, np.zeros((32, 32, 3)), proj, gset, cam)


def test_backward_single_gaussian_opacity_logit_fd():
    rng = np.random.default_rng(22)
    gset = random_set(1, rng, spread=0.05)
    gset.positions[0] = [0.02, -0.03, 1.2]
    cam = identity_camera()
    bg = rng.uniform(0, 1, (32, 32, 3))
    wmat = rng.normal(0, 1, (32, 32, 3))
    proj = ra.project(gset, cam)
    frame = ra.render_tiled(proj, bg, retain_records=True)
    grads = ra.render_backward(frame, wmat, proj, gset, cam)

    def loss():
        ref = ra.composite_reference(ra.project(gset, cam), bg)
        return float(np.sum(ref.image * wmat))

    idx, num = numeric_gradient(loss, gset.opacity_logits, eps=1e-6)
    rel = np.abs(grads.opacity_logits.reshape(-1)[idx] - num) / np.maximum(1, np.abs(num))
    assert rel.max() <= 1e-4


def test_backward_positions_fd_five_gaussian_scene():
    rng = np.random.default_rng(23)
    gset = random_set(5, rng)
    cam = orbit_camera(rng, w=32, h=32)
    bg = rng.uniform(0, 1, (32, 32, 3))
    wmat = rng.normal(0, 1, (32, 32, 3))
    proj = ra.project(gset, cam)
    frame = ra.render_tiled(proj, bg, retain_records=True)
    grads = ra.render_backward(frame, wmat, proj, gset, cam)

    def loss():
        ref = ra.composite_reference(ra.project(gset, cam), bg)
        return float(np.sum(ref.image * wmat))

    idx, num = numeric_gradient(loss, gset.positions, eps=1e-6)
    rel = np.abs(grads.positions.reshape(-1)[idx] - num) / np.maximum(1, np.abs(num))
    assert rel.max() <= 1e-3


def test_backward_all_attribute_groups_fd():
    rng = np.random.default_rng(24)
    gset = random_set(6, rng)
    cam = orbit_camera(rng, w=32, h=32)
    bg = rng.uniform(0, 1, (32, 32, 3))
    wmat = rng.normal(0, 1, (32, 32, 3))
    proj = ra.project(gset, cam)
    frame = ra.render_tiled(proj, bg, retain_records=True)
    grads = ra.render_backward(frame, wmat, proj, gset, cam)

    def loss():
        return float(np.sum(ra.render_tiled(ra.project(gset, cam), bg).image * wmat))

    for field in ("positions", "rotations", "log_scales", "sh_coeffs", "opacity_logits"):
        idx, num = numeric_gradient(loss, getattr(gset, field), eps=1e-6,
                                    coords=12, seed=field.__hash__() % 1000)
        ana = getattr(grads, field).reshape(-1)[idx]
        rel = np.abs(ana - num) / np.maximum(1, np.abs(num))
        assert rel.max() <= 1e-3, field


def test_backward_nonblended_gaussians_get_zero_rows():
    rng = np.random.default_rng(25)
    gset = random_set(6, rng)
    gset.positions[2] = [0, 0, -3.0]    # culled
    gset.opacity_logits[4] = -30.0      # alpha below contribution cutoff
    cam = identity_camera()
    proj = ra.project(gset, cam)
    frame = ra.render_tiled(proj, np.zeros((32, 32, 3)), retain_records=True)
    grads = ra.render_backward(frame, np.ones((32, 32, 3)), proj, gset, cam)
    for row in (2, 4):
        for field in ("positions", "rotations", "log_scales", "sh_coeffs",
                      "opacity_logits"):
            assert np.all(getattr(grads, field)[row] == 0.0), (row, field)


# ------------------------------------------------------------- colored path

def test_render_colored_uniform_color_saturates_pixel():
    gset = sc.GaussianSet(
        positions=np.array([[0.0, 0.0, 1.0]]),
        rotations=np.array([[1.0, 0, 0, 0]]),
        log_scales=np.full((1, 3), np.log(5.0)),
        sh_coeffs=np.zeros((1, 3)),
        opacity_logits=np.full((1, 1), 40.0),
        sh_degree=0,
    )
    c = np.array([[0.3, 0.7, 0.2]])
    img = ra.render_colored(gset, c, identity_camera(), np.zeros((32, 32, 3)))
    assert np.allclose(img[16, 16], c[0], atol=1e-6)


def test_render_colored_with_sh_colors_matches_render_tiled():
    rng = np.random.default_rng(26)
    gset = random_set(20, rng)
    cam = orbit_camera(rng, w=32, h=32)
    bg = rng.uniform(0, 1, (32, 32, 3))
    base = ra.render_tiled(ra.project(gset, cam), bg).image
    shaded = ra.project(gset, cam)
    # feed the SH-shaded colors back through the colored path
    colors = np.zeros((len(gset), 3))
    colors[shaded.ids] = shaded.rgb
    img = ra.render_colored(gset, colors, cam, bg)
    assert np.array_equal(img, base)


def test_render_colored_length_mismatch_errors():
    rng = np.random.default_rng(27)
    gset = random_set(4, rng)
    with pytest.raises(ValueError):
        ra.render_colored(gset, np.zeros((3, 3)), identity_camera(),
                          np.zeros((32, 32, 3)))
