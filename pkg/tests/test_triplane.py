"""Feature grid: interpolation semantics, gradients, PCA export."""
import logging

import numpy as np
import pytest

from audiosplat import triplane as tp
from audiosplat.autodiff import numeric_gradient
from audiosplat import imageio


def small_grid(res=8, features=2, seed=0, nlevels=1):
    return tp.create_grid(resolutions=(res,) * nlevels if nlevels > 1 else (res,),
                          features=features, seed=seed)


def test_all_ones_planes_give_all_ones_feature():
    grid = tp.create_grid(resolutions=(4, 8), features=5, seed=1)
    for level in grid.levels:
        level.planes[:] = 1.0
    rng = np.random.default_rng(2)
    feats = tp.query(grid, rng.uniform(-1, 1, (20, 3)))
    assert feats.shape == (20, 10)
    assert np.allclose(feats, 1.0)


def test_grid_vertex_returns_stored_product():
    grid = small_grid(res=5, features=3, seed=3)
    level = grid.levels[0]
    # world position of grid node (i, j, k) with R=5 on [-1, 1]: step 0.5
    i, j, k = 2, 3, 1
    point = grid.lo + np.array([i, j, k]) * (grid.hi - grid.lo) / 4
    expected = (level.planes[0][:, i, j] * level.planes[1][:, j, k]
                * level.planes[2][:, k, i])
    got = tp.query(grid, point[None])[0]
    assert np.allclose(got, expected, atol=1e-12)


def test_cell_midpoint_matches_bilinear_oracle():
    # frozen from tests/oracles/bilinear_oracle.py
    corners = {
        0: ([-0.80193143, -1.324359], [-0.24836162, 0.42044524],
            [1.13604653, 0.1097064], [-0.55264732, -0.78478036]),
        1: ([0.74874577, 1.63478304], [0.27276878, -1.23332866],
            [-0.95826521, 1.60001909], [0.20288244, -1.73213484]),
        2: ([-0.08369619, -1.16322597], [-0.62928809, -0.48800582],
            [-0.71331337, 0.55337847], [-0.06308597, -0.58943126]),
    }
    grid = small_grid(res=3, features=2, seed=4)
    level = grid.levels[0]
    level.planes[:] = 0.0
    # drop the oracle corner values into cell (0,0) of each plane:
    # (x,y) order in the oracle = (a,b) index order here
    for p, (v00, v10, v01, v11) in corners.items():
        level.planes[p][:, 0, 0] = v00
        level.planes[p][:, 1, 0] = v10
        level.planes[p][:, 0, 1] = v01
        level.planes[p][:, 1, 1] = v11
    # cell (0,0) midpoint in grid coords = 0.5 on every axis -> world lo + 0.5*step
    point = grid.lo + 0.5 * (grid.hi - grid.lo) / 2
    got = tp.query(grid, point[None])[0]
    assert np.allclose(got, [0.00289162, 0.01121207], atol=1e-7)


def test_zero_levels_rejected():
    with pytest.raises(ValueError):
        tp.TriplaneGrid([])


def test_out_of_bounds_clamped_with_warning(caplog):
    grid = small_grid()
    inside = np.array([[0.2, -0.1, 0.4]])
    boundary = tp.query(grid, np.array([[2.0, -0.1, 0.4]]))  # x beyond hi
    edge = tp.query(grid, np.array([[1.0, -0.1, 0.4]]))
    assert np.allclose(boundary, edge)
    with caplog.at_level(logging.WARNING, logger="audiosplat.triplane"):
        tp.query(grid, np.vstack([inside, [[5.0, 5.0, 5.0]]]))
    assert any("1/2" in rec.getMessage() for rec in caplog.records)


def test_query_continuity():
    grid = tp.create_grid(resolutions=(8, 16), features=4, seed=5)
    rng = np.random.default_rng(6)
    base = rng.uniform(-0.9, 0.9, (50, 3))
    f0 = tp.query(grid, base)
    for step in (1e-3, 1e-5):
        f1 = tp.query(grid, base + step)
        assert np.abs(f1 - f0).max() < 50 * step + 1e-12


def test_query_locality():
    grid = small_grid(res=16, features=2, seed=7)
    point = np.array([[0.03, 0.02, -0.04]])  # near the grid center
    before = tp.query(grid, point).copy()
    grid.levels[0].planes[:, :, 0, 0] += 100.0  # far corner texels
    grid.levels[0].planes[:, :, 15, 15] += 100.0
    assert np.array_equal(tp.query(grid, point), before)


def test_backward_zero_grad_gives_zero():
    grid = small_grid()
    pts = np.random.default_rng(8).uniform(-1, 1, (7, 3))
    _, ctx = tp.query(grid, pts, want_ctx=True)
    plane_grads, point_grads = tp.query_backward(
        ctx, np.zeros((7, grid.feature_dim)), want_point_grads=True)
    assert all(np.all(g == 0) for g in plane_grads)
    assert np.all(point_grads == 0)


def test_backward_bilinear_support_is_four_texels():
    grid = small_grid(res=8, features=1, seed=9)
    pts = np.array([[0.1, 0.2, -0.3]])
    _, ctx = tp.query(grid, pts, want_ctx=True)
    plane_grads, _ = tp.query_backward(ctx, np.ones((1, 1)))
    for p in range(3):
        touched = np.count_nonzero(plane_grads[0][p])
        assert touched <= 4


def test_backward_missing_context_errors():
    with pytest.raises(ValueError):
        tp.query_backward(None, np.zeros((1, 2)))


def test_backward_matches_finite_differences():
    grid = tp.create_grid(resolutions=(4, 6), features=3, seed=10, scale=0.5)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-0.95, 0.95, (9, 3))
    wmat = rng.normal(size=(9, grid.feature_dim))
    feats, ctx = tp.query(grid, pts, want_ctx=True)
    plane_grads, point_grads = tp.query_backward(ctx, wmat, want_point_grads=True)

    def loss():
        return float(np.sum(tp.query(grid, pts) * wmat))

    for li, level in enumerate(grid.levels):
        idx, num = numeric_gradient(loss, level.planes, eps=1e-6, coords=40,
                                    seed=li)
        ana = plane_grads[li].reshape(-1)[idx]
        rel = np.abs(ana - num) / np.maximum(1, np.abs(num))
        assert rel.max() <= 1e-5, f"level {li}"

    idx, num = numeric_gradient(loss, pts, eps=1e-7, coords=20, seed=99)
    rel = np.abs(point_grads.reshape(-1)[idx] - num) / np.maximum(1, np.abs(num))
    assert rel.max() <= 1e-5


def test_export_pca_constant_plane_is_gray(tmp_path):
    grid = small_grid(res=6, features=4, seed=12)
    for level in grid.levels:
        level.planes[:] = 0.25
    paths = tp.export_pca_images(grid, tmp_path)
    assert len(paths) == 3
    img = imageio.read_png(paths[0])
    assert np.allclose(img, 0.5, atol=1 / 255)


def test_export_pca_separates_two_clusters(tmp_path):
    grid = small_grid(res=8, features=6, seed=13)
    level = grid.levels[0]
    level.planes[:] = 0.0
    level.planes[0][:, :4, :] = 1.0   # half the xy plane one vector
    level.planes[0][:, 4:, :] = -1.0  # other half the opposite
    paths = tp.export_pca_images(grid, tmp_path)
    img = imageio.read_png(paths[0])
    top, bottom = img[:4].reshape(-1, 3), img[4:].reshape(-1, 3)
    assert np.allclose(top, top[0]) and np.allclose(bottom, bottom[0])
    assert np.abs(top[0] - bottom[0]).max() > 0.5


def test_export_pca_deterministic(tmp_path):
    grid = tp.create_grid(resolutions=(8,), features=5, seed=14)
    d1 = tmp_path / "a"
    d2 = tmp_path / "b"
    p1 = tp.export_pca_images(grid, d1)
    p2 = tp.export_pca_images(grid, d2)
    for a, b in zip(p1, p2):
        assert open(a, "rb").read() == open(b, "rb").read()
