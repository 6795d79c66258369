"""Multi-resolution triplane feature field.

Each resolution level holds three orthogonal 2D feature grids (the xy, yz and
zx planes). A 3D point is projected onto each plane, the plane features are
bilinearly interpolated, the three results are fused by elementwise product,
and the per-level vectors are concatenated into the final feature.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import imageio

logger = logging.getLogger(__name__)

PLANE_NAMES = ("xy", "yz", "zx")
PLANE_AXES = ((0, 1), (1, 2), (2, 0))


@dataclass
class TriplaneLevel:
    """One resolution level: planes of shape (3, H, R, R), order xy/yz/zx."""
    planes: np.ndarray
    resolution: int
    features: int

    def __post_init__(self):
        expected = (3, self.features, self.resolution, self.resolution)
        if self.planes.shape != expected:
            raise ValueError(f"level planes shape {self.planes.shape}, expected {expected}")


@dataclass
class TriplaneGrid:
    """Feature field over an axis-aligned box; levels concatenate on query."""
    levels: list
    lo: np.ndarray = field(default_factory=lambda: np.full(3, -1.0))
    hi: np.ndarray = field(default_factory=lambda: np.full(3, 1.0))

    def __post_init__(self):
        if not self.levels:
            raise ValueError("triplane grid needs at least one level")
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("triplane bounds must satisfy hi > lo per axis")

    @property
    def feature_dim(self):
        return sum(level.features for level in self.levels)

    def plane_arrays(self):
        """Flat list of the 6 plane arrays (level-major, xy/yz/zx order)."""
        return [level.planes[p] for level in self.levels for p in range(3)]

    def copy(self):
        return TriplaneGrid([TriplaneLevel(l.planes.copy(), l.resolution, l.features)
                             for l in self.levels], self.lo.copy(), self.hi.copy())


def create_grid(resolutions=(64, 128), features=64, lo=(-1.0, -1.0, -1.0),
                hi=(1.0, 1.0, 1.0), seed=0, scale=1e-2, dtype=np.float64):
    """Fresh grid with plane values uniform in [-scale, scale]."""
    rng = np.random.default_rng(seed)
    levels = [TriplaneLevel(rng.uniform(-scale, scale, (3, features, r, r)).astype(dtype),
                            r, features)
              for r in resolutions]
    return TriplaneGrid(levels, np.asarray(lo, float), np.asarray(hi, float))


@dataclass
class QueryContext:
    """Saved interpolation state from one query, consumed by query_backward."""
    grid: TriplaneGrid
    n_points: int
    # per level: dict with ia/ib (N,), fa/fb (N,) per plane, plus dg/dp scales
    levels: list


def _level_coords(grid, level, points):
    r = level.resolution
    span = grid.hi - grid.lo
    g = (points - grid.lo) / span * (r - 1)
    inside = (g > 0.0) & (g < r - 1.0)
    g = np.clip(g, 0.0, r - 1.0)
    scale = np.where(inside, (r - 1) / span, 0.0)  # dg/dpoint, zero when clamped
    return g, scale


def query(grid: TriplaneGrid, points, want_ctx=False):
    """Interpolated features for N×3 points: (N, F), F = sum of level dims.

    Points outside the grid bounds are clamped to the boundary (a warning
    reports how many). With want_ctx=True also returns the QueryContext that
    query_backward consumes.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if points.shape[1] != 3:
        raise ValueError(f"points must be N×3, got {points.shape}")
    n = points.shape[0]
    outside = np.any((points < grid.lo) | (points > grid.hi), axis=1)
    if np.any(outside):
        logger.warning("%d/%d triplane query points outside bounds; clamped",
                       int(outside.sum()), n)
    chunks = []
    ctx_levels = []
    for level in grid.levels:
        g, scale = _level_coords(grid, level, points)
        feats = np.ones((n, level.features), dtype=level.planes.dtype)
        plane_ctx = []
        for p, (ax_a, ax_b) in enumerate(PLANE_AXES):
            ga, gb = g[:, ax_a], g[:, ax_b]
            ia = np.minimum(ga.astype(np.int64), level.resolution - 2)
            ib = np.minimum(gb.astype(np.int64), level.resolution - 2)
            fa = ga - ia
            fb = gb - ib
            plane = level.planes[p]
            val = (plane[:, ia, ib].T * ((1 - fa) * (1 - fb))[:, None]
                   + plane[:, ia + 1, ib].T * (fa * (1 - fb))[:, None]
                   + plane[:, ia, ib + 1].T * ((1 - fa) * fb)[:, None]
                   + plane[:, ia + 1, ib + 1].T * (fa * fb)[:, None])
            feats *= val
            plane_ctx.append((ia, ib, fa, fb))
        chunks.append(feats)
        ctx_levels.append({"planes": plane_ctx, "scale": scale})
    out = np.concatenate(chunks, axis=1)
    if want_ctx:
        return out, QueryContext(grid, n, ctx_levels)
    return out


def _plane_vals(plane, ia, ib, fa, fb):
    """The four corner gathers (each N×H) and the interpolated value."""
    v00 = plane[:, ia, ib].T
    v10 = plane[:, ia + 1, ib].T
    v01 = plane[:, ia, ib + 1].T
    v11 = plane[:, ia + 1, ib + 1].T
    val = (v00 * ((1 - fa) * (1 - fb))[:, None] + v10 * (fa * (1 - fb))[:, None]
           + v01 * ((1 - fa) * fb)[:, None] + v11 * (fa * fb)[:, None])
    return v00, v10, v01, v11, val


def query_backward(ctx: QueryContext, grad_features, want_point_grads=False):
    """Gradients of a query: per-plane grids and, optionally, the points.

    Returns (plane_grads, point_grads): plane_grads is a list per level of
    (3, H, R, R) arrays; point_grads is N×3 or None.
    """
    if ctx is None:
        raise ValueError("query_backward: no saved interpolation state "
                         "(run query with want_ctx=True)")
    grid = ctx.grid
    grad_features = np.asarray(grad_features, dtype=np.float64)
    if grad_features.shape != (ctx.n_points, grid.feature_dim):
        raise ValueError(f"grad_features shape {grad_features.shape} != "
                         f"{(ctx.n_points, grid.feature_dim)}")
    plane_grads = []
    point_grads = np.zeros((ctx.n_points, 3)) if want_point_grads else None
    off = 0
    for level, lctx in zip(grid.levels, ctx.levels):
        h, r = level.features, level.resolution
        gl = grad_features[:, off:off + h]
        off += h
        # recompute the three per-plane interpolants for the leave-one-out products
        vals = []
        corners = []
        for p in range(3):
            ia, ib, fa, fb = lctx["planes"][p]
            v00, v10, v01, v11, val = _plane_vals(level.planes[p], ia, ib, fa, fb)
            vals.append(val)
            corners.append((v00, v10, v01, v11))
        level_grad = np.zeros_like(level.planes)
        for p, (ax_a, ax_b) in enumerate(PLANE_AXES):
            ia, ib, fa, fb = lctx["planes"][p]
            other = vals[(p + 1) % 3] * vals[(p + 2) % 3]
            up = gl * other                      # dL/d val_p, (N, H)
            acc = np.zeros((r, r, h))
            np.add.at(acc, (ia, ib), up * ((1 - fa) * (1 - fb))[:, None])
            np.add.at(acc, (ia + 1, ib), up * (fa * (1 - fb))[:, None])
            np.add.at(acc, (ia, ib + 1), up * ((1 - fa) * fb)[:, None])
            np.add.at(acc, (ia + 1, ib + 1), up * (fa * fb)[:, None])
            level_grad[p] += acc.transpose(2, 0, 1)
            if want_point_grads:
                v00, v10, v01, v11 = corners[p]
                dval_dfa = (v10 - v00) * (1 - fb)[:, None] + (v11 - v01) * fb[:, None]
                dval_dfb = (v01 - v00) * (1 - fa)[:, None] + (v11 - v10) * fa[:, None]
                scale = lctx["scale"]
                point_grads[:, ax_a] += (up * dval_dfa).sum(axis=1) * scale[:, ax_a]
                point_grads[:, ax_b] += (up * dval_dfb).sum(axis=1) * scale[:, ax_b]
        plane_grads.append(level_grad)
    return plane_grads, point_grads


def export_pca_images(grid: TriplaneGrid, out_dir):
    """PNG per plane per level: texel features reduced to 3 PCA components.

    Channels are min-max normalized to [0, 255]; zero-variance channels fall
    back to mid-gray. The component sign convention (largest-magnitude loading
    positive) makes the output deterministic. Returns the written paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for li, level in enumerate(grid.levels):
        r = level.resolution
        for p, name in enumerate(PLANE_NAMES):
            x = level.planes[p].reshape(level.features, r * r).T.astype(np.float64)
            xc = x - x.mean(axis=0)
            _, svals, vt = np.linalg.svd(xc, full_matrices=False)
            comps = np.zeros((3, level.features))
            k = min(3, vt.shape[0])
            comps[:k] = vt[:k]
            for c in range(k):
                j = np.argmax(np.abs(comps[c]))
                if comps[c, j] < 0:
                    comps[c] = -comps[c]
            scores = xc @ comps.T                      # (R*R, 3)
            img = np.empty((r * r, 3))
            for c in range(3):
                lo, hi = scores[:, c].min(), scores[:, c].max()
                if hi - lo < 1e-12:
                    img[:, c] = 0.5                    # flat channel -> mid-gray
                else:
                    img[:, c] = (scores[:, c] - lo) / (hi - lo)
            path = os.path.join(out_dir, f"triplane_L{li}_{name}.png")
            imageio.write_png(path, img.reshape(r, r, 3))
            paths.append(path)
    return paths
