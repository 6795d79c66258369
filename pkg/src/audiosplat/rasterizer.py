"""Differentiable splatting: projection, compositing, hand-written backward.

Two compositors share one set of semantics:

* ``composite_reference`` — deliberately naive oracle: every Gaussian is
  evaluated over the full image in global depth order. Slow, simple, exact.
* ``render_tiled`` — production path: Gaussians are binned to 16x16-pixel
  tiles over the support of the 1/255 contribution threshold, tiles are
  grouped into equal-capacity buckets and composited as batched array ops.

Both blend front-to-back: C = sum_i c_i a'_i prod_{j<i} (1 - a'_j), with
a'_i = opacity * exp(-0.5 d^T Sigma'^-1 d), then the background is
composited with the residual transmittance. Contributions with weight
<= 1/255 are dropped; the tiled path additionally stops a pixel once its
transmittance falls below 1e-4.

The backward pass is written by hand against the blend records and chains
all the way to {positions, raw quaternions, log-scales, SH, opacity logits}.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import scene as sc

logger = logging.getLogger(__name__)

TILE = 16
NEAR_PLANE = 0.01
LOWPASS_FLOOR = 0.3          # px^2 added to the 2D covariance diagonal
WEIGHT_CUTOFF = 1.0 / 255.0  # minimum blended contribution
EXIT_TRANSMITTANCE = 1e-4    # tiled path stops a pixel below this


@dataclass
class Projection:
    """Struct-of-arrays view of the visible (non-culled) Gaussians."""

    screen_xy: np.ndarray   # (M, 2) pixel coordinates
    cov2d: np.ndarray       # (M, 3) packed symmetric [[a, b], [b, c]]
    depth: np.ndarray       # (M,) camera-space z
    rgb: np.ndarray         # (M, 3) shaded colors
    opacity: np.ndarray     # (M,)
    ids: np.ndarray         # (M,) indices into the source GaussianSet
    cam_t: np.ndarray       # (M, 3) camera-space centers (saved for backward)
    n_total: int
    n_culled: int
    width: int
    height: int
    lowpass: float

    def __len__(self):
        return self.screen_xy.shape[0]

    def __getitem__(self, i):
        cov = np.array([[self.cov2d[i, 0], self.cov2d[i, 1]],
                        [self.cov2d[i, 1], self.cov2d[i, 2]]])
        return ProjectedGaussian(self.screen_xy[i].copy(), cov, float(self.depth[i]),
                                 self.rgb[i].copy(), float(self.opacity[i]), int(self.ids[i]))


@dataclass
class ProjectedGaussian:
    screen_xy: np.ndarray
    cov2d: np.ndarray
    depth: float
    rgb: np.ndarray
    opacity: float
    gaussian_id: int


@dataclass
class _Bucket:
    tiles: np.ndarray    # (B,) linear tile ids
    gather: np.ndarray   # (B, P) indices into projection arrays, -1 = pad
    w: np.ndarray        # (B, P, TILE*TILE) blended weights (0 where dropped)
    t_before: np.ndarray  # (B, P, TILE*TILE) transmittance before each slot


@dataclass
class TileRecords:
    buckets: list
    projection: Projection

    def for_pixel(self, x, y):
        """Ordered (gaussian id, alpha', transmittance-before) list actually blended."""
        ntx = (self.projection.width + TILE - 1) // TILE
        tid = (y // TILE) * ntx + (x // TILE)
        q = (y % TILE) * TILE + (x % TILE)
        out = []
        for b in self.buckets:
            rows = np.nonzero(b.tiles == tid)[0]
            for r in rows:
                for p in range(b.gather.shape[1]):
                    if b.gather[r, p] < 0:
                        continue
                    w = b.w[r, p, q]
                    if w > 0.0:
                        gid = int(self.projection.ids[b.gather[r, p]])
                        out.append((gid, float(w), float(b.t_before[r, p, q])))
        return out


@dataclass
class RenderedFrame:
    image: np.ndarray          # (H, W, 3) in [0, 1]
    transmittance: np.ndarray  # (H, W) residual after blending
    background: np.ndarray
    records: TileRecords | None
    n_culled: int

    def blend_records_for_pixel(self, x, y):
        if self.records is None:
            raise ValueError("frame was rendered without blend records")
        return self.records.for_pixel(x, y)


@dataclass
class RasterGrads:
    """Backward results, aligned with the original GaussianSet rows."""

    positions: np.ndarray
    rotations: np.ndarray
    log_scales: np.ndarray
    sh_coeffs: np.ndarray
    opacity_logits: np.ndarray
    rgb: np.ndarray | None = None


def project(gset: sc.GaussianSet, cam: sc.Camera, colors=None, lowpass=LOWPASS_FLOOR) -> Projection:
    """Screen-space Gaussians: cull behind near plane, build 2D covariances.

    ``colors`` overrides SH shading with per-Gaussian rgb (the attention
    visualization path). The 2D covariance is J W Sigma W^T J^T with J the
    pinhole Jacobian at the Gaussian center, plus the low-pass floor.
    """
    if len(gset) == 0:
        raise ValueError("project: empty gaussian set")
    dtype = gset.positions.dtype
    rot = cam.rotation.astype(dtype)
    t = gset.positions @ rot.T + cam.translation.astype(dtype)
    keep = t[:, 2] > NEAR_PLANE
    ids = np.nonzero(keep)[0]
    n_culled = len(gset) - ids.size
    if n_culled:
        logger.debug("project: culled %d of %d gaussians behind the near plane", n_culled, len(gset))
    t = t[keep]
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    sx = cam.fx * tx / tz + cam.cx
    sy = cam.fy * ty / tz + cam.cy

    quats = gset.unit_rotations()[keep]
    rmats = sc.quat_rotmats(quats)
    scales = np.exp(gset.log_scales[keep])
    # M = J R_cam R_gauss diag(s); cov2d = (M diag(s)) (M diag(s))^T done via full Sigma
    cov3d = np.einsum("nij,nj,nkj->nik", rmats, scales * scales, rmats)
    jac = np.zeros((ids.size, 2, 3), dtype=dtype)
    jac[:, 0, 0] = cam.fx / tz
    jac[:, 0, 2] = -cam.fx * tx / (tz * tz)
    jac[:, 1, 1] = cam.fy / tz
    jac[:, 1, 2] = -cam.fy * ty / (tz * tz)
    m = jac @ rot
    cov2d_full = np.einsum("nij,njk,nlk->nil", m, cov3d, m)
    cov2d = np.stack([cov2d_full[:, 0, 0] + lowpass,
                      cov2d_full[:, 0, 1],
                      cov2d_full[:, 1, 1] + lowpass], axis=1)

    if colors is None:
        dirs = gset.positions[keep] - cam.position.astype(dtype)
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        rgb = sc.eval_sh(gset.sh_coeffs[keep], dirs, gset.sh_degree)
    else:
        colors = np.asarray(colors)
        if colors.shape != (len(gset), 3):
            raise ValueError(f"colors shape {colors.shape} does not match gaussian count {len(gset)}")
        rgb = np.clip(colors[keep], 0.0, 1.0)

    opacity = expit(gset.opacity_logits[keep, 0])

    return Projection(np.stack([sx, sy], axis=1), cov2d, tz.copy(), rgb.astype(dtype),
                      opacity.astype(dtype), ids.astype(np.int64), t,
                      n_total=len(gset), n_culled=n_culled,
                      width=cam.width, height=cam.height, lowpass=lowpass)


def _inverse_cov(cov2d):
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    det = a * c - b * b
    if np.any(det <= 0):
        raise FloatingPointError("singular 2D covariance after low-pass floor")
    return np.stack([c / det, -b / det, a / det], axis=1)


def _support_radius(cov2d, opacity):
    """Euclidean reach of the weight > 1/255 region, per Gaussian (0 = skip)."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    m2 = 2.0 * np.log(np.maximum(opacity, 1e-30) * 255.0)
    radius = np.sqrt(np.maximum(m2, 0.0) * lam_max) + 1e-6
    radius[m2 <= 0.0] = 0.0  # opacity never exceeds the cutoff anywhere
    return radius


def composite_reference(projected: Projection, background) -> RenderedFrame:
    """Naive compositor: every Gaussian against every pixel, depth order.

    Implements the exact shared blending semantics (weight cutoff 1/255,
    pixel saturation below the transmittance floor) with none of the tiling,
    binning, or bucketing machinery, so it serves as the oracle for
    render_tiled.
    """
    h, w = projected.height, projected.width
    bg = np.asarray(background)
    if bg.shape != (h, w, 3):
        raise ValueError(f"background shape {bg.shape} does not match {(h, w, 3)}")
    dtype = projected.screen_xy.dtype
    image = np.zeros((h, w, 3), dtype=dtype)
    trans = np.ones((h, w), dtype=dtype)
    if len(projected):
        inv = _inverse_cov(projected.cov2d)
        order = np.lexsort((projected.ids, projected.depth))
        px = np.arange(w, dtype=dtype)[None, :]
        py = np.arange(h, dtype=dtype)[:, None]
        for i in order:
            dx = px - projected.screen_xy[i, 0]
            dy = py - projected.screen_xy[i, 1]
            q = inv[i, 0] * dx * dx + 2.0 * inv[i, 1] * dx * dy + inv[i, 2] * dy * dy
            wgt = projected.opacity[i] * np.exp(-0.5 * q)
            wgt[wgt <= WEIGHT_CUTOFF] = 0.0
            wgt[trans < EXIT_TRANSMITTANCE] = 0.0  # saturated pixels stop blending
            blend = wgt * trans
            image += blend[:, :, None] * projected.rgb[i]
            trans *= 1.0 - wgt
    image += trans[:, :, None] * bg
    return RenderedFrame(np.clip(image, 0.0, 1.0), trans, bg, records=None,
                         n_culled=projected.n_culled)


def _bin_to_tiles(projected: Projection):
    """Instance lists per tile, sorted by (tile, depth, id). Returns sorted
    instance->gaussian indices, their tile ids, and per-tile segment bounds."""
    h, w = projected.height, projected.width
    ntx = (w + TILE - 1) // TILE
    nty = (h + TILE - 1) // TILE
    radius = _support_radius(projected.cov2d, projected.opacity)
    sx, sy = projected.screen_xy[:, 0], projected.screen_xy[:, 1]
    tx0 = np.floor((sx - radius) / TILE).astype(np.int64)
    tx1 = np.floor((sx + radius) / TILE).astype(np.int64)
    ty0 = np.floor((sy - radius) / TILE).astype(np.int64)
    ty1 = np.floor((sy + radius) / TILE).astype(np.int64)
    visible = (radius > 0) & (tx1 >= 0) & (tx0 <= ntx - 1) & (ty1 >= 0) & (ty0 <= nty - 1)
    tx0 = np.clip(tx0, 0, ntx - 1)
    tx1 = np.clip(tx1, 0, ntx - 1)
    ty0 = np.clip(ty0, 0, nty - 1)
    ty1 = np.clip(ty1, 0, nty - 1)
    nx = np.where(visible, tx1 - tx0 + 1, 0)
    ny = np.where(visible, ty1 - ty0 + 1, 0)
    counts = nx * ny
    total = int(counts.sum())
    if total == 0:
        return (np.empty(0, np.int64), np.empty(0, np.int64),
                np.empty(0, np.int64), np.empty(0, np.int64), ntx, nty)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    inst_g = np.repeat(np.arange(len(projected)), counts)
    offset = np.arange(total) - starts[inst_g]
    tile_x = tx0[inst_g] + offset % np.maximum(nx[inst_g], 1)
    tile_y = ty0[inst_g] + offset // np.maximum(nx[inst_g], 1)
    tile_id = tile_y * ntx + tile_x
    order = np.lexsort((projected.ids[inst_g], projected.depth[inst_g], tile_id))
    inst_g = inst_g[order]
    tile_id = tile_id[order]
    seg_tiles, seg_starts, seg_lens = np.unique(tile_id, return_index=True, return_counts=True)
    return inst_g, tile_id, seg_tiles, np.stack([seg_starts, seg_lens], axis=1), ntx, nty


def render_tiled(projected: Projection, background, retain_records=False) -> RenderedFrame:
    """Tile-binned compositor; semantics match composite_reference (<=1e-5)."""
    h, w = projected.height, projected.width
    bg = np.asarray(background)
    if bg.shape != (h, w, 3):
        raise ValueError(f"background shape {bg.shape} does not match {(h, w, 3)}")
    dtype = projected.screen_xy.dtype
    image = np.zeros((h, w, 3), dtype=dtype)
    trans = np.ones((h, w), dtype=dtype)

    inst_g, tile_id, seg_tiles, segs, ntx, nty = _bin_to_tiles(projected)
    buckets = []
    if inst_g.size:
        inv = _inverse_cov(projected.cov2d)
        # local pixel coordinate grid of a tile, flattened row-major
        lx = np.tile(np.arange(TILE, dtype=dtype), TILE)
        ly = np.repeat(np.arange(TILE, dtype=dtype), TILE)
        lens = segs[:, 1]
        cap = 1
        while cap < int(lens.max()):
            cap *= 2
        caps = [1]
        while caps[-1] < cap:
            caps.append(caps[-1] * 2)
        prev = 0
        for capacity in caps:
            sel = np.nonzero((lens > prev) & (lens <= capacity))[0]
            prev = capacity
            if sel.size == 0:
                continue
            b = sel.size
            starts = segs[sel, 0]
            nslot = np.arange(capacity)
            gather = np.where(nslot[None, :] < lens[sel, None],
                              starts[:, None] + nslot[None, :], -1)
            gi = np.where(gather >= 0, inst_g[np.clip(gather, 0, None)], 0)
            pad = gather < 0

            tiles = seg_tiles[sel]
            ox = (tiles % ntx) * TILE
            oy = (tiles // ntx) * TILE
            pxs = ox[:, None].astype(dtype) + lx[None, :]   # (B, 256)
            pys = oy[:, None].astype(dtype) + ly[None, :]
            dx = pxs[:, None, :] - projected.screen_xy[gi, 0][:, :, None]
            dy = pys[:, None, :] - projected.screen_xy[gi, 1][:, :, None]
            qv = (inv[gi, 0][:, :, None] * dx * dx
                  + 2.0 * inv[gi, 1][:, :, None] * dx * dy
                  + inv[gi, 2][:, :, None] * dy * dy)
            wgt = projected.opacity[gi][:, :, None] * np.exp(-0.5 * qv)
            wgt[wgt <= WEIGHT_CUTOFF] = 0.0
            wgt[pad] = 0.0

            t_before = np.ones_like(wgt)
            if capacity > 1:
                np.cumprod(1.0 - wgt[:, :-1, :], axis=1, out=t_before[:, 1:, :])
            keep = t_before >= EXIT_TRANSMITTANCE
            w_eff = np.where(keep, wgt, 0.0)
            if not np.all(keep):
                # freeze transmittance at the early-exit value
                t_before = np.ones_like(wgt)
                if capacity > 1:
                    np.cumprod(1.0 - w_eff[:, :-1, :], axis=1, out=t_before[:, 1:, :])

            blend = w_eff * t_before                       # (B, P, 256)
            tile_rgb = np.matmul(blend.transpose(0, 2, 1), projected.rgb[gi])  # (B, 256, 3)
            t_final = t_before[:, -1, :] * (1.0 - w_eff[:, -1, :])

            # scatter into the image; tiles are disjoint by construction
            for k in range(b):
                x0, y0 = int(ox[k]), int(oy[k])
                xs = min(TILE, w - x0)
                ys = min(TILE, h - y0)
                block = tile_rgb[k].reshape(TILE, TILE, 3)
                image[y0:y0 + ys, x0:x0 + xs] = block[:ys, :xs]
                trans[y0:y0 + ys, x0:x0 + xs] = t_final[k].reshape(TILE, TILE)[:ys, :xs]
            if retain_records:
                gather_idx = np.where(pad, -1, gi)
                buckets.append(_Bucket(tiles, gather_idx, w_eff, t_before))

    image += trans[:, :, None] * bg
    records = TileRecords(buckets, projected) if retain_records else None
    return RenderedFrame(np.clip(image, 0.0, 1.0), trans, bg, records,
                         n_culled=projected.n_culled)


def _quat_rotmat_grads(q):
    """dR/dq for unit quaternions: (N, 4, 3, 3), index 1 = (w, x, y, z)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1)
    out = np.stack([dw, dx, dy, dz], axis=1).reshape(-1, 4, 3, 3)
    return 2.0 * out


def render_backward(frame: RenderedFrame, grad_image, projected: Projection,
                    gset: sc.GaussianSet, cam: sc.Camera, want_rgb_grads=False) -> RasterGrads:
    """Hand-written vjp of render_tiled w.r.t. the raw Gaussian attributes.

    Returns gradients aligned with the original set rows; culled and
    never-blended Gaussians get zeros. SH gradients assume the frame was
    shaded from the set's SH coefficients; for frames rendered with override
    colors use ``want_rgb_grads`` and ignore the SH block.
    """
    if frame.records is None:
        raise ValueError("render_backward: frame is missing blend records "
                         "(render with retain_records=True)")
    grad_image = np.asarray(grad_image, dtype=np.float64)
    h, w_img = projected.height, projected.width
    if grad_image.shape != (h, w_img, 3):
        raise ValueError(f"grad_image shape {grad_image.shape} != {(h, w_img, 3)}")
    m = len(projected)
    g_sx = np.zeros(m)
    g_sy = np.zeros(m)
    g_inv = np.zeros((m, 3))      # packed (ia, ib, ic)
    g_rgb = np.zeros((m, 3))
    g_opa = np.zeros(m)

    inv = _inverse_cov(projected.cov2d)
    bg = np.asarray(frame.background, dtype=np.float64)
    ntx = (w_img + TILE - 1) // TILE
    lx = np.tile(np.arange(TILE, dtype=np.float64), TILE)
    ly = np.repeat(np.arange(TILE, dtype=np.float64), TILE)

    for bucket in frame.records.buckets:
        gather = bucket.gather
        valid = gather >= 0
        gidx = np.clip(gather, 0, None)
        wv = np.asarray(bucket.w, dtype=np.float64)
        tb = np.asarray(bucket.t_before, dtype=np.float64)
        b, cap, _ = wv.shape

        ox = (bucket.tiles % ntx) * TILE
        oy = (bucket.tiles // ntx) * TILE
        # gather per-tile grad and background, zero outside the image
        ghat = np.zeros((b, TILE * TILE, 3))
        bg_tile = np.zeros((b, TILE * TILE, 3))
        for k in range(b):
            x0, y0 = int(ox[k]), int(oy[k])
            xs = min(TILE, w_img - x0)
            ys = min(TILE, h - y0)
            gk = np.zeros((TILE, TILE, 3))
            gk[:ys, :xs] = grad_image[y0:y0 + ys, x0:x0 + xs]
            ghat[k] = gk.reshape(-1, 3)
            bk = np.zeros((TILE, TILE, 3))
            bk[:ys, :xs] = bg[y0:y0 + ys, x0:x0 + xs]
            bg_tile[k] = bk.reshape(-1, 3)

        rgbv = projected.rgb[gidx].astype(np.float64)          # (B, P, 3)
        u = wv * tb
        phi = np.einsum("bpc,bqc->bpq", rgbv, ghat)            # rgb . grad per pixel
        g_rgb_slots = np.matmul(u, ghat)                       # (B, P, 3)

        v = phi * u
        rev = np.cumsum(v[:, ::-1, :], axis=1)[:, ::-1, :]
        suffix = rev - v                                       # strictly-after sum
        t_bg = tb[:, -1, :] * (1.0 - wv[:, -1, :])
        bgdot = np.einsum("bqc,bqc->bq", bg_tile, ghat)
        s_all = suffix + (t_bg * bgdot)[:, None, :]
        denom = np.maximum(1.0 - wv, 1e-12)
        gw = np.where(wv > 0.0, phi * tb - s_all / denom, 0.0)

        alpha = projected.opacity[gidx].astype(np.float64)
        g_alpha_slots = np.einsum("bpq,bpq->bp", gw, wv) / np.maximum(alpha, 1e-30)
        gq = -0.5 * gw * wv                                    # dL/d mahalanobis

        px = ox[:, None].astype(np.float64) + lx[None, :]
        py = oy[:, None].astype(np.float64) + ly[None, :]
        dx = px[:, None, :] - projected.screen_xy[gidx, 0][:, :, None]
        dy = py[:, None, :] - projected.screen_xy[gidx, 1][:, :, None]
        ia = inv[gidx, 0][:, :, None]
        ib = inv[gidx, 1][:, :, None]
        ic = inv[gidx, 2][:, :, None]
        g_ia = np.einsum("bpq,bpq->bp", gq, dx * dx)
        g_ib = np.einsum("bpq,bpq->bp", gq, 2.0 * dx * dy)
        g_ic = np.einsum("bpq,bpq->bp", gq, dy * dy)
        g_sx_slots = -np.einsum("bpq,bpq->bp", gq, 2.0 * (ia * dx + ib * dy))
        g_sy_slots = -np.einsum("bpq,bpq->bp", gq, 2.0 * (ib * dx + ic * dy))

        flat = gidx[valid]
        g_sx += np.bincount(flat, weights=g_sx_slots[valid], minlength=m)
        g_sy += np.bincount(flat, weights=g_sy_slots[valid], minlength=m)
        g_inv[:, 0] += np.bincount(flat, weights=g_ia[valid], minlength=m)
        g_inv[:, 1] += np.bincount(flat, weights=g_ib[valid], minlength=m)
        g_inv[:, 2] += np.bincount(flat, weights=g_ic[valid], minlength=m)
        g_opa += np.bincount(flat, weights=g_alpha_slots[valid], minlength=m)
        for c in range(3):
            g_rgb[:, c] += np.bincount(flat, weights=g_rgb_slots[valid][:, c], minlength=m)

    # ---- chain from screen-space quantities to the raw 3D attributes ----
    rot = cam.rotation
    tx, ty, tz = projected.cam_t[:, 0], projected.cam_t[:, 1], projected.cam_t[:, 2]
    fx, fy = cam.fx, cam.fy

    # inverse covariance -> packed 2D covariance
    inv_full = np.empty((m, 2, 2))
    inv_full[:, 0, 0] = inv[:, 0]
    inv_full[:, 0, 1] = inv_full[:, 1, 0] = inv[:, 1]
    inv_full[:, 1, 1] = inv[:, 2]
    ginv_full = np.empty((m, 2, 2))
    ginv_full[:, 0, 0] = g_inv[:, 0]
    ginv_full[:, 0, 1] = ginv_full[:, 1, 0] = 0.5 * g_inv[:, 1]
    ginv_full[:, 1, 1] = g_inv[:, 2]
    gcov_full = -np.einsum("nij,njk,nkl->nil", inv_full, ginv_full, inv_full)

    # 2D covariance = M Sigma M^T (+ lowpass); M = J rot
    quats = gset.unit_rotations()[projected.ids]
    rmats = sc.quat_rotmats(quats)
    log_s = gset.log_scales[projected.ids].astype(np.float64)
    s2 = np.exp(2.0 * log_s)
    cov3d = np.einsum("nij,nj,nkj->nik", rmats, s2, rmats)
    jac = np.zeros((m, 2, 3))
    jac[:, 0, 0] = fx / tz
    jac[:, 0, 2] = -fx * tx / (tz * tz)
    jac[:, 1, 1] = fy / tz
    jac[:, 1, 2] = -fy * ty / (tz * tz)
    mmat = jac @ rot

    g_sigma3 = np.einsum("nji,njk,nkl->nil", mmat, gcov_full, mmat)
    g_m = 2.0 * np.einsum("nij,njk,nkl->nil", gcov_full, mmat, cov3d)
    g_jac = g_m @ rot.T

    g_t = np.zeros((m, 3))
    g_t[:, 0] = g_jac[:, 0, 2] * (-fx / (tz * tz))
    g_t[:, 1] = g_jac[:, 1, 2] * (-fy / (tz * tz))
    g_t[:, 2] = (g_jac[:, 0, 0] * (-fx / (tz * tz))
                 + g_jac[:, 0, 2] * (2.0 * fx * tx / tz ** 3)
                 + g_jac[:, 1, 1] * (-fy / (tz * tz))
                 + g_jac[:, 1, 2] * (2.0 * fy * ty / tz ** 3))
    # screen-position chain
    g_t[:, 0] += g_sx * fx / tz
    g_t[:, 2] += g_sx * (-fx * tx / (tz * tz))
    g_t[:, 1] += g_sy * fy / tz
    g_t[:, 2] += g_sy * (-fy * ty / (tz * tz))

    g_pos_vis = g_t @ rot  # t = rot @ mu + trans

    # SH shading chain (assumes the frame used SH colors)
    degree = gset.sh_degree
    n_basis = sc.sh_coeff_count(degree)
    cam_pos = cam.position
    dir_raw = gset.positions[projected.ids].astype(np.float64) - cam_pos
    norms = np.linalg.norm(dir_raw, axis=1, keepdims=True)
    dirs = dir_raw / norms
    basis = sc.sh_basis(dirs, degree)
    coeffs = gset.sh_coeffs[projected.ids].astype(np.float64).reshape(m, n_basis, 3)
    rgb_pre = 0.5 + np.einsum("nb,nbc->nc", basis, coeffs)
    unclamped = (rgb_pre > 0.0) & (rgb_pre < 1.0)
    gc = g_rgb * unclamped
    g_sh_vis = np.einsum("nb,nc->nbc", basis, gc).reshape(m, n_basis * 3)
    if degree >= 1:
        dbasis = sc.sh_basis_grad(dirs, degree)
        g_dir = np.einsum("nbc,nc,nbk->nk", coeffs, gc, dbasis)
        g_dirraw = (g_dir - dirs * np.einsum("nk,nk->n", dirs, g_dir)[:, None]) / norms
        g_pos_vis = g_pos_vis + g_dirraw

    # world covariance chain to log-scales and raw quaternions
    g_sigma_sym = 0.5 * (g_sigma3 + g_sigma3.transpose(0, 2, 1))
    rtgr = np.einsum("nji,njk,nkl->nil", rmats, g_sigma_sym, rmats)
    g_logs_vis = 2.0 * s2 * np.einsum("nii->ni", rtgr)
    dr = _quat_rotmat_grads(quats)
    # d Sigma / dq = dR S2 R^T + R S2 dR^T; with symmetric upstream both halves match
    g_q = 2.0 * np.einsum("nij,nmik,nk,njk->nm", g_sigma_sym, dr, s2, rmats)
    raw_q = gset.rotations[projected.ids].astype(np.float64)
    raw_norm = np.linalg.norm(raw_q, axis=1, keepdims=True)
    g_quat_vis = (g_q - quats * np.einsum("nm,nm->n", quats, g_q)[:, None]) / raw_norm

    alpha_all = projected.opacity.astype(np.float64)
    g_logit_vis = g_opa * alpha_all * (1.0 - alpha_all)

    n = len(gset)
    grads = RasterGrads(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)),
                        np.zeros((n, gset.sh_coeffs.shape[1])), np.zeros((n, 1)))
    grads.positions[projected.ids] = g_pos_vis
    grads.rotations[projected.ids] = g_quat_vis
    grads.log_scales[projected.ids] = g_logs_vis
    grads.sh_coeffs[projected.ids] = g_sh_vis
    grads.opacity_logits[projected.ids, 0] = g_logit_vis
    if want_rgb_grads:
        grads.rgb = np.zeros((n, 3))
        grads.rgb[projected.ids] = g_rgb
    return grads


def render_colored(gset: sc.GaussianSet, per_gaussian_rgb, cam: sc.Camera, background):
    """Composite with caller-supplied colors instead of SH shading."""
    proj = project(gset, cam, colors=per_gaussian_rgb)
    return render_tiled(proj, background).image
