"""Canonical Gaussian head: trainable positions plus attribute heads.

Positions are explicit parameters; every other Gaussian attribute is a
function of position, produced by a shared MLP over interpolated triplane
features followed by one linear head per attribute. Densification therefore
manipulates positions only — attributes follow wherever the points move.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from . import scene as sc
from . import triplane as tp

SHARED_WIDTH = 64
DENSIFY_GRAD_THRESHOLD = 2e-4
PRUNE_OPACITY = 0.005
SPLIT_EXTENT_FRACTION = 0.01  # max world scale above this x scene extent -> split


class CanonicalModel:
    """Triplane field + attribute MLPs + trainable positions."""

    def __init__(self, grid: tp.TriplaneGrid, positions, sh_degree=1, seed=0,
                 cap=sc.GAUSSIAN_CAP):
        positions = np.asarray(positions, dtype=np.float64)
        if positions.ndim != 2 or positions.shape[1] != 3:
            raise ValueError(f"positions must be N×3, got {positions.shape}")
        if len(positions) > cap:
            raise ValueError(f"{len(positions)} positions exceed the cap {cap}")
        self.grid = grid
        self.sh_degree = sh_degree
        self.cap = cap
        self.positions = ad.Tensor(positions.copy(), trainable=True, name="mu_c")
        self.plane_tensors = [
            ad.Tensor(level.planes, trainable=True, name=f"plane_L{i}")
            for i, level in enumerate(grid.levels)
        ]
        rng = np.random.default_rng(seed)
        f = grid.feature_dim
        w = SHARED_WIDTH
        n_sh = 3 * sc.sh_coeff_count(sh_degree)
        spacing = initial_spacing(positions)

        def param(name, shape, std):
            return ad.Tensor(rng.normal(0.0, std, shape), trainable=True, name=name)

        self.mlp = {
            "shared_w1": param("shared_w1", (f, w), 1.0 / np.sqrt(f)),
            "shared_b1": ad.Tensor(np.zeros((1, w)), trainable=True, name="shared_b1"),
            "shared_w2": param("shared_w2", (w, w), 1.0 / np.sqrt(w)),
            "shared_b2": ad.Tensor(np.zeros((1, w)), trainable=True, name="shared_b2"),
            "head_r_w": param("head_r_w", (w, 4), 0.01),
            "head_r_b": ad.Tensor(np.array([[1.0, 0.0, 0.0, 0.0]]), trainable=True,
                                  name="head_r_b"),
            "head_s_w": param("head_s_w", (w, 3), 0.01),
            "head_s_b": ad.Tensor(np.full((1, 3), np.log(spacing)), trainable=True,
                                  name="head_s_b"),
            "head_sh_w": param("head_sh_w", (w, n_sh), 0.01),
            "head_sh_b": ad.Tensor(np.zeros((1, n_sh)), trainable=True, name="head_sh_b"),
            "head_a_w": param("head_a_w", (w, 1), 0.01),
            "head_a_b": ad.Tensor(np.zeros((1, 1)), trainable=True, name="head_a_b"),
        }

    def __len__(self):
        return len(self.positions.data)

    def parameters(self):
        """Named trainable tensors (positions, planes, MLP weights)."""
        out = {"positions": self.positions}
        for i, t in enumerate(self.plane_tensors):
            out[f"plane_L{i}"] = t
        out.update(self.mlp)
        return out

    def query_features(self):
        """Triplane features of the current positions, differentiable."""
        feats, ctx = tp.query(self.grid, self.positions.data, want_ctx=True)
        inputs = self.plane_tensors + [self.positions]

        def vjp(g):
            plane_grads, point_grads = tp.query_backward(ctx, g, want_point_grads=True)
            return plane_grads + [point_grads]

        return ad.custom(feats, inputs, vjp, name="triplane_query")

    def raw_attributes(self, feats=None):
        """Raw per-Gaussian attribute tensors {rotations, log_scales, sh, logits}.

        Pass a precomputed `query_features()` tensor to share one triplane
        query between the attribute heads and other consumers.
        """
        m = self.mlp
        if feats is None:
            feats = self.query_features()
        h = ad.relu(ad.linear(feats, m["shared_w1"], m["shared_b1"]))
        kappa = ad.relu(ad.linear(h, m["shared_w2"], m["shared_b2"]))
        return {
            "positions": self.positions,
            "rotations": ad.linear(kappa, m["head_r_w"], m["head_r_b"]),
            "log_scales": ad.linear(kappa, m["head_s_w"], m["head_s_b"]),
            "sh_coeffs": ad.linear(kappa, m["head_sh_w"], m["head_sh_b"]),
            "opacity_logits": ad.linear(kappa, m["head_a_w"], m["head_a_b"]),
        }

    def set_positions(self, positions):
        self.positions = ad.Tensor(np.asarray(positions, dtype=np.float64).copy(),
                                   trainable=True, name="mu_c")


def create_model(positions, sh_degree=1, resolutions=(64, 128), features=64,
                 seed=0, margin=0.25, cap=sc.GAUSSIAN_CAP):
    """Model with grid bounds wrapping the initial positions plus a margin."""
    positions = np.asarray(positions, dtype=np.float64)
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    pad = margin * max(float((hi - lo).max()), 1e-3)
    grid = tp.create_grid(resolutions=resolutions, features=features,
                          lo=lo - pad, hi=hi + pad, seed=seed)
    return CanonicalModel(grid, positions, sh_degree=sh_degree, seed=seed, cap=cap)


def initial_spacing(positions):
    """Median nearest-neighbor distance, the natural initial blob size."""
    if len(positions) < 2:
        return 0.1
    d, _ = cKDTree(positions).query(positions, k=2)
    med = float(np.median(d[:, 1]))
    return max(med, 1e-4)


def assemble_canonical(model: CanonicalModel) -> sc.GaussianSet:
    """The canonical GaussianSet implied by the current model state."""
    raw = model.raw_attributes()
    return sc.GaussianSet(
        positions=raw["positions"].data.copy(),
        rotations=raw["rotations"].data.copy(),
        log_scales=raw["log_scales"].data.copy(),
        sh_coeffs=raw["sh_coeffs"].data.copy(),
        opacity_logits=raw["opacity_logits"].data.copy(),
        sh_degree=model.sh_degree,
    ).validate(cap=model.cap)


@dataclass
class DensifyOutcome:
    """Row bookkeeping from one densify/prune pass.

    survivors: indices into the previous position rows that remain, in order;
    the new position array is positions[survivors] followed by the children.
    Optimizer state should be carried over for survivors and zeroed for
    children.
    """
    survivors: np.ndarray
    n_children: int
    n_cloned: int
    n_split: int
    n_pruned: int

    @property
    def changed(self):
        return self.n_children > 0 or self.n_pruned > 0


def densify_and_prune(model: CanonicalModel, grad_norms, iteration, *,
                      grad_threshold=DENSIFY_GRAD_THRESHOLD,
                      prune_opacity=PRUNE_OPACITY,
                      split_fraction=SPLIT_EXTENT_FRACTION,
                      seed=0) -> DensifyOutcome:
    """Clone/split high-gradient Gaussians, prune near-transparent ones.

    grad_norms: per-Gaussian mean position-gradient norms since the last call.
    Densification is skipped entirely at the cap. The child jitter is seeded
    by (seed, iteration) so interrupted and resumed runs agree.
    """
    n = len(model)
    grad_norms = np.asarray(grad_norms, dtype=np.float64).reshape(n)
    gset = assemble_canonical(model)
    opacity = gset.opacities()[:, 0]
    scales = gset.scales()
    extent = sc.scene_extent(gset.positions)

    keep = opacity >= prune_opacity
    if not np.any(keep):
        keep[np.argmax(opacity)] = True  # never prune the model to nothing
    at_cap = n >= model.cap
    hot = np.zeros(n, dtype=bool) if at_cap else (grad_norms > grad_threshold) & keep

    rng = np.random.default_rng((seed, iteration))
    positions = model.positions.data
    children = []
    survivors_mask = keep.copy()
    n_cloned = n_split = 0
    count = int(survivors_mask.sum())
    for i in np.flatnonzero(hot):
        if count + 1 > model.cap:
            break
        sigma = scales[i]
        if sigma.max() > split_fraction * extent:
            delta = 0.8 * rng.normal(0.0, 1.0, 3) * sigma
            children.append(positions[i] + delta)
            children.append(positions[i] - delta)
            survivors_mask[i] = False  # replaced by its two halves
            n_split += 1
        else:
            jitter = 0.05 * rng.normal(0.0, 1.0, 3) * max(sigma.max(), 1e-5)
            children.append(positions[i] + jitter)
            n_cloned += 1
        count += 1

    survivors = np.flatnonzero(survivors_mask)
    new_positions = positions[survivors]
    if children:
        new_positions = np.vstack([new_positions, np.array(children)])
    model.set_positions(new_positions)
    return DensifyOutcome(survivors=survivors, n_children=len(children),
                          n_cloned=n_cloned, n_split=n_split,
                          n_pruned=int(n - keep.sum()))
