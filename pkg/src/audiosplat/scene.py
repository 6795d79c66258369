"""Explicit anisotropic-Gaussian scene: geometry math, shading, persistence.

A scene is a struct-of-arrays set of N Gaussians (position, quaternion,
log-scale, SH coefficients, opacity logit). Scales live as logs and
opacities as logits so unconstrained optimizer steps keep them valid;
activations are applied where the physical quantities are needed.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

GAUSSIAN_CAP = 50_000

SCENE_MAGIC = b"ASPLATSC"
SCENE_VERSION = 1

# real spherical-harmonics constants, bands 0..3 (splatting layout)
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


class SceneFileError(ValueError):
    """Malformed or incompatible scene file."""


def sh_coeff_count(degree):
    return (degree + 1) ** 2


@dataclass
class GaussianSet:
    """N Gaussians; arrays are row-per-Gaussian, float dtype preserved."""

    positions: np.ndarray       # (N, 3) world coordinates
    rotations: np.ndarray       # (N, 4) quaternions (w, x, y, z)
    log_scales: np.ndarray      # (N, 3)
    sh_coeffs: np.ndarray       # (N, 3 * (degree+1)^2), basis-major rgb triples
    opacity_logits: np.ndarray  # (N, 1)
    sh_degree: int = 1

    def __post_init__(self):
        self.positions = np.atleast_2d(np.asarray(self.positions))
        self.rotations = np.atleast_2d(np.asarray(self.rotations))
        self.log_scales = np.atleast_2d(np.asarray(self.log_scales))
        self.sh_coeffs = np.atleast_2d(np.asarray(self.sh_coeffs))
        self.opacity_logits = np.asarray(self.opacity_logits).reshape(-1, 1)

    def __len__(self):
        return self.positions.shape[0]

    def validate(self, cap=GAUSSIAN_CAP):
        n = len(self)
        if n > cap:
            raise ValueError(f"gaussian count {n} exceeds the configured cap {cap}")
        for name, arr, width in (("positions", self.positions, 3),
                                 ("rotations", self.rotations, 4),
                                 ("log_scales", self.log_scales, 3),
                                 ("sh_coeffs", self.sh_coeffs, 3 * sh_coeff_count(self.sh_degree)),
                                 ("opacity_logits", self.opacity_logits, 1)):
            if arr.shape != (n, width):
                raise ValueError(f"{name}: expected shape {(n, width)}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(norms < 1e-8):
            raise ValueError("zero quaternion in rotations")
        return self

    def scales(self):
        return np.exp(self.log_scales)

    def opacities(self):
        return expit(self.opacity_logits)

    def unit_rotations(self):
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return self.rotations / norms

    def copy(self):
        return GaussianSet(self.positions.copy(), self.rotations.copy(),
                           self.log_scales.copy(), self.sh_coeffs.copy(),
                           self.opacity_logits.copy(), self.sh_degree)

    def astype(self, dtype):
        return GaussianSet(self.positions.astype(dtype), self.rotations.astype(dtype),
                           self.log_scales.astype(dtype), self.sh_coeffs.astype(dtype),
                           self.opacity_logits.astype(dtype), self.sh_degree)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera: 4x4 world-to-camera extrinsic + pixel intrinsics."""

    extrinsic: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        ext = np.asarray(self.extrinsic, dtype=np.float64)
        if ext.shape != (4, 4):
            raise ValueError(f"extrinsic must be 4x4, got {ext.shape}")
        object.__setattr__(self, "extrinsic", ext)
        rot = ext[:3, :3]
        dev = np.abs(rot.T @ rot - np.eye(3)).max()
        if dev >= 1e-6:
            raise ValueError(f"extrinsic rotation block not orthonormal (deviation {dev:.2e})")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("camera resolution must be positive")

    @property
    def rotation(self):
        return self.extrinsic[:3, :3]

    @property
    def translation(self):
        return self.extrinsic[:3, 3]

    @property
    def position(self):
        # world-space camera center
        return -self.rotation.T @ self.translation


def look_at_extrinsic(eye, target, up=(0.0, 1.0, 0.0)):
    """World-to-camera transform looking from eye toward target, +z forward."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd])  # rows: camera axes in world coords
    ext = np.eye(4)
    ext[:3, :3] = rot
    ext[:3, 3] = -rot @ eye
    return ext


def normalize_quaternions(q, tol=1e-3):
    """Unit quaternions; deviations below tol renormalize, larger ones error."""
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q2 = np.atleast_2d(q)
    norms = np.linalg.norm(q2, axis=1)
    if np.any(norms < 1e-8):
        raise ValueError("zero quaternion")
    if np.any(np.abs(norms - 1.0) >= tol):
        worst = float(np.abs(norms - 1.0).max())
        raise ValueError(f"quaternion norm deviates from 1 by {worst:.2e} (tolerance {tol})")
    out = q2 / norms[:, None]
    return out[0] if single else out


def quat_rotmats(q):
    """(N,4) unit quaternions (w,x,y,z) -> (N,3,3) rotation matrices."""
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    mats = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    mats[:, 0, 0] = 1 - 2 * (y * y + z * z)
    mats[:, 0, 1] = 2 * (x * y - w * z)
    mats[:, 0, 2] = 2 * (x * z + w * y)
    mats[:, 1, 0] = 2 * (x * y + w * z)
    mats[:, 1, 1] = 1 - 2 * (x * x + z * z)
    mats[:, 1, 2] = 2 * (y * z - w * x)
    mats[:, 2, 0] = 2 * (x * z - w * y)
    mats[:, 2, 1] = 2 * (y * z + w * x)
    mats[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return mats


def covariance_from(r, s):
    """3x3 world covariance(s) R diag(s^2) R^T from quaternion + scale."""
    single = np.asarray(r).ndim == 1
    q = normalize_quaternions(r)
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    rot = quat_rotmats(np.atleast_2d(q))
    cov = np.einsum("nij,nj,nkj->nik", rot, s * s, rot)
    return cov[0] if single else cov


def sh_basis(dirs, degree):
    """Real SH basis values for unit directions: (N, (degree+1)^2)."""
    if not 0 <= degree <= 3:
        raise ValueError(f"sh degree must be in [0, 3], got {degree}")
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    basis = np.empty((n, sh_coeff_count(degree)), dtype=dirs.dtype)
    basis[:, 0] = SH_C0
    if degree >= 1:
        basis[:, 1] = -SH_C1 * y
        basis[:, 2] = SH_C1 * z
        basis[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        basis[:, 4] = SH_C2[0] * x * y
        basis[:, 5] = SH_C2[1] * y * z
        basis[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        basis[:, 7] = SH_C2[3] * x * z
        basis[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        basis[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        basis[:, 10] = SH_C3[1] * x * y * z
        basis[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        basis[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        basis[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        basis[:, 14] = SH_C3[5] * z * (xx - yy)
        basis[:, 15] = SH_C3[6] * x * (xx - yy)
    return basis


def sh_basis_grad(dirs, degree):
    """d basis / d direction, shape (N, (degree+1)^2, 3)."""
    dirs = np.atleast_2d(dirs)
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    grad = np.zeros((n, sh_coeff_count(degree), 3), dtype=dirs.dtype)
    if degree >= 1:
        grad[:, 1, 1] = -SH_C1
        grad[:, 2, 2] = SH_C1
        grad[:, 3, 0] = -SH_C1
    if degree >= 2:
        grad[:, 4, 0] = SH_C2[0] * y
        grad[:, 4, 1] = SH_C2[0] * x
        grad[:, 5, 1] = SH_C2[1] * z
        grad[:, 5, 2] = SH_C2[1] * y
        grad[:, 6, 0] = SH_C2[2] * (-2 * x)
        grad[:, 6, 1] = SH_C2[2] * (-2 * y)
        grad[:, 6, 2] = SH_C2[2] * 4 * z
        grad[:, 7, 0] = SH_C2[3] * z
        grad[:, 7, 2] = SH_C2[3] * x
        grad[:, 8, 0] = SH_C2[4] * 2 * x
        grad[:, 8, 1] = SH_C2[4] * (-2 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        grad[:, 9, 0] = SH_C3[0] * 6 * x * y
        grad[:, 9, 1] = SH_C3[0] * (3 * xx - 3 * yy)
        grad[:, 10, 0] = SH_C3[1] * y * z
        grad[:, 10, 1] = SH_C3[1] * x * z
        grad[:, 10, 2] = SH_C3[1] * x * y
        grad[:, 11, 0] = SH_C3[2] * (-2 * x * y)
        grad[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        grad[:, 11, 2] = SH_C3[2] * 8 * y * z
        grad[:, 12, 0] = SH_C3[3] * (-6 * x * z)
        grad[:, 12, 1] = SH_C3[3] * (-6 * y * z)
        grad[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        grad[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        grad[:, 13, 1] = SH_C3[4] * (-2 * x * y)
        grad[:, 13, 2] = SH_C3[4] * 8 * x * z
        grad[:, 14, 0] = SH_C3[5] * 2 * x * z
        grad[:, 14, 1] = SH_C3[5] * (-2 * y * z)
        grad[:, 14, 2] = SH_C3[5] * (xx - yy)
        grad[:, 15, 0] = SH_C3[6] * (3 * xx - yy)
        grad[:, 15, 1] = SH_C3[6] * (-2 * x * y)
    return grad


def eval_sh(sh, view_dir, degree):
    """Shade SH coefficients toward unit view directions -> rgb in [0,1].

    Accepts one Gaussian ((3B,), (3,)) or a batch ((N,3B), (N,3)). The 0.5
    band-0 offset is added before clamping.
    """
    sh = np.asarray(sh)
    single = sh.ndim == 1
    sh2 = np.atleast_2d(sh)
    dirs = np.atleast_2d(np.asarray(view_dir, dtype=np.float64))
    want = 3 * sh_coeff_count(degree)
    if sh2.shape[1] != want:
        raise ValueError(f"sh coefficient count {sh2.shape[1]} wrong for degree {degree} (expected {want})")
    norms = np.linalg.norm(dirs, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ValueError("view directions must be unit length")
    basis = sh_basis(dirs, degree)
    coeffs = sh2.reshape(sh2.shape[0], sh_coeff_count(degree), 3)
    rgb = 0.5 + np.einsum("nb,nbc->nc", basis, coeffs)
    rgb = np.clip(rgb, 0.0, 1.0)
    return rgb[0] if single else rgb


def init_positions(source, count=None, seed=0):
    """Starting positions: 'sphere' or a path to an ASCII x-y-z point file."""
    rng = np.random.default_rng(seed)
    if source == "sphere":
        if count is None:
            raise ValueError("sphere init requires a count")
        v = rng.normal(size=(count, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return 0.5 * v
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # loadtxt warns on empty input; we raise
        pts = np.loadtxt(source, dtype=np.float64, ndmin=2)
    if pts.size == 0:
        raise ValueError(f"empty point file: {source}")
    if pts.shape[1] != 3:
        raise ValueError(f"point file rows must have 3 columns, got {pts.shape[1]}")
    if count is None or count == pts.shape[0]:
        return pts
    idx = rng.choice(pts.shape[0], size=count, replace=count > pts.shape[0])
    return pts[idx]


def scene_extent(positions):
    """Bounding-box diagonal; the size yardstick for densification."""
    lo = positions.min(axis=0)
    hi = positions.max(axis=0)
    return float(np.linalg.norm(hi - lo))


def save_scene(gset: GaussianSet, path):
    gset.validate()
    fields = (gset.positions, gset.rotations, gset.log_scales,
              gset.sh_coeffs, gset.opacity_logits)
    with open(path, "wb") as fh:
        fh.write(SCENE_MAGIC)
        fh.write(struct.pack("<III", SCENE_VERSION, len(gset), gset.sh_degree))
        for arr in fields:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_scene(path, cap=GAUSSIAN_CAP) -> GaussianSet:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(SCENE_MAGIC) + 12:
        raise SceneFileError(f"scene file truncated or empty: {path}")
    if blob[:len(SCENE_MAGIC)] != SCENE_MAGIC:
        raise SceneFileError(f"bad magic in scene file: {path}")
    version, n, degree = struct.unpack_from("<III", blob, len(SCENE_MAGIC))
    if version != SCENE_VERSION:
        raise SceneFileError(f"scene file version {version}, expected {SCENE_VERSION}")
    if n > cap:
        raise SceneFileError(f"scene file holds {n} gaussians, over the cap {cap}")
    if not 0 <= degree <= 3:
        raise SceneFileError(f"scene file sh degree {degree} out of range")
    widths = (3, 4, 3, 3 * sh_coeff_count(degree), 1)
    need = len(SCENE_MAGIC) + 12 + 4 * n * sum(widths)
    if len(blob) != need:
        raise SceneFileError(f"scene file length {len(blob)} != expected {need} (truncated?)")
    off = len(SCENE_MAGIC) + 12
    fields = []
    for width in widths:
        cnt = n * width
        arr = np.frombuffer(blob, dtype="<f4", count=cnt, offset=off).reshape(n, width)
        fields.append(arr.astype(np.float32))
        off += 4 * cnt
    return GaussianSet(*fields, sh_degree=degree).validate(cap=cap)
