"""Expected screen-space covariance for the on-axis isotropic case.

Route: differentiate the pinhole map (u, v) = (fx*tx/tz + cx, fy*ty/tz + cy)
numerically around the camera-space center to obtain the 2x3 Jacobian, then
form J @ Sigma_cam @ J.T. The closed form for an isotropic Gaussian of std
sigma on the optical axis at depth d is (fx*sigma/d)^2 on the diagonal.
"""
import numpy as np


def pinhole(t, fx, fy):
    return np.array([fx * t[0] / t[2], fy * t[1] / t[2]])


def numeric_jacobian(t, fx, fy, eps=1e-7):
    jac = np.zeros((2, 3))
    for k in range(3):
        hi = np.array(t, dtype=float)
        lo = np.array(t, dtype=float)
        hi[k] += eps
        lo[k] -= eps
        jac[:, k] = (pinhole(hi, fx, fy) - pinhole(lo, fx, fy)) / (2 * eps)
    return jac


if __name__ == "__main__":
    fx = fy = 48.0
    sigma = 0.2
    d = 2.5
    jac = numeric_jacobian([0.0, 0.0, d], fx, fy)
    cov2d = jac @ (sigma ** 2 * np.eye(3)) @ jac.T
    print("numeric J:")
    print(repr(jac))
    print("J Sigma J^T:")
    print(repr(cov2d))
    print("closed form (fx*sigma/d)^2 =", (fx * sigma / d) ** 2)

    # off-axis generic case, frozen for a spot check (before the low-pass floor)
    t = np.array([0.3, -0.2, 1.7])
    jac2 = numeric_jacobian(t, fx, fy)
    cov3 = np.diag([0.05, 0.02, 0.09])
    print("off-axis J Sigma J^T:")
    print(repr(jac2 @ cov3 @ jac2.T))
