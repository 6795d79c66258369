"""Bilinear interpolation then across-plane product, written longhand.

Route: the four-corner weighted sum w00*(1-fx)*(1-fy) + ... evaluated with
explicit scalar arithmetic for one point in each of three planes, then the
elementwise product across planes. Freezes the cell-midpoint example used by
the feature-grid tests.
"""
import numpy as np


def bilinear(corner_vals, fx, fy):
    v00, v10, v01, v11 = corner_vals  # (x,y) = (0,0), (1,0), (0,1), (1,1)
    return (v00 * (1 - fx) * (1 - fy) + v10 * fx * (1 - fy)
            + v01 * (1 - fx) * fy + v11 * fx * fy)


if __name__ == "__main__":
    rng = np.random.default_rng(5)
    feats = []
    for plane in range(3):
        corners = [rng.normal(0, 1.0, 2) for _ in range(4)]
        print(f"plane {plane} corners:")
        for c in corners:
            print(" ", repr(c))
        feats.append(bilinear(corners, 0.5, 0.5))
    prod = feats[0] * feats[1] * feats[2]
    print("midpoint per-plane values:", [repr(f) for f in feats])
    print("hadamard product:", repr(prod))
