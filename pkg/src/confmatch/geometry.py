"""Ground-truth correspondence synthesis from planar homographies.

Supervision targets for the matching pipeline are derived from known 3x3
projective maps instead of depth and camera poses.  Conventions used
throughout the package:

* points are (x, y) with x along columns and y along rows;
* grid cell (row, col) has its center at (col + 0.5, row + 0.5) in grid
  units, and flat index row * width + col;
* a homography stored in pixel units is rescaled with :meth:`Homography.rescaled`
  before being applied to coarse- or fine-grid coordinates.
"""

import math
from dataclasses import dataclass

import numpy as np


class DegenerateWarpError(ValueError):
    """Projective denominator vanished at the requested point."""


class InvalidGroundTruthError(ValueError):
    """A ground-truth assignment violated the one-to-one invariant."""


_DEN_EPS = 1e-9


@dataclass(frozen=True)
class Homography:
    """3x3 projective map from image1 to image2, normalized so h[2, 2] == 1."""

    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.float64)
        if h.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {h.shape}")
        if abs(h[2, 2]) < _DEN_EPS:
            raise DegenerateWarpError("h[2,2] is ~0; cannot normalize")
        h = h / h[2, 2]
        if abs(np.linalg.det(h)) < 1e-12:
            raise DegenerateWarpError("homography is singular")
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx, ty):
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def from_flat(cls, values):
        """Build from 9 row-major scalars (the JSON corpus encoding)."""
        v = np.asarray(list(values), dtype=np.float64)
        if v.size != 9:
            raise ValueError("expected 9 row-major values")
        return cls(v.reshape(3, 3))

    def to_flat(self):
        return [float(v) for v in self.h.ravel()]

    def inverse(self):
        return Homography(np.linalg.inv(self.h))

    def rescaled(self, scale):
        """The same map expressed in coordinates divided by `scale`.

        A pixel-unit homography becomes a coarse-grid one with scale=8 and a
        fine-grid one with scale=2 (continuous coords p = scale * g).
        """
        pre = np.diag([scale, scale, 1.0])
        post = np.diag([1.0 / scale, 1.0 / scale, 1.0])
        return Homography(post @ self.h @ pre)


@dataclass(frozen=True)
class CorrespondenceField:
    """Per-cell warp targets of one coarse grid into another.

    `target[r, c]` is the (x, y) position of cell (r, c)'s center after the
    warp, in the second grid's units; NaN where `valid[r, c]` is False.
    """

    width: int
    height: int
    target: np.ndarray
    valid: np.ndarray


@dataclass(frozen=True)
class GtAssignment:
    """Bundle of supervision targets for one image pair."""

    pc_gt: np.ndarray            # (n, n) binary coarse assignment
    pf_gt: np.ndarray | None     # (M, w*w, w*w) binary per-coarse-match stack
    offsets_gt: np.ndarray | None  # (K, 2) stage-2 target offsets, fine units


def warp_point(h: Homography, p):
    """Apply the projective map to a single (x, y) point."""
    x, y = float(p[0]), float(p[1])
    m = h.h
    den = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(den) < _DEN_EPS:
        raise DegenerateWarpError(f"denominator {den:.3e} at ({x}, {y})")
    return np.array(
        [
            (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / den,
            (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / den,
        ]
    )


def warp_points(h: Homography, pts):
    """Vectorized warp of an (N, 2) array of (x, y) points."""
    out, ok = _warp_with_mask(h, pts)
    if not ok.all():
        raise DegenerateWarpError("projective denominator vanished")
    return out


def _warp_with_mask(h, pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    ones = np.ones((pts.shape[0], 1))
    hom = np.concatenate([pts, ones], axis=1) @ h.h.T
    den = hom[:, 2]
    ok = np.abs(den) >= _DEN_EPS
    safe = np.where(ok, den, 1.0)
    out = hom[:, :2] / safe[:, None]
    out[~ok] = np.nan
    return out, ok


def build_correspondence_field(h: Homography, width: int, height: int) -> CorrespondenceField:
    """Warp every cell center of a (height x width) grid; cells landing
    outside [0, width) x [0, height) are marked invalid, not errors."""
    if width < 1 or height < 1:
        raise ValueError("grid dims must be >= 1x1")
    cols, rows = np.meshgrid(np.arange(width), np.arange(height))
    centers = np.stack([cols + 0.5, rows + 0.5], axis=-1).reshape(-1, 2)
    warped, ok = _warp_with_mask(h, centers)
    inb = (
        ok
        & (warped[:, 0] >= 0.0)
        & (warped[:, 0] < width)
        & (warped[:, 1] >= 0.0)
        & (warped[:, 1] < height)
    )
    target = warped.reshape(height, width, 2)
    valid = inb.reshape(height, width)
    target[~valid] = np.nan
    return CorrespondenceField(width=width, height=height, target=target, valid=valid)


def build_coarse_gt(field: CorrespondenceField) -> np.ndarray:
    """Binary one-to-one coarse assignment from a correspondence field.

    Cell i maps to the cell containing its warped target (the nearest cell
    center, always within 0.5 cell).  Collisions keep the lowest source
    index.
    """
    w, hgt = field.width, field.height
    n = w * hgt
    pc = np.zeros((n, n), dtype=np.uint8)
    taken = np.zeros(n, dtype=bool)
    for r in range(hgt):
        for c in range(w):
            if not field.valid[r, c]:
                continue
            tx, ty = field.target[r, c]
            j = int(math.floor(ty)) * w + int(math.floor(tx))
            if taken[j]:
                continue
            taken[j] = True
            pc[r * w + c, j] = 1
    return pc


def build_conf_gt(pc_gt):
    """Row sums and column sums of the coarse assignment: per-cell binary
    matchability targets for image1 and image2."""
    pc = np.asarray(pc_gt)
    t1 = pc.sum(axis=1).astype(np.float64)
    t2 = pc.sum(axis=0).astype(np.float64)
    if (t1 > 1).any() or (t2 > 1).any():
        raise InvalidGroundTruthError("assignment is not one-to-one")
    return t1, t2


def build_patch_assignment(h_fine: Homography, origin1, origin2, window: int) -> np.ndarray:
    """Binary one-to-one assignment between two `window`-sized fine-grid
    patches under a fine-grid homography.

    `origin1`/`origin2` are the (row, col) of each patch's top-left cell in
    the global fine grid.  Same nearest-cell and collision rules as
    :func:`build_coarse_gt`.
    """
    r1, c1 = origin1
    r2, c2 = origin2
    n = window * window
    pf = np.zeros((n, n), dtype=np.uint8)
    taken = np.zeros(n, dtype=bool)
    for lr in range(window):
        for lc in range(window):
            center = (c1 + lc + 0.5, r1 + lr + 0.5)
            try:
                tx, ty = warp_point(h_fine, center)
            except DegenerateWarpError:
                continue
            jc = int(math.floor(tx - c2))
            jr = int(math.floor(ty - r2))
            if not (0 <= jc < window and 0 <= jr < window):
                continue
            j = jr * window + jc
            if taken[j]:
                continue
            taken[j] = True
            pf[lr * window + lc, j] = 1
    return pf
