"""Diffused skinning-weight field on a regular grid in canonical space.

The field is built by nearest-neighbor assignment from the body surface,
smoothed by damped iterative neighbor averaging (driving down an L1
1-ring discrepancy energy), and queried with trilinear interpolation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .kinematics import CanonicalBody


@dataclass
class WeightGrid:
    """Per-joint skinning weights on an R^3 lattice of R x R x R nodes.

    Node (i, j, k) sits at bbox_min + (i, j, k) * spacing with spacing
    (bbox_max - bbox_min) / (R - 1); weights has shape (R, R, R, J) and
    every node's weight vector lies on the probability simplex.
    """

    bbox_min: np.ndarray
    bbox_max: np.ndarray
    resolution: int
    weights: np.ndarray  # (R, R, R, J)

    def __post_init__(self):
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        R = self.resolution
        if self.weights.shape[:3] != (R, R, R):
            raise ValidationError("weights must be (R, R, R, J)")
        if np.any(self.bbox_max <= self.bbox_min):
            raise ValidationError("degenerate bbox")
        sums = self.weights.sum(axis=-1)
        if np.any(self.weights < -1e-6) or np.abs(sums - 1.0).max() > 1e-6:
            raise ValidationError("grid node weights must lie on the simplex")

    @property
    def joint_count(self) -> int:
        return self.weights.shape[-1]

    def node_coordinates(self) -> np.ndarray:
        """(R, R, R, 3) lattice positions, x-fastest in the flattened order."""
        R = self.resolution
        axes = [np.linspace(self.bbox_min[a], self.bbox_max[a], R) for a in range(3)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)


def body_field_bbox(body: CanonicalBody, margin: float = 0.10) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bbox around the body with a relative margin per side (>= 5%)."""
    if margin < 0.05:
        raise ValidationError("field bbox margin must be at least 5%")
    return body.bbox(margin)


def diffuse_nn(
    body: CanonicalBody, bbox: tuple[np.ndarray, np.ndarray], resolution: int
) -> WeightGrid:
    """Nearest-neighbor diffusion of the body's skinning weights onto the grid.

    Every node takes the weights of its nearest dense surface point; exact
    distance ties resolve to the lowest point index.
    """
    if resolution < 8:
        raise ValidationError(f"grid resolution {resolution} < 8")
    if body.point_count < 1:
        raise ValidationError("empty body")
    lo, hi = np.asarray(bbox[0], dtype=np.float64), np.asarray(bbox[1], dtype=np.float64)
    axes = [np.linspace(lo[a], hi[a], resolution) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    tree = cKDTree(body.points)
    if body.point_count == 1:
        idx = np.zeros(len(nodes), dtype=np.int64)
    else:
        d, i = tree.query(nodes, k=2)
        idx = i[:, 0].copy()
        tied = d[:, 1] - d[:, 0] <= 1e-12 * np.maximum(d[:, 0], 1.0)
        idx[tied] = np.minimum(i[tied, 0], i[tied, 1])
    w = body.lbs_weights[idx].reshape(resolution, resolution, resolution, -1)
    return WeightGrid(lo, hi, resolution, w)


def _neighbor_average(w: np.ndarray) -> np.ndarray:
    """Mean of the 6-connected neighbors; boundary nodes use the ones that exist."""
    total = np.zeros_like(w)
    count = np.zeros(w.shape[:3])
    for axis in range(3):
        for sign in (1, -1):
            shifted = np.roll(w, sign, axis=axis)
            sl = [slice(None)] * 3
            sl[axis] = slice(0, 1) if sign == 1 else slice(-1, None)
            valid = np.ones(w.shape[:3], dtype=bool)
            valid[tuple(sl)] = False
            total += np.where(valid[..., None], shifted, 0.0)
            count += valid
    return total / count[..., None]


def smoothing_energy(grid: WeightGrid) -> float:
    """Sum over nodes of the L1 distance to the 6-neighborhood average."""
    avg = _neighbor_average(grid.weights)
    return float(np.abs(grid.weights - avg).sum())


def smooth(
    grid: WeightGrid,
    max_iterations: int = 24,
    tolerance: float = 1e-5,
    damping: float = 0.5,
) -> WeightGrid:
    """Damped Jacobi smoothing of the weight field.

    Each iteration moves every node toward its 6-neighborhood average
    (w <- (1 - damping) * w + damping * avg), which keeps nodes on the
    simplex by convexity. Stops when the mean per-node L1 change drops
    below `tolerance` or after `max_iterations`. The returned grid never
    has higher L1 smoothing energy than the input (the best intermediate
    state is kept if a late iteration were to regress).
    """
    if max_iterations < 0:
        raise ValidationError("max_iterations must be >= 0")
    if max_iterations == 0:
        return grid
    w = grid.weights.copy()
    best_w = w
    best_energy = smoothing_energy(grid)
    for _ in range(max_iterations):
        new = (1.0 - damping) * w + damping * _neighbor_average(w)
        new = np.clip(new, 0.0, None)
        new /= new.sum(axis=-1, keepdims=True)
        change = np.abs(new - w).sum(axis=-1).mean()
        w = new
        energy = smoothing_energy(WeightGrid(grid.bbox_min, grid.bbox_max, grid.resolution, w))
        if energy < best_energy:
            best_energy = energy
            best_w = w
        if change < tolerance:
            break
    return WeightGrid(grid.bbox_min, grid.bbox_max, grid.resolution, best_w)


def query(grid: WeightGrid, points: np.ndarray) -> np.ndarray:
    """Trilinear lookup, renormalized to the simplex.

    Accepts a single point (3,) or a batch (N, 3); out-of-bbox points are
    clamped to the boundary before interpolation.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    R = grid.resolution
    span = grid.bbox_max - grid.bbox_min
    t = np.clip((p - grid.bbox_min) / span * (R - 1), 0.0, R - 1)
    i0 = np.minimum(t.astype(np.int64), R - 2)
    f = t - i0
    w = grid.weights
    out = np.zeros((len(p), grid.joint_count))
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                coef = (
                    (f[:, 0] if dx else 1 - f[:, 0])
                    * (f[:, 1] if dy else 1 - f[:, 1])
                    * (f[:, 2] if dz else 1 - f[:, 2])
                )
                out += coef[:, None] * w[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
    out = np.clip(out, 0.0, None)
    out /= out.sum(axis=1, keepdims=True)
    return out[0] if np.asarray(points).ndim == 1 else out


def midplane_slice(grid: WeightGrid, axis: int = 0) -> np.ndarray:
    """(R, R, J) slice through the bbox center, for visual inspection."""
    if axis not in (0, 1, 2):
        raise ValidationError("axis must be 0, 1 or 2")
    mid = grid.resolution // 2
    sl = [slice(None)] * 3
    sl[axis] = mid
    return grid.weights[tuple(sl)]


def build_field(
    body: CanonicalBody,
    resolution: int = 48,
    margin: float = 0.10,
    max_iterations: int = 24,
    tolerance: float = 1e-5,
) -> WeightGrid:
    """diffuse_nn + smooth with the package defaults."""
    grid = diffuse_nn(body, body_field_bbox(body, margin), resolution)
    return smooth(grid, max_iterations=max_iterations, tolerance=tolerance)
