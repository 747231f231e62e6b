"""Point-set distances, density statistics, and density-adaptive sampling."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .kinematics import CanonicalBody, QuerySet

KNN_K = 5  # neighbors used for the density radius

# Reporting conventions for evaluation tables: Chamfer in 1e-4 m^2 units,
# normal discrepancy in 1e-1 units.
CHAMFER_REPORT_SCALE = 1e4
NORMAL_REPORT_SCALE = 1e1


@dataclass
class ClothedScan:
    """A point set with unit normals; the training/evaluation target.

    `garment_mask` is optional synthetic-data metadata (True where the point
    belongs to the garment rather than the body); it is not serialized into
    PLY files.
    """

    points: np.ndarray  # (M, 3)
    normals: np.ndarray  # (M, 3) unit
    garment_mask: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if len(self.points) < 1:
            raise ValidationError("scan must contain at least one point")
        if self.points.shape != self.normals.shape or self.points.shape[1] != 3:
            raise ValidationError("scan points/normals must be matching (M, 3) arrays")
        if not np.isfinite(self.points).all():
            raise ValidationError("scan contains non-finite coordinates")
        err = np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max()
        if err > 1e-6:
            raise ValidationError(f"scan normals not unit length (max deviation {err:.2e})")
        if self.garment_mask is not None:
            self.garment_mask = np.asarray(self.garment_mask, dtype=bool)
            if self.garment_mask.shape != (len(self.points),):
                raise ValidationError("garment_mask length mismatch")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class DensityStats:
    """Per-point kNN radius with its population mean/stddev."""

    radius: np.ndarray  # (N,)
    mean: float
    std: float

    @classmethod
    def from_radii(cls, radius: np.ndarray) -> "DensityStats":
        radius = np.asarray(radius, dtype=np.float64)
        return cls(radius, float(radius.mean()), float(radius.std()))


class ChamferResult(NamedTuple):
    value: float  # m^2
    index_xy: np.ndarray  # (N,) nearest-Y index per X point
    index_yx: np.ndarray  # (M,) nearest-X index per Y point


def chamfer(X: np.ndarray, Y: np.ndarray) -> ChamferResult:
    """Bi-directional mean squared nearest-neighbor distance.

    Returns the value along with both correspondence maps so the normal
    term can reuse them.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) < 1 or len(Y) < 1:
        raise ValidationError("chamfer needs nonempty point sets")
    d_xy, idx_xy = cKDTree(Y).query(X)
    d_yx, idx_yx = cKDTree(X).query(Y)
    value = float((d_xy**2).mean() + (d_yx**2).mean())
    return ChamferResult(value, idx_xy, idx_yx)


def normal_l1(X_normals: np.ndarray, Y_normals: np.ndarray, index_xy: np.ndarray) -> float:
    """Mean L1 gap between each X normal and its matched ground-truth normal."""
    X_normals = np.asarray(X_normals, dtype=np.float64)
    Y_normals = np.asarray(Y_normals, dtype=np.float64)
    for name, n in (("X", X_normals), ("Y", Y_normals)):
        err = np.abs(np.linalg.norm(n, axis=1) - 1.0).max()
        if err > 1e-3:
            raise ValidationError(f"{name} normals not unit length (max deviation {err:.2e})")
    return float(np.abs(X_normals - Y_normals[index_xy]).sum(axis=1).mean())


def knn_radius(points: np.ndarray, k: int = KNN_K) -> DensityStats:
    """Mean distance of each point to its k nearest other points."""
    points = np.asarray(points, dtype=np.float64)
    N = len(points)
    if N <= k:
        raise ValidationError(f"need more than k={k} points, got {N}")
    d, _ = cKDTree(points).query(points, k=k + 1)
    return DensityStats.from_radii(d[:, 1:].mean(axis=1))


def adaptive_reg_weights(stats: DensityStats, base_lambda: float) -> np.ndarray:
    """Zero regularization for sparse outliers (radius above mean + 2 std)."""
    return np.where(stats.radius > stats.mean + 2.0 * stats.std, 0.0, base_lambda)


def resample_weights(
    stats: DensityStats, point_triangle: np.ndarray, triangle_count: int
) -> np.ndarray:
    """Per-triangle sampling boost eta from the sparse-point rule.

    A point whose radius exceeds mean + 2 std contributes
    2^((radius - mean) / std) to its source triangle; a triangle's eta is
    the max over its contributing points, zero elsewhere.
    """
    point_triangle = np.asarray(point_triangle, dtype=np.int64)
    if len(point_triangle) != len(stats.radius):
        raise ValidationError("point -> triangle map length mismatch")
    eta = np.zeros(triangle_count)
    flagged = stats.radius > stats.mean + 2.0 * stats.std
    if not flagged.any():
        return eta
    tri = point_triangle[flagged]
    if tri.min() < 0 or tri.max() >= triangle_count:
        raise ValidationError("flagged point maps to no valid triangle")
    boost = 2.0 ** ((stats.radius[flagged] - stats.mean) / stats.std)
    np.maximum.at(eta, tri, boost)
    return eta


def sample_surface(
    body: CanonicalBody,
    n: int,
    triangle_boost: np.ndarray | None = None,
    rng: np.random.Generator | int | None = None,
) -> QuerySet:
    """Draws n surface queries, triangle probability ~ area * (1 + eta).

    Within a triangle, sampling is uniform barycentric; uv, normals and
    skinning weights are barycentrically interpolated from the vertices.
    Deterministic for a given seed/generator.
    """
    if n < 1:
        raise ValidationError("sample count must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    areas = body.triangle_areas()
    if areas.sum() <= 0:
        raise ValidationError("body triangles have zero total area")
    boost = np.zeros(len(areas)) if triangle_boost is None else np.asarray(triangle_boost)
    if boost.shape != areas.shape:
        raise ValidationError("triangle_boost must have one entry per triangle")
    p = areas * (1.0 + boost)
    p = p / p.sum()
    tri = rng.choice(len(areas), size=n, p=p)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1.0 - r1, r1 * (1.0 - r2), r1 * r2], axis=1)
    vi = body.triangles[tri]
    pts = np.einsum("nk,nkd->nd", bary, body.vertices[vi])
    nrm = np.einsum("nk,nkd->nd", bary, body.vertex_normals[vi])
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    uv = np.einsum("nk,nkd->nd", bary, body.vertex_uv[vi])
    w = np.einsum("nk,nkd->nd", bary, body.vertex_lbs[vi])
    w = np.clip(w, 0.0, None)
    w /= w.sum(axis=1, keepdims=True)
    return QuerySet(pts, nrm, uv, w, tri.astype(np.int64))


def max_nn_distance(probes: np.ndarray, points: np.ndarray) -> float:
    """Largest distance from any probe to its nearest point (coverage gap)."""
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    d, _ = cKDTree(np.asarray(points, dtype=np.float64)).query(probes)
    return float(d.max())


def mean_point_spacing(points: np.ndarray) -> float:
    """Mean nearest-neighbor distance within a point set."""
    d, _ = cKDTree(points).query(points, k=2)
    return float(d[:, 1].mean())
