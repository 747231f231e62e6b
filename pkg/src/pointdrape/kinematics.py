"""Articulated body representation, forward kinematics, and linear blend skinning.

Coordinate conventions: y is up, x is lateral (left leg on +x), z is forward.
All transforms map canonical-pose coordinates to posed-space coordinates and
are represented as rotation+translation pairs, applied in homogeneous 4x4
form. Blended transforms are plain affine combinations of the per-joint
matrices (standard LBS, no re-orthonormalization).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

ROOT_PARENT = -1


def axis_angle_to_matrix(aa: np.ndarray) -> np.ndarray:
    """Rodrigues' formula. aa is (..., 3); returns (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    # Guard the zero-angle case; the limit of the formula is the identity.
    small = theta < 1e-12
    axis = np.where(small, 0.0, aa / np.where(small, 1.0, theta))
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack(
        [
            np.stack([zero, -z, y], axis=-1),
            np.stack([z, zero, -x], axis=-1),
            np.stack([-y, x, zero], axis=-1),
        ],
        axis=-2,
    )
    t = theta[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(t) * K + (1.0 - np.cos(t)) * (K @ K)


def _check_rotation(R: np.ndarray, tol: float = 1e-9) -> None:
    err = np.abs(R.T @ R - np.eye(3)).max()
    if err > tol:
        raise ValidationError(f"rotation not orthonormal (max deviation {err:.2e})")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValidationError("rotation determinant != +1")


@dataclass
class RigidTransform:
    """A canonical-to-posed rigid map: x -> rotation @ x + translation."""

    rotation: np.ndarray  # (3, 3)
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValidationError("RigidTransform needs a 3x3 rotation and 3-vector translation")
        _check_rotation(self.rotation)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Returns self ∘ other (apply `other` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass
class Skeleton:
    """Joint tree with canonical joint positions (meters)."""

    parent: np.ndarray  # (J,) int, ROOT_PARENT for the root
    joint_position: np.ndarray  # (J, 3) canonical pose
    joint_name: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.parent = np.asarray(self.parent, dtype=np.int64)
        self.joint_position = np.asarray(self.joint_position, dtype=np.float64)
        J = self.joint_count
        if J < 2:
            raise ValidationError("skeleton needs at least 2 joints")
        if self.joint_position.shape != (J, 3):
            raise ValidationError("joint_position must be (J, 3)")
        if self.parent[0] != ROOT_PARENT:
            raise ValidationError("joint 0 must be the root")
        if not self.joint_name:
            self.joint_name = [f"joint{j}" for j in range(J)]
        self._check_tree()

    @property
    def joint_count(self) -> int:
        return len(self.parent)

    def _check_tree(self) -> None:
        for j in range(1, self.joint_count):
            seen = set()
            k = j
            while k != 0:
                if k in seen or not (0 <= k < self.joint_count):
                    raise ValidationError(f"parent indices do not form a tree (joint {j})")
                seen.add(k)
                k = int(self.parent[k])

    def topological_order(self) -> list[int]:
        order, pending = [0], list(range(1, self.joint_count))
        placed = {0}
        while pending:
            progressed = False
            for j in list(pending):
                if int(self.parent[j]) in placed:
                    order.append(j)
                    placed.add(j)
                    pending.remove(j)
                    progressed = True
            if not progressed:  # unreachable for a validated tree
                raise ValidationError("cyclic parent graph")
        return order


@dataclass
class Pose:
    """Per-joint axis-angle rotations plus a root translation."""

    axis_angle: np.ndarray  # (J, 3)
    root_translation: np.ndarray  # (3,)

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.axis_angle.ndim != 2 or self.axis_angle.shape[1] != 3:
            raise ValidationError("axis_angle must be (J, 3)")
        if self.root_translation.shape != (3,):
            raise ValidationError("root_translation must be a 3-vector")

    @classmethod
    def identity(cls, joint_count: int) -> "Pose":
        return cls(np.zeros((joint_count, 3)), np.zeros(3))

    @property
    def joint_count(self) -> int:
        return self.axis_angle.shape[0]


@dataclass
class CanonicalBody:
    """The unclothed template: a dense surface point set plus its source mesh.

    `points`, `normals`, `uv` and `lbs_weights` describe the dense query
    point set; the vertex/triangle tables carry the same attributes on the
    mesh used for barycentric interpolation and area-weighted sampling.
    `point_triangle` maps each dense point to its source triangle.
    """

    skeleton: Skeleton
    points: np.ndarray  # (N, 3)
    normals: np.ndarray  # (N, 3) unit
    uv: np.ndarray  # (N, 2) in [0, 1]^2
    lbs_weights: np.ndarray  # (N, J) rows on the simplex
    vertices: np.ndarray  # (V, 3)
    vertex_normals: np.ndarray  # (V, 3)
    vertex_uv: np.ndarray  # (V, 2)
    vertex_lbs: np.ndarray  # (V, J)
    triangles: np.ndarray  # (F, 3) int
    point_triangle: np.ndarray | None = None  # (N,) int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.uv = np.asarray(self.uv, dtype=np.float64)
        self.lbs_weights = np.asarray(self.lbs_weights, dtype=np.float64)
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.vertex_normals = np.asarray(self.vertex_normals, dtype=np.float64)
        self.vertex_uv = np.asarray(self.vertex_uv, dtype=np.float64)
        self.vertex_lbs = np.asarray(self.vertex_lbs, dtype=np.float64)
        self.triangles = np.asarray(self.triangles, dtype=np.int64)
        if self.point_triangle is not None:
            self.point_triangle = np.asarray(self.point_triangle, dtype=np.int64)
        self.validate()

    @property
    def joint_count(self) -> int:
        return self.skeleton.joint_count

    @property
    def point_count(self) -> int:
        return len(self.points)

    def validate(self) -> None:
        N, J = self.points.shape[0], self.joint_count
        if N < 1:
            raise ValidationError("body has no points")
        if self.lbs_weights.shape != (N, J):
            raise ValidationError("lbs_weights must be (N, J)")
        if np.any(self.lbs_weights < -1e-9):
            raise ValidationError("negative skinning weight")
        if np.abs(self.lbs_weights.sum(axis=1) - 1.0).max() > 1e-9:
            raise ValidationError("skinning weights must sum to 1")
        if np.abs(np.linalg.norm(self.normals, axis=1) - 1.0).max() > 1e-9:
            raise ValidationError("point normals must be unit length")
        if self.uv.min() < 0.0 or self.uv.max() > 1.0:
            raise ValidationError("uv coordinates must lie in [0, 1]^2")
        if self.triangles.max() >= len(self.vertices):
            raise ValidationError("triangle index out of range")

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def bbox(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.points.min(axis=0), self.points.max(axis=0)
        pad = margin * (hi - lo)
        return lo - pad, hi + pad


@dataclass
class QuerySet:
    """Body-surface query points with the per-point attributes the model consumes."""

    points: np.ndarray  # (N, 3) canonical positions
    normals: np.ndarray  # (N, 3)
    uv: np.ndarray  # (N, 2)
    lbs_weights: np.ndarray  # (N, J)
    triangle_id: np.ndarray  # (N,) int

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, idx: np.ndarray) -> "QuerySet":
        return QuerySet(
            self.points[idx],
            self.normals[idx],
            self.uv[idx],
            self.lbs_weights[idx],
            self.triangle_id[idx],
        )

    @staticmethod
    def concatenate(parts: list["QuerySet"]) -> "QuerySet":
        return QuerySet(
            np.concatenate([p.points for p in parts]),
            np.concatenate([p.normals for p in parts]),
            np.concatenate([p.uv for p in parts]),
            np.concatenate([p.lbs_weights for p in parts]),
            np.concatenate([p.triangle_id for p in parts]),
        )


def forward_kinematics(skeleton: Skeleton, pose: Pose) -> list[RigidTransform]:
    """Per-joint canonical-to-posed transforms.

    Each joint rotates about its own canonical position; the root transform
    additionally carries the root translation. Child transforms compose
    parent-to-child along the tree, so T_j maps any canonical-space point
    into the posed space as seen by joint j.
    """
    J = skeleton.joint_count
    if pose.joint_count != J:
        raise ValidationError(f"pose has {pose.joint_count} joints, skeleton has {J}")
    R = axis_angle_to_matrix(pose.axis_angle)
    out: list[RigidTransform | None] = [None] * J
    for j in skeleton.topological_order():
        c = skeleton.joint_position[j]
        # rotation about the joint's canonical position
        local = RigidTransform(R[j], c - R[j] @ c)
        if j == 0:
            shift = RigidTransform(np.eye(3), pose.root_translation)
            out[j] = shift.compose(local)
        else:
            out[j] = out[int(skeleton.parent[j])].compose(local)
    return out  # type: ignore[return-value]


def stack_transforms(transforms: list[RigidTransform]) -> np.ndarray:
    """(J, 4, 4) homogeneous matrices."""
    return np.stack([t.as_matrix() for t in transforms])


def blend_transforms(weights: np.ndarray, transforms: list[RigidTransform]) -> np.ndarray:
    """Weighted sum of the per-joint 4x4 matrices (affine; not re-projected)."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 1 or len(weights) != len(transforms):
        raise ValidationError("weights must be a vector matching the transform count")
    if weights.min() < -1e-6:
        raise ValidationError(f"negative blend weight {weights.min():.3e}")
    if abs(weights.sum() - 1.0) > 1e-6:
        raise ValidationError(f"blend weights sum to {weights.sum():.8f}, expected 1")
    return np.einsum("j,jab->ab", weights, stack_transforms(transforms))


def blend_transforms_batch(weights: np.ndarray, transforms: list[RigidTransform]) -> np.ndarray:
    """(N, J) weights x J transforms -> (N, 4, 4) blended matrices."""
    T = stack_transforms(transforms)
    return np.einsum("nj,jab->nab", np.asarray(weights, dtype=np.float64), T)


def pose_points(
    body: CanonicalBody, transforms: list[RigidTransform]
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Skins the body's dense point set.

    Returns (posed points, posed unit normals, degenerate flags). Normals
    are rotated by the blended linear part and renormalized; points whose
    blended linear part is near-singular are flagged and keep their
    canonical normal.
    """
    M = blend_transforms_batch(body.lbs_weights, transforms)
    posed = np.einsum("nab,nb->na", M[:, :3, :3], body.points) + M[:, :3, 3]
    n = np.einsum("nab,nb->na", M[:, :3, :3], body.normals)
    norms = np.linalg.norm(n, axis=1)
    degenerate = np.abs(np.linalg.det(M[:, :3, :3])) < 1e-9
    ok = ~degenerate & (norms > 1e-12)
    n = np.where(ok[:, None], n / np.where(norms[:, None] == 0, 1.0, norms[:, None]), body.normals)
    return posed, n, degenerate


def uv_positional_map(
    body: CanonicalBody, posed_points: np.ndarray, resolution: int
) -> tuple[np.ndarray, np.ndarray]:
    """Rasterizes posed coordinates onto the body's UV atlas.

    Each point lands in the pixel containing its uv; collisions keep the
    point whose uv is nearest the pixel center. Returns (resolution,
    resolution, 3) image and a boolean validity mask.
    """
    if resolution < 4:
        raise ValidationError(f"uv map resolution {resolution} < 4")
    posed_points = np.asarray(posed_points, dtype=np.float64)
    if posed_points.shape != (body.point_count, 3):
        raise ValidationError("posed_points must match the body's point count")
    px = np.clip((body.uv * resolution).astype(np.int64), 0, resolution - 1)
    centers = (px + 0.5) / resolution
    d2 = ((body.uv - centers) ** 2).sum(axis=1)
    pix = px[:, 1] * resolution + px[:, 0]
    # stable sort by (pixel, distance-to-center): ties keep the lowest index
    order = np.lexsort((d2, pix))
    keep = np.ones(len(order), dtype=bool)
    keep[1:] = pix[order[1:]] != pix[order[:-1]]
    winners = order[keep]
    image = np.zeros((resolution, resolution, 3))
    mask = np.zeros((resolution, resolution), dtype=bool)
    image.reshape(-1, 3)[pix[winners]] = posed_points[winners]
    mask.reshape(-1)[pix[winners]] = True
    return image, mask


def uv_query_grid(body: CanonicalBody, resolution: int) -> QuerySet:
    """Dense query set from the valid pixels of a resolution^2 UV grid.

    For every pixel center covered by a mesh triangle in UV space, the 3D
    position, normal, and skinning weights are barycentrically interpolated
    from that triangle. Deterministic; no randomness involved.
    """
    if resolution < 4:
        raise ValidationError(f"query resolution {resolution} < 4")
    uv0 = body.vertex_uv[body.triangles[:, 0]]
    uv1 = body.vertex_uv[body.triangles[:, 1]]
    uv2 = body.vertex_uv[body.triangles[:, 2]]
    pts, nrm, uvs, wts, tid = [], [], [], [], []
    taken = np.zeros((resolution, resolution), dtype=bool)
    for f in range(len(body.triangles)):
        a, b, c = uv0[f], uv1[f], uv2[f]
        lo = np.floor(np.minimum(np.minimum(a, b), c) * resolution).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c) * resolution).astype(int)
        lo = np.clip(lo, 0, resolution - 1)
        hi = np.clip(hi, 0, resolution)
        if hi[0] <= lo[0] or hi[1] <= lo[1]:
            continue
        gu, gv = np.meshgrid(
            (np.arange(lo[0], hi[0]) + 0.5) / resolution,
            (np.arange(lo[1], hi[1]) + 0.5) / resolution,
            indexing="ij",
        )
        p = np.stack([gu.ravel(), gv.ravel()], axis=1)
        det = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1])
        if abs(det) < 1e-16:
            continue
        w1 = ((p[:, 0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (p[:, 1] - a[1])) / det
        w2 = ((b[0] - a[0]) * (p[:, 1] - a[1]) - (p[:, 0] - a[0]) * (b[1] - a[1])) / det
        w0 = 1.0 - w1 - w2
        inside = (w0 >= -1e-12) & (w1 >= -1e-12) & (w2 >= -1e-12)
        if not inside.any():
            continue
        iu = np.clip((p[inside, 0] * resolution).astype(int), 0, resolution - 1)
        iv = np.clip((p[inside, 1] * resolution).astype(int), 0, resolution - 1)
        fresh = ~taken[iu, iv]
        if not fresh.any():
            continue
        taken[iu[fresh], iv[fresh]] = True
        bary = np.stack([w0[inside][fresh], w1[inside][fresh], w2[inside][fresh]], axis=1)
        vi = body.triangles[f]
        pts.append(bary @ body.vertices[vi])
        n = bary @ body.vertex_normals[vi]
        nrm.append(n / np.linalg.norm(n, axis=1, keepdims=True))
        uvs.append(p[inside][fresh])
        w = bary @ body.vertex_lbs[vi]
        w = np.clip(w, 0.0, None)
        wts.append(w / w.sum(axis=1, keepdims=True))
        tid.append(np.full(fresh.sum(), f, dtype=np.int64))
    if not pts:
        raise ValidationError("no valid UV pixels at this resolution")
    return QuerySet(
        np.concatenate(pts),
        np.concatenate(nrm),
        np.concatenate(uvs),
        np.concatenate(wts),
        np.concatenate(tid),
    )
