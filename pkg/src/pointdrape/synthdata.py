"""Procedural articulated test body and clothed-scan generator.

The body is a small (~0.65 m) 8-joint capsule mannequin: pelvis bar, torso,
and two legs (thigh/shin/foot). Skinning weights are an analytic falloff of
skeletal path distance to each bone, so each limb is near-rigid with smooth
blends at the joints. Garments are analytic frustum sheets around the
pelvis/legs whose ground-truth motion blends the two legs' transforms
smoothly across the midline; the generated skirt therefore stays continuous
between the legs for any pose, which is exactly the behavior a learned model
has to reproduce.

The generator's lateral sigmoid blend is *not* part of the learned pipeline;
the model has to discover an equivalent association on its own.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geometry import ClothedScan, sample_surface
from .kinematics import (
    CanonicalBody,
    Pose,
    ROOT_PARENT,
    Skeleton,
    forward_kinematics,
    stack_transforms,
    uv_query_grid,
)

JOINT_NAMES = ["pelvis", "spine", "hip_l", "knee_l", "ankle_l", "hip_r", "knee_r", "ankle_r"]
PELVIS, SPINE, HIP_L, KNEE_L, ANKLE_L, HIP_R, KNEE_R, ANKLE_R = range(8)


@dataclass
class CapsuleSpec:
    start: np.ndarray
    end: np.ndarray
    radius: float

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=np.float64)
        self.end = np.asarray(self.end, dtype=np.float64)
        if self.radius <= 0:
            raise ValidationError("capsule radius must be positive")
        if np.linalg.norm(self.end - self.start) < 1e-9:
            raise ValidationError("degenerate capsule axis")

    @property
    def length(self) -> float:
        return float(np.linalg.norm(self.end - self.start))


def _default_capsules() -> list[CapsuleSpec]:
    return [
        CapsuleSpec((-0.035, 0.40, 0.0), (0.035, 0.40, 0.0), 0.050),  # pelvis bar
        CapsuleSpec((0.0, 0.46, 0.0), (0.0, 0.585, 0.0), 0.055),  # torso
        CapsuleSpec((0.045, 0.38, 0.0), (0.045, 0.22, 0.0), 0.027),  # left thigh
        CapsuleSpec((0.045, 0.22, 0.0), (0.045, 0.09, 0.0), 0.022),  # left shin
        CapsuleSpec((0.045, 0.09, 0.0), (0.045, 0.02, 0.0), 0.019),  # left lower leg
        CapsuleSpec((-0.045, 0.38, 0.0), (-0.045, 0.22, 0.0), 0.027),  # right thigh
        CapsuleSpec((-0.045, 0.22, 0.0), (-0.045, 0.09, 0.0), 0.022),  # right shin
        CapsuleSpec((-0.045, 0.09, 0.0), (-0.045, 0.02, 0.0), 0.019),  # right lower leg
    ]


_DEFAULT_JOINTS = np.array(
    [
        [0.0, 0.40, 0.0],  # pelvis
        [0.0, 0.46, 0.0],  # spine
        [0.045, 0.38, 0.0],  # hip_l
        [0.045, 0.22, 0.0],  # knee_l
        [0.045, 0.09, 0.0],  # ankle_l
        [-0.045, 0.38, 0.0],  # hip_r
        [-0.045, 0.22, 0.0],  # knee_r
        [-0.045, 0.09, 0.0],  # ankle_r
    ]
)
_DEFAULT_PARENTS = np.array([ROOT_PARENT, PELVIS, PELVIS, HIP_L, KNEE_L, PELVIS, HIP_R, KNEE_R])

# Capsule i is driven by joint i (the capsule order above matches the joint
# order once legs are interleaved); bone_joint maps capsule -> joint.
_CAPSULE_JOINT = np.array([PELVIS, SPINE, HIP_L, KNEE_L, ANKLE_L, HIP_R, KNEE_R, ANKLE_R])


@dataclass
class SynthBodySpec:
    """Capsule mannequin layout plus meshing/sampling parameters."""

    capsules: list[CapsuleSpec] = field(default_factory=_default_capsules)
    joint_position: np.ndarray = field(default_factory=lambda: _DEFAULT_JOINTS.copy())
    parent: np.ndarray = field(default_factory=lambda: _DEFAULT_PARENTS.copy())
    weight_falloff: float = 0.012  # meters; bone-distance Gaussian scale
    azimuth_segments: int = 24
    rings_per_meter: int = 160  # axial mesh density
    point_resolution: int = 96  # UV-grid resolution of the dense point set
    uv_padding: float = 0.06  # within-tile padding fraction
    overlap_tolerance: float = 0.8  # non-adjacent capsules must stay this separated

    @property
    def joint_count(self) -> int:
        return len(self.parent)


@dataclass
class GarmentSpec:
    """Analytic garment sheet around the pelvis/legs."""

    kind: str = "skirt"  # skirt | dress | tight
    waist_height: float = 0.44
    waist_radius: float = 0.075
    hem_length: float = 0.24
    flare_angle: float = math.radians(18.0)
    blend_sharpness: float = 0.06  # lateral leg-blend scale (meters)
    wrinkle_amplitude: float = 0.010
    wrinkle_frequency: float = 8.0
    swing_coefficient: float = 0.05  # hem swing per radian of leg swing
    pelvis_follow_power: float = 2.0  # (1 - v)^p share of the pelvis transform

    def __post_init__(self):
        if self.kind not in ("skirt", "dress", "tight"):
            raise ValidationError(f"unknown garment kind {self.kind!r}")
        if self.hem_length <= 0:
            raise ValidationError("hem must lie below the waist")
        if self.wrinkle_amplitude < 0 or self.wrinkle_frequency < 0:
            raise ValidationError("wrinkle parameters must be nonnegative")
        if self.blend_sharpness <= 0:
            raise ValidationError("blend sharpness must be positive")

    @property
    def hem_radius(self) -> float:
        return self.waist_radius + self.hem_length * math.tan(self.flare_angle)

    def surface_area(self) -> float:
        slant = math.hypot(self.hem_length, self.hem_radius - self.waist_radius)
        return math.pi * (self.waist_radius + self.hem_radius) * slant


def default_garment(kind: str = "skirt") -> GarmentSpec:
    if kind == "skirt":
        return GarmentSpec()
    if kind == "dress":
        return GarmentSpec(
            kind="dress",
            waist_height=0.55,
            waist_radius=0.085,
            hem_length=0.33,
            flare_angle=math.radians(14.0),
        )
    if kind == "tight":
        return GarmentSpec(
            kind="tight",
            waist_radius=0.068,
            hem_length=0.20,
            flare_angle=math.radians(4.0),
            wrinkle_amplitude=0.006,
        )
    raise ValidationError(f"unknown garment kind {kind!r}")


# ---------------------------------------------------------------------------
# capsule surface parameterization
# ---------------------------------------------------------------------------


def _capsule_frame(cap: CapsuleSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = (cap.end - cap.start) / cap.length
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return e1, e2, d


def _capsule_surface(
    cap: CapsuleSpec, theta: np.ndarray, t: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Positions, outward normals, and arc-length axial coordinates for (theta, t).

    t in [0, 1] walks the profile arclength: bottom cap, cylinder, top cap.
    The returned axial coordinate is the profile arc position relative to
    the cylinder section (negative on the bottom cap, > length on the top
    cap) so that distances keep growing over the caps instead of collapsing
    to a tie plateau at the segment ends.
    """
    e1, e2, d = _capsule_frame(cap)
    r, L = cap.radius, cap.length
    arc = math.pi * r + L  # quarter-circle caps on both ends
    s = t * arc
    cap_arc = 0.5 * math.pi * r
    radial = np.outer(np.cos(theta), e1) + np.outer(np.sin(theta), e2)

    pos = np.empty((len(s), 3))
    nrm = np.empty((len(s), 3))

    lo = s < cap_arc
    hi = s > cap_arc + L
    mid = ~lo & ~hi

    phi = s[lo] / r
    n_lo = np.sin(phi)[:, None] * radial[lo] - np.cos(phi)[:, None] * d
    pos[lo] = cap.start + r * n_lo
    nrm[lo] = n_lo

    h = s[mid] - cap_arc
    pos[mid] = cap.start + np.outer(h, d) + r * radial[mid]
    nrm[mid] = radial[mid]

    phi = (s[hi] - cap_arc - L) / r
    n_hi = np.cos(phi)[:, None] * radial[hi] + np.sin(phi)[:, None] * d
    pos[hi] = cap.end + r * n_hi
    nrm[hi] = n_hi
    return pos, nrm, s - cap_arc


# ---------------------------------------------------------------------------
# analytic skinning weights
# ---------------------------------------------------------------------------


def _tree_distances(spec: SynthBodySpec) -> np.ndarray:
    """All-pairs path length between joints along the tree (edge = euclidean)."""
    J = spec.joint_count
    adj = np.full((J, J), np.inf)
    np.fill_diagonal(adj, 0.0)
    for j in range(1, J):
        p = int(spec.parent[j])
        d = float(np.linalg.norm(spec.joint_position[j] - spec.joint_position[p]))
        adj[j, p] = adj[p, j] = d
    for k in range(J):  # Floyd-Warshall; J is tiny
        adj = np.minimum(adj, adj[:, k : k + 1] + adj[k : k + 1, :])
    return adj


def _bone_portals(spec: SynthBodySpec) -> list[list[tuple[int, float]]]:
    """Per capsule: (joint id, axial coordinate) where the skeleton attaches."""
    portals: list[list[tuple[int, float]]] = []
    for c, cap in enumerate(spec.capsules):
        own = int(_CAPSULE_JOINT[c])
        e1, e2, d = _capsule_frame(cap)
        entries = [own] + [j for j in range(spec.joint_count) if spec.parent[j] == own]
        ax = []
        for j in entries:
            a = float(np.clip(np.dot(spec.joint_position[j] - cap.start, d), 0.0, cap.length))
            ax.append((j, a))
        portals.append(ax)
    return portals


def _skeletal_weights(
    spec: SynthBodySpec, capsule_id: np.ndarray, axial: np.ndarray
) -> np.ndarray:
    """Gaussian falloff of skeletal path distance from each point to each bone."""
    J = spec.joint_count
    tree_d = _tree_distances(spec)
    portals = _bone_portals(spec)
    # joint -> bone distance: zero once the path reaches any of the bone's portals
    joint_to_bone = np.full((J, len(spec.capsules)), np.inf)
    for c in range(len(spec.capsules)):
        for j_portal, _ in portals[c]:
            joint_to_bone[:, c] = np.minimum(joint_to_bone[:, c], tree_d[:, j_portal])
    D = np.full((len(axial), len(spec.capsules)), np.inf)
    for s in range(len(spec.capsules)):
        on_s = capsule_id == s
        if not on_s.any():
            continue
        x = axial[on_s]
        for t in range(len(spec.capsules)):
            if t == s:
                D[on_s, t] = 0.0
                continue
            best = np.full(x.shape, np.inf)
            for j_portal, a_portal in portals[s]:
                best = np.minimum(best, np.abs(x - a_portal) + joint_to_bone[j_portal, t])
            D[on_s, t] = best
    w = np.exp(-((D / spec.weight_falloff) ** 2))
    # capsule c is driven by joint _CAPSULE_JOINT[c]; accumulate per joint
    out = np.zeros((len(axial), J))
    for c in range(len(spec.capsules)):
        out[:, int(_CAPSULE_JOINT[c])] += w[:, c]
    out /= out.sum(axis=1, keepdims=True)
    return out


def _point_segment_distance(points: np.ndarray, cap: CapsuleSpec) -> np.ndarray:
    d = cap.end - cap.start
    t = np.clip((points - cap.start) @ d / (d @ d), 0.0, 1.0)
    closest = cap.start + t[:, None] * d
    return np.linalg.norm(points - closest, axis=1)


def _buried_vertices(
    spec: SynthBodySpec, capsule_id: np.ndarray, verts: np.ndarray, tol: float = 1.5e-3
) -> np.ndarray:
    """True where a vertex lies strictly inside some other capsule.

    Capsules overlap at the joints by construction; the buried cap/end
    regions are not part of the union surface and would poison both scans
    and the nearest-neighbor weight diffusion.
    """
    buried = np.zeros(len(verts), dtype=bool)
    for c, cap in enumerate(spec.capsules):
        inside = _point_segment_distance(verts, cap) < cap.radius - tol
        buried |= inside & (capsule_id != c)
    return buried


def _check_capsule_overlap(spec: SynthBodySpec) -> None:
    def seg_dist(a: CapsuleSpec, b: CapsuleSpec) -> float:
        # closest distance between two segments, sampled finely (robust enough here)
        ta = np.linspace(0, 1, 33)[:, None]
        pa = a.start + ta * (a.end - a.start)
        tb = np.linspace(0, 1, 33)[:, None]
        pb = b.start + tb * (b.end - b.start)
        return float(np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1).min())

    J = spec.joint_count
    adjacent = {(j, int(spec.parent[j])) for j in range(1, J)}
    adjacent |= {(b, a) for a, b in adjacent}
    for i in range(len(spec.capsules)):
        for j in range(i + 1, len(spec.capsules)):
            ji, jj = int(_CAPSULE_JOINT[i]), int(_CAPSULE_JOINT[j])
            if (ji, jj) in adjacent or ji == jj:
                continue
            lim = (spec.capsules[i].radius + spec.capsules[j].radius) * spec.overlap_tolerance
            if seg_dist(spec.capsules[i], spec.capsules[j]) < lim:
                raise ValidationError(
                    f"capsules {i} and {j} overlap beyond tolerance; adjust the spec"
                )


# ---------------------------------------------------------------------------
# body construction
# ---------------------------------------------------------------------------

_ATLAS_COLS, _ATLAS_ROWS = 4, 2


def _tile_uv(capsule_index: int, u: np.ndarray, v: np.ndarray, pad: float) -> np.ndarray:
    col, row = capsule_index % _ATLAS_COLS, capsule_index // _ATLAS_COLS
    tw, th = 1.0 / _ATLAS_COLS, 1.0 / _ATLAS_ROWS
    gu = (col + pad + u * (1.0 - 2.0 * pad)) * tw
    gv = (row + pad + v * (1.0 - 2.0 * pad)) * th
    return np.stack([gu, gv], axis=-1)


def build_body(spec: SynthBodySpec | None = None) -> CanonicalBody:
    """Meshes the capsule mannequin and derives the dense query point set.

    Each capsule gets its own UV tile (seam duplicated at theta = 2*pi).
    Tiny discs at the capsule poles are left open; they are irrelevant for
    point sampling and buried inside neighboring parts anyway.
    """
    spec = spec or SynthBodySpec()
    if len(spec.capsules) != spec.joint_count:
        raise ValidationError("expected one capsule per joint")
    _check_capsule_overlap(spec)
    skeleton = Skeleton(spec.parent, spec.joint_position, list(JOINT_NAMES))

    verts, vnrm, vuv, caps_id, axial, tris = [], [], [], [], [], []
    v_offset = 0
    t_eps = 0.02
    for c, cap in enumerate(spec.capsules):
        arc = math.pi * cap.radius + cap.length
        n_rings = max(6, int(round(arc * spec.rings_per_meter)))
        na = spec.azimuth_segments
        t_vals = np.linspace(t_eps, 1.0 - t_eps, n_rings)
        th_vals = np.linspace(0.0, 2.0 * math.pi, na + 1)  # seam duplicated
        tt, th = np.meshgrid(t_vals, th_vals, indexing="ij")
        pos, nrm, ax = _capsule_surface(cap, th.ravel(), tt.ravel())
        verts.append(pos)
        vnrm.append(nrm)
        u_local = th.ravel() / (2.0 * math.pi)
        vuv.append(_tile_uv(c, u_local, tt.ravel(), spec.uv_padding))
        caps_id.append(np.full(pos.shape[0], c))
        axial.append(ax)
        for i in range(n_rings - 1):
            for k in range(na):
                a = v_offset + i * (na + 1) + k
                b = a + 1
                cc = a + (na + 1)
                d = cc + 1
                tris.append([a, b, cc])
                tris.append([b, d, cc])
        v_offset += pos.shape[0]

    vertices = np.concatenate(verts)
    vertex_normals = np.concatenate(vnrm)
    vertex_uv = np.concatenate(vuv)
    capsule_id = np.concatenate(caps_id)
    axial_coord = np.concatenate(axial)
    triangles = np.asarray(tris, dtype=np.int64)

    # carve the union: drop triangles fully buried inside a neighboring capsule
    buried = _buried_vertices(spec, capsule_id, vertices)
    keep_tri = ~buried[triangles].all(axis=1)
    triangles = triangles[keep_tri]
    used = np.zeros(len(vertices), dtype=bool)
    used[triangles.ravel()] = True
    remap = np.cumsum(used) - 1
    vertices = vertices[used]
    vertex_normals = vertex_normals[used]
    vertex_uv = vertex_uv[used]
    capsule_id = capsule_id[used]
    axial_coord = axial_coord[used]
    triangles = remap[triangles]

    vertex_lbs = _skeletal_weights(spec, capsule_id, axial_coord)

    proto = CanonicalBody(
        skeleton=skeleton,
        points=vertices[:1],
        normals=vertex_normals[:1] / np.linalg.norm(vertex_normals[:1], axis=1, keepdims=True),
        uv=vertex_uv[:1],
        lbs_weights=vertex_lbs[:1],
        vertices=vertices,
        vertex_normals=vertex_normals,
        vertex_uv=vertex_uv,
        vertex_lbs=vertex_lbs,
        triangles=triangles,
    )
    dense = uv_query_grid(proto, spec.point_resolution)
    return CanonicalBody(
        skeleton=skeleton,
        points=dense.points,
        normals=dense.normals,
        uv=dense.uv,
        lbs_weights=dense.lbs_weights,
        vertices=vertices,
        vertex_normals=vertex_normals,
        vertex_uv=vertex_uv,
        vertex_lbs=vertex_lbs,
        triangles=triangles,
        point_triangle=dense.triangle_id,
    )


# ---------------------------------------------------------------------------
# garment map and scan generation
# ---------------------------------------------------------------------------


def _pose_angles(pose: Pose) -> dict[str, float]:
    aa = pose.axis_angle
    return {
        "swing_l": float(-aa[HIP_L, 0]),
        "swing_r": float(-aa[HIP_R, 0]),
        "knee": float(0.5 * (np.linalg.norm(aa[KNEE_L]) + np.linalg.norm(aa[KNEE_R]))),
    }


def _garment_map(
    u: np.ndarray,
    v: np.ndarray,
    garment: GarmentSpec,
    transforms: np.ndarray,
    angles: dict[str, float],
    hard_assign: bool = False,
) -> np.ndarray:
    """Posed garment surface point for parameters (u, v).

    u is the azimuth in [0, 2*pi) measured from +x, v runs 0 (waist) to 1
    (hem). The point is carried by an affine blend of the pelvis and hip
    transforms: the pelvis share decays from the waist down, and the leg
    share splits laterally through a sigmoid of the lateral coordinate
    (or a hard step when `hard_assign`, used to demonstrate the tearing
    artifact of one-leg association).
    """
    rw, rh = garment.waist_radius, garment.hem_radius
    R = rw + v * (rh - rw)
    y = garment.waist_height - v * garment.hem_length
    knee_factor = 0.3 + 0.7 * min(angles["knee"] / math.radians(45.0), 1.0)
    depth = np.clip(v, 0.0, None)  # v may sit slightly outside [0,1] in FD probes
    dR = garment.wrinkle_amplitude * knee_factor * np.sin(garment.wrinkle_frequency * u + 1.7) * (
        depth**1.2
    )
    x_lat = R * np.cos(u)
    px = (R + dR) * np.cos(u)
    pz = (R + dR) * np.sin(u)

    swing = garment.swing_coefficient * depth**2
    a = np.clip(1.0 - v, 0.0, None) ** garment.pelvis_follow_power
    if hard_assign:
        sl = (x_lat >= 0.0).astype(np.float64)
    else:
        sl = 1.0 / (1.0 + np.exp(-x_lat / garment.blend_sharpness))
    mean_swing = sl * angles["swing_l"] + (1.0 - sl) * angles["swing_r"]
    p = np.stack([px, y, pz + swing * mean_swing], axis=-1)

    w_pelvis = a
    w_l = (1.0 - a) * sl
    w_r = (1.0 - a) * (1.0 - sl)
    T = (
        w_pelvis[..., None, None] * transforms[PELVIS]
        + w_l[..., None, None] * transforms[HIP_L]
        + w_r[..., None, None] * transforms[HIP_R]
    )
    hom = np.concatenate([p, np.ones(p.shape[:-1] + (1,))], axis=-1)
    return np.einsum("...ab,...b->...a", T, hom)[..., :3]


def garment_points(
    body: CanonicalBody,
    pose: Pose,
    garment: GarmentSpec,
    u: np.ndarray,
    v: np.ndarray,
    hard_assign: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Posed garment points and unit normals at parameters (u, v).

    Normals come from central differences of the posed surface map and are
    oriented away from the (posed) garment axis.
    """
    T = stack_transforms(forward_kinematics(body.skeleton, pose))
    angles = _pose_angles(pose)
    h = 1e-4
    args = (garment, T, angles, hard_assign)
    p = _garment_map(u, v, *args)
    du = (_garment_map(u + h, v, *args) - _garment_map(u - h, v, *args)) / (2 * h)
    dv = (_garment_map(u, v + h, *args) - _garment_map(u, v - h, *args)) / (2 * h)
    n = np.cross(du, dv)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    # orient outward w.r.t. the posed axis at the same height
    center = _axis_center(garment, v, T)
    flip = np.einsum("...d,...d->...", n, p - center) < 0
    n[flip] *= -1.0
    return p, n


def _axis_center(garment: GarmentSpec, v: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    y = garment.waist_height - v * garment.hem_length
    a = np.clip(1.0 - v, 0.0, None) ** garment.pelvis_follow_power
    c = np.stack([np.zeros_like(y), y, np.zeros_like(y)], axis=-1)
    T = (
        a[..., None, None] * transforms[PELVIS]
        + (0.5 * (1 - a))[..., None, None] * transforms[HIP_L]
        + (0.5 * (1 - a))[..., None, None] * transforms[HIP_R]
    )
    hom = np.concatenate([c, np.ones(c.shape[:-1] + (1,))], axis=-1)
    return np.einsum("...ab,...b->...a", T, hom)[..., :3]


def _quantile_to_v(garment: GarmentSpec, q: np.ndarray) -> np.ndarray:
    """Inverse CDF so that v samples land with density ~ ring radius R(v)."""
    rw, rh = garment.waist_radius, garment.hem_radius
    aq = 0.5 * (rh - rw)
    if abs(aq) < 1e-12:
        return np.clip(q, 0.0, 1.0)
    c = -q * (rw + aq)
    return np.clip((-rw + np.sqrt(rw**2 - 4.0 * aq * c)) / (2.0 * aq), 0.0, 1.0)


def _sample_garment_params(
    garment: GarmentSpec, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Jittered-stratified (u, v) samples; v density proportional to ring radius.

    Stratification keeps the coverage gap near one cell width, like a real
    scanner sweep, instead of the heavy-tailed gaps of i.i.d. sampling.
    """
    circumference = math.pi * (garment.waist_radius + garment.hem_radius)
    aspect = max(circumference / max(garment.hem_length, 1e-6), 1e-3)
    nv = max(1, int(round(math.sqrt(n / aspect))))
    nu = max(1, n // nv)
    iu, iv = np.meshgrid(np.arange(nu), np.arange(nv), indexing="ij")
    u = (iu.ravel() + rng.random(nu * nv)) / nu * 2.0 * math.pi
    q = (iv.ravel() + rng.random(nu * nv)) / nv
    extra = n - nu * nv
    if extra > 0:
        u = np.concatenate([u, rng.random(extra) * 2.0 * math.pi])
        q = np.concatenate([q, rng.random(extra)])
    return u, _quantile_to_v(garment, q)


def body_surface_area(body: CanonicalBody) -> float:
    return float(body.triangle_areas().sum())


def generate_scan(
    body: CanonicalBody,
    pose: Pose,
    garment: GarmentSpec,
    seed: int,
    n_points: int = 8000,
) -> ClothedScan:
    """Posed clothed scan: skinned body points plus the analytic garment sheet.

    Point counts split proportionally to surface area. Deterministic for a
    given seed. The result's `garment_mask` flags garment points.
    """
    if pose.joint_count != body.joint_count:
        raise ValidationError("pose/body joint count mismatch")
    if garment.waist_height > body.points[:, 1].max() + 0.2:
        raise ValidationError("garment waist incompatible with body height")
    rng = np.random.default_rng(seed)
    area_body = body_surface_area(body)
    area_garment = garment.surface_area()
    n_garment = max(1, int(round(n_points * area_garment / (area_body + area_garment))))
    n_body = max(1, n_points - n_garment)

    queries = sample_surface(body, n_body, rng=rng)
    T = stack_transforms(forward_kinematics(body.skeleton, pose))
    M = np.einsum("nj,jab->nab", queries.lbs_weights, T)
    bp = np.einsum("nab,nb->na", M[:, :3, :3], queries.points) + M[:, :3, 3]
    bn = np.einsum("nab,nb->na", M[:, :3, :3], queries.normals)
    bn /= np.linalg.norm(bn, axis=1, keepdims=True)

    u, v = _sample_garment_params(garment, n_garment, rng)
    gp, gn = garment_points(body, pose, garment, u, v)

    points = np.concatenate([bp, gp])
    normals = np.concatenate([bn, gn])
    mask = np.concatenate([np.zeros(n_body, dtype=bool), np.ones(n_garment, dtype=bool)])
    return ClothedScan(points, normals, garment_mask=mask)


def garment_midline_probes(
    body: CanonicalBody, pose: Pose, garment: GarmentSpec, n: int = 64
) -> np.ndarray:
    """Posed garment points along the lateral midline (front and back seams)."""
    v = np.tile(np.linspace(0.15, 1.0, n // 2), 2)
    u = np.concatenate(
        [np.full(n // 2, 0.5 * math.pi), np.full(n - n // 2, 1.5 * math.pi)]
    )
    p, _ = garment_points(body, pose, garment, u, v[: len(u)])
    return p


# ---------------------------------------------------------------------------
# pose sequences
# ---------------------------------------------------------------------------

_AXIS_LIMITS = {
    ("hip", 0): (-0.60, 0.25),  # forward swing is negative x
    ("hip", 1): (-0.15, 0.15),
    ("hip", 2): (-0.05, 0.60),  # outward abduction (sign mirrored per leg)
    ("knee", 0): (0.0, 0.90),
    ("ankle", 0): (-0.20, 0.20),
    ("spine", 0): (-0.12, 0.12),
    ("spine", 1): (-0.12, 0.12),
    ("spine", 2): (-0.12, 0.12),
    ("pelvis", 0): (-0.08, 0.08),
    ("pelvis", 1): (-0.20, 0.20),
    ("pelvis", 2): (-0.08, 0.08),
}


def _smooth_signal(rng: np.random.Generator, frames: int, lo: float, hi: float) -> np.ndarray:
    t = np.arange(frames)
    raw = np.zeros(frames)
    amps = []
    for _ in range(2):
        period = rng.uniform(20.0, 70.0)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        amp = rng.uniform(0.4, 1.0)
        raw += amp * np.sin(2.0 * math.pi * t / period + phase)
        amps.append(amp)
    raw /= sum(amps)
    return lo + (raw + 1.0) * 0.5 * (hi - lo)


def make_pose_sequence(kind: str, frames: int, seed: int, joint_count: int = 8) -> list[Pose]:
    """Smooth joint-angle trajectories within joint limits.

    kinds: `walk` (antiphase leg swing, gait-gated knees), `legs-spread`
    (cyclic lateral abduction of both legs, the skirt stress test), and
    `random` (filtered noise per joint axis within limits).
    """
    if frames < 1:
        raise ValidationError("frames must be >= 1")
    if joint_count != 8:
        raise ValidationError("pose sequences are defined for the 8-joint layout")
    rng = np.random.default_rng(seed)
    aa = np.zeros((frames, joint_count, 3))
    trans = np.zeros((frames, 3))
    t = np.arange(frames)

    if frames == 1:
        aa[0] = rng.normal(0.0, 0.03, size=(joint_count, 3))
        aa[0, (KNEE_L, KNEE_R), 0] = np.abs(aa[0, (KNEE_L, KNEE_R), 0])
        aa[0, :, :] = np.clip(aa[0], -0.1, 0.1)
        return [Pose(aa[0], trans[0])]

    if kind == "walk":
        T = 48.0
        phase = 2.0 * math.pi * t / T
        a_h = 0.38 + rng.uniform(-0.04, 0.04)
        a_k = 0.80 + rng.uniform(-0.06, 0.06)
        aa[:, HIP_L, 0] = -a_h * np.sin(phase)
        aa[:, HIP_R, 0] = -a_h * np.sin(phase + math.pi)
        aa[:, KNEE_L, 0] = a_k * np.maximum(0.0, np.sin(phase + 0.45 * math.pi)) ** 1.5
        aa[:, KNEE_R, 0] = a_k * np.maximum(0.0, np.sin(phase + 1.45 * math.pi)) ** 1.5
        spread = 0.06 + 0.03 * np.sin(0.5 * phase)
        aa[:, HIP_L, 2] = spread
        aa[:, HIP_R, 2] = -spread
        aa[:, SPINE, 2] = 0.08 * np.sin(phase)
        aa[:, ANKLE_L, 0] = 0.12 * np.sin(phase + 0.8)
        aa[:, ANKLE_R, 0] = 0.12 * np.sin(phase + math.pi + 0.8)
        trans[:, 1] = 0.008 * np.sin(2.0 * phase)
        trans[:, 0] = 0.004 * np.sin(phase)
    elif kind == "legs-spread":
        T = min(64.0, float(frames))
        phase = 2.0 * math.pi * t / T
        a_s = 0.55 + rng.uniform(-0.05, 0.05)
        spread = a_s * (0.5 - 0.5 * np.cos(phase))
        aa[:, HIP_L, 2] = spread
        aa[:, HIP_R, 2] = -spread
        aa[:, HIP_L, 0] = 0.08 * np.sin(0.37 * phase + rng.uniform(0, 6.28))
        aa[:, HIP_R, 0] = 0.08 * np.sin(0.41 * phase + rng.uniform(0, 6.28))
        aa[:, KNEE_L, 0] = 0.15 + 0.10 * np.sin(0.53 * phase)
        aa[:, KNEE_R, 0] = 0.15 + 0.10 * np.sin(0.47 * phase + 1.0)
        trans[:, 1] = -0.01 * spread / max(a_s, 1e-9)
    elif kind == "random":
        groups = {
            "pelvis": [PELVIS],
            "spine": [SPINE],
            "hip": [HIP_L, HIP_R],
            "knee": [KNEE_L, KNEE_R],
            "ankle": [ANKLE_L, ANKLE_R],
        }
        for (group, axis), (lo, hi) in _AXIS_LIMITS.items():
            for j in groups[group]:
                sig = _smooth_signal(rng, frames, lo, hi)
                if axis == 2 and group == "hip" and j == HIP_R:
                    sig = -sig  # mirror abduction so positive means outward
                aa[:, j, axis] = sig
        for axis in range(3):
            trans[:, axis] = _smooth_signal(rng, frames, -0.02, 0.02)
    else:
        raise ValidationError(f"unknown pose sequence kind {kind!r}")

    return [Pose(aa[i], trans[i]) for i in range(frames)]


def split_frames(
    frames: int, mode: str = "parity", test_count: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, exhaustive train/test frame indices."""
    ids = np.arange(frames)
    if mode == "parity":
        return ids[ids % 2 == 0], ids[ids % 2 == 1]
    if mode == "tail":
        if test_count is None or not (0 < test_count < frames):
            raise ValidationError("tail split needs 0 < test_count < frames")
        return ids[: frames - test_count], ids[frames - test_count :]
    raise ValidationError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------------------
# hole punching
# ---------------------------------------------------------------------------


def punch_holes(
    scan: ClothedScan, hole_count: int, hole_radius: float, seed: int
) -> ClothedScan:
    """Removes every point inside `hole_count` random spheres centered on scan points.

    Centers are re-drawn (up to a bounded number of attempts) if a draw
    would remove more than half the points; if no draw keeps 50% alive the
    parameters are rejected.
    """
    if hole_count < 0:
        raise ValidationError("hole_count must be >= 0")
    if hole_count == 0:
        return scan
    if hole_radius <= 0:
        raise ValidationError("hole_radius must be positive")
    if hole_count > len(scan):
        raise ValidationError("more holes than points")
    rng = np.random.default_rng(seed)
    tree = cKDTree(scan.points)
    for _ in range(20):
        centers = scan.points[rng.choice(len(scan), size=hole_count, replace=False)]
        removed = np.zeros(len(scan), dtype=bool)
        for hit in tree.query_ball_point(centers, hole_radius):
            removed[hit] = True
        if (~removed).sum() >= 0.5 * len(scan):
            keep = ~removed
            return ClothedScan(
                scan.points[keep],
                scan.normals[keep],
                garment_mask=None if scan.garment_mask is None else scan.garment_mask[keep],
            )
    raise ValidationError("hole parameters would remove more than 50% of the scan")


__all__ = [
    "SynthBodySpec",
    "GarmentSpec",
    "CapsuleSpec",
    "build_body",
    "default_garment",
    "generate_scan",
    "garment_points",
    "garment_midline_probes",
    "make_pose_sequence",
    "split_frames",
    "punch_holes",
    "body_surface_area",
    "JOINT_NAMES",
]
