"""File formats: PLY point clouds, body/pose documents, weight-grid binaries,
checkpoints, configs, and dataset directories.

All text formats carry a version header and are written atomically
(temp file + rename). Floats are emitted with 9 significant digits, so text
round-trips are exact to ~1e-7 relative.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from .errors import FormatError, ValidationError
from .geometry import ClothedScan
from .kinematics import CanonicalBody, Pose, ROOT_PARENT, Skeleton, uv_query_grid
from .networks import NetConfig
from .skinning_field import WeightGrid

BODY_MAGIC = "pointdrape-body"
POSES_MAGIC = "pointdrape-poses"
GRID_MAGIC = b"PDLBSFLD"
GRID_VERSION = 1
BODY_VERSION = 1
POSES_VERSION = 1
CHECKPOINT_VERSION = 1

_F = "{:.9g}".format


def _fmt(values) -> str:
    return " ".join(_F(float(v)) for v in values)


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# PLY
# ---------------------------------------------------------------------------

_PLY_PROPS = ["x", "y", "z", "nx", "ny", "nz"]


def write_ply(path: str | Path, scan: ClothedScan, comment: str | None = None) -> None:
    buf = io.StringIO()
    buf.write("ply\nformat ascii 1.0\n")
    if comment:
        buf.write(f"comment {comment}\n")
    buf.write(f"element vertex {len(scan)}\n")
    for p in _PLY_PROPS:
        buf.write(f"property float {p}\n")
    buf.write("end_header\n")
    for p, n in zip(scan.points, scan.normals):
        buf.write(_fmt(p) + " " + _fmt(n) + "\n")
    atomic_write_text(path, buf.getvalue())


def read_ply(path: str | Path) -> ClothedScan:
    path = Path(path)
    with open(path) as f:
        if f.readline().strip() != "ply":
            raise FormatError(f"{path}: not a PLY file")
        n_vertex = None
        props: list[str] = []
        for line in f:
            token = line.strip()
            if token.startswith("element vertex"):
                n_vertex = int(token.split()[-1])
            elif token.startswith("element"):
                raise FormatError(f"{path}: unsupported element '{token}'")
            elif token.startswith("property"):
                props.append(token.split()[-1])
            elif token == "end_header":
                break
        else:
            raise FormatError(f"{path}: missing end_header")
        if n_vertex is None:
            raise FormatError(f"{path}: missing vertex element")
        if props != _PLY_PROPS:
            raise FormatError(f"{path}: expected properties {_PLY_PROPS}, got {props}")
        data = np.loadtxt(f, dtype=np.float64, max_rows=n_vertex, ndmin=2)
    if data.shape != (n_vertex, 6):
        raise FormatError(f"{path}: expected {n_vertex} rows of 6 floats")
    normals = data[:, 3:6]
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise FormatError(f"{path}: zero-length normal")
    return ClothedScan(data[:, :3], normals / norms)


# ---------------------------------------------------------------------------
# body document
# ---------------------------------------------------------------------------


def write_body(path: str | Path, body: CanonicalBody, point_resolution: int) -> None:
    """Structured-text body document: joint, vertex, and triangle tables.

    The dense point set is reconstructed at load time from the stored mesh
    via the UV grid at `point_resolution`.
    """
    buf = io.StringIO()
    J = body.joint_count
    buf.write(f"{BODY_MAGIC} {BODY_VERSION}\n")
    buf.write(f"meta point_resolution {point_resolution}\n")
    buf.write(f"joints {J}\n")
    for j in range(J):
        pos = _fmt(body.skeleton.joint_position[j])
        buf.write(f"j {j} {int(body.skeleton.parent[j])} {pos} {body.skeleton.joint_name[j]}\n")
    buf.write(f"vertices {len(body.vertices)} {J}\n")
    for i in range(len(body.vertices)):
        buf.write(
            "v "
            + _fmt(body.vertices[i])
            + " "
            + _fmt(body.vertex_normals[i])
            + " "
            + _fmt(body.vertex_uv[i])
            + " "
            + _fmt(body.vertex_lbs[i])
            + "\n"
        )
    buf.write(f"triangles {len(body.triangles)}\n")
    for t in body.triangles:
        buf.write(f"t {t[0]} {t[1]} {t[2]}\n")
    atomic_write_text(path, buf.getvalue())


def read_body(path: str | Path) -> CanonicalBody:
    path = Path(path)
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 2 or header[0] != BODY_MAGIC:
            raise FormatError(f"{path}: not a body document")
        if int(header[1]) != BODY_VERSION:
            raise FormatError(f"{path}: unsupported body version {header[1]}")
        meta = f.readline().split()
        if meta[:2] != ["meta", "point_resolution"]:
            raise FormatError(f"{path}: missing point_resolution meta line")
        point_resolution = int(meta[2])
        tag, J = f.readline().split()
        if tag != "joints":
            raise FormatError(f"{path}: missing joints table")
        J = int(J)
        parent = np.zeros(J, dtype=np.int64)
        joints = np.zeros((J, 3))
        names = [""] * J
        for _ in range(J):
            parts = f.readline().split()
            j = int(parts[1])
            parent[j] = int(parts[2])
            joints[j] = [float(x) for x in parts[3:6]]
            names[j] = parts[6] if len(parts) > 6 else f"joint{j}"
        tag, V, JW = f.readline().split()
        if tag != "vertices":
            raise FormatError(f"{path}: missing vertices table")
        V, JW = int(V), int(JW)
        if JW != J:
            raise FormatError(f"{path}: vertex weight count {JW} != joint count {J}")
        vdata = np.loadtxt(
            (f.readline()[2:] for _ in range(V)), dtype=np.float64, ndmin=2
        )
        if vdata.shape != (V, 8 + J):
            raise FormatError(f"{path}: vertex table malformed")
        tag, F = f.readline().split()
        if tag != "triangles":
            raise FormatError(f"{path}: missing triangles table")
        F = int(F)
        tdata = np.loadtxt((f.readline()[2:] for _ in range(F)), dtype=np.int64, ndmin=2)
    skeleton = Skeleton(parent, joints, names)
    vertices = vdata[:, 0:3]
    vnormals = vdata[:, 3:6]
    vnormals = vnormals / np.linalg.norm(vnormals, axis=1, keepdims=True)
    vuv = np.clip(vdata[:, 6:8], 0.0, 1.0)
    vlbs = np.clip(vdata[:, 8:], 0.0, None)
    vlbs = vlbs / vlbs.sum(axis=1, keepdims=True)
    proto = CanonicalBody(
        skeleton=skeleton,
        points=vertices[:1],
        normals=vnormals[:1],
        uv=vuv[:1],
        lbs_weights=vlbs[:1],
        vertices=vertices,
        vertex_normals=vnormals,
        vertex_uv=vuv,
        vertex_lbs=vlbs,
        triangles=tdata,
    )
    dense = uv_query_grid(proto, point_resolution)
    return CanonicalBody(
        skeleton=skeleton,
        points=dense.points,
        normals=dense.normals,
        uv=dense.uv,
        lbs_weights=dense.lbs_weights,
        vertices=vertices,
        vertex_normals=vnormals,
        vertex_uv=vuv,
        vertex_lbs=vlbs,
        triangles=tdata,
        point_triangle=dense.triangle_id,
    )


# ---------------------------------------------------------------------------
# pose sequences
# ---------------------------------------------------------------------------


def write_poses(path: str | Path, poses: list[Pose], frame_ids: list[int] | None = None) -> None:
    if not poses:
        raise ValidationError("no poses to write")
    J = poses[0].joint_count
    frame_ids = frame_ids or list(range(len(poses)))
    buf = io.StringIO()
    buf.write(f"{POSES_MAGIC} {POSES_VERSION} {J}\n")
    for fid, pose in zip(frame_ids, poses):
        if pose.joint_count != J:
            raise ValidationError("inconsistent joint counts in pose sequence")
        buf.write(f"{fid} " + _fmt(pose.axis_angle.ravel()) + " " + _fmt(pose.root_translation) + "\n")
    atomic_write_text(path, buf.getvalue())


def read_poses(path: str | Path) -> tuple[list[int], list[Pose]]:
    path = Path(path)
    with open(path) as f:
        header = f.readline().split()
        if len(header) != 3 or header[0] != POSES_MAGIC:
            raise FormatError(f"{path}: not a pose sequence file")
        if int(header[1]) != POSES_VERSION:
            raise FormatError(f"{path}: unsupported poses version {header[1]}")
        J = int(header[2])
        ids, poses = [], []
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 1 + 3 * J + 3:
                raise FormatError(f"{path}: frame record has {len(parts)} fields")
            ids.append(int(parts[0]))
            vals = np.array([float(x) for x in parts[1:]])
            poses.append(Pose(vals[: 3 * J].reshape(J, 3), vals[3 * J :]))
    return ids, poses


# ---------------------------------------------------------------------------
# weight grid binary
# ---------------------------------------------------------------------------


def write_weight_grid(path: str | Path, grid: WeightGrid) -> None:
    """Binary layout: magic, version, J, R (uint32 LE), bbox (6 float64),
    then float32 node weights with the x index varying fastest."""
    header = GRID_MAGIC + struct.pack(
        "<III", GRID_VERSION, grid.joint_count, grid.resolution
    )
    header += struct.pack("<6d", *grid.bbox_min, *grid.bbox_max)
    # weights is (x, y, z, J); x-fastest flattening means z is outermost
    body = np.ascontiguousarray(
        grid.weights.transpose(2, 1, 0, 3).astype("<f4")
    ).tobytes()
    atomic_write_bytes(path, header + body)


def read_weight_grid(path: str | Path) -> WeightGrid:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != GRID_MAGIC:
        raise FormatError(f"{path}: bad weight-grid magic")
    version, J, R = struct.unpack("<III", raw[8:20])
    if version != GRID_VERSION:
        raise FormatError(f"{path}: unsupported grid version {version}")
    bbox = struct.unpack("<6d", raw[20:68])
    expected = R * R * R * J * 4
    if len(raw) != 68 + expected:
        raise FormatError(f"{path}: truncated grid payload")
    w = np.frombuffer(raw[68:], dtype="<f4").reshape(R, R, R, J).transpose(2, 1, 0, 3)
    w = np.clip(w.astype(np.float64), 0.0, None)
    w = w / w.sum(axis=-1, keepdims=True)
    return WeightGrid(np.array(bbox[:3]), np.array(bbox[3:]), R, w)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path,
    model,
    net_config: NetConfig,
    train_config,
    stage: str,
    mode: str | None,
    epoch: int,
    optimizer=None,
    numpy_rng: np.random.Generator | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "stage": stage,
        "mode": mode,
        "epoch": epoch,
        "net_config": asdict(net_config),
        "train_config": asdict(train_config),
        "model_state": model.state_dict(),
        "optimizer_state": None if optimizer is None else optimizer.state_dict(),
        "numpy_rng_state": None if numpy_rng is None else numpy_rng.bit_generator.state,
        "torch_rng_state": torch.get_rng_state(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        torch.save(payload, tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"{path}: checkpoint version {payload.get('format_version')} unsupported"
        )
    return payload


# ---------------------------------------------------------------------------
# configs and manifests
# ---------------------------------------------------------------------------


def dump_json(path: str | Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def load_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON ({e})") from None


# ---------------------------------------------------------------------------
# dataset directories
# ---------------------------------------------------------------------------

SCAN_PATTERN = "scans/frame_{:04d}.ply"


def write_dataset(
    out_dir: str | Path,
    body: CanonicalBody,
    poses: list[Pose],
    scans: list[ClothedScan],
    train_ids: np.ndarray,
    test_ids: np.ndarray,
    meta: dict,
    point_resolution: int,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_body(out / "body.txt", body, point_resolution)
    write_poses(out / "poses.txt", poses)
    for i, scan in enumerate(scans):
        write_ply(out / SCAN_PATTERN.format(i), scan, comment=f"frame {i}")
    manifest = {
        "format_version": 1,
        "frame_count": len(poses),
        "split": {"train": [int(i) for i in train_ids], "test": [int(i) for i in test_ids]},
        "files": {"body": "body.txt", "poses": "poses.txt"},
        "scan_pattern": SCAN_PATTERN,
        **meta,
    }
    dump_json(out / "manifest.json", manifest)


def load_dataset(path: str | Path):
    """Reads a dataset directory into a SubjectDataset."""
    from .training import FrameSample, SubjectDataset

    root = Path(path)
    manifest = load_json(root / "manifest.json")
    if manifest.get("format_version") != 1:
        raise FormatError(f"{root}/manifest.json: unsupported dataset version")
    body = read_body(root / manifest["files"]["body"])
    ids, poses = read_poses(root / manifest["files"]["poses"])
    pattern = manifest.get("scan_pattern", SCAN_PATTERN)
    frames = []
    for fid, pose in zip(ids, poses):
        scan = read_ply(root / pattern.format(fid))
        frames.append(FrameSample(fid, pose, scan))
    return SubjectDataset(
        body=body,
        frames=frames,
        train_ids=np.asarray(manifest["split"]["train"], dtype=np.int64),
        test_ids=np.asarray(manifest["split"]["test"], dtype=np.int64),
        meta=manifest,
    )
