"""Forward passes composing the body, the weight field, and the predictors.

The coarse pass predicts a pose-independent canonical shape and poses it
with the body's own skinning weights. The fine pass adds pose-dependent
detail and poses the whole canonical point homogeneously with a per-point
blended transform whose weights depend on the ablation mode: the body's
weights (plain local-coordinate baseline), the diffused+smoothed field, or
the weight-prediction net. Density-adaptive upsampling re-queries the body
where the output is sparse.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from . import skinning_field
from .errors import ConfigError, ValidationError
from .geometry import knn_radius, resample_weights, sample_surface
from .kinematics import (
    CanonicalBody,
    Pose,
    QuerySet,
    forward_kinematics,
    pose_points,
    stack_transforms,
    uv_positional_map,
)
from .networks import ModelState, bilinear_query, positional_map_tensors


class AblationMode(str, Enum):
    POP = "pop_mode"
    ADAPTIVE_ONLY = "adaptive_only"
    SMOOTHED_FIELD = "smoothed_field"
    PREDICTED_LBS = "predicted_lbs_no_coarse"
    FULL = "full"

    @property
    def uses_coarse(self) -> bool:
        return self is AblationMode.FULL

    @property
    def predicts_weights(self) -> bool:
        return self in (AblationMode.PREDICTED_LBS, AblationMode.FULL)

    @property
    def uses_smoothed_weights(self) -> bool:
        return self is AblationMode.SMOOTHED_FIELD

    @property
    def adaptive_regularization(self) -> bool:
        return self is not AblationMode.POP

    @property
    def needs_grid(self) -> bool:
        return self.predicts_weights or self.uses_smoothed_weights


def parse_mode(name: str) -> AblationMode:
    try:
        return AblationMode(name)
    except ValueError:
        raise ConfigError(
            f"unknown mode {name!r}; expected one of "
            f"{[m.value for m in AblationMode]}"
        ) from None


@dataclass
class TorchQueries:
    """Query attributes as torch tensors, paired with the numpy QuerySet."""

    source: QuerySet
    points: torch.Tensor
    normals: torch.Tensor
    uv: torch.Tensor
    lbs_weights: torch.Tensor

    @classmethod
    def from_queries(cls, q: QuerySet, dtype: torch.dtype) -> "TorchQueries":
        return cls(
            q,
            torch.from_numpy(q.points).to(dtype),
            torch.from_numpy(q.normals).to(dtype),
            torch.from_numpy(q.uv).to(dtype),
            torch.from_numpy(q.lbs_weights).to(dtype),
        )

    def __len__(self) -> int:
        return len(self.source)

    def subset(self, idx: np.ndarray) -> "TorchQueries":
        t = torch.from_numpy(np.asarray(idx))
        return TorchQueries(
            self.source.subset(idx),
            self.points[t],
            self.normals[t],
            self.uv[t],
            self.lbs_weights[t],
        )


@dataclass
class FrameContext:
    """Per-frame constants: joint transforms and the UV positional map."""

    pose: Pose
    transforms: np.ndarray  # (J, 4, 4)
    transforms_t: torch.Tensor
    pose_map: torch.Tensor  # (3, R, R)
    pose_mask: torch.Tensor  # (R, R)


def make_frame_context(
    body: CanonicalBody, pose: Pose, model: ModelState, dtype: torch.dtype
) -> FrameContext:
    fk = forward_kinematics(body.skeleton, pose)
    T = stack_transforms(fk)
    posed, _, _ = pose_points(body, fk)
    image, mask = uv_positional_map(body, posed, model.config.pose_map_resolution)
    pm, pmask = positional_map_tensors(image, mask, dtype)
    return FrameContext(pose, T, torch.from_numpy(T).to(dtype), pm, pmask)


@dataclass
class Prediction:
    """Output of a forward pass over one frame."""

    posed: torch.Tensor  # (N, 3)
    posed_normals: torch.Tensor  # (N, 3) unit
    canonical: torch.Tensor  # (N, 3) shape before posing
    transforms: torch.Tensor  # (N, 4, 4) per-point blended transform
    weights: torch.Tensor  # (N, J) weights used for the transform
    fine_residual: torch.Tensor | None
    coarse_residual: torch.Tensor | None
    queries: QuerySet
    mode: AblationMode | None = None

    def posed_numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            self.posed.detach().cpu().numpy().astype(np.float64),
            self.posed_normals.detach().cpu().numpy().astype(np.float64),
        )

    def detached(self) -> "Prediction":
        return Prediction(
            self.posed.detach(),
            self.posed_normals.detach(),
            self.canonical.detach(),
            self.transforms.detach(),
            self.weights.detach(),
            None if self.fine_residual is None else self.fine_residual.detach(),
            None if self.coarse_residual is None else self.coarse_residual.detach(),
            self.queries,
            self.mode,
        )


def _blend(weights: torch.Tensor, transforms_t: torch.Tensor) -> torch.Tensor:
    return torch.einsum("nj,jab->nab", weights, transforms_t)


def _apply_homogeneous(T: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    return torch.einsum("nab,nb->na", T[:, :3, :3], points) + T[:, :3, 3]


def _rotate_normals(T: torch.Tensor, normals: torch.Tensor) -> torch.Tensor:
    n = torch.einsum("nab,nb->na", T[:, :3, :3], normals)
    return torch.nn.functional.normalize(n, dim=-1, eps=1e-12)


def posed_body_targets(queries: TorchQueries, transforms_t: torch.Tensor) -> torch.Tensor:
    """Ground-truth posed body points for the queries (exact correspondence)."""
    T = _blend(queries.lbs_weights, transforms_t)
    return _apply_homogeneous(T, queries.points)


def coarse_forward(
    body: CanonicalBody,
    pose: Pose,
    model: ModelState,
    queries: TorchQueries,
    ctx: FrameContext | None = None,
) -> Prediction:
    """Pose-independent canonical shape, posed with the body's own weights."""
    if queries.uv is None or queries.lbs_weights is None:
        raise ValidationError("queries must carry uv and skinning weights")
    dtype = queries.points.dtype
    if ctx is None:
        T = stack_transforms(forward_kinematics(body.skeleton, pose))
        transforms_t = torch.from_numpy(T).to(dtype)
    else:
        transforms_t = ctx.transforms_t
    residual, normal_raw = model.coarse_points(queries.points)
    canonical = queries.points + residual
    T_hat = _blend(queries.lbs_weights, transforms_t)
    posed = _apply_homogeneous(T_hat, canonical)
    normals = _rotate_normals(T_hat, normal_raw)
    return Prediction(
        posed=posed,
        posed_normals=normals,
        canonical=canonical,
        transforms=T_hat,
        weights=queries.lbs_weights,
        fine_residual=None,
        coarse_residual=residual,
        queries=queries.source,
        mode=None,
    )


def regularization_targets(
    canonical_points: np.ndarray, grid: skinning_field.WeightGrid
) -> np.ndarray:
    """Smoothed-field weights queried at canonical (coarse) shape locations."""
    return skinning_field.query(grid, canonical_points)


def fine_forward(
    body: CanonicalBody,
    pose: Pose,
    model: ModelState,
    queries: TorchQueries,
    mode: AblationMode,
    grid: skinning_field.WeightGrid | None = None,
    ctx: FrameContext | None = None,
    smoothed_weights: torch.Tensor | None = None,
) -> Prediction:
    """Full fine-stage pass for one frame.

    The canonical prediction is b + coarse residual (full mode only) + fine
    residual; the posing transform per mode: body weights (pop_mode,
    adaptive_only), the smoothed field (smoothed_field), or the LBS net
    (predicted_lbs_no_coarse, full). `smoothed_weights` short-circuits the
    grid lookup for smoothed_field mode when precomputed.
    """
    dtype = queries.points.dtype
    if ctx is None:
        ctx = make_frame_context(body, pose, model, dtype)
    if mode.uses_smoothed_weights and grid is None and smoothed_weights is None:
        raise ConfigError("smoothed_field mode needs a weight grid")

    features = model.pose_features(ctx.pose_map, ctx.pose_mask)
    z_pose = bilinear_query(features, queries.uv)
    z_fine = model.query_fine_code(queries.uv)
    fine_residual, normal_raw = model.fine_points(queries.points, z_fine, z_pose)

    canonical = queries.points + fine_residual
    coarse_residual = None
    if mode.uses_coarse:
        with torch.no_grad():
            coarse_residual, _ = model.coarse_points(queries.points)
        canonical = canonical + coarse_residual

    if mode.predicts_weights:
        weights = model.lbs_weights(queries.points, z_fine)
    elif mode.uses_smoothed_weights:
        if smoothed_weights is None:
            w = skinning_field.query(grid, queries.source.points)
            smoothed_weights = torch.from_numpy(w).to(dtype)
        weights = smoothed_weights
    else:
        weights = queries.lbs_weights

    T_prime = _blend(weights, ctx.transforms_t)
    posed = _apply_homogeneous(T_prime, canonical)
    normals = _rotate_normals(T_prime, normal_raw)
    return Prediction(
        posed=posed,
        posed_normals=normals,
        canonical=canonical,
        transforms=T_prime,
        weights=weights,
        fine_residual=fine_residual,
        coarse_residual=coarse_residual,
        queries=queries.source,
        mode=mode,
    )


def upsample(
    body: CanonicalBody,
    pose: Pose,
    model: ModelState,
    prediction: Prediction,
    iterations: int,
    grid: skinning_field.WeightGrid | None = None,
    rng: np.random.Generator | int | None = None,
    samples_per_iteration: int | None = None,
    k: int = 5,
) -> Prediction:
    """Density-adaptive densification of a prediction.

    Per iteration: flag points whose kNN radius exceeds mean + 2 std, boost
    their source triangles, draw new body queries from the boosted
    distribution, run the fine pass on them, and union with the existing
    set. Stops early when nothing is flagged.
    """
    if iterations < 0:
        raise ValidationError("iterations must be >= 0")
    if prediction.mode is None:
        raise ValidationError("prediction must come from the fine pass")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dtype = prediction.posed.dtype
    ctx = make_frame_context(body, pose, model, dtype)
    current = prediction.detached()
    n_new = samples_per_iteration or max(256, len(prediction.queries) // 5)
    tri_count = len(body.triangles)
    for _ in range(iterations):
        pts = current.posed.cpu().numpy().astype(np.float64)
        stats = knn_radius(pts, k=k)
        eta = resample_weights(stats, current.queries.triangle_id, tri_count)
        if not (eta > 0).any():
            break
        new_queries = sample_surface(body, n_new, triangle_boost=eta, rng=rng)
        tq = TorchQueries.from_queries(new_queries, dtype)
        with torch.no_grad():
            new_pred = fine_forward(body, pose, model, tq, current.mode, grid=grid, ctx=ctx)
        current = _union(current, new_pred.detached())
    return current


def _union(a: Prediction, b: Prediction) -> Prediction:
    return Prediction(
        torch.cat([a.posed, b.posed]),
        torch.cat([a.posed_normals, b.posed_normals]),
        torch.cat([a.canonical, b.canonical]),
        torch.cat([a.transforms, b.transforms]),
        torch.cat([a.weights, b.weights]),
        None,
        None,
        QuerySet.concatenate([a.queries, b.queries]),
        a.mode,
    )
