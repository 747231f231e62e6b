"""Loss assembly, the two-stage optimization regime, and evaluation.

Both stages minimize a weighted sum of bi-directional Chamfer distance, an
L1 normal term (gated in after a warmup epoch), and a density-adaptive
squared-norm penalty on the predicted displacements. Modes that predict
skinning weights additionally regularize them toward the diffused+smoothed
field (L1) and through the body reprojection term. Chamfer correspondences
are recomputed per step but treated as fixed by the gradient (distances
differentiate; the argmin switch does not).

Training is bit-reproducible for a fixed (seed, config, dataset) in
single-threaded mode; all randomness flows through one numpy generator and
the torch seed used at model construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from . import geometry, skinning_field
from .errors import ConfigError, ValidationError
from .geometry import ClothedScan, adaptive_reg_weights, knn_radius
from .kinematics import CanonicalBody, Pose, uv_query_grid
from .networks import ModelState, NetConfig, build_model
from .pipeline import (
    AblationMode,
    FrameContext,
    Prediction,
    TorchQueries,
    coarse_forward,
    fine_forward,
    make_frame_context,
    posed_body_targets,
    regularization_targets,
)

LOSS_KEYS = ("cd", "normal", "rgl", "lbs", "reproj", "total")


@dataclass
class TrainConfig:
    """Loss weights and schedule. Defaults follow the published recipe;
    desk-scale runs shrink the epoch counts, not the weights."""

    lambda_cd: float = 1e4
    lambda_normal: float = 1.0
    lambda_lbs: float = 1.0
    lambda_reproj: float = 5e2
    adapt_lambda: float = 2e3
    learning_rate: float = 3e-4
    coarse_epochs: int = 150
    fine_epochs: int = 250
    normal_warmup_epoch: int = 100
    batch_frames: int = 1
    coarse_query_resolution: int = 32
    fine_query_resolution: int = 64
    queries_per_step: int = 1024
    seed: int = 0
    single_thread: bool = True

    def __post_init__(self):
        for name in ("lambda_cd", "lambda_normal", "lambda_lbs", "lambda_reproj", "adapt_lambda"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be nonnegative")
        if self.normal_warmup_epoch > max(self.coarse_epochs, self.fine_epochs):
            raise ValidationError("normal warmup epoch exceeds both stage lengths")
        if self.learning_rate <= 0:
            raise ValidationError("learning rate must be positive")


@dataclass
class LogRecord:
    stage: str
    epoch: int
    losses: dict[str, float]
    wall_time: float

    def format_line(self) -> str:
        parts = [f"stage={self.stage}", f"epoch={self.epoch}"]
        parts += [f"{k}={self.losses.get(k, 0.0):.12e}" for k in LOSS_KEYS]
        parts.append(f"wall={self.wall_time:.3f}")
        return "\t".join(parts)

    @staticmethod
    def strip_wall(line: str) -> str:
        return "\t".join(p for p in line.split("\t") if not p.startswith("wall="))


def configure_determinism(single_thread: bool = True) -> None:
    if single_thread:
        torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def chamfer_loss(
    x: torch.Tensor, y: torch.Tensor, y_tree: cKDTree | None = None
) -> tuple[torch.Tensor, np.ndarray, np.ndarray]:
    """Differentiable Chamfer value with frozen correspondences."""
    xn = x.detach().cpu().numpy().astype(np.float64)
    yn = y.detach().cpu().numpy().astype(np.float64)
    tree = y_tree if y_tree is not None else cKDTree(yn)
    _, idx_xy = tree.query(xn)
    _, idx_yx = cKDTree(xn).query(yn)
    ix = torch.from_numpy(idx_xy.astype(np.int64))
    iy = torch.from_numpy(idx_yx.astype(np.int64))
    d1 = ((x - y[ix]) ** 2).sum(dim=1).mean()
    d2 = ((y - x[iy]) ** 2).sum(dim=1).mean()
    return d1 + d2, idx_xy, idx_yx


def normal_loss(
    pred_normals: torch.Tensor, gt_normals: torch.Tensor, index_xy: np.ndarray
) -> torch.Tensor:
    idx = torch.from_numpy(index_xy.astype(np.int64))
    return (pred_normals - gt_normals[idx]).abs().sum(dim=1).mean()


def loss_rgl(displacements: torch.Tensor, lam: torch.Tensor) -> torch.Tensor:
    """Mean of lambda_i * ||r_i||^2 over points."""
    if len(displacements) != len(lam):
        raise ValidationError("displacement/weight length mismatch")
    return (lam * (displacements**2).sum(dim=1)).mean()


def loss_lbs(w_pred: torch.Tensor, w_target: torch.Tensor) -> torch.Tensor:
    """Mean L1 distance to the diffused+smoothed field weights."""
    if w_pred.shape != w_target.shape:
        raise ValidationError("weight shape mismatch")
    return (w_pred - w_target).abs().sum(dim=1).mean()


def loss_reproj(
    b_hat: torch.Tensor, transforms: torch.Tensor, b_gt: torch.Tensor
) -> torch.Tensor:
    """Mean Euclidean error of reprojecting canonical body points."""
    reproj = torch.einsum("nab,nb->na", transforms[:, :3, :3], b_hat) + transforms[:, :3, 3]
    return torch.linalg.norm(reproj - b_gt, dim=1).mean()


def loss_total(
    components: dict[str, torch.Tensor],
    config: TrainConfig,
    epoch: int,
    mode: AblationMode | None = None,
) -> torch.Tensor:
    """Weighted sum; the normal term is gated until the warmup epoch and the
    weight-prediction terms apply only in modes that predict weights."""
    total = config.lambda_cd * components["cd"] + components["rgl"]
    if epoch >= config.normal_warmup_epoch and "normal" in components:
        total = total + config.lambda_normal * components["normal"]
    if mode is not None and mode.predicts_weights:
        total = total + config.lambda_lbs * components["lbs"]
        total = total + config.lambda_reproj * components["reproj"]
    return total


# ---------------------------------------------------------------------------
# dataset containers
# ---------------------------------------------------------------------------


@dataclass
class FrameSample:
    frame_id: int
    pose: Pose
    scan: ClothedScan


@dataclass
class SubjectDataset:
    """One subject/outfit: the body plus per-frame (pose, scan) pairs."""

    body: CanonicalBody
    frames: list[FrameSample]
    train_ids: np.ndarray
    test_ids: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.frames:
            raise ValidationError("dataset has no frames")
        ids = {f.frame_id for f in self.frames}
        for i in np.concatenate([self.train_ids, self.test_ids]):
            if int(i) not in ids:
                raise ValidationError(f"split references missing frame {i}")

    def frames_by_ids(self, ids: np.ndarray) -> list[FrameSample]:
        lookup = {f.frame_id: f for f in self.frames}
        return [lookup[int(i)] for i in ids]

    @property
    def train_frames(self) -> list[FrameSample]:
        return self.frames_by_ids(self.train_ids)

    @property
    def test_frames(self) -> list[FrameSample]:
        return self.frames_by_ids(self.test_ids)


@dataclass
class _FrameCache:
    sample: FrameSample
    ctx: FrameContext
    scan_points: torch.Tensor
    scan_normals: torch.Tensor
    scan_tree: cKDTree


def _build_caches(
    body: CanonicalBody, frames: list[FrameSample], model: ModelState, dtype: torch.dtype
) -> list[_FrameCache]:
    caches = []
    for f in frames:
        ctx = make_frame_context(body, f.pose, model, dtype)
        caches.append(
            _FrameCache(
                f,
                ctx,
                torch.from_numpy(f.scan.points).to(dtype),
                torch.from_numpy(f.scan.normals).to(dtype),
                cKDTree(f.scan.points),
            )
        )
    return caches


def _adaptive_lambda(
    posed: torch.Tensor, config: TrainConfig, adaptive: bool, k: int = geometry.KNN_K
) -> torch.Tensor:
    if not adaptive:
        return torch.full((len(posed),), config.adapt_lambda, dtype=posed.dtype)
    pts = posed.detach().cpu().numpy().astype(np.float64)
    if len(pts) <= k:
        return torch.full((len(posed),), config.adapt_lambda, dtype=posed.dtype)
    stats = knn_radius(pts, k=k)
    lam = adaptive_reg_weights(stats, config.adapt_lambda)
    return torch.from_numpy(lam).to(posed.dtype)


# ---------------------------------------------------------------------------
# training stages
# ---------------------------------------------------------------------------


def train_coarse(
    dataset: SubjectDataset,
    config: TrainConfig,
    net_config: NetConfig,
    model: ModelState | None = None,
    dtype: torch.dtype = torch.float32,
    log_hook=None,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    rng_state: dict | None = None,
) -> tuple[ModelState, list[LogRecord]]:
    """Stage one: fit the pose-independent coarse net and its global code."""
    if not dataset.train_frames:
        raise ValidationError("empty training set")
    configure_determinism(config.single_thread)
    if model is None:
        model = build_model(net_config, dtype)
    queries = TorchQueries.from_queries(
        uv_query_grid(dataset.body, config.coarse_query_resolution), dtype
    )
    caches = _build_caches(dataset.body, dataset.train_frames, model, dtype)
    params = model.coarse_parameters()
    optimizer = torch.optim.Adam(params, lr=config.learning_rate)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    rng = np.random.default_rng(config.seed + 1)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    records: list[LogRecord] = []
    t0 = time.perf_counter()
    for epoch in range(start_epoch, config.coarse_epochs):
        order = rng.permutation(len(caches))
        sums = {k: 0.0 for k in LOSS_KEYS}
        for fi in order:
            cache = caches[fi]
            optimizer.zero_grad()
            pred = coarse_forward(dataset.body, cache.sample.pose, model, queries, ctx=cache.ctx)
            cd, idx_xy, _ = chamfer_loss(pred.posed, cache.scan_points, cache.scan_tree)
            lam = _adaptive_lambda(pred.posed, config, adaptive=True)
            comps = {
                "cd": cd,
                "rgl": loss_rgl(pred.coarse_residual, lam),
                "normal": normal_loss(pred.posed_normals, cache.scan_normals, idx_xy),
            }
            total = loss_total(comps, config, epoch)
            total.backward()
            optimizer.step()
            for k, v in comps.items():
                sums[k] += float(v.detach())
            sums["total"] += float(total.detach())
        record = LogRecord(
            "coarse",
            epoch,
            {k: sums[k] / len(caches) for k in LOSS_KEYS},
            time.perf_counter() - t0,
        )
        records.append(record)
        if log_hook:
            log_hook(record, model, optimizer, rng)
    return model, records


def _precompute_weight_targets(
    body: CanonicalBody,
    pool: TorchQueries,
    mode: AblationMode,
    model: ModelState,
    grid: skinning_field.WeightGrid | None,
    dtype: torch.dtype,
) -> torch.Tensor | None:
    """Smoothed-field weights at the pool's canonical target locations.

    Full mode queries the field at the coarse canonical shape; the no-coarse
    ablation queries at the body surface. Returns None for modes that use
    neither predicted nor smoothed weights.
    """
    if not mode.needs_grid:
        return None
    if grid is None:
        raise ConfigError(f"mode {mode.value} needs a diffused weight grid")
    pts = pool.source.points
    if mode.uses_coarse:
        with torch.no_grad():
            residual, _ = model.coarse_points(pool.points)
        pts = pts + residual.cpu().numpy().astype(np.float64)
    w = regularization_targets(pts, grid)
    return torch.from_numpy(w).to(dtype)


def train_fine(
    dataset: SubjectDataset,
    config: TrainConfig,
    net_config: NetConfig,
    mode: AblationMode,
    model: ModelState | None = None,
    grid: skinning_field.WeightGrid | None = None,
    dtype: torch.dtype = torch.float32,
    log_hook=None,
    start_epoch: int = 0,
    optimizer_state: dict | None = None,
    rng_state: dict | None = None,
) -> tuple[ModelState, list[LogRecord]]:
    """Stage two: fit the fine displacement net, the LBS net, the pose
    encoder, and the fine latent image, jointly."""
    if not dataset.train_frames:
        raise ValidationError("empty training set")
    configure_determinism(config.single_thread)
    if mode.uses_coarse and model is None:
        raise ConfigError("full mode requires the trained coarse model")
    if model is None:
        model = build_model(net_config, dtype)
    for p in model.coarse_parameters():
        p.requires_grad_(False)
    pool = TorchQueries.from_queries(
        uv_query_grid(dataset.body, config.fine_query_resolution), dtype
    )
    weight_targets = _precompute_weight_targets(dataset.body, pool, mode, model, grid, dtype)
    caches = _build_caches(dataset.body, dataset.train_frames, model, dtype)
    optimizer = torch.optim.Adam(model.fine_parameters(), lr=config.learning_rate)
    if optimizer_state is not None:
        optimizer.load_state_dict(optimizer_state)
    rng = np.random.default_rng(config.seed + 2)
    if rng_state is not None:
        rng.bit_generator.state = rng_state
    records: list[LogRecord] = []
    t0 = time.perf_counter()
    n_step = min(config.queries_per_step, len(pool))
    for epoch in range(start_epoch, config.fine_epochs):
        order = rng.permutation(len(caches))
        sums = {k: 0.0 for k in LOSS_KEYS}
        for fi in order:
            cache = caches[fi]
            sel = rng.choice(len(pool), size=n_step, replace=False)
            queries = pool.subset(sel)
            w_t = None if weight_targets is None else weight_targets[torch.from_numpy(sel)]
            optimizer.zero_grad()
            pred = fine_forward(
                dataset.body,
                cache.sample.pose,
                model,
                queries,
                mode,
                grid=grid,
                ctx=cache.ctx,
                smoothed_weights=w_t if mode.uses_smoothed_weights else None,
            )
            cd, idx_xy, _ = chamfer_loss(pred.posed, cache.scan_points, cache.scan_tree)
            lam = _adaptive_lambda(pred.posed, config, mode.adaptive_regularization)
            comps = {
                "cd": cd,
                "rgl": loss_rgl(pred.fine_residual, lam),
                "normal": normal_loss(pred.posed_normals, cache.scan_normals, idx_xy),
            }
            if mode.predicts_weights:
                comps["lbs"] = loss_lbs(pred.weights, w_t)
                b_gt = posed_body_targets(queries, cache.ctx.transforms_t)
                comps["reproj"] = loss_reproj(queries.points, pred.transforms, b_gt)
            total = loss_total(comps, config, epoch, mode)
            total.backward()
            optimizer.step()
            for k, v in comps.items():
                sums[k] += float(v.detach())
            sums["total"] += float(total.detach())
        record = LogRecord(
            "fine",
            epoch,
            {k: sums[k] / len(caches) for k in LOSS_KEYS},
            time.perf_counter() - t0,
        )
        records.append(record)
        if log_hook:
            log_hook(record, model, optimizer, rng)
    return model, records


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalRecord:
    frame_id: int
    chamfer: float  # m^2
    normal: float  # unitless


def infer_frame(
    body: CanonicalBody,
    pose: Pose,
    model: ModelState,
    mode: AblationMode,
    queries: TorchQueries,
    grid: skinning_field.WeightGrid | None = None,
    ctx: FrameContext | None = None,
) -> Prediction:
    with torch.no_grad():
        return fine_forward(body, pose, model, queries, mode, grid=grid, ctx=ctx).detached()


def evaluate(
    model: ModelState,
    dataset: SubjectDataset,
    mode: AblationMode,
    resolution: int = 112,
    grid: skinning_field.WeightGrid | None = None,
    split: str = "test",
    dtype: torch.dtype = torch.float32,
) -> tuple[list[EvalRecord], dict[str, float]]:
    """Dense inference per frame; Chamfer + normal discrepancy vs the scans."""
    frames = dataset.test_frames if split == "test" else dataset.train_frames
    if not frames:
        raise ValidationError(f"no frames in split {split!r}")
    queries = TorchQueries.from_queries(uv_query_grid(dataset.body, resolution), dtype)
    records = []
    for f in frames:
        pred = infer_frame(dataset.body, f.pose, model, mode, queries, grid=grid)
        pts, nrm = pred.posed_numpy()
        res = geometry.chamfer(pts, f.scan.points)
        nml = geometry.normal_l1(nrm, f.scan.normals, res.index_xy)
        records.append(EvalRecord(f.frame_id, res.value, nml))
    means = {
        "chamfer": float(np.mean([r.chamfer for r in records])),
        "normal": float(np.mean([r.normal for r in records])),
    }
    return records, means


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckBatch:
    """Everything a loss term needs, at float64 and tiny scale."""

    body: CanonicalBody
    pose: Pose
    ctx: FrameContext
    queries: TorchQueries
    scan_points: torch.Tensor
    scan_normals: torch.Tensor
    weight_targets: torch.Tensor
    body_targets: torch.Tensor
    config: TrainConfig
    mode: AblationMode


def make_gradcheck_batch(
    model: ModelState,
    body: CanonicalBody,
    pose: Pose,
    scan: ClothedScan,
    config: TrainConfig,
    mode: AblationMode = AblationMode.PREDICTED_LBS,
    n_queries: int = 16,
    dtype: torch.dtype = torch.float64,
    seed: int = 0,
    perturb: float = 0.05,
) -> GradCheckBatch:
    """Tiny batch at a generic point in parameter space.

    Zero-initialized heads put several losses exactly on |.| kinks and tie
    boundaries where finite differences are meaningless, so the model is
    nudged away from the init and the weight target is a random simplex
    vector rather than the uniform one the softmax starts at.
    """
    rng = np.random.default_rng(seed)
    if perturb > 0:
        with torch.no_grad():
            for p in model.parameters():
                noise = rng.normal(0.0, perturb, size=tuple(p.shape))
                p.add_(torch.from_numpy(noise).to(p.dtype))
    queries = TorchQueries.from_queries(
        geometry.sample_surface(body, n_queries, rng=seed), dtype
    )
    ctx = make_frame_context(body, pose, model, dtype)
    J = body.joint_count
    w_raw = rng.random((n_queries, J)) + 0.1
    w_t = torch.from_numpy(w_raw / w_raw.sum(axis=1, keepdims=True)).to(dtype)
    b_gt = posed_body_targets(queries, ctx.transforms_t)
    return GradCheckBatch(
        body,
        pose,
        ctx,
        queries,
        torch.from_numpy(scan.points).to(dtype),
        torch.from_numpy(scan.normals).to(dtype),
        w_t,
        b_gt,
        config,
        mode,
    )


def gradcheck_loss(
    model: ModelState, batch: GradCheckBatch, loss_name: str
) -> torch.Tensor:
    """Scalar loss used by the finite-difference comparison."""
    pred = fine_forward(
        batch.body, batch.pose, model, batch.queries, batch.mode, ctx=batch.ctx
    )
    if loss_name == "cd":
        cd, _, _ = chamfer_loss(pred.posed, batch.scan_points)
        return cd
    if loss_name == "normal":
        _, idx_xy, _ = chamfer_loss(pred.posed, batch.scan_points)
        return normal_loss(pred.posed_normals, batch.scan_normals, idx_xy)
    if loss_name == "rgl":
        lam = torch.full((len(pred.posed),), batch.config.adapt_lambda, dtype=pred.posed.dtype)
        return loss_rgl(pred.fine_residual, lam)
    if loss_name == "lbs":
        return loss_lbs(pred.weights, batch.weight_targets)
    if loss_name == "reproj":
        return loss_reproj(batch.queries.points, pred.transforms, batch.body_targets)
    if loss_name == "total":
        cd, idx_xy, _ = chamfer_loss(pred.posed, batch.scan_points)
        lam = torch.full((len(pred.posed),), batch.config.adapt_lambda, dtype=pred.posed.dtype)
        comps = {
            "cd": cd,
            "normal": normal_loss(pred.posed_normals, batch.scan_normals, idx_xy),
            "rgl": loss_rgl(pred.fine_residual, lam),
            "lbs": loss_lbs(pred.weights, batch.weight_targets),
            "reproj": loss_reproj(batch.queries.points, pred.transforms, batch.body_targets),
        }
        return loss_total(comps, batch.config, epoch=10**9, mode=batch.mode)
    raise ValidationError(f"unknown loss selector {loss_name!r}")


def gradient_check(
    model: ModelState,
    batch: GradCheckBatch,
    loss_name: str,
    step: float = 1e-5,
    denom_floor: float = 1e-6,
) -> float:
    """Max relative error between autograd and central finite differences.

    Error is measured per parameter tensor: the largest component deviation
    divided by the tensor's gradient magnitude, max(|g_a|_inf, |g_fd|_inf,
    denom_floor). An all-zero gradient therefore compares as zero error.
    Raises if any analytic gradient is non-finite, naming the parameter.
    """
    params = [p for p in model.fine_parameters() if p.requires_grad]
    names = {id(p): n for n, p in model.named_parameters()}
    model.zero_grad()
    loss = gradcheck_loss(model, batch, loss_name)
    loss.backward()
    analytic = []
    for p in params:
        g = torch.zeros_like(p) if p.grad is None else p.grad.detach().clone()
        if not torch.isfinite(g).all():
            raise ValidationError(f"non-finite gradient in parameter {names[id(p)]}")
        analytic.append(g)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            deviation = 0.0
            fd_scale = 0.0
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(gradcheck_loss(model, batch, loss_name))
                flat[i] = orig - step
                lo = float(gradcheck_loss(model, batch, loss_name))
                flat[i] = orig
                fd = (hi - lo) / (2.0 * step)
                deviation = max(deviation, abs(float(gflat[i]) - fd))
                fd_scale = max(fd_scale, abs(fd))
            scale = max(float(g.abs().max()), fd_scale, denom_floor)
            worst = max(worst, deviation / scale)
    return worst
