"""Command-line workflows: data synthesis, two-stage training, inference,
animation, scan completion, upsampling, evaluation, and field export.

Every report path writes delimited text records plus a rendered figure next
to them. Exit codes: 2 invalid arguments/config or broken invariants, 3
missing file, 4 malformed file content.
"""

from __future__ import annotations

import functools
import sys
from dataclasses import replace
from pathlib import Path

import click
import numpy as np
import torch

from . import fileio, figures, geometry, pipeline, skinning_field, synthdata, training
from .config import RunConfig, default_seed
from .errors import ConfigError, FormatError, ValidationError
from .geometry import CHAMFER_REPORT_SCALE, NORMAL_REPORT_SCALE, ClothedScan
from .kinematics import uv_query_grid
from .networks import NetConfig, build_model
from .pipeline import AblationMode, TorchQueries, parse_mode
from .training import TrainConfig

EXIT_VALIDATION = 2
EXIT_MISSING = 3
EXIT_FORMAT = 4


def _handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ValidationError, ConfigError) as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_VALIDATION)
        except FileNotFoundError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_MISSING)
        except FormatError as e:
            click.echo(f"error: {e}", err=True)
            sys.exit(EXIT_FORMAT)

    return wrapper


@click.group()
def main():
    """Point-based clothed-body modeling toolkit."""


def _load_run_config(config_path: str | None, **overrides) -> RunConfig:
    cfg = RunConfig.from_dict(fileio.load_json(config_path)) if config_path else RunConfig()
    train_overrides = {k[6:]: v for k, v in overrides.items() if k.startswith("train_") and v is not None}
    plain = {k: v for k, v in overrides.items() if not k.startswith("train_") and v is not None}
    if train_overrides:
        cfg.train = replace(cfg.train, **train_overrides)
    if plain:
        cfg = replace(cfg, **plain)
    if "seed" in plain:
        cfg.train = replace(cfg.train, seed=plain["seed"])
    return cfg


def _echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    fileio.dump_json(out_dir / "run_config.json", cfg.to_dict())


def _write_log(path: Path, records) -> None:
    with open(path, "a") as f:
        for r in records:
            f.write(r.format_line() + "\n")


def _build_or_load_grid(cfg: RunConfig, dataset, out_dir: Path) -> skinning_field.WeightGrid:
    if cfg.grid_path and Path(cfg.grid_path).exists():
        return fileio.read_weight_grid(cfg.grid_path)
    grid = skinning_field.build_field(
        dataset.body,
        resolution=cfg.grid_resolution,
        margin=cfg.grid_margin,
        max_iterations=cfg.smooth_iterations,
        tolerance=cfg.smooth_tolerance,
    )
    fileio.write_weight_grid(out_dir / "field.lbs", grid)
    return grid


def _model_from_checkpoint(path: str):
    payload = fileio.load_checkpoint(path)
    net_cfg = NetConfig(**payload["net_config"])
    model = build_model(net_cfg)
    model.load_state_dict(payload["model_state"])
    train_cfg = TrainConfig(**payload["train_config"])
    mode = None if payload["mode"] is None else parse_mode(payload["mode"])
    return model, net_cfg, train_cfg, mode, payload


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


@main.command()
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Dataset directory to create.")
@click.option("--frames", default=100, show_default=True, help="Number of frames to generate.")
@click.option("--seed", default=None, type=int, help="Generator seed (default: POINTDRAPE_SEED or 0).")
@click.option("--kind", default="random", show_default=True, type=click.Choice(["walk", "legs-spread", "random"]), help="Pose sequence kind.")
@click.option("--garment", default="skirt", show_default=True, type=click.Choice(["skirt", "dress", "tight"]), help="Garment preset.")
@click.option("--points", default=8000, show_default=True, help="Points per scan.")
@click.option("--split", default="parity", show_default=True, type=click.Choice(["parity", "tail"]), help="Train/test split rule.")
@click.option("--test-count", default=None, type=int, help="Test frames for the tail split.")
@click.option("--holes", default=0, show_default=True, help="Holes punched into every scan.")
@click.option("--hole-radius", default=0.05, show_default=True, help="Hole radius in meters.")
@click.option("--wrinkle-amplitude", default=None, type=float, help="Override the garment wrinkle amplitude.")
@_handle_errors
def synth(out_dir, frames, seed, kind, garment, points, split, test_count, holes, hole_radius, wrinkle_amplitude):
    """Generate a synthetic clothed-subject dataset."""
    seed = default_seed() if seed is None else seed
    body = synthdata.build_body()
    spec = synthdata.default_garment(garment)
    if wrinkle_amplitude is not None:
        spec = replace(spec, wrinkle_amplitude=wrinkle_amplitude)
    poses = synthdata.make_pose_sequence(kind, frames, seed)
    scans = []
    for i, pose in enumerate(poses):
        scan = synthdata.generate_scan(body, pose, spec, seed=seed * 100003 + i, n_points=points)
        if holes > 0:
            scan = synthdata.punch_holes(scan, holes, hole_radius, seed=seed * 7919 + i)
        scans.append(scan)
    train_ids, test_ids = synthdata.split_frames(frames, split, test_count)
    meta = {
        "name": f"synthetic-{garment}-{kind}",
        "seed": seed,
        "pose_kind": kind,
        "garment": {
            "kind": spec.kind,
            "waist_height": spec.waist_height,
            "waist_radius": spec.waist_radius,
            "hem_length": spec.hem_length,
            "flare_angle": spec.flare_angle,
            "blend_sharpness": spec.blend_sharpness,
            "wrinkle_amplitude": spec.wrinkle_amplitude,
            "wrinkle_frequency": spec.wrinkle_frequency,
        },
        "points_per_scan": points,
        "holes": {"count": holes, "radius": hole_radius} if holes else None,
    }
    fileio.write_dataset(out_dir, body, poses, scans, train_ids, test_ids, meta, point_resolution=96)
    click.echo(f"wrote {frames} frames ({len(train_ids)} train / {len(test_ids)} test) to {out_dir}")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _train_options(fn):
    fn = click.option("--dataset", required=True, type=click.Path(), help="Dataset directory.")(fn)
    fn = click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")(fn)
    fn = click.option("--config", "config_path", default=None, type=click.Path(), help="RunConfig JSON file.")(fn)
    fn = click.option("--epochs", default=None, type=int, help="Override the stage epoch count.")(fn)
    fn = click.option("--lr", default=None, type=float, help="Override the learning rate.")(fn)
    fn = click.option("--seed", default=None, type=int, help="Override the training seed.")(fn)
    fn = click.option("--resume", is_flag=True, help="Resume from this stage's checkpoint in --out.")(fn)
    return fn


def _checkpoint_hook(path: Path, log_path: Path, net_cfg, train_cfg, stage: str, mode):
    def hook(record, model, optimizer, rng):
        with open(log_path, "a") as f:
            f.write(record.format_line() + "\n")
        fileio.save_checkpoint(
            path, model, net_cfg, train_cfg, stage, mode, record.epoch, optimizer, rng
        )

    return hook


@main.command("train-coarse")
@_train_options
@_handle_errors
def train_coarse_cmd(dataset, out_dir, config_path, epochs, lr, seed, resume):
    """Train the pose-independent coarse stage."""
    cfg = _load_run_config(
        config_path, dataset=dataset, output_dir=out_dir,
        train_coarse_epochs=epochs, train_learning_rate=lr, seed=seed,
    )
    out = Path(out_dir)
    _echo_config(cfg, out)
    data = fileio.load_dataset(dataset)
    ckpt_path, log_path = out / "coarse.pt", out / "coarse_log.txt"
    kwargs: dict = {}
    if resume:
        model, net_cfg, train_cfg, _, payload = _model_from_checkpoint(ckpt_path)
        cfg.net, cfg.train = net_cfg, train_cfg
        kwargs = dict(
            model=model,
            start_epoch=payload["epoch"] + 1,
            optimizer_state=payload["optimizer_state"],
            rng_state=payload["numpy_rng_state"],
        )
    hook = _checkpoint_hook(ckpt_path, log_path, cfg.net, cfg.train, "coarse", None)
    model, records = training.train_coarse(data, cfg.train, cfg.net, log_hook=hook, **kwargs)
    if records:
        figures.loss_curves(records, out / "coarse_losses.png")
    click.echo(f"coarse stage done; checkpoint at {ckpt_path}")


@main.command("train-fine")
@_train_options
@click.option("--mode", default="full", show_default=True, help="Ablation mode name.")
@click.option("--coarse", "coarse_path", default=None, type=click.Path(), help="Coarse checkpoint (required for full mode).")
@click.option("--grid", "grid_path", default=None, type=click.Path(), help="Weight-grid file (built from the body when absent).")
@_handle_errors
def train_fine_cmd(dataset, out_dir, config_path, epochs, lr, seed, resume, mode, coarse_path, grid_path):
    """Train the fine stage (displacements, normals, skinning weights)."""
    cfg = _load_run_config(
        config_path, dataset=dataset, output_dir=out_dir, mode=mode,
        grid_path=grid_path, train_fine_epochs=epochs, train_learning_rate=lr, seed=seed,
    )
    out = Path(out_dir)
    _echo_config(cfg, out)
    ablation = parse_mode(cfg.mode)
    data = fileio.load_dataset(dataset)
    model = None
    if ablation.uses_coarse:
        if not coarse_path:
            raise ConfigError("mode 'full' requires --coarse CHECKPOINT")
        model, net_cfg, _, _, _ = _model_from_checkpoint(coarse_path)
        cfg.net = net_cfg
    grid = _build_or_load_grid(cfg, data, out) if ablation.needs_grid else None
    ckpt_path, log_path = out / "fine.pt", out / "fine_log.txt"
    kwargs: dict = {}
    if resume:
        model, net_cfg, train_cfg, _, payload = _model_from_checkpoint(ckpt_path)
        cfg.net, cfg.train = net_cfg, train_cfg
        kwargs = dict(
            start_epoch=payload["epoch"] + 1,
            optimizer_state=payload["optimizer_state"],
            rng_state=payload["numpy_rng_state"],
        )
    hook = _checkpoint_hook(ckpt_path, log_path, cfg.net, cfg.train, "fine", ablation.value)
    model, records = training.train_fine(
        data, cfg.train, cfg.net, ablation, model=model, grid=grid, log_hook=hook, **kwargs
    )
    if records:
        figures.loss_curves(records, out / "fine_losses.png")
    click.echo(f"fine stage ({ablation.value}) done; checkpoint at {ckpt_path}")


# ---------------------------------------------------------------------------
# inference-style commands
# ---------------------------------------------------------------------------


def _prepare_inference(dataset, checkpoint, grid_path, out: Path):
    data = fileio.load_dataset(dataset)
    model, net_cfg, train_cfg, mode, _ = _model_from_checkpoint(checkpoint)
    if mode is None:
        raise ConfigError(f"{checkpoint}: not a fine-stage checkpoint")
    grid = None
    if mode.needs_grid:
        cfg = RunConfig(grid_path=grid_path)
        grid = _build_or_load_grid(cfg, data, out)
    return data, model, mode, grid


def _emit_predictions(out: Path, name_pattern: str, entries) -> list[dict]:
    manifest = []
    for fid, pred in entries:
        pts, nrm = pred.posed_numpy()
        rel = name_pattern.format(fid)
        fileio.write_ply(out / rel, ClothedScan(pts, nrm), comment=f"frame {fid}")
        manifest.append({"frame": int(fid), "file": rel, "points": int(len(pts))})
    return manifest


@main.command()
@click.option("--dataset", required=True, type=click.Path(), help="Dataset directory (body + poses).")
@click.option("--checkpoint", required=True, type=click.Path(), help="Fine-stage checkpoint.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory for PLY frames.")
@click.option("--split", default="test", show_default=True, type=click.Choice(["train", "test", "all"]), help="Which frames to infer.")
@click.option("--resolution", default=104, show_default=True, help="Inference UV query resolution.")
@click.option("--grid", "grid_path", default=None, type=click.Path(), help="Weight-grid file.")
@click.option("--upsample-iterations", default=0, show_default=True, help="Adaptive upsampling iterations per frame.")
@_handle_errors
def infer(dataset, checkpoint, out_dir, split, resolution, grid_path, upsample_iterations):
    """Run dense inference over dataset frames and write one PLY per frame."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, model, mode, grid = _prepare_inference(dataset, checkpoint, grid_path, out)
    frames = {
        "train": data.train_frames,
        "test": data.test_frames,
        "all": data.frames,
    }[split]
    queries = TorchQueries.from_queries(uv_query_grid(data.body, resolution), torch.float32)
    entries = []
    for f in frames:
        pred = training.infer_frame(data.body, f.pose, model, mode, queries, grid=grid)
        if upsample_iterations > 0:
            pred = pipeline.upsample(
                data.body, f.pose, model, pred, upsample_iterations, grid=grid, rng=f.frame_id
            )
        entries.append((f.frame_id, pred))
    manifest = _emit_predictions(out, "frame_{:04d}.ply", entries)
    fileio.dump_json(out / "predictions.json", {"mode": mode.value, "frames": manifest})
    click.echo(f"wrote {len(manifest)} frames to {out}")


@main.command()
@click.option("--dataset", required=True, type=click.Path(), help="Dataset directory (for the body).")
@click.option("--checkpoint", required=True, type=click.Path(), help="Fine-stage checkpoint.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--kind", default="walk", show_default=True, type=click.Choice(["walk", "legs-spread", "random"]), help="Pose sequence for the animation.")
@click.option("--frames", default=60, show_default=True, help="Animation length.")
@click.option("--seed", default=None, type=int, help="Pose generator seed.")
@click.option("--resolution", default=104, show_default=True, help="Inference UV query resolution.")
@click.option("--grid", "grid_path", default=None, type=click.Path(), help="Weight-grid file.")
@_handle_errors
def animate(dataset, checkpoint, out_dir, kind, frames, seed, resolution, grid_path):
    """Animate the learned avatar over a novel pose sequence."""
    seed = default_seed() if seed is None else seed
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, model, mode, grid = _prepare_inference(dataset, checkpoint, grid_path, out)
    poses = synthdata.make_pose_sequence(kind, frames, seed)
    fileio.write_poses(out / "poses.txt", poses)
    queries = TorchQueries.from_queries(uv_query_grid(data.body, resolution), torch.float32)
    entries = [
        (i, training.infer_frame(data.body, pose, model, mode, queries, grid=grid))
        for i, pose in enumerate(poses)
    ]
    manifest = _emit_predictions(out, "frame_{:04d}.ply", entries)
    fileio.dump_json(
        out / "predictions.json",
        {"mode": mode.value, "pose_kind": kind, "seed": seed, "frames": manifest},
    )
    click.echo(f"animated {len(manifest)} frames to {out}")


@main.command()
@click.option("--dataset", required=True, type=click.Path(), help="Hole-punched training dataset.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--config", "config_path", default=None, type=click.Path(), help="RunConfig JSON file.")
@click.option("--coarse-epochs", default=None, type=int, help="Override coarse epochs.")
@click.option("--fine-epochs", default=None, type=int, help="Override fine epochs.")
@click.option("--seed", default=None, type=int, help="Override the training seed.")
@click.option("--resolution", default=128, show_default=True, help="Completion query resolution.")
@click.option("--reference", default=None, type=click.Path(), help="Un-holed dataset; adds a completion-quality report.")
@_handle_errors
def complete(dataset, out_dir, config_path, coarse_epochs, fine_epochs, seed, resolution, reference):
    """Train on incomplete scans, then re-infer the training poses to fill holes."""
    cfg = _load_run_config(
        config_path, dataset=dataset, output_dir=out_dir, mode="full",
        train_coarse_epochs=coarse_epochs, train_fine_epochs=fine_epochs, seed=seed,
    )
    out = Path(out_dir)
    _echo_config(cfg, out)
    data = fileio.load_dataset(dataset)
    grid = _build_or_load_grid(cfg, data, out)
    model, coarse_records = training.train_coarse(data, cfg.train, cfg.net)
    _write_log(out / "coarse_log.txt", coarse_records)
    model, fine_records = training.train_fine(
        data, cfg.train, cfg.net, AblationMode.FULL, model=model, grid=grid
    )
    _write_log(out / "fine_log.txt", fine_records)
    fileio.save_checkpoint(
        out / "fine.pt", model, cfg.net, cfg.train, "fine", AblationMode.FULL.value,
        cfg.train.fine_epochs - 1,
    )
    queries = TorchQueries.from_queries(uv_query_grid(data.body, resolution), torch.float32)
    entries = []
    for f in data.train_frames:
        pred = training.infer_frame(data.body, f.pose, model, AblationMode.FULL, queries, grid=grid)
        entries.append((f.frame_id, pred))
    manifest = _emit_predictions(out, "completed_{:04d}.ply", entries)
    fileio.dump_json(out / "predictions.json", {"mode": "full", "frames": manifest})
    click.echo(f"completed {len(manifest)} training frames into {out}")
    if reference:
        ref = fileio.load_dataset(reference)
        ref_by_id = {f.frame_id: f for f in ref.frames}
        holed_by_id = {f.frame_id: f for f in data.frames}
        rows = []
        for fid, pred in entries:
            gt = ref_by_id[fid].scan
            completed_cd = geometry.chamfer(pred.posed_numpy()[0], gt.points).value
            holed_cd = geometry.chamfer(holed_by_id[fid].scan.points, gt.points).value
            rows.append((fid, completed_cd, holed_cd))
        lines = ["frame\tcompleted_cd\tholed_cd"] + [
            f"{fid}\t{c:.9e}\t{h:.9e}" for fid, c, h in rows
        ]
        fileio.atomic_write_text(out / "completion_report.tsv", "\n".join(lines) + "\n")
        mean_c = float(np.mean([c for _, c, _ in rows]))
        mean_h = float(np.mean([h for _, _, h in rows]))
        click.echo(
            f"completion CD {mean_c * CHAMFER_REPORT_SCALE:.4f} vs holed-input CD "
            f"{mean_h * CHAMFER_REPORT_SCALE:.4f} (x1e-4 m^2), ratio {mean_c / mean_h:.3f}"
        )


@main.command()
@click.option("--dataset", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--checkpoint", required=True, type=click.Path(), help="Fine-stage checkpoint.")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--iterations", default=3, show_default=True, help="Upsampling iterations.")
@click.option("--split", default="test", show_default=True, type=click.Choice(["train", "test"]), help="Frames to process.")
@click.option("--resolution", default=104, show_default=True, help="Base inference resolution.")
@click.option("--grid", "grid_path", default=None, type=click.Path(), help="Weight-grid file.")
@_handle_errors
def upsample(dataset, checkpoint, out_dir, iterations, split, resolution, grid_path):
    """Density-adaptive upsampling post-process over inferred frames."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data, model, mode, grid = _prepare_inference(dataset, checkpoint, grid_path, out)
    frames = data.test_frames if split == "test" else data.train_frames
    queries = TorchQueries.from_queries(uv_query_grid(data.body, resolution), torch.float32)
    entries, rows = [], []
    for f in frames:
        base = training.infer_frame(data.body, f.pose, model, mode, queries, grid=grid)
        dense = pipeline.upsample(
            data.body, f.pose, model, base, iterations, grid=grid, rng=f.frame_id
        )
        before = geometry.knn_radius(base.posed_numpy()[0]).radius.max()
        after = geometry.knn_radius(dense.posed_numpy()[0]).radius.max()
        rows.append((f.frame_id, len(base.queries), len(dense.queries), before, after))
        entries.append((f.frame_id, dense))
    manifest = _emit_predictions(out, "frame_{:04d}.ply", entries)
    lines = ["frame\tpoints_before\tpoints_after\tmax_knn_before\tmax_knn_after"] + [
        f"{fid}\t{nb}\t{na}\t{b:.6e}\t{a:.6e}" for fid, nb, na, b, a in rows
    ]
    fileio.atomic_write_text(out / "upsample_report.tsv", "\n".join(lines) + "\n")
    fileio.dump_json(out / "predictions.json", {"mode": mode.value, "frames": manifest})
    click.echo(f"upsampled {len(manifest)} frames ({iterations} iterations) into {out}")


@main.command("eval")
@click.option("--dataset", required=True, type=click.Path(), help="Dataset directory.")
@click.option("--checkpoint", default=None, type=click.Path(), help="Fine-stage checkpoint (omit with --self-check).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Report directory.")
@click.option("--split", default="test", show_default=True, type=click.Choice(["train", "test"]), help="Frames to evaluate.")
@click.option("--resolution", default=104, show_default=True, help="Inference resolution.")
@click.option("--grid", "grid_path", default=None, type=click.Path(), help="Weight-grid file.")
@click.option("--self-check", is_flag=True, help="Score the ground truth against itself (CD = NML = 0).")
@_handle_errors
def eval_cmd(dataset, checkpoint, out_dir, split, resolution, grid_path, self_check):
    """Evaluate held-out Chamfer distance and normal discrepancy."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = fileio.load_dataset(dataset)
    if self_check:
        frames = data.test_frames if split == "test" else data.train_frames
        records = []
        for f in frames:
            res = geometry.chamfer(f.scan.points, f.scan.points)
            nml = geometry.normal_l1(f.scan.normals, f.scan.normals, res.index_xy)
            records.append(training.EvalRecord(f.frame_id, res.value, nml))
        means = {
            "chamfer": float(np.mean([r.chamfer for r in records])),
            "normal": float(np.mean([r.normal for r in records])),
        }
        mode_name = "self-check"
    else:
        if not checkpoint:
            raise ConfigError("--checkpoint is required unless --self-check is given")
        model, _, _, mode, _ = _model_from_checkpoint(checkpoint)
        if mode is None:
            raise ConfigError(f"{checkpoint}: not a fine-stage checkpoint")
        grid = None
        if mode.needs_grid:
            grid = _build_or_load_grid(RunConfig(grid_path=grid_path), data, out)
        records, means = training.evaluate(
            model, data, mode, resolution=resolution, grid=grid, split=split
        )
        mode_name = mode.value
    lines = ["frame\tchamfer_m2\tnormal_l1"] + [
        f"{r.frame_id}\t{r.chamfer:.9e}\t{r.normal:.9e}" for r in records
    ]
    fileio.atomic_write_text(out / "metrics.tsv", "\n".join(lines) + "\n")
    fileio.dump_json(
        out / "summary.json",
        {
            "mode": mode_name,
            "split": split,
            "frames": len(records),
            "chamfer_mean_m2": means["chamfer"],
            "normal_mean": means["normal"],
            "chamfer_mean_scaled_1e4": means["chamfer"] * CHAMFER_REPORT_SCALE,
            "normal_mean_scaled_1e1": means["normal"] * NORMAL_REPORT_SCALE,
        },
    )
    figures.eval_metrics(records, out / "metrics.png", title=f"{mode_name} on {split} frames")
    click.echo(
        f"{mode_name}: CD {means['chamfer'] * CHAMFER_REPORT_SCALE:.4f} x1e-4 m^2, "
        f"NML {means['normal'] * NORMAL_REPORT_SCALE:.4f} x1e-1 over {len(records)} frames"
    )


@main.command("export-lbs-field")
@click.option("--dataset", required=True, type=click.Path(), help="Dataset directory (for the body).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Output directory.")
@click.option("--resolution", default=48, show_default=True, help="Grid resolution per axis.")
@click.option("--iterations", default=24, show_default=True, help="Smoothing iterations.")
@click.option("--tolerance", default=1e-5, show_default=True, help="Smoothing stop tolerance.")
@click.option("--axis", default="x", show_default=True, type=click.Choice(["x", "y", "z"]), help="Slice axis for the figure.")
@_handle_errors
def export_lbs_field(dataset, out_dir, resolution, iterations, tolerance, axis):
    """Build, smooth, save, and visualize the skinning-weight field."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = fileio.load_dataset(dataset)
    bbox = skinning_field.body_field_bbox(data.body)
    raw = skinning_field.diffuse_nn(data.body, bbox, resolution)
    smoothed = skinning_field.smooth(raw, max_iterations=iterations, tolerance=tolerance)
    fileio.write_weight_grid(out / "field.lbs", smoothed)
    axis_id = {"x": 0, "y": 1, "z": 2}[axis]
    figures.field_slices(raw, smoothed, axis_id, out / "field_slice.png")
    e0, e1 = skinning_field.smoothing_energy(raw), skinning_field.smoothing_energy(smoothed)
    fileio.dump_json(
        out / "field_summary.json",
        {
            "resolution": resolution,
            "iterations": iterations,
            "energy_initial": e0,
            "energy_final": e1,
            "energy_ratio": e1 / e0 if e0 > 0 else 0.0,
        },
    )
    click.echo(f"field saved to {out / 'field.lbs'} (energy {e0:.2f} -> {e1:.2f})")


@main.command()
@click.option("--step", default=1e-5, show_default=True, help="Finite-difference step.")
@click.option("--tolerance", default=1e-4, show_default=True, help="Max allowed relative error.")
@click.option("--out", "out_dir", default=None, type=click.Path(), help="Optional report directory.")
@_handle_errors
def gradcheck(step, tolerance, out_dir):
    """Verify analytic gradients of every loss term against finite differences."""
    results = run_gradient_checks(step=step)
    worst = max(results.values())
    for name, err in results.items():
        click.echo(f"{name:8s} max relative error {err:.3e}")
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fileio.dump_json(out / "gradcheck.json", {"results": results, "tolerance": tolerance})
    if worst > tolerance:
        click.echo(f"FAIL: worst error {worst:.3e} > {tolerance:g}", err=True)
        sys.exit(1)
    click.echo(f"OK: worst error {worst:.3e} <= {tolerance:g}")


def run_gradient_checks(step: float = 1e-5, seed: int = 0) -> dict[str, float]:
    """Tiny double-precision model + batch; returns per-loss max relative error."""
    from .networks import MlpSpec

    torch.set_num_threads(1)
    net_cfg = NetConfig(
        coarse_code_dim=8,
        fine_code_dim=6,
        pose_feat_dim=6,
        fine_grid_size=6,
        pose_map_resolution=8,
        unet_base_channels=3,
        unet_depth=1,
        shape_mlp=MlpSpec(width=12, depth=4, skip_at=2, branch_at=3),
        lbs_width=10,
        lbs_depth=3,
        init_seed=seed,
    )
    model = build_model(net_cfg, torch.float64)
    body = synthdata.build_body(_tiny_body_spec())
    poses = synthdata.make_pose_sequence("random", 3, seed=seed + 1)
    scan = synthdata.generate_scan(
        body, poses[1], synthdata.default_garment(), seed=seed + 2, n_points=24
    )
    cfg = TrainConfig(coarse_epochs=1, fine_epochs=1, normal_warmup_epoch=0)
    batch = training.make_gradcheck_batch(
        model, body, poses[1], scan, cfg, n_queries=12, seed=seed + 3
    )
    return {
        name: training.gradient_check(model, batch, name, step=step)
        for name in ("cd", "normal", "rgl", "lbs", "reproj", "total")
    }


def _tiny_body_spec() -> synthdata.SynthBodySpec:
    return synthdata.SynthBodySpec(
        azimuth_segments=8, rings_per_meter=40, point_resolution=24
    )


if __name__ == "__main__":
    main()
