"""The three predictors plus the pose-feature encoder and latent codes.

Coarse and fine shape nets share one two-headed MLP design (displacement +
normal heads, skip connection into the trunk); the skinning-weight net is a
smaller MLP with a softmax head. Pose features come from a small U-Net over
the UV positional map and are queried per point with bilinear interpolation,
as is the fine latent feature image. Everything is a plain torch module so
parameters, gradients, and checkpoints behave the usual way.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ValidationError


@dataclass
class MlpSpec:
    """Two-headed MLP layout: `depth` linear layers of `width` neurons.

    The query input is re-concatenated at layer `skip_at`; from layer
    `branch_at` on, the remaining layers are duplicated per output head.
    """

    width: int = 64
    depth: int = 8
    skip_at: int = 4
    branch_at: int = 5
    activation: str = "softplus"

    def __post_init__(self):
        if self.width <= 0 or self.depth < 2:
            raise ValidationError("MlpSpec needs positive width and depth >= 2")
        if not (1 < self.skip_at < self.branch_at <= self.depth):
            raise ValidationError("require 1 < skip_at < branch_at <= depth")


def paper_scale_mlp() -> MlpSpec:
    return MlpSpec(width=256)


@dataclass
class NetConfig:
    """Dimensions of all model components (desk-scale defaults)."""

    joint_count: int = 8
    coarse_code_dim: int = 64
    fine_code_dim: int = 32
    pose_feat_dim: int = 32
    fine_grid_size: int = 32  # H = W of the fine latent image
    pose_map_resolution: int = 32
    unet_base_channels: int = 16
    unet_depth: int = 3
    shape_mlp: MlpSpec = field(default_factory=MlpSpec)
    lbs_width: int = 64
    lbs_depth: int = 5
    init_seed: int = 0

    def __post_init__(self):
        if isinstance(self.shape_mlp, dict):
            self.shape_mlp = MlpSpec(**self.shape_mlp)
        if self.pose_map_resolution % (2**self.unet_depth) != 0:
            raise ValidationError(
                f"pose map resolution {self.pose_map_resolution} not divisible "
                f"by 2^{self.unet_depth}"
            )


def _activation(name: str) -> nn.Module:
    if name == "softplus":
        return nn.Softplus()
    if name == "leakyrelu":
        return nn.LeakyReLU(0.2)
    raise ValidationError(f"unknown activation {name!r}")


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not torch.isfinite(x).all():
        raise ValidationError(f"non-finite values in {what}")


class ShapeMlp(nn.Module):
    """Displacement + normal predictor. The displacement head's final layer
    is zero-initialized so the predicted shape starts on its base surface."""

    def __init__(self, in_dim: int, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        self.in_dim = in_dim
        act = spec.activation
        trunk: list[nn.Module] = []
        d = in_dim
        for layer in range(1, spec.branch_at):
            d_in = d + (in_dim if layer == spec.skip_at else 0)
            trunk.append(nn.Linear(d_in, spec.width))
            trunk.append(_activation(act))
            d = spec.width
        self.trunk = nn.ModuleList(trunk)

        def make_head(zero_final: bool) -> nn.Sequential:
            layers: list[nn.Module] = []
            hd = d
            for layer in range(spec.branch_at, spec.depth):
                hd_in = hd + (in_dim if layer == spec.skip_at else 0)
                layers.append(nn.Linear(hd_in, spec.width))
                layers.append(_activation(act))
                hd = spec.width
            final = nn.Linear(hd, 3)
            if zero_final:
                nn.init.zeros_(final.weight)
                nn.init.zeros_(final.bias)
            layers.append(final)
            return nn.Sequential(*layers)

        self.displacement_head = make_head(zero_final=True)
        self.normal_head = make_head(zero_final=False)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        _check_finite(x, "shape MLP input")
        h = x
        layer = 1
        for mod in self.trunk:
            if isinstance(mod, nn.Linear):
                if layer == self.spec.skip_at:
                    h = torch.cat([h, x], dim=-1)
                h = mod(h)
                layer += 1
            else:
                h = mod(h)
        # heads replay the skip if the skip layer falls inside them
        def run_head(head: nn.Sequential) -> torch.Tensor:
            hh, ll = h, layer
            for mod in head:
                if isinstance(mod, nn.Linear):
                    if ll == self.spec.skip_at:
                        hh = torch.cat([hh, x], dim=-1)
                    hh = mod(hh)
                    ll += 1
                else:
                    hh = mod(hh)
            return hh

        return run_head(self.displacement_head), run_head(self.normal_head)


class LbsMlp(nn.Module):
    """Skinning-weight predictor; softmax output, uniform at init."""

    def __init__(self, in_dim: int, joint_count: int, width: int, depth: int):
        super().__init__()
        layers: list[nn.Module] = []
        d = in_dim
        for _ in range(depth - 1):
            layers.append(nn.Linear(d, width))
            layers.append(nn.LeakyReLU(0.2))
            d = width
        final = nn.Linear(d, joint_count)
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        layers.append(final)
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_finite(x, "LBS MLP input")
        return torch.softmax(self.net(x), dim=-1)


class PoseUnet(nn.Module):
    """Small encoder-decoder with skip connections over the UV positional map.

    Input channels: 3 posed coordinates (zero-filled where invalid) plus the
    validity mask. Spatial dimensions are preserved.
    """

    def __init__(self, out_channels: int, base_channels: int, depth: int):
        super().__init__()
        self.depth = depth
        cin = 4
        chans = [base_channels * (2**i) for i in range(depth)]
        self.down = nn.ModuleList()
        c_prev = cin
        for c in chans:
            self.down.append(
                nn.Sequential(
                    nn.Conv2d(c_prev, c, 3, stride=2, padding=1),
                    nn.LeakyReLU(0.2),
                    nn.Conv2d(c, c, 3, padding=1),
                    nn.LeakyReLU(0.2),
                )
            )
            c_prev = c
        self.up = nn.ModuleList()
        for i in reversed(range(depth)):
            c_skip = chans[i - 1] if i > 0 else cin
            self.up.append(
                nn.Sequential(
                    nn.Conv2d(chans[i] + c_skip, max(chans[i] // 2, base_channels), 3, padding=1),
                    nn.LeakyReLU(0.2),
                )
            )
        self.final = nn.Conv2d(max(chans[0] // 2, base_channels), out_channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % (2**self.depth) != 0 or x.shape[-2] % (2**self.depth) != 0:
            raise ValidationError("pose map resolution not divisible by 2^depth")
        _check_finite(x, "pose encoder input")
        skips = [x]
        h = x
        for block in self.down:
            h = block(h)
            skips.append(h)
        for i, block in enumerate(self.up):
            h = torch.nn.functional.interpolate(h, scale_factor=2, mode="nearest")
            skip = skips[self.depth - 1 - i]
            h = block(torch.cat([h, skip], dim=1))
        return self.final(h)


def bilinear_query(image: torch.Tensor, uv: torch.Tensor) -> torch.Tensor:
    """Samples a (C, H, W) feature image at uv in [0, 1]^2 -> (N, C).

    Pixel centers sit at ((i + 0.5) / W, (j + 0.5) / H); queries are clamped
    to the valid sampling range. Differentiable w.r.t. the image.
    """
    C, H, W = image.shape
    u = torch.clamp(uv[:, 0] * W - 0.5, 0.0, W - 1.0)
    v = torch.clamp(uv[:, 1] * H - 0.5, 0.0, H - 1.0)
    u0 = torch.clamp(u.floor().long(), 0, W - 2) if W > 1 else torch.zeros_like(u).long()
    v0 = torch.clamp(v.floor().long(), 0, H - 2) if H > 1 else torch.zeros_like(v).long()
    fu = (u - u0.to(u.dtype)).unsqueeze(0)
    fv = (v - v0.to(v.dtype)).unsqueeze(0)
    u1 = torch.clamp(u0 + 1, max=W - 1)
    v1 = torch.clamp(v0 + 1, max=H - 1)
    f00 = image[:, v0, u0]
    f10 = image[:, v0, u1]
    f01 = image[:, v1, u0]
    f11 = image[:, v1, u1]
    out = (
        f00 * (1 - fu) * (1 - fv)
        + f10 * fu * (1 - fv)
        + f01 * (1 - fu) * fv
        + f11 * fu * fv
    )
    return out.transpose(0, 1)


class LatentCodes(nn.Module):
    """Auto-decoded codes: one global coarse vector, one fine feature image."""

    def __init__(self, coarse_dim: int, fine_dim: int, grid_size: int):
        super().__init__()
        self.z_coarse = nn.Parameter(torch.randn(coarse_dim) * 0.01)
        self.z_fine = nn.Parameter(torch.randn(fine_dim, grid_size, grid_size) * 0.01)

    def query_fine(self, uv: torch.Tensor) -> torch.Tensor:
        return bilinear_query(self.z_fine, uv)


class ModelState(nn.Module):
    """All trainable state: three predictors, the pose encoder, and the codes."""

    def __init__(self, config: NetConfig):
        super().__init__()
        self.config = config
        J = config.joint_count
        self.coarse_net = ShapeMlp(3 + config.coarse_code_dim, config.shape_mlp)
        self.fine_net = ShapeMlp(
            3 + config.fine_code_dim + config.pose_feat_dim, config.shape_mlp
        )
        self.lbs_net = LbsMlp(3 + config.fine_code_dim, J, config.lbs_width, config.lbs_depth)
        self.pose_encoder = PoseUnet(
            config.pose_feat_dim, config.unet_base_channels, config.unet_depth
        )
        self.codes = LatentCodes(
            config.coarse_code_dim, config.fine_code_dim, config.fine_grid_size
        )

    # ---- forward ops ------------------------------------------------------

    def coarse_points(self, b_hat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = self.codes.z_coarse.unsqueeze(0).expand(b_hat.shape[0], -1)
        return self.coarse_net(torch.cat([b_hat, z], dim=-1))

    def fine_points(
        self, b_hat: torch.Tensor, z_fine: torch.Tensor, z_pose: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.fine_net(torch.cat([b_hat, z_fine, z_pose], dim=-1))

    def lbs_weights(self, b_hat: torch.Tensor, z_fine: torch.Tensor) -> torch.Tensor:
        return self.lbs_net(torch.cat([b_hat, z_fine], dim=-1))

    def pose_features(self, pos_map: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """(3, H, W) posed-coordinate map + (H, W) mask -> (D_p, H, W)."""
        x = torch.cat([pos_map * mask.unsqueeze(0), mask.unsqueeze(0).to(pos_map.dtype)], dim=0)
        return self.pose_encoder(x.unsqueeze(0)).squeeze(0)

    def query_fine_code(self, uv: torch.Tensor) -> torch.Tensor:
        return self.codes.query_fine(uv)

    # ---- parameter groups -------------------------------------------------

    def coarse_parameters(self) -> list[nn.Parameter]:
        return list(self.coarse_net.parameters()) + [self.codes.z_coarse]

    def fine_parameters(self) -> list[nn.Parameter]:
        return (
            list(self.fine_net.parameters())
            + list(self.lbs_net.parameters())
            + list(self.pose_encoder.parameters())
            + [self.codes.z_fine]
        )

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: NetConfig, dtype: torch.dtype = torch.float32) -> ModelState:
    """Deterministic model construction from the config's init seed."""
    torch.manual_seed(config.init_seed)
    model = ModelState(config)
    return model.to(dtype)


def positional_map_tensors(
    image: np.ndarray, mask: np.ndarray, dtype: torch.dtype
) -> tuple[torch.Tensor, torch.Tensor]:
    """numpy (R, R, 3) map + (R, R) mask -> torch (3, H, W), (H, W)."""
    t = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).to(dtype)
    m = torch.from_numpy(np.ascontiguousarray(mask))
    return t, m
