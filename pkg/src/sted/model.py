"""Networks: generator (encoder/decoder with a factorized latent), patch
discriminator, and the two gaze+head estimators.

The generator's latent is one invariant code ``z0`` plus one
:class:`~sted.rotor.FactorState` per configured factor.  Supervised factors
(gaze, head) and extraneous factors are treated identically by the
networks; only the losses distinguish them.

Two estimators exist on purpose: ``EstimatorFd`` participates in training
(functional loss features, pseudo-label supervision), while
``EstimatorFdPrime`` has a different architecture and head and is reserved
for evaluation, so metrics are never read through a network the generator
was optimized against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import Tensor, nn

from .errors import ConfigurationError
from .rotor import FactorSpec, FactorState, transform

_NEG_SLOPE = 0.2


def default_factors(extraneous_1dof: int = 0, extraneous_2dof: int = 0, units: int = 8):
    """Gaze and head plus the requested number of extraneous factors."""
    factors = [
        FactorSpec(name="gaze", dof=2, units=units, supervised=True),
        FactorSpec(name="head", dof=2, units=units, supervised=True),
    ]
    for i in range(extraneous_1dof):
        factors.append(FactorSpec(name=f"ext{i + 1}", dof=1, units=max(units // 2, 2)))
    for i in range(extraneous_2dof):
        factors.append(
            FactorSpec(name=f"ext{extraneous_1dof + i + 1}", dof=2, units=max(units // 2, 2))
        )
    return tuple(factors)


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    base_width: int = 16
    growth: int = 8
    z0_units: int = 64
    factors: tuple = field(default_factory=default_factors)
    disc_width: int = 24
    est_width: int = 16
    est_backbone: str = "small"  # "small" | "vgg16"
    eval_backbone: str = "small"  # "small" | "resnet50"

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        size = self.image_size
        if size < 32 or size & (size - 1):
            raise ConfigurationError(f"image_size must be a power of two >= 32, got {size}")
        supervised = [f for f in self.factors if f.supervised]
        names = sorted(f.name for f in supervised)
        if names != ["gaze", "head"]:
            raise ConfigurationError(
                "factors must contain exactly two supervised specs named gaze and head"
            )
        if len({f.name for f in self.factors}) != len(self.factors):
            raise ConfigurationError("factor names must be unique")

    @property
    def n_blocks(self) -> int:
        # Downsample to a 2x2 bottleneck.
        return int(math.log2(self.image_size)) - 1

    @property
    def latent_size(self) -> int:
        return self.z0_units + sum(f.embedding_size for f in self.factors)

    def factor(self, name: str) -> FactorSpec:
        for f in self.factors:
            if f.name == name:
                return f
        raise ConfigurationError(f"no factor named {name!r}")


def paper_config() -> ModelConfig:
    """Full-scale configuration: 128px, 1024-unit invariant code, four 1-DoF
    and four 2-DoF factors of 16 units each, deep estimator backbones."""
    factors = (
        FactorSpec(name="gaze", dof=2, units=16, supervised=True),
        FactorSpec(name="head", dof=2, units=16, supervised=True),
        FactorSpec(name="ext1", dof=1, units=16),
        FactorSpec(name="ext2", dof=1, units=16),
        FactorSpec(name="ext3", dof=1, units=16),
        FactorSpec(name="ext4", dof=1, units=16),
        FactorSpec(name="ext5", dof=2, units=16),
        FactorSpec(name="ext6", dof=2, units=16),
    )
    return ModelConfig(
        image_size=128,
        base_width=32,
        growth=32,
        z0_units=1024,
        factors=factors,
        disc_width=64,
        est_width=64,
        est_backbone="vgg16",
        eval_backbone="resnet50",
    )


@dataclass
class LatentState:
    """Invariant code plus one factor state per configured factor."""

    z0: Tensor
    factors: list  # FactorState per config.factors; dof-0 stored as flat rows

    def flatten(self) -> Tensor:
        parts = [self.z0]
        for f in self.factors:
            parts.append(f.embedding.reshape(f.embedding.shape[0], -1))
        return torch.cat(parts, dim=1)

    def detach(self) -> "LatentState":
        return LatentState(
            z0=self.z0.detach(),
            factors=[
                FactorState(f.embedding.detach(), f.pseudo_condition.detach())
                for f in self.factors
            ],
        )


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=True)


class DenseBlock(nn.Module):
    """Dense connectivity: each layer sees all previous feature maps."""

    def __init__(self, channels: int, growth: int, layers: int = 2):
        super().__init__()
        self.layers = nn.ModuleList()
        c = channels
        for _ in range(layers):
            self.layers.append(
                nn.Sequential(
                    nn.Conv2d(c, growth, 3, padding=1),
                    _norm(growth),
                    nn.LeakyReLU(_NEG_SLOPE, inplace=True),
                )
            )
            c += growth
        self.out_channels = c

    def forward(self, x):
        feats = [x]
        for layer in self.layers:
            feats.append(layer(torch.cat(feats, dim=1)))
        return torch.cat(feats, dim=1)


def _stage_widths(cfg: ModelConfig):
    cap = 8 * cfg.base_width
    return [min(cfg.base_width * 2**i, cap) for i in range(cfg.n_blocks + 1)]


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = _stage_widths(cfg)
        self.stem = nn.Sequential(
            nn.Conv2d(3, widths[0], 3, padding=1),
            _norm(widths[0]),
            nn.LeakyReLU(_NEG_SLOPE, inplace=True),
        )
        stages = []
        for i in range(cfg.n_blocks):
            block = DenseBlock(widths[i], cfg.growth)
            stages.append(
                nn.Sequential(
                    block,
                    nn.Conv2d(block.out_channels, widths[i + 1], 3, stride=2, padding=1),
                    _norm(widths[i + 1]),
                    nn.LeakyReLU(_NEG_SLOPE, inplace=True),
                )
            )
        self.stages = nn.Sequential(*stages)
        self.feat_dim = widths[-1] * 4

    def forward(self, x):
        h = self.stages(self.stem(x))
        return h.reshape(h.shape[0], -1)


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        widths = _stage_widths(cfg)[::-1]
        self.entry = nn.Linear(cfg.latent_size, widths[0] * 4)
        self.entry_channels = widths[0]
        stages = []
        for i in range(cfg.n_blocks):
            block = DenseBlock(widths[i + 1], cfg.growth)
            stages.append(
                nn.Sequential(
                    nn.ConvTranspose2d(widths[i], widths[i + 1], 4, stride=2, padding=1),
                    _norm(widths[i + 1]),
                    nn.LeakyReLU(_NEG_SLOPE, inplace=True),
                    block,
                )
            )
            widths[i + 1] = block.out_channels
        self.stages = nn.Sequential(*stages)
        self.head = nn.Conv2d(widths[-1], 3, 3, padding=1)

    def forward(self, flat):
        h = self.entry(flat).reshape(-1, self.entry_channels, 2, 2)
        return torch.tanh(self.head(self.stages(h)))


class Generator(nn.Module):
    """Encoder, factorized latent heads, and decoder."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        feat = self.encoder.feat_dim
        self.z0_head = nn.Linear(feat, cfg.z0_units)
        self.embedding_heads = nn.ModuleList(
            [nn.Linear(feat, f.embedding_size) for f in cfg.factors]
        )
        self.condition_heads = nn.ModuleList(
            [nn.Linear(feat, f.dof) if f.dof else None for f in cfg.factors]
        )
        self.decoder = Decoder(cfg)

    def _check_image(self, image: Tensor):
        s = self.cfg.image_size
        if image.ndim != 4 or image.shape[1] != 3 or image.shape[2:] != (s, s):
            raise ValueError(f"expected images shaped (B, 3, {s}, {s}), got {tuple(image.shape)}")

    def encode(self, image: Tensor) -> LatentState:
        self._check_image(image)
        feat = self.encoder(image)
        factors = []
        for spec, emb_head, cond_head in zip(
            self.cfg.factors, self.embedding_heads, self.condition_heads
        ):
            emb = emb_head(feat)
            if spec.dof:
                emb = emb.reshape(-1, spec.units, spec.dof + 1)
                cond = 0.5 * math.pi * torch.tanh(cond_head(feat))
            else:
                cond = feat.new_zeros(feat.shape[0], 0)
            factors.append(FactorState(embedding=emb, pseudo_condition=cond))
        return LatentState(z0=self.z0_head(feat), factors=factors)

    def decode(self, state: LatentState) -> Tensor:
        flat = state.flatten()
        if flat.shape[1] != self.cfg.latent_size:
            raise ValueError(
                f"latent size {flat.shape[1]} does not match config {self.cfg.latent_size}"
            )
        return self.decoder(flat)

    def transform_state(
        self, state: LatentState, targets: dict, align_extraneous: LatentState | None = None
    ) -> LatentState:
        """Retarget factors named in `targets`; optionally align every other
        dof>=1 factor to the pseudo-conditions of `align_extraneous`."""
        for name in targets:
            if self.cfg.factor(name).dof == 0:
                raise ConfigurationError(f"factor {name!r} has no condition to retarget")
        out = []
        for i, spec in enumerate(self.cfg.factors):
            f = state.factors[i]
            if spec.name in targets:
                out.append(transform(f, targets[spec.name]))
            elif align_extraneous is not None and spec.dof and not spec.supervised:
                out.append(transform(f, align_extraneous.factors[i].pseudo_condition))
            else:
                out.append(f)
        return LatentState(z0=state.z0, factors=out)

    def redirect(
        self, image: Tensor, targets: dict, align_extraneous: LatentState | None = None
    ) -> Tensor:
        state = self.encode(image)
        return self.decode(self.transform_state(state, targets, align_extraneous))

    def forward(self, image: Tensor) -> Tensor:
        return self.decode(self.encode(image))


class PatchDiscriminator(nn.Module):
    """Strided conv stack scoring overlapping patches.

    Three stride-2 convs then two stride-1 convs, all 4x4: at 128px input
    the score map is 14x14; at size S it is S/8 - 2.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.disc_width
        self.cfg = cfg
        self.net = nn.Sequential(
            nn.Conv2d(3, w, 4, stride=2, padding=1),
            nn.LeakyReLU(_NEG_SLOPE, inplace=True),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2 * w),
            nn.LeakyReLU(_NEG_SLOPE, inplace=True),
            nn.Conv2d(2 * w, 4 * w, 4, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(4 * w),
            nn.LeakyReLU(_NEG_SLOPE, inplace=True),
            nn.Conv2d(4 * w, 8 * w, 4, stride=1, padding=1, bias=False),
            nn.BatchNorm2d(8 * w),
            nn.LeakyReLU(_NEG_SLOPE, inplace=True),
            nn.Conv2d(8 * w, 1, 4, stride=1, padding=1),
        )

    def map_size(self) -> int:
        return self.cfg.image_size // 8 - 2

    def forward(self, image: Tensor) -> Tensor:
        s = self.cfg.image_size
        if image.ndim != 4 or image.shape[2:] != (s, s):
            raise ValueError(f"expected (B, 3, {s}, {s}) images")
        return self.net(image)


@dataclass
class Estimate:
    gaze: Tensor  # (B, 2) pitch, yaw
    head: Tensor
    features: list  # post-activation maps, outermost first


class _SmallEstimatorBackbone(nn.Module):
    """Five stride-2 conv stages, no normalization, post-activation taps."""

    def __init__(self, width: int):
        super().__init__()
        widths = [width, 2 * width, 4 * width, 4 * width, 4 * width]
        convs = []
        c = 3
        for w in widths:
            convs.append(nn.Conv2d(c, w, 3, stride=2, padding=1))
            c = w
        self.convs = nn.ModuleList(convs)
        self.out_channels = c

    def forward(self, x):
        feats = []
        for conv in self.convs:
            x = torch.nn.functional.leaky_relu(conv(x), _NEG_SLOPE)
            feats.append(x)
        return x, feats


class EstimatorFd(nn.Module):
    """Training-side estimator: bounded angle head plus feature taps."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.est_backbone == "small":
            self.backbone = _SmallEstimatorBackbone(cfg.est_width)
            feat = self.backbone.out_channels
        elif cfg.est_backbone == "vgg16":
            self.backbone = _Vgg16Backbone()
            feat = 512
        else:
            raise ConfigurationError(f"unknown est_backbone {cfg.est_backbone!r}")
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Sequential(
            nn.Linear(feat, 64),
            nn.LeakyReLU(_NEG_SLOPE, inplace=True),
            nn.Linear(64, 64),
            nn.LeakyReLU(_NEG_SLOPE, inplace=True),
            nn.Linear(64, 4),
        )

    def forward(self, image: Tensor) -> Estimate:
        s = self.cfg.image_size
        if image.ndim != 4 or image.shape[2:] != (s, s):
            raise ValueError(f"expected (B, 3, {s}, {s}) images")
        x, feats = self.backbone(image)
        angles = 0.5 * math.pi * torch.tanh(self.head(self.pool(x).flatten(1)))
        return Estimate(gaze=angles[:, :2], head=angles[:, 2:], features=feats)


class _Vgg16Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import vgg16
        except ImportError as e:
            raise ConfigurationError(
                "est_backbone='vgg16' needs torchvision installed"
            ) from e
        self.features = vgg16(weights=None).features

    def forward(self, x):
        feats = []
        for layer in self.features:
            x = layer(x)
            if isinstance(layer, nn.MaxPool2d):
                feats.append(x)
        return x, feats


class _ResidualStage(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.skip = nn.Conv2d(c_in, c_out, 1, stride=2, bias=False)

    def forward(self, x):
        h = torch.nn.functional.leaky_relu(self.bn1(self.conv1(x)), _NEG_SLOPE)
        h = self.bn2(self.conv2(h))
        return torch.nn.functional.leaky_relu(h + self.skip(x), _NEG_SLOPE)


class _SmallResidualBackbone(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.stem = nn.Conv2d(3, width, 3, padding=1)
        self.stages = nn.ModuleList(
            [
                _ResidualStage(width, 2 * width),
                _ResidualStage(2 * width, 4 * width),
                _ResidualStage(4 * width, 4 * width),
                _ResidualStage(4 * width, 4 * width),
            ]
        )
        self.out_channels = 4 * width

    def forward(self, x):
        x = torch.nn.functional.leaky_relu(self.stem(x), _NEG_SLOPE)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return x, feats


class EstimatorFdPrime(nn.Module):
    """Evaluation-side estimator: different backbone family, linear head."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        if cfg.eval_backbone == "small":
            self.backbone = _SmallResidualBackbone(cfg.est_width)
            feat = self.backbone.out_channels
        elif cfg.eval_backbone == "resnet50":
            self.backbone = _ResNet50Backbone()
            feat = 2048
        else:
            raise ConfigurationError(f"unknown eval_backbone {cfg.eval_backbone!r}")
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(feat, 4)  # linear on purpose: unbounded angles

    def forward(self, image: Tensor) -> Estimate:
        s = self.cfg.image_size
        if image.ndim != 4 or image.shape[2:] != (s, s):
            raise ValueError(f"expected (B, 3, {s}, {s}) images")
        x, feats = self.backbone(image)
        angles = self.head(self.pool(x).flatten(1))
        return Estimate(gaze=angles[:, :2], head=angles[:, 2:], features=feats)


class _ResNet50Backbone(nn.Module):
    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import resnet50
        except ImportError as e:
            raise ConfigurationError(
                "eval_backbone='resnet50' needs torchvision installed"
            ) from e
        net = resnet50(weights=None)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.stages = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])

    def forward(self, x):
        x = self.stem(x)
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return x, feats


def images_to_tensor(images, dtype=torch.float32) -> Tensor:
    """uint8 H x W x 3 (optionally batched) -> (B, 3, H, W) in [-1, 1]."""
    import numpy as np

    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    t = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    return t.permute(0, 3, 1, 2) / 127.5 - 1.0


def tensor_to_images(t: Tensor):
    """(B, 3, H, W) in [-1, 1] -> uint8 B x H x W x 3."""
    import numpy as np

    arr = ((t.detach().clamp(-1, 1) + 1.0) * 127.5).round().to(torch.uint8)
    return arr.permute(0, 2, 3, 1).contiguous().numpy()
