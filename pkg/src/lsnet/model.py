"""LS-Net: fully convolutional extractor with classifier and regressor heads.

The extractor has four stages of three padded 3x3 convolutions; the third
convolution of each stage has stride 2 (or stride 1 followed by 2x2 max
pooling in ``max_pool`` mode). Each head is an unpadded 2x2 "transformation"
convolution followed by a 1x1 output convolution, so an ``F x F`` feature map
yields ``(F-1) x (F-1)`` lattice outputs.

Tensors at the public boundary are channels-last: images ``[B, S, S, 3]``,
class logits ``[B, L, L, 2]`` (channel 1 = line present), regression
``[B, L, L, 4]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit
import torch
from torch import nn
import torch.nn.functional as F

from lsnet.errors import ConfigError, ContractError

N_STAGES = 4
BLOCKS_PER_STAGE = 3
DOWNSAMPLE_FACTOR = 2 ** N_STAGES
DOWNSAMPLING_MODES = ("strided_conv", "max_pool")


@dataclass
class ModelConfig:
    input_size: int = 512
    input_channels: int = 3
    channel_plan: list = field(default_factory=lambda: [64, 128, 256, 512])
    blocks_per_stage: int = BLOCKS_PER_STAGE
    norm_groups: int = 32
    head_width: int = 512
    downsampling_mode: str = "strided_conv"

    def __post_init__(self):
        self.channel_plan = [int(c) for c in self.channel_plan]
        self.validate()

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """CPU-sized preset: input 256, widths [16, 32, 64, 128]."""
        kw = dict(input_size=256, channel_plan=[16, 32, 64, 128], head_width=128)
        kw.update(overrides)
        return cls(**kw)

    @property
    def feature_size(self) -> int:
        return self.input_size // DOWNSAMPLE_FACTOR

    @property
    def lattice_size(self) -> int:
        return self.feature_size - 1

    @property
    def cell_size(self) -> int:
        # F = 2 * S_m and S_m = input / cell
        return 2 * self.input_size // self.feature_size

    def groups_for(self, channels: int) -> int:
        return min(self.norm_groups, channels)

    def validate(self):
        if len(self.channel_plan) != N_STAGES:
            raise ConfigError(f"channel_plan needs {N_STAGES} stage widths, got {self.channel_plan}")
        if self.blocks_per_stage != BLOCKS_PER_STAGE:
            raise ConfigError(f"blocks_per_stage is fixed at {BLOCKS_PER_STAGE}")
        if self.downsampling_mode not in DOWNSAMPLING_MODES:
            raise ConfigError(f"downsampling_mode must be one of {DOWNSAMPLING_MODES}")
        if self.input_size % DOWNSAMPLE_FACTOR or self.input_size < 2 * DOWNSAMPLE_FACTOR:
            raise ConfigError(
                f"input_size {self.input_size} must be a multiple of {DOWNSAMPLE_FACTOR} "
                f"and at least {2 * DOWNSAMPLE_FACTOR}"
            )
        if self.feature_size % 2:
            raise ConfigError(
                f"feature map side {self.feature_size} must be even (F = 2 * S_m); "
                f"input_size must be a multiple of {2 * DOWNSAMPLE_FACTOR}"
            )
        if self.norm_groups < 1:
            raise ConfigError("norm_groups must be >= 1")
        for ch in self.channel_plan + [self.head_width]:
            if ch < 1 or ch % self.groups_for(ch):
                raise ConfigError(
                    f"norm_groups={self.norm_groups} does not divide {ch} channels"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class ConvGNReLU(nn.Module):
    def __init__(self, cin, cout, kernel, stride, padding, groups, pool=False):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, stride, padding)
        self.norm = nn.GroupNorm(groups, cout)
        self.pool = pool

    def forward(self, x):
        x = F.relu(self.norm(self.conv(x)))
        if self.pool:
            x = F.max_pool2d(x, 2)
        return x


class Head(nn.Module):
    def __init__(self, cin, width, groups, n_out):
        super().__init__()
        self.transform = ConvGNReLU(cin, width, 2, 1, 0, groups)
        self.out = nn.Conv2d(width, n_out, 1)

    def forward(self, x):
        return self.out(self.transform(x))


class LSNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        pooled = config.downsampling_mode == "max_pool"
        stages = []
        cin = config.input_channels
        for width in config.channel_plan:
            g = config.groups_for(width)
            blocks = [ConvGNReLU(cin, width, 3, 1, 1, g), ConvGNReLU(width, width, 3, 1, 1, g)]
            if pooled:
                blocks.append(ConvGNReLU(width, width, 3, 1, 1, g, pool=True))
            else:
                blocks.append(ConvGNReLU(width, width, 3, 2, 1, g))
            stages.append(nn.Sequential(*blocks))
            cin = width
        self.stages = nn.Sequential(*stages)
        hg = config.groups_for(config.head_width)
        self.cls_head = Head(cin, config.head_width, hg, 2)
        self.reg_head = Head(cin, config.head_width, hg, 4)

    def forward(self, x):
        """Channels-first in, channels-last out."""
        feats = self.stages(x)
        cls = self.cls_head(feats).permute(0, 2, 3, 1)
        reg = self.reg_head(feats).permute(0, 2, 3, 1)
        return cls, reg


def _canonical_pairs(model: LSNet):
    # (canonical name, tensor) in a fixed order
    def conv_params(prefix, conv, norm=None):
        out = [(f"{prefix}.filter", conv.weight), (f"{prefix}.bias", conv.bias)]
        if norm is not None:
            out += [(f"{prefix}.gn_scale", norm.weight), (f"{prefix}.gn_offset", norm.bias)]
        return out

    pairs = []
    for i, stage in enumerate(model.stages, start=1):
        for j, block in enumerate(stage, start=1):
            pairs += conv_params(f"stage{i}.block{j}", block.conv, block.norm)
    for name, head in (("cls", model.cls_head), ("reg", model.reg_head)):
        pairs += conv_params(f"head.{name}.transform", head.transform.conv, head.transform.norm)
        pairs += conv_params(f"head.{name}.out", head.out)
    return pairs


def named_parameters(model: LSNet) -> dict:
    """Canonical parameter names mapped to the live tensors."""
    return dict(_canonical_pairs(model))


def init_model(config: ModelConfig, seed: int = 0) -> LSNet:
    """Build an LSNet with fan-in scaled Gaussian filters and zero biases."""
    config.validate()
    model = LSNet(config)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in _canonical_pairs(model):
            kind = name.rsplit(".", 1)[1]
            if kind == "filter":
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.copy_(torch.randn(p.shape, generator=gen) * math.sqrt(2.0 / fan_in))
            elif kind == "gn_scale":
                p.fill_(1.0)
            else:
                p.zero_()
    return model


def count_parameters(model: LSNet) -> int:
    return sum(p.numel() for p in model.parameters())


def _to_nchw(images, config: ModelConfig) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    x = x.to(torch.float32) if x.dtype not in (torch.float32, torch.float64) else x
    s = config.input_size
    if x.ndim != 4 or tuple(x.shape[1:]) != (s, s, config.input_channels):
        raise ContractError(
            f"expected images [B, {s}, {s}, {config.input_channels}], got {tuple(x.shape)}"
        )
    return x.permute(0, 3, 1, 2).contiguous()


def forward(model: LSNet, images, mode: str = "eval"):
    """Run the network on channels-last images in [0, 1].

    Returns ``(class_logits [B, L, L, 2], reg_out [B, L, L, 4])``. In
    ``eval`` mode no graph is recorded.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _to_nchw(images, model.config)
    x = x.to(next(model.parameters()).dtype)
    if mode == "train":
        model.train()
        return model(x)
    model.eval()
    with torch.no_grad():
        return model(x)


def class_probabilities(class_logits):
    """Softmax probability of the "line present" channel."""
    if isinstance(class_logits, torch.Tensor):
        return torch.softmax(class_logits, dim=-1)[..., 1]
    z = np.asarray(class_logits, dtype=np.float64)
    # two-way softmax == logistic of the logit gap
    return expit(z[..., 1] - z[..., 0])


def save_checkpoint(path, model: LSNet, step: int = 0, extra: dict | None = None):
    """Write an ``.npz`` archive of canonical parameters plus metadata.

    Filters are stored ``[out, in, kh, kw]``. ``extra`` maps additional array
    names (for example optimizer moments) to arrays.
    """
    arrays = {name: p.detach().cpu().numpy() for name, p in _canonical_pairs(model)}
    arrays["meta.config"] = np.array(json.dumps(model.config.to_dict()))
    arrays["meta.step"] = np.array(int(step), dtype=np.int64)
    if extra:
        arrays.update(extra)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Return ``(model, step, archive)`` from a checkpoint written by ``save_checkpoint``."""
    with np.load(path, allow_pickle=False) as data:
        archive = {k: data[k] for k in data.files}
    config = ModelConfig.from_dict(json.loads(str(archive["meta.config"])))
    model = LSNet(config)
    with torch.no_grad():
        for name, p in _canonical_pairs(model):
            if name not in archive:
                raise ContractError(f"checkpoint {path} lacks parameter {name}")
            arr = archive[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise ContractError(f"{name}: shape {arr.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    return model, int(archive["meta.step"]), archive
