"""Constrained-convolution encoder with a stochastic Gaussian code and a softmax decoder.

The network maps an image patch to a Gaussian code (mu, sigma) whose mean
and scale are read off a 1x1 "feature pixel": a zero-sum-constrained filter
bank extracts local noise residuals, a stack of plain and residual
convolutions (all stride 1, batch-norm + ReLU) shrinks the patch down to
1x1 spatial extent, and a 1x1 head emits 2*d channels that are split into
mu and a pre-scale mapped through a positivity transform.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    """Raised when a model configuration cannot be realized."""


@dataclass(frozen=True)
class ConstrainedConvSpec:
    """Geometry of the residual-extracting filter bank."""

    num_filters: int = 16
    support: int = 3
    in_channels: int = 3

    def __post_init__(self):
        if self.num_filters < 1:
            raise ConfigError("num_filters must be >= 1")
        if self.support < 1 or self.support % 2 == 0:
            raise ConfigError("support must be odd and positive so a center tap exists")
        if self.in_channels < 1:
            raise ConfigError("in_channels must be >= 1")


@dataclass(frozen=True)
class EncoderConfig:
    """Shape of the residual encoder.

    The trunk is: constrained conv -> [conv(a) -> res block -> conv(b) ->
    res block] * num_groups -> closing conv -> 1x1 head.  Plain convs use no
    padding, residual blocks preserve size, and the closing kernel absorbs
    whatever spatial extent remains so the head always sees a 1x1 map.
    """

    patch_size: int = 17
    channels: int = 16
    num_groups: int = 1
    code_dim: int = 8
    scale_param: str = "softplus"  # or "exp-half-logvar"
    group_kernels: tuple[int, int] = (7, 5)

    def __post_init__(self):
        if self.patch_size < 1 or self.channels < 1 or self.code_dim < 1:
            raise ConfigError("patch_size, channels and code_dim must be positive")
        if self.num_groups < 0:
            raise ConfigError("num_groups must be >= 0")
        if self.scale_param not in ("softplus", "exp-half-logvar"):
            raise ConfigError(f"unknown scale_param {self.scale_param!r}")
        if any(k < 1 or k % 2 == 0 for k in self.group_kernels):
            raise ConfigError("group_kernels must be odd and positive")

    def spatial_sizes(self, support: int) -> list[int]:
        """Spatial extent after the constrained conv and after each plain conv."""
        sizes = [self.patch_size - (support - 1)]
        for _ in range(self.num_groups):
            for k in self.group_kernels:
                sizes.append(sizes[-1] - (k - 1))
        return sizes

    def closing_kernel(self, support: int) -> int:
        """Kernel size of the last plain conv: reduces the map to exactly 1x1."""
        remaining = self.spatial_sizes(support)[-1]
        if remaining < 1:
            raise ConfigError(
                f"patch_size {self.patch_size} is too small for {self.num_groups} "
                f"group(s) with kernels {self.group_kernels} and support {support}"
            )
        return remaining


def paper_scale_config() -> tuple[ConstrainedConvSpec, EncoderConfig]:
    """Full-scale configuration: 49x49 patches, 64 filters, 4 groups, 72-channel head."""
    return (
        ConstrainedConvSpec(num_filters=64, support=3, in_channels=3),
        EncoderConfig(patch_size=49, channels=64, num_groups=4, code_dim=36),
    )


@dataclass
class StochasticCode:
    """Gaussian code: mean and strictly positive scale, both of length d."""

    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise ValueError("mean and scale must have the same shape")
        if not bool((self.scale > 0).all()):
            raise ValueError("scale must be strictly positive elementwise")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


def constrained_conv_forward(patch: torch.Tensor, spec: ConstrainedConvSpec,
                             weights: torch.Tensor) -> torch.Tensor:
    """Valid convolution of a patch with the residual filter bank.

    patch: (C, H, W) or (B, C, H, W); weights: (k, C, S, S).
    """
    expected = (spec.num_filters, spec.in_channels, spec.support, spec.support)
    if tuple(weights.shape) != expected:
        raise ConfigError(f"weights shape {tuple(weights.shape)} != {expected}")
    squeeze = patch.dim() == 3
    if squeeze:
        patch = patch.unsqueeze(0)
    if patch.shape[1] != spec.in_channels:
        raise ConfigError(f"patch has {patch.shape[1]} channels, spec wants {spec.in_channels}")
    if patch.shape[-2] < spec.support or patch.shape[-1] < spec.support:
        raise ConfigError("patch spatial dims must be >= filter support")
    out = F.conv2d(patch, weights)
    return out.squeeze(0) if squeeze else out


def constraint_penalty(weights: torch.Tensor) -> torch.Tensor:
    """sqrt of the sum over filters of squared total weight-sums.

    Zero exactly when every filter's weights (all taps, all input channels)
    sum to zero; the zero case is returned without a sqrt so the gradient
    stays finite there.
    """
    sums = weights.sum(dim=tuple(range(1, weights.dim())))
    sq = sums.square().sum()
    if float(sq) == 0.0:
        return sq
    return sq.sqrt()


def project_zero_sum(weights: torch.Tensor) -> torch.Tensor:
    """Hard projection onto the zero-sum constraint: subtract each filter's mean."""
    mean = weights.mean(dim=tuple(range(1, weights.dim())), keepdim=True)
    return weights - mean


def sample_code(code: StochasticCode, noise: torch.Tensor) -> torch.Tensor:
    """Reparameterized draw z = mu + sigma * eps."""
    if noise.shape != code.mean.shape:
        raise ValueError("noise must match the code shape")
    return code.mean + code.scale * noise


class _ResidualBlock(nn.Module):
    """Two 3x3 same-padded convolutions with an identity skip (stride 1)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(channels)

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(x + y)


class _ConvBnRelu(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel, bias=False)
        self.bn = nn.BatchNorm2d(cout)

    def forward(self, x):
        return F.relu(self.bn(self.conv(x)))


class FingerprintNet(nn.Module):
    """Encoder producing a stochastic code plus a logistic-regression decoder."""

    def __init__(self, conv_spec: ConstrainedConvSpec, encoder: EncoderConfig,
                 num_classes: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        if num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        self.conv_spec = conv_spec
        self.encoder_config = encoder
        self.num_classes = num_classes

        closing = encoder.closing_kernel(conv_spec.support)

        self.constrained = nn.Conv2d(conv_spec.in_channels, conv_spec.num_filters,
                                     conv_spec.support, bias=False)
        self.constrained_bn = nn.BatchNorm2d(conv_spec.num_filters)

        c = encoder.channels
        trunk: list[nn.Module] = []
        cin = conv_spec.num_filters
        for _ in range(encoder.num_groups):
            ka, kb = encoder.group_kernels
            trunk += [_ConvBnRelu(cin, c, ka), _ResidualBlock(c),
                      _ConvBnRelu(c, c, kb), _ResidualBlock(c)]
            cin = c
        trunk.append(_ConvBnRelu(cin, c, closing))
        self.trunk = nn.Sequential(*trunk)

        self.head = nn.Conv2d(c, 2 * encoder.code_dim, 1)
        self.decoder = nn.Linear(encoder.code_dim, num_classes)
        if dtype != torch.float32:
            self.to(dtype)

    def forward(self, patches: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, C, P, P) -> (mu, sigma), each (B, d)."""
        p = self.encoder_config.patch_size
        if patches.dim() != 4 or patches.shape[-2:] != (p, p):
            raise ConfigError(f"expected (B, C, {p}, {p}) input, got {tuple(patches.shape)}")
        x = F.relu(self.constrained_bn(self.constrained(patches)))
        x = self.trunk(x)
        out = self.head(x).flatten(1)
        d = self.encoder_config.code_dim
        mu, pre_scale = out[:, :d], out[:, d:]
        if self.encoder_config.scale_param == "softplus":
            sigma = F.softplus(pre_scale).clamp_min(1e-6)
        else:
            sigma = torch.exp(0.5 * pre_scale)
        return mu, sigma

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Code sample -> class probabilities (softmax over one dense layer)."""
        if z.shape[-1] != self.encoder_config.code_dim:
            raise ConfigError(f"code length {z.shape[-1]} != {self.encoder_config.code_dim}")
        return F.softmax(self.decoder(z), dim=-1)

    def project_constrained_filters(self):
        """In-place hard enforcement of the zero-sum constraint on the filter bank."""
        with torch.no_grad():
            self.constrained.weight.copy_(project_zero_sum(self.constrained.weight))


def encode(patch: np.ndarray | torch.Tensor, net: FingerprintNet) -> StochasticCode:
    """Deterministic code for one patch (H, W, C in [0,1]) or a (B, H, W, C) batch.

    Runs in eval mode so the output is a pure function of (patch, params).
    """
    arr = patch
    if isinstance(arr, np.ndarray):
        arr = torch.from_numpy(np.ascontiguousarray(arr))
    dtype = next(net.parameters()).dtype
    if arr.dim() == 3:
        arr = arr.unsqueeze(0)
        single = True
    else:
        single = False
    arr = arr.permute(0, 3, 1, 2).to(dtype)
    was_training = net.training
    net.eval()
    with torch.no_grad():
        mu, sigma = net(arr)
    if was_training:
        net.train()
    if single:
        mu, sigma = mu[0], sigma[0]
    return StochasticCode(mean=mu, scale=sigma)


# ---------------------------------------------------------------------------
# Checkpoint container: a single binary file with a JSON header followed by
# raw little-endian tensor bytes.  Deterministic for identical contents, so
# repeated runs with the same seed produce byte-identical files.

_MAGIC = b"IBSPLC01"
CHECKPOINT_VERSION = 1

_DTYPES = {"float32": torch.float32, "float64": torch.float64,
           "int64": torch.int64, "uint8": torch.uint8}


def save_checkpoint(path, net: FingerprintNet, torch_rng: torch.Generator | None = None,
                    numpy_rng_state: dict | None = None, extra: dict | None = None):
    """Write configs, all parameter/buffer tensors, and RNG state to one file."""
    tensors: list[tuple[str, torch.Tensor]] = []
    for name, t in net.state_dict().items():
        tensors.append((name, t))
    if torch_rng is not None:
        tensors.append(("__torch_rng_state__", torch_rng.get_state()))

    manifest = []
    blobs = []
    for name, t in tensors:
        t = t.detach().contiguous().cpu()
        dt = str(t.dtype).removeprefix("torch.")
        if dt not in _DTYPES:
            raise ValueError(f"unsupported tensor dtype {dt}")
        raw = t.numpy().tobytes()
        manifest.append({"name": name, "dtype": dt, "shape": list(t.shape),
                         "nbytes": len(raw)})
        blobs.append(raw)

    header = {
        "format_version": CHECKPOINT_VERSION,
        "conv_spec": asdict(net.conv_spec),
        "encoder": asdict(net.encoder_config),
        "num_classes": net.num_classes,
        "dtype": str(next(net.parameters()).dtype).removeprefix("torch."),
        "numpy_rng_state": numpy_rng_state,
        "extra": extra or {},
        "tensors": manifest,
    }
    head = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[FingerprintNet, dict]:
    """Rebuild the network from a checkpoint; returns (net, header metadata)."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        if header["format_version"] > CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['format_version']}")
        state = {}
        for entry in header["tensors"]:
            raw = fh.read(entry["nbytes"])
            arr = np.frombuffer(raw, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
            state[entry["name"]] = torch.from_numpy(arr)

    enc = header["encoder"]
    enc["group_kernels"] = tuple(enc["group_kernels"])
    net = FingerprintNet(ConstrainedConvSpec(**header["conv_spec"]),
                         EncoderConfig(**enc),
                         header["num_classes"],
                         dtype=_DTYPES[header["dtype"]])
    state.pop("__torch_rng_state__", None)
    net.load_state_dict(state)
    net.eval()
    return net, header


def load_rng_state(path) -> torch.Tensor | None:
    """Recover the saved torch generator state, if the checkpoint has one."""
    with open(path, "rb") as fh:
        if fh.read(8) != _MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        for entry in header["tensors"]:
            raw = fh.read(entry["nbytes"])
            if entry["name"] == "__torch_rng_state__":
                arr = np.frombuffer(raw, dtype=entry["dtype"]).copy()
                return torch.from_numpy(arr)
    return None
