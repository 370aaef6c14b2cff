"""Network builders: residual U-Net generator, 3D patch discriminator, predictor.

All networks normalize with :py:class:`MADInstanceNorm3d`, an instance normalization
dividing by the mean absolute deviation instead of the standard deviation. Parameters
are snapshotted as immutable :py:class:`ParameterSet` objects, the checkpoint unit.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from iguane import CONFIG
from iguane.config import config_hash
from iguane.core import Space, Volume
from iguane.errors import ConfigError, IntegrityError, ShapeError, SpaceError
from iguane.utils import array_sha256

FORMAT_VERSION = 1


def get_device(device=None) -> torch.device:
    device = device or CONFIG.get("device") or "auto"
    if device == "auto":
        device = "cuda" if torch.cuda.is_available() else "cpu"
    return torch.device(device)


# Specs
# -----


@dataclass(frozen=True)
class GeneratorSpec:
    levels: int = 3
    """number of down-sampling steps (input dims must be divisible by 2**levels)"""
    base_channels: int = 32
    kernel: int = 3
    skip_connections: bool = True
    residual_output: bool = True
    final_activation: str = "tanh"
    negative_slope: float = 0.2
    eps: float = 1e-5

    def __post_init__(self):
        if not (self.skip_connections and self.residual_output):
            raise ConfigError("generators always use skip connections and residual output")
        if self.final_activation != "tanh":
            raise ConfigError("generator final activation must be tanh")
        if self.levels < 1 or self.base_channels < 1:
            raise ConfigError("levels and base_channels must be positive")


@dataclass(frozen=True)
class DiscriminatorSpec:
    channels: tuple = (64, 128, 256)
    """output channels of the strided k4 blocks (C64S2K4-C128S2K4-C256S2K4)"""
    kernel: int = 4
    stride: int = 2
    final_kernel: int = 3
    negative_slope: float = 0.2
    normalize: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) == 0:
            raise ConfigError("discriminator needs at least one strided block")


@dataclass(frozen=True)
class PredictorSpec:
    """Brain-age style 3D CNN: conv blocks with channel doubling, then a dense head"""

    task: str = "regression"
    """``regression`` (age) or ``classification`` (probability, e.g. AD or sex)"""
    blocks: int = 5
    base_channels: int = 8
    dense: tuple = ()
    """hidden widths of the dense head"""
    dropout: float = 0.0
    target_offset: float = 0.0
    target_scale: float = 1.0
    """regression outputs are ``offset + scale * network output``"""
    eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "dense", tuple(int(d) for d in self.dense))
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown predictor task '{self.task}'")
        if self.blocks < 1 or self.base_channels < 1:
            raise ConfigError("blocks and base_channels must be positive")
        if not self.target_scale > 0:
            raise ConfigError("target_scale must be positive")


SPECS = {
    "generator": GeneratorSpec,
    "discriminator": DiscriminatorSpec,
    "predictor": PredictorSpec,
}


def spec_kind(spec) -> str:
    for kind, cls in SPECS.items():
        if isinstance(spec, cls):
            return kind
    raise TypeError(f"{type(spec).__name__} is not a network spec")


# Layers
# ------


def mad_instance_norm(x: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    """(x - mean) / (MAD + eps) per instance and channel, MAD = mean |x - mean|"""
    dims = tuple(range(2, x.dim()))
    mean = x.mean(dim=dims, keepdim=True)
    centered = x - mean
    mad = centered.abs().mean(dim=dims, keepdim=True)
    return centered / (mad + eps)


class MADInstanceNorm3d(nn.Module):
    def __init__(self, channels, eps=1e-5, affine=True):
        super().__init__()
        self.eps = eps
        if affine:
            self.weight = nn.Parameter(torch.ones(channels))
            self.bias = nn.Parameter(torch.zeros(channels))
        else:
            self.register_parameter("weight", None)
            self.register_parameter("bias", None)

    def forward(self, x):
        x = mad_instance_norm(x, self.eps)
        if self.weight is not None:
            shape = (1, -1) + (1,) * (x.dim() - 2)
            x = x * self.weight.view(shape) + self.bias.view(shape)
        return x


class ConvBlock(nn.Module):
    def __init__(self, in_channels, out_channels, kernel=3, eps=1e-5, negative_slope=0.2):
        super().__init__()
        pad = kernel // 2
        self.block = nn.Sequential(
            nn.Conv3d(in_channels, out_channels, kernel, padding=pad),
            MADInstanceNorm3d(out_channels, eps),
            nn.LeakyReLU(negative_slope),
            nn.Conv3d(out_channels, out_channels, kernel, padding=pad),
            MADInstanceNorm3d(out_channels, eps),
            nn.LeakyReLU(negative_slope),
        )

    def forward(self, x):
        return self.block(x)


def _same_padding(size, kernel, stride):
    """TensorFlow SAME padding (before, after) so that output = ceil(size / stride)"""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


class SamePadConv3d(nn.Conv3d):
    def forward(self, x):
        pads = []
        for size, k, s in zip(reversed(x.shape[2:]), reversed(self.kernel_size), reversed(self.stride)):
            pads += list(_same_padding(size, k, s))
        return super().forward(F.pad(x, pads))


# Networks
# --------


class Generator(nn.Module):
    """Residual 3D U-Net: output = input + tanh(residual), masked to background"""

    def __init__(self, spec: GeneratorSpec = GeneratorSpec()):
        super().__init__()
        self.spec = spec
        channels = [spec.base_channels * 2**i for i in range(spec.levels + 1)]
        kw = dict(kernel=spec.kernel, eps=spec.eps, negative_slope=spec.negative_slope)

        self.encoder = nn.ModuleList()
        in_channels = 1
        for c in channels[:-1]:
            self.encoder.append(ConvBlock(in_channels, c, **kw))
            in_channels = c
        self.bottleneck = ConvBlock(channels[-2], channels[-1], **kw)
        self.decoder = nn.ModuleList(
            ConvBlock(channels[i + 1] + channels[i], channels[i], **kw)
            for i in reversed(range(spec.levels))
        )
        self.output = nn.Conv3d(channels[0], 1, kernel_size=1)

    def zero_residual(self):
        """Zero the output layer: the generator becomes the (masked) identity"""
        with torch.no_grad():
            self.output.weight.zero_()
            self.output.bias.zero_()
        return self

    def check_shape(self, shape):
        factor = 2**self.spec.levels
        if any(n % factor for n in shape[-3:]):
            raise ShapeError(
                f"input dimensions {tuple(shape[-3:])} must be divisible by {factor}"
            )

    def forward(self, x, mask=None, inference=False, background=-1.0):
        self.check_shape(x.shape)
        skips = []
        h = x
        for block in self.encoder:
            h = block(h)
            skips.append(h)
            h = F.max_pool3d(h, 2)
        h = self.bottleneck(h)
        for block, skip in zip(self.decoder, reversed(skips)):
            h = F.interpolate(h, size=skip.shape[2:], mode="trilinear", align_corners=False)
            h = block(torch.cat([h, skip], dim=1))

        out = x + torch.tanh(self.output(h))
        if mask is not None:
            out = torch.where(mask, out, torch.full_like(out, background))
        if inference:
            out = torch.clamp(out, min=background)
        return out


class Discriminator(nn.Module):
    """3D patch discriminator: strided k4 blocks then a k3 score layer"""

    def __init__(self, spec: DiscriminatorSpec = DiscriminatorSpec()):
        super().__init__()
        self.spec = spec
        layers = []
        in_channels = 1
        for c in spec.channels:
            layers.append(SamePadConv3d(in_channels, c, spec.kernel, spec.stride))
            if spec.normalize:
                layers.append(MADInstanceNorm3d(c, spec.eps))
            layers.append(nn.LeakyReLU(spec.negative_slope))
            in_channels = c
        layers.append(
            nn.Conv3d(in_channels, 1, spec.final_kernel, padding=spec.final_kernel // 2)
        )
        self.model = nn.Sequential(*layers)

    def check_shape(self, shape):
        minimum = self.spec.stride ** len(self.spec.channels)
        if any(n < minimum for n in shape[-3:]):
            raise ShapeError(
                f"input dimensions {tuple(shape[-3:])} too small for the discriminator "
                f"(minimum {minimum})"
            )

    def forward(self, x):
        self.check_shape(x.shape)
        return self.model(x)


class Predictor(nn.Module):
    def __init__(self, spec: PredictorSpec = PredictorSpec()):
        super().__init__()
        self.spec = spec
        layers = []
        in_channels = 1
        for i in range(spec.blocks):
            c = spec.base_channels * 2**i
            layers += [ConvBlock(in_channels, c, eps=spec.eps, negative_slope=0.0), nn.MaxPool3d(2)]
            in_channels = c
        self.features = nn.Sequential(*layers)

        head = []
        for width in spec.dense:
            head += [nn.Linear(in_channels, width), nn.ReLU()]
            if spec.dropout > 0:
                head.append(nn.Dropout(spec.dropout))
            in_channels = width
        head.append(nn.Linear(in_channels, 1))
        self.head = nn.Sequential(*head)

    def check_shape(self, shape):
        minimum = 2**self.spec.blocks
        if any(n < minimum for n in shape[-3:]):
            raise ShapeError(
                f"input dimensions {tuple(shape[-3:])} too small for {self.spec.blocks} "
                f"predictor blocks (minimum {minimum})"
            )

    def logits(self, x):
        self.check_shape(x.shape)
        h = self.features(x)
        h = h.mean(dim=(2, 3, 4))
        return self.head(h)[:, 0]

    def forward(self, x):
        z = self.logits(x)
        if self.spec.task == "classification":
            return torch.sigmoid(z)
        return self.spec.target_offset + self.spec.target_scale * z


def build(spec) -> nn.Module:
    """Torch module of any network spec"""
    return {"generator": Generator, "discriminator": Discriminator, "predictor": Predictor}[
        spec_kind(spec)
    ](spec)


def receptive_field(spec: DiscriminatorSpec) -> int:
    """Receptive field (voxels per axis) of one discriminator patch score"""
    layers = [(spec.kernel, spec.stride)] * len(spec.channels) + [(spec.final_kernel, 1)]
    rf = 1
    for kernel, stride in reversed(layers):
        rf = (rf - 1) * stride + kernel
    return rf


def patch_map_shape(spec: DiscriminatorSpec, shape) -> tuple:
    factor = spec.stride ** len(spec.channels)
    return tuple(-(-int(n) // factor) for n in shape)


# Parameters
# ----------


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Immutable snapshot of a network's parameters, tied to its spec by hash"""

    spec: object
    arrays: MappingProxyType = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for name, array in dict(self.arrays).items():
            array = np.array(array, copy=True)
            array.setflags(write=False)
            frozen[name] = array
        object.__setattr__(self, "arrays", MappingProxyType(frozen))

    @property
    def kind(self):
        return spec_kind(self.spec)

    @property
    def spec_hash(self):
        return config_hash(self.spec)

    @property
    def hash(self) -> str:
        """Digest over all arrays (names included)"""
        digests = [f"{k}:{array_sha256(v)}" for k, v in sorted(self.arrays.items())]
        return array_sha256(np.frombuffer("|".join(digests).encode(), dtype=np.uint8))

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterSet":
        arrays = {
            name: tensor.detach().cpu().numpy()
            for name, tensor in module.state_dict().items()
        }
        return cls(module.spec, arrays)

    def to_module(self, device=None, dtype=torch.float32) -> nn.Module:
        module = build(self.spec)
        state = {k: torch.from_numpy(np.array(v)) for k, v in self.arrays.items()}
        try:
            module.load_state_dict(state, strict=True)
        except RuntimeError as err:
            raise IntegrityError(f"parameters do not match the {self.kind} spec: {err}")
        return module.to(device=get_device(device), dtype=dtype)

    def save(self, folder):
        folder = Path(folder)
        folder.mkdir(parents=True, exist_ok=True)
        for name, array in self.arrays.items():
            np.save(folder / f"{name}.npy", array, allow_pickle=False)
        manifest = dict(
            format_version=FORMAT_VERSION,
            kind=self.kind,
            spec=asdict(self.spec),
            spec_hash=self.spec_hash,
            arrays={name: array_sha256(a) for name, a in sorted(self.arrays.items())},
        )
        with open(folder / "manifest.json", "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, folder) -> "ParameterSet":
        """Load and verify a saved parameter set

        Raises
        ------
        IntegrityError
            if the manifest is missing, the spec hash or any array hash does not match
        """
        folder = Path(folder)
        try:
            with open(folder / "manifest.json") as f:
                manifest = json.load(f)
        except (OSError, json.JSONDecodeError) as err:
            raise IntegrityError(f"{folder}: unreadable parameter manifest ({err})")
        if manifest.get("format_version") != FORMAT_VERSION:
            raise IntegrityError(
                f"{folder}: unsupported format version {manifest.get('format_version')}"
            )

        spec = SPECS[manifest["kind"]](**manifest["spec"])
        if config_hash(spec) != manifest["spec_hash"]:
            raise IntegrityError(f"{folder}: spec hash mismatch")

        arrays = {}
        for name, digest in manifest["arrays"].items():
            try:
                array = np.load(folder / f"{name}.npy", allow_pickle=False)
            except (OSError, ValueError) as err:
                raise IntegrityError(f"{folder}: cannot read array {name} ({err})")
            if array_sha256(array) != digest:
                raise IntegrityError(f"{folder}: array {name} hash mismatch")
            arrays[name] = array
        return cls(spec, arrays)


# Forward passes on volumes
# -------------------------


def volume_tensor(vol: Volume, device=None, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(vol.data, dtype=dtype, device=get_device(device))[None, None]


def _module(params, device=None):
    return params.to_module(device) if isinstance(params, ParameterSet) else params


def generator_forward(params, vol: Volume, inference=False, device=None) -> Volume:
    """Translate a model-space volume

    The background is neutralized before the pass and the volume's mask applied to the
    output (background -1). With ``inference``, values below -1 are clipped.
    """
    from iguane.blocks.preprocessing import neutralize_background

    if vol.space != Space.MODEL:
        raise SpaceError(f"generator expects a model_space volume, got {vol.space.value}")
    module = _module(params, device)
    module.eval()
    device = next(module.parameters()).device
    x = volume_tensor(neutralize_background(vol), device)
    mask = torch.as_tensor(vol.mask, device=device)[None, None]
    with torch.no_grad():
        out = module(x, mask=mask, inference=inference, background=vol.background_value)
    result = vol.copy()
    result.data = out[0, 0].cpu().numpy().astype(np.float64)
    return result


def discriminator_forward(params, vol: Volume, device=None) -> np.ndarray:
    """Patch score map of a model-space volume (background neutralized first)"""
    from iguane.blocks.preprocessing import neutralize_background

    if vol.space != Space.MODEL:
        raise SpaceError(
            f"discriminator expects a model_space volume, got {vol.space.value}"
        )
    module = _module(params, device)
    module.eval()
    device = next(module.parameters()).device
    x = volume_tensor(neutralize_background(vol), device)
    with torch.no_grad():
        return module(x)[0, 0].cpu().numpy().astype(np.float64)


def predictor_forward(params, vol: Volume, device=None) -> float:
    """Age estimate or class probability of a volume scaled for prediction"""
    module = _module(params, device)
    module.eval()
    device = next(module.parameters()).device
    with torch.no_grad():
        return float(module(volume_tensor(vol, device))[0])
