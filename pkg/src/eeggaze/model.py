"""The gaze regression network: spatial filter layer, two residual blocks, FC head.

Layer order for the base configuration (input ``[B, 129, 500, 1]``):

    spatial   16 kernels 129x1x1, batchnorm, relu          -> [B, 16, 500, 1]
    block1    N=32 residual block, avg-pool by 2            -> [B, 32, 250, 1]
    block2    N=64 residual block, avg-pool by 2            -> [B, 64, 125, 1]
    flatten   depth-major, then y                           -> [B, 8000]
    fc1       linear 8000->256, relu
    fc2       linear 256->2                                 -> [B, 2]

A residual block is conv(in x 9 x 1) -> bn -> relu -> conv(N x 1 x 1, or
N x 9 x 1 with ``equal_convs``) -> bn, plus the input (through a 1x1
projection conv + bn when ``in != N``), then relu and average pooling.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .nn import AvgPool, BatchNorm, Conv, Layer, Linear, ReLU
from .rng import SplitMix64, derive_seed
from .tensor import NonFiniteError, ShapeError, Tensor

MAGIC = b"EEGM"
VERSION = 1

VARIANTS = {
    "base": dict(use_spatial=True, equal_convs=False),
    "no-spatial": dict(use_spatial=False, equal_convs=False),
    "equal-convs": dict(use_spatial=True, equal_convs=True),
    "no-spatial-equal-convs": dict(use_spatial=False, equal_convs=True),
}


class FormatError(ValueError):
    """Malformed checkpoint or dataset stream."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class ConfigMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 129
    timesteps: int = 500
    spatial_filters: int = 16
    block_widths: tuple[int, ...] = (32, 64)
    fc_width: int = 256
    outputs: int = 2
    use_spatial: bool = True
    equal_convs: bool = False
    conv_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "block_widths", tuple(int(w) for w in self.block_widths))
        if self.outputs != 2:
            raise ValueError("outputs must be 2 (gaze x, y)")
        if not self.block_widths or min(self.block_widths) < 1:
            raise ValueError("block widths must be positive")
        if min(self.channels, self.timesteps, self.spatial_filters, self.fc_width) < 1:
            raise ValueError("channels, timesteps, spatial_filters and fc_width must be positive")
        if self.timesteps >> len(self.block_widths) < 1:
            raise ValueError(f"{self.timesteps} timesteps cannot be pooled {len(self.block_widths)} times")

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
        return cls(**VARIANTS[variant], **kwargs)

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == dict(use_spatial=self.use_spatial, equal_convs=self.equal_convs):
                return name
        raise AssertionError("unreachable")

    @property
    def flags(self) -> int:
        return int(self.use_spatial) | int(self.equal_convs) << 1 | int(self.conv_bias) << 2

    def depths(self) -> list[int]:
        """Feature depth entering each block, then leaving the last."""
        first = self.spatial_filters if self.use_spatial else self.channels
        return [first, *self.block_widths]

    def flat_features(self) -> int:
        return self.block_widths[-1] * (self.timesteps >> len(self.block_widths))


class ResidualBlock(Layer):
    def __init__(self, in_depth: int, width: int, equal_convs: bool, conv_bias: bool,
                 rng: SplitMix64, dtype=np.float32):
        super().__init__()
        self.conv1 = Conv(in_depth, width, 9, rng, conv_bias, dtype)
        self.bn1 = BatchNorm(width, dtype)
        self.relu1 = ReLU()
        self.conv2 = Conv(width, width, 9 if equal_convs else 1, rng, conv_bias, dtype)
        self.bn2 = BatchNorm(width, dtype)
        if in_depth != width:
            self.shortcut = Conv(in_depth, width, 1, rng, conv_bias, dtype)
            self.shortcut_bn = BatchNorm(width, dtype)
        else:
            self.shortcut = self.shortcut_bn = None
        self.relu_out = ReLU()
        self.pool = AvgPool(2)

    def children(self) -> list[tuple[str, Layer]]:
        kids = [("conv1", self.conv1), ("bn1", self.bn1), ("conv2", self.conv2), ("bn2", self.bn2)]
        if self.shortcut is not None:
            kids += [("shortcut", self.shortcut), ("shortcut_bn", self.shortcut_bn)]
        return kids

    def parameters(self):
        return [(f"{k}.{n}", t) for k, layer in self.children() for n, t in layer.parameters()]

    def buffers(self):
        return [(f"{k}.{n}", t) for k, layer in self.children() for n, t in layer.buffers()]

    def pre_pool(self, x: np.ndarray, train: bool) -> np.ndarray:
        h = self.relu1.forward(self.bn1.forward(self.conv1.forward(x, train), train))
        h = self.bn2.forward(self.conv2.forward(h, train), train)
        if self.shortcut is not None:
            s = self.shortcut_bn.forward(self.shortcut.forward(x, train), train)
        else:
            s = x
        return self.relu_out.forward(h + s)

    def forward(self, x, train=True):
        return self.pool.forward(self.pre_pool(x, train))

    def backward(self, grad_out):
        g = self.relu_out.backward(self.pool.backward(grad_out))
        gh = self.conv1.backward(self.bn1.backward(self.relu1.backward(
            self.conv2.backward(self.bn2.backward(g)))))
        if self.shortcut is not None:
            gs = self.shortcut.backward(self.shortcut_bn.backward(g))
        else:
            gs = g
        return gh + gs


class Model:
    """Parameters, running statistics and layer caches for one network.

    ``parameters()`` and ``buffers()`` iterate in a fixed order: spatial
    layer (if present), blocks in order, fc1, fc2. Checkpoints rely on it.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = SplitMix64(derive_seed(seed, "init"))
        c = config
        self.spatial: list[Layer] | None = None
        if c.use_spatial:
            self.spatial = [Conv(c.channels, c.spatial_filters, 1, rng, c.conv_bias, dtype),
                            BatchNorm(c.spatial_filters, dtype), ReLU()]
        depths = c.depths()
        self.blocks = [ResidualBlock(depths[i], w, c.equal_convs, c.conv_bias, rng, dtype)
                       for i, w in enumerate(c.block_widths)]
        self.fc1 = Linear(c.flat_features(), c.fc_width, rng, dtype)
        self.fc_relu = ReLU()
        self.fc2 = Linear(c.fc_width, c.outputs, rng, dtype)
        self._flat_shape: tuple[int, ...] | None = None

    def named_layers(self) -> list[tuple[str, Layer]]:
        layers: list[tuple[str, Layer]] = []
        if self.spatial is not None:
            layers += [("spatial.conv", self.spatial[0]), ("spatial.bn", self.spatial[1])]
        layers += [(f"block{i + 1}", b) for i, b in enumerate(self.blocks)]
        layers += [("fc1", self.fc1), ("fc2", self.fc2)]
        return layers

    def relus(self) -> list[ReLU]:
        rs = [self.spatial[2]] if self.spatial is not None else []
        for b in self.blocks:
            rs += [b.relu1, b.relu_out]
        return rs + [self.fc_relu]

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"{k}.{n}", t) for k, layer in self.named_layers() for n, t in layer.parameters()]

    def buffers(self) -> list[tuple[str, Tensor]]:
        return [(f"{k}.{n}", t) for k, layer in self.named_layers() for n, t in layer.buffers()]

    def num_parameters(self) -> int:
        return sum(t.size for _, t in self.parameters())

    def zero_grad(self) -> None:
        for _, t in self.parameters():
            t.grad = None

    def copy(self) -> "Model":
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Model":
        """A copy with every parameter and buffer cast to ``dtype``."""
        other = self.copy()
        other.dtype = np.dtype(dtype)
        for _, t in other.parameters() + other.buffers():
            t.values = t.values.astype(dtype)
            t.grad = None
        return other

    def forward(self, x: np.ndarray, mode: str = "infer",
                hook: Callable[[str, np.ndarray], None] | None = None) -> np.ndarray:
        """Map ``[B, channels, timesteps, 1]`` to ``[B, 2]``.

        ``hook(name, activation)`` is called after the spatial layer, each
        block, the flatten, fc1 and fc2.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.channels, c.timesteps, 1):
            raise ShapeError(f"expected [B, {c.channels}, {c.timesteps}, 1], got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("non-finite model input")
        train = mode == "train"
        hook = hook or (lambda name, a: None)
        h = x.astype(self.dtype, copy=False)
        if self.spatial is not None:
            for layer in self.spatial:
                h = layer.forward(h, train)
            hook("spatial", h)
        for i, block in enumerate(self.blocks):
            h = block.forward(h, train)
            hook(f"block{i + 1}", h)
        self._flat_shape = h.shape
        h = h.reshape(h.shape[0], -1)
        hook("flatten", h)
        h = self.fc_relu.forward(self.fc1.forward(h, train))
        hook("fc1", h)
        out = self.fc2.forward(h, train)
        hook("fc2", out)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite model output")
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Fill every parameter's ``grad``; returns the gradient w.r.t. the input."""
        if self._flat_shape is None:
            raise RuntimeError("backward called without a prior forward pass")
        g = self.fc1.backward(self.fc_relu.backward(self.fc2.backward(grad_out)))
        g = g.reshape(self._flat_shape)
        self._flat_shape = None
        for block in reversed(self.blocks):
            g = block.backward(g)
        if self.spatial is not None:
            for layer in reversed(self.spatial):
                g = layer.backward(g)
        return g


def build(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Model:
    return Model(config, seed, dtype)


def param_count(config: ModelConfig) -> int:
    """Learnable scalars, counted from the configuration alone."""
    c = config
    bias = int(c.conv_bias)

    def conv(cin, cout, ky):
        return cout * cin * ky + bias * cout

    def bn(ch):
        return 2 * ch

    total = 0
    if c.use_spatial:
        total += conv(c.channels, c.spatial_filters, 1) + bn(c.spatial_filters)
    depths = c.depths()
    for cin, n in zip(depths, c.block_widths):
        total += conv(cin, n, 9) + bn(n)
        total += conv(n, n, 9 if c.equal_convs else 1) + bn(n)
        if cin != n:
            total += conv(cin, n, 1) + bn(n)
    total += c.flat_features() * c.fc_width + c.fc_width
    total += c.fc_width * c.outputs + c.outputs
    return total


# ---------------------------------------------------------------------------
# checkpoint format (little-endian)


def _config_bytes(c: ModelConfig) -> bytes:
    fields = [c.channels, c.timesteps, c.spatial_filters, len(c.block_widths), *c.block_widths,
              c.fc_width, c.outputs, c.flags]
    return struct.pack(f"<{len(fields)}I", *fields)


def serialize(model: Model) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _config_bytes(model.config)]
    for _, t in model.parameters() + model.buffers():
        parts.append(struct.pack(f"<I{t.values.ndim}I", t.values.ndim, *t.shape))
        parts.append(t.values.astype("<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedError(f"stream ends at byte {len(self.data)}, needed {self.pos + n}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, n: int = 1) -> tuple[int, ...]:
        return struct.unpack(f"<{n}I", self.take(4 * n))


def _read_config(r: _Reader) -> ModelConfig:
    channels, timesteps, spatial, n_blocks = r.u32(4)
    widths = r.u32(n_blocks)
    fc_width, outputs, flags = r.u32(3)
    try:
        return ModelConfig(channels=channels, timesteps=timesteps, spatial_filters=spatial,
                           block_widths=widths, fc_width=fc_width, outputs=outputs,
                           use_spatial=bool(flags & 1), equal_convs=bool(flags & 2),
                           conv_bias=bool(flags & 4))
    except ValueError as e:
        raise DimensionMismatchError(f"invalid embedded config: {e}") from e


def deserialize(data: bytes) -> Model:
    r = _Reader(data)
    magic = r.take(4) if len(data) >= 4 else b""
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = r.u32()
    if version != VERSION:
        raise VersionError(f"unsupported checkpoint version {version}")
    config = _read_config(r)
    model = Model(config)
    for name, t in model.parameters() + model.buffers():
        (rank,) = r.u32()
        dims = r.u32(rank)
        if tuple(dims) != t.shape:
            raise DimensionMismatchError(f"{name}: stored shape {dims}, config implies {t.shape}")
        t.values = np.frombuffer(r.take(4 * t.size), dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(data):
        raise FormatError(f"{len(data) - r.pos} trailing bytes after checkpoint")
    return model


def save(model: Model, path) -> None:
    with open(path, "wb") as f:
        f.write(serialize(model))


def load(path, expected: ModelConfig | None = None) -> Model:
    with open(path, "rb") as f:
        model = deserialize(f.read())
    if expected is not None:
        check_config(model, expected)
    return model


def check_config(model: Model, expected: ModelConfig) -> None:
    if model.config != expected:
        raise ConfigMismatchError(
            f"checkpoint holds {model.config}, run is configured for {expected}")


def gradcheck_model(model: Model, x: np.ndarray, target: np.ndarray, eps: float = 1e-4,
                    include_input: bool = True):
    """Check train-mode backward of the whole network on the MSE loss.

    ``model`` must be float64 (see ``Model.astype``); a copy is checked.
    Perturbations that flip any ReLU relative to the unperturbed pass are
    excluded and counted, since central differences across a kink do not
    estimate the derivative. Returns an ``nn.CheckResult``.
    """
    from .nn import check_arrays
    from .optim import mse_loss

    if model.dtype != np.float64:
        raise TypeError("gradcheck_model needs a float64 model")
    m = model.copy()
    x = np.array(x, dtype=np.float64)
    loss, grad = mse_loss(m.forward(x, "train"), target)
    base_masks = [r._cache.copy() for r in m.relus()]
    m.zero_grad()
    grad_x = m.backward(grad)

    def probe():
        value = mse_loss(m.forward(x, "train"), target)[0]
        crossed = any(not np.array_equal(r._cache, b) for r, b in zip(m.relus(), base_masks))
        return value, crossed

    targets = [(name, t.values, t.grad) for name, t in m.parameters()]
    if include_input:
        targets.insert(0, ("input", x, grad_x))
    return check_arrays(probe, targets, eps)
