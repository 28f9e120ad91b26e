"""Dense-encoder U-Net with dual-attention + edge skip connections and deep supervision."""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionMaps, DabState, dab
from .tensor import ShapeError, Tensor

SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
SOBEL_Y = SOBEL_X.T.copy()
EDGE_EPS = 1e-8


@dataclass
class ModelConfig:
    levels: int = 4
    base_channels: int = 16
    dense_layers: int = 2
    growth_rate: int = 0  # 0: half the level width
    num_classes: int = 4
    input_channels: int = 1
    supervision_paths: int = -1  # -1: levels - 1
    attention: bool = True

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.supervision_paths < 0:
            self.supervision_paths = self.levels - 1
        if self.supervision_paths > self.levels - 1:
            raise ValueError(f"at most {self.levels - 1} supervision paths for {self.levels} levels")
        if self.base_channels < 1 or self.dense_layers < 1 or self.num_classes < 2:
            raise ValueError("base_channels, dense_layers must be >= 1 and num_classes >= 2")

    def width(self, level: int) -> int:
        return self.base_channels * 2 ** level

    def growth(self, level: int) -> int:
        return self.growth_rate if self.growth_rate > 0 else max(1, self.width(level) // 2)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer:
    """Parameters and child layers are discovered from attributes in assignment order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + key, value
            elif isinstance(value, (Layer, DabState)):
                yield from value.named_parameters(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, (Layer, DabState)):
                        yield from item.named_parameters(f"{prefix}{key}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in vars(self).items():
            if isinstance(value, np.ndarray):
                yield prefix + key, value
            elif isinstance(value, Layer):
                yield from value.named_buffers(f"{prefix}{key}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield from item.named_buffers(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]


class Conv2d(Layer):
    def __init__(self, in_ch: int, out_ch: int, k: int, rng: np.random.Generator,
                 padding: int = 0, dtype=T.DEFAULT_DTYPE, init: str = "he"):
        fan_in = in_ch * k * k
        if init == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
        else:
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(out_ch, in_ch, k, k))
        self.kernel = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.kernel, self.bias, padding=self.padding)


class BatchNorm2d(Layer):
    def __init__(self, channels: int, dtype=T.DEFAULT_DTYPE, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.batchnorm2d(x, self.gamma, self.beta, self.running_mean, self.running_var,
                             training=training, momentum=self.momentum, eps=self.eps)


class ConvBnRelu(Layer):
    def __init__(self, in_ch: int, out_ch: int, rng, dtype=T.DEFAULT_DTYPE):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return T.relu(self.bn(self.conv(x), training))


class DenseBlock(Layer):
    """Each 3x3 unit sees the concatenation of the block input and all earlier unit outputs;
    a 1x1 transition compresses the full stack to ``width`` channels."""

    def __init__(self, in_ch: int, width: int, growth: int, n_layers: int, rng, dtype=T.DEFAULT_DTYPE):
        self.in_channels = in_ch
        self.width = width
        self.growth = growth
        self.units = [ConvBnRelu(in_ch + i * growth, growth, rng, dtype) for i in range(n_layers)]
        self.transition = Conv2d(in_ch + n_layers * growth, width, 1, rng, dtype=dtype)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"dense block expects {self.in_channels} input channels, got shape {x.shape}")
        features = [x]
        for unit in self.units:
            features.append(unit(T.concat_channels(features), training))
        return self.transition(T.concat_channels(features))


class DecoderLevel(Layer):
    def __init__(self, in_ch: int, width: int, rng, dtype=T.DEFAULT_DTYPE):
        self.reduce = Conv2d(in_ch, width, 1, rng, dtype=dtype)
        self.dab = DabState(width, rng, dtype)
        self.fuse = [ConvBnRelu(2 * width + 1, width, rng, dtype), ConvBnRelu(width, width, rng, dtype)]


class SupervisionHead(Layer):
    def __init__(self, width: int, num_classes: int, factor: int, rng, dtype=T.DEFAULT_DTYPE):
        self.conv = Conv2d(width, num_classes, 1, rng, dtype=dtype, init="uniform")
        self.factor = factor

    def __call__(self, x: Tensor) -> Tensor:
        return T.sigmoid(T.upsample_bilinear(self.conv(x), self.factor))


def edge_features(f_enc: Tensor) -> Tensor:
    """Sobel gradient magnitude of the channel mean, ``[n, 1, h, w]``.

    Borders are replicate-padded so a constant map has zero gradient
    everywhere. The result is a constant: no gradient flows back through it.
    """
    x = np.asarray(f_enc.data, dtype=np.float64).mean(axis=1)
    n, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = np.zeros_like(x)
    gy = np.zeros_like(x)
    for i in range(3):
        for j in range(3):
            window = xp[:, i:i + h, j:j + w]
            gx += SOBEL_X[i, j] * window
            gy += SOBEL_Y[i, j] * window
    mag = np.sqrt(gx * gx + gy * gy + EDGE_EPS)
    return Tensor(mag[:, None].astype(f_enc.dtype))


@dataclass
class ForwardResult:
    main: Tensor
    aux: list[Tensor]
    maps: list[AttentionMaps]  # indexed by level, 0 = full resolution
    edges: list[Tensor]


class DaduModel(Layer):
    def __init__(self, config: Optional[ModelConfig] = None, seed: int = 0, dtype=T.DEFAULT_DTYPE):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)

        self.encoders = []
        in_ch = cfg.input_channels
        for level in range(cfg.levels):
            width = cfg.width(level)
            self.encoders.append(DenseBlock(in_ch, width, cfg.growth(level), cfg.dense_layers, rng, dtype))
            in_ch = width
        self.bottleneck = DenseBlock(in_ch, cfg.width(cfg.levels), cfg.growth(cfg.levels),
                                     cfg.dense_layers, rng, dtype)
        # decoders[i] works at level i; built deepest-first so init order follows data flow
        decoders = {}
        for level in reversed(range(cfg.levels)):
            decoders[level] = DecoderLevel(cfg.width(level + 1), cfg.width(level), rng, dtype)
        self.decoders = [decoders[i] for i in range(cfg.levels)]
        # heads on decoder levels 1..P
        self.heads = [SupervisionHead(cfg.width(level), cfg.num_classes, 2 ** level, rng, dtype)
                      for level in range(1, cfg.supervision_paths + 1)]
        self.final_head = Conv2d(cfg.width(0), cfg.num_classes, 1, rng, dtype=dtype, init="uniform")

    def check_input(self, image: Tensor) -> None:
        n, c, h, w = T._check4(image, "DaduModel")
        if c != self.config.input_channels:
            raise ShapeError(f"model expects {self.config.input_channels} input channel(s), got {c}")
        step = 2 ** self.config.levels
        if h % step or w % step:
            ph = (-h) % step
            pw = (-w) % step
            raise ShapeError(f"input extent {h}x{w} is not divisible by 2^{self.config.levels} = {step}; "
                             f"pad by {ph} rows and {pw} columns")

    def forward(self, image: Tensor, training: bool = False,
                edges: Optional[Sequence[Tensor]] = None) -> ForwardResult:
        """Run the network.

        ``edges`` replaces the computed edge maps (one per level); gradient
        checks use it to hold the stop-gradient edge input fixed.
        """
        self.check_input(image)
        cfg = self.config
        skips = []
        x = image
        for enc in self.encoders:
            x = enc(x, training)
            skips.append(x)
            x = T.maxpool2d(x)
        x = self.bottleneck(x, training)

        maps: list[Optional[AttentionMaps]] = [None] * cfg.levels
        used_edges: list[Optional[Tensor]] = [None] * cfg.levels
        level_out: dict[int, Tensor] = {}
        for level in reversed(range(cfg.levels)):
            dec = self.decoders[level]
            skip = skips[level]
            up = dec.reduce(T.upsample_bilinear(x, 2))
            attended, maps[level] = dab(skip, up, dec.dab, identity=not cfg.attention)
            edge = edges[level] if edges is not None else edge_features(skip)
            used_edges[level] = edge
            x = T.concat_channels([up, attended, edge])
            for unit in dec.fuse:
                x = unit(x, training)
            level_out[level] = x

        aux = [head(level_out[i + 1]) for i, head in enumerate(self.heads)]
        main = T.sigmoid(self.final_head(level_out[0]))
        return ForwardResult(main, aux, maps, used_edges)

    __call__ = forward

    def predict(self, image: Tensor) -> np.ndarray:
        """Eval-mode label map ``[n, H, W]`` by argmax over class probabilities."""
        return self.forward(image, training=False).main.data.argmax(axis=1)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        return [(k, p.data) for k, p in self.named_parameters()] + list(self.named_buffers())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())


def parameters(model: DaduModel) -> list[Tensor]:
    return model.parameters()


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"DADU"
FORMAT_VERSION = 1
_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: DaduModel, path) -> None:
    """Write parameters then batchnorm running statistics as little-endian float32."""
    cfg = asdict(model.config)
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(_CONFIG_FIELDS))]
    parts.append(struct.pack(f"<{len(_CONFIG_FIELDS)}i", *(int(cfg[k]) for k in _CONFIG_FIELDS)))
    records = model.state_arrays()
    parts.append(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> DaduModel:
    with open(path, "rb") as fh:
        buf = fh.read()
    try:
        model, pos = _parse_checkpoint(buf, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return model


def _parse_checkpoint(buf: bytes, path) -> tuple[DaduModel, int]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a DADU checkpoint")
    pos = 4
    version, n_fields = struct.unpack_from("<II", buf, pos)
    pos += 8
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    values = struct.unpack_from(f"<{n_fields}i", buf, pos)
    pos += 4 * n_fields
    kwargs = dict(zip(_CONFIG_FIELDS, values))
    kwargs["attention"] = bool(kwargs["attention"])
    model = DaduModel(ModelConfig(**kwargs), dtype=np.float32)
    targets = {}
    for name, p in model.named_parameters():
        targets[name] = p.data
    for name, b in model.named_buffers():
        targets[name] = b

    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    if count != len(targets):
        raise CheckpointError(f"{path}: {count} records, model expects {len(targets)}")
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        if name not in targets or targets[name].shape != tuple(shape):
            raise CheckpointError(f"{path}: unexpected record {name} {shape}")
        targets[name][...] = arr
    return model, pos
