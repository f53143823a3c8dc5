"""Generator (context encoder) and discriminator assembly, plus the
binary checkpoint format.

The encoder halves the spatial size with k=4/s=2/p=1 convolutions until the
map is 4x4, then a full-field k=4/s=1/p=0 convolution produces the 1x1
bottleneck (4096 channels at image size 128). The decoder mirrors it. The
stated 1x1 bottleneck and a uniformly strided sixth layer cannot both hold,
so the full-field final layer is the default and the uniformly strided
variant (2x2 bottleneck) stays available behind `flat_bottleneck=False`.

Encoder activations are leaky ReLU, decoder hidden activations ReLU with a
tanh output; every convolution in both networks except the discriminator
head carries batch normalization.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .layers import (BatchNormState, ConvParams, activation_backward,
                     activation_forward, batchnorm2d_backward,
                     batchnorm2d_forward, conv2d_backward, conv2d_forward,
                     deconv2d_backward, deconv2d_forward)
from .tensor import DTYPES, ContractError, Rng, Tensor

KERNEL = 4


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 128
    base_channels_g: int = 128
    base_channels_d: int = 64
    leaky_slope: float = 0.2
    bn_epsilon: float = 1e-5
    bn_momentum: float = 0.1
    margin_width: int = 4
    margin_weight: float = 10.0
    dtype: str = "float32"
    flat_bottleneck: bool = True

    def __post_init__(self):
        s = self.image_size
        if s < 16:
            raise ConfigError(f"image_size must be >= 16, got {s}")
        if s & (s - 1):
            raise ConfigError(f"image_size must be a power of two, got {s}")
        if self.base_channels_g < 1 or self.base_channels_d < 1:
            raise ConfigError("channel counts must be positive")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def patch_size(self) -> int:
        return self.image_size // 2

    @property
    def halvings(self) -> int:
        """Stride-2 encoder stages needed to reach a 4x4 map."""
        return self.image_size.bit_length() - 3

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels_g * (2 ** self.halvings)


@dataclass
class Stage:
    conv: ConvParams
    bn: BatchNormState | None
    act: str
    transposed: bool = False


def _stage_forward(x: Tensor, stage: Stage, slope: float, train: bool,
                   update_running: bool):
    if stage.transposed:
        pre = deconv2d_forward(x, stage.conv)
    else:
        pre = conv2d_forward(x, stage.conv)
    if stage.bn is not None:
        normed = batchnorm2d_forward(pre, stage.bn, train=train,
                                     update_running=update_running)
    else:
        normed = pre
    out = activation_forward(stage.act, normed, slope=slope)
    return out, (x, pre, normed)


def _stage_backward(stage: Stage, cache, grad_out: Tensor, slope: float,
                    train: bool):
    x, pre, normed = cache
    g = activation_backward(stage.act, normed, grad_out, slope=slope)
    grads = {}
    if stage.bn is not None:
        bn_g = batchnorm2d_backward(pre, stage.bn, g, train=train)
        grads["gamma"] = bn_g.grad_weights
        grads["beta"] = bn_g.grad_bias
        g = bn_g.grad_input
    if stage.transposed:
        conv_g = deconv2d_backward(x, stage.conv, g)
    else:
        conv_g = conv2d_backward(x, stage.conv, g)
    grads["weights"] = conv_g.grad_weights
    grads["bias"] = conv_g.grad_bias
    return conv_g.grad_input, grads


class _StageNet:
    """Shared forward/backward chain over named stages."""

    def __init__(self, cfg: ModelConfig, stages: dict):
        self.cfg = cfg
        self.stages = stages  # name -> Stage, insertion-ordered

    def _run(self, x: Tensor, train: bool, update_running: bool):
        caches = []
        for stage in self.stages.values():
            x, cache = _stage_forward(x, stage, self.cfg.leaky_slope, train,
                                      update_running)
            caches.append(cache)
        return x, caches

    def _backprop(self, caches, grad_out: Tensor, train: bool):
        grads = {}
        for (name, stage), cache in zip(reversed(self.stages.items()),
                                        reversed(caches)):
            grad_out, stage_grads = _stage_backward(stage, cache, grad_out,
                                                    self.cfg.leaky_slope, train)
            for suffix, g in stage_grads.items():
                grads[f"{name}.{suffix}"] = g
        return grads, grad_out

    def named_params(self) -> dict:
        out = {}
        for name, stage in self.stages.items():
            out[f"{name}.weights"] = stage.conv.weights
            out[f"{name}.bias"] = stage.conv.bias
            if stage.bn is not None:
                out[f"{name}.gamma"] = stage.bn.gamma
                out[f"{name}.beta"] = stage.bn.beta
        return out

    def named_buffers(self) -> dict:
        out = {}
        for name, stage in self.stages.items():
            if stage.bn is not None:
                out[f"{name}.running_mean"] = stage.bn.running_mean
                out[f"{name}.running_var"] = stage.bn.running_var
        return out


class Generator(_StageNet):
    def __init__(self, cfg, encoder_stages: dict, decoder_stages: dict):
        super().__init__(cfg, {**encoder_stages, **decoder_stages})
        self.encoder = encoder_stages
        self.decoder = decoder_stages

    def _check_input(self, x: Tensor):
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise ContractError(
                f"generator input must be (N, 1, {s}, {s}), got {x.shape}")
        if x.dtype != DTYPES[self.cfg.dtype]:
            raise ContractError(
                f"input dtype {x.dtype} != model dtype {self.cfg.dtype}")

    def forward(self, x: Tensor, *, train: bool, update_running: bool = True):
        self._check_input(x)
        return self._run(x, train, update_running)

    def encode(self, x: Tensor, *, train: bool = False) -> Tensor:
        """Latent bottleneck features for a masked image."""
        self._check_input(x)
        for stage in self.encoder.values():
            x, _ = _stage_forward(x, stage, self.cfg.leaky_slope, train, False)
        return x

    def backward(self, caches, grad_output: Tensor, *, train: bool):
        return self._backprop(caches, grad_output, train)


class Discriminator(_StageNet):
    def __init__(self, cfg, stages: dict):
        super().__init__(cfg, stages)

    def _check_input(self, x: Tensor):
        p = self.cfg.patch_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (p, p):
            raise ContractError(
                f"discriminator input must be (N, 1, {p}, {p}), got {x.shape}")
        if x.dtype != DTYPES[self.cfg.dtype]:
            raise ContractError(
                f"input dtype {x.dtype} != model dtype {self.cfg.dtype}")

    def forward(self, x: Tensor, *, train: bool, update_running: bool = True):
        """Returns ((N,) probabilities, caches)."""
        self._check_input(x)
        out, caches = self._run(x, train, update_running)
        return Tensor(out.array.reshape(x.shape[0])), caches

    def backward(self, caches, grad_scores: Tensor, *, train: bool):
        g = Tensor(grad_scores.array.reshape(grad_scores.size, 1, 1, 1))
        return self._backprop(caches, g, train)


def _init_conv(rng, in_ch, out_ch, stride, padding, dtype, transposed=False):
    shape = (in_ch, out_ch, KERNEL, KERNEL) if transposed \
        else (out_ch, in_ch, KERNEL, KERNEL)
    dt = DTYPES[dtype]
    if rng is None:
        w = np.zeros(shape, dtype=dt)
    else:
        w = rng.normal_array(shape, 0.0, 0.02, dtype)
    return ConvParams(weights=Tensor(w),
                      bias=Tensor(np.zeros(out_ch, dtype=dt)),
                      stride=stride, padding=padding)


def _bn(cfg, channels):
    return BatchNormState.init(channels, cfg.bn_epsilon, cfg.bn_momentum,
                               cfg.dtype)


def build_generator(cfg: ModelConfig, rng: Rng | None) -> Generator:
    """Encoder: 1 -> base -> 2*base ... to the bottleneck; decoder mirrors it.

    Weights are drawn normal(0, 0.02), biases zero; pass rng=None for a
    zero-weight shell (checkpoint loading fills it in).
    """
    m = cfg.halvings
    enc = {}
    in_ch = 1
    for i in range(m):
        out_ch = cfg.base_channels_g * (2 ** i)
        enc[f"enc{i + 1}"] = Stage(
            _init_conv(rng, in_ch, out_ch, 2, 1, cfg.dtype),
            _bn(cfg, out_ch), "leaky_relu")
        in_ch = out_ch
    bott = 2 * in_ch
    if cfg.flat_bottleneck:
        enc[f"enc{m + 1}"] = Stage(
            _init_conv(rng, in_ch, bott, 1, 0, cfg.dtype),
            _bn(cfg, bott), "leaky_relu")
    else:
        enc[f"enc{m + 1}"] = Stage(
            _init_conv(rng, in_ch, bott, 2, 1, cfg.dtype),
            _bn(cfg, bott), "leaky_relu")

    dec = {}
    in_ch = bott
    out_ch = cfg.base_channels_g * (2 ** (m - 1))
    first = (1, 0) if cfg.flat_bottleneck else (2, 1)
    dec["dec1"] = Stage(
        _init_conv(rng, in_ch, out_ch, first[0], first[1], cfg.dtype,
                   transposed=True),
        _bn(cfg, out_ch), "relu", transposed=True)
    in_ch = out_ch
    for j in range(1, m):
        last = j == m - 1
        out_ch = 1 if last else cfg.base_channels_g * (2 ** (m - 1 - j))
        dec[f"dec{j + 1}"] = Stage(
            _init_conv(rng, in_ch, out_ch, 2, 1, cfg.dtype, transposed=True),
            _bn(cfg, out_ch), "tanh" if last else "relu", transposed=True)
        in_ch = out_ch
    return Generator(cfg, enc, dec)


def build_discriminator(cfg: ModelConfig, rng: Rng | None) -> Discriminator:
    p = cfg.patch_size
    if p < 8:
        raise ConfigError(f"patch size must be >= 8, got {p}")
    md = p.bit_length() - 3
    stages = {}
    in_ch = 1
    for i in range(md):
        out_ch = cfg.base_channels_d * (2 ** i)
        stages[f"conv{i + 1}"] = Stage(
            _init_conv(rng, in_ch, out_ch, 2, 1, cfg.dtype),
            _bn(cfg, out_ch), "leaky_relu")
        in_ch = out_ch
    stages["head"] = Stage(
        _init_conv(rng, in_ch, 1, 1, 0, cfg.dtype), None, "sigmoid")
    return Discriminator(cfg, stages)


def generate(g: Generator, masked_image: Tensor, mode: str = "eval") -> Tensor:
    """Reconstruct the central patch from a masked image; tanh output in (-1, 1)."""
    if mode not in ("eval", "train"):
        raise ContractError(f"mode must be eval or train, got {mode!r}")
    out, _ = g.forward(masked_image, train=(mode == "train"),
                       update_running=(mode == "train"))
    return out


# ---------------------------------------------------------------------------
# checkpoint format: magic "CXIP", version, JSON header, little-endian payload

CHECKPOINT_MAGIC = b"CXIP"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    generator: Generator
    discriminator: Discriminator
    extra: dict = field(default_factory=dict)  # optimizer arrays etc.
    counters: dict = field(default_factory=dict)
    checksum_failures: list = field(default_factory=list)


def _collect_tensors(gen, disc, extra) -> dict:
    out = {}
    for name, t in gen.named_params().items():
        out[f"g.{name}"] = t.array
    for name, t in gen.named_buffers().items():
        out[f"g.{name}"] = t.array
    for name, t in disc.named_params().items():
        out[f"d.{name}"] = t.array
    for name, t in disc.named_buffers().items():
        out[f"d.{name}"] = t.array
    for name in sorted(extra or {}):
        arr = extra[name]
        out[name] = arr.array if isinstance(arr, Tensor) else arr
    return out


_LE = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, gen: Generator, disc: Discriminator,
                    extra: dict | None = None,
                    counters: dict | None = None) -> None:
    """Write a bit-reproducible checkpoint; same inputs, same bytes."""
    tensors = _collect_tensors(gen, disc, extra or {})
    manifest = []
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        dtype = "float64" if arr.dtype == np.float64 else "float32"
        raw = np.ascontiguousarray(arr).astype(_LE[dtype], copy=False).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "dtype": dtype, "offset": offset,
                         "crc32": zlib.crc32(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(gen.cfg),
        "counters": counters or {},
        "tensors": manifest,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for raw in chunks:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    """Rebuild models from a checkpoint file.

    Checksum mismatches do not abort the load; the affected tensor names
    are reported in Checkpoint.checksum_failures.
    """
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise TruncatedCheckpointError(f"{path}: header missing")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack_from("<Q", data, 8)
    if len(data) < 16 + hlen:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise NotACheckpointError(f"{path}: unreadable header: {e}") from e
    payload = data[16 + hlen:]
    cfg = ModelConfig(**header["config"])
    gen = build_generator(cfg, rng=None)
    disc = build_discriminator(cfg, rng=None)
    targets = {}
    for name, t in gen.named_params().items():
        targets[f"g.{name}"] = t
    for name, t in gen.named_buffers().items():
        targets[f"g.{name}"] = t
    for name, t in disc.named_params().items():
        targets[f"d.{name}"] = t
    for name, t in disc.named_buffers().items():
        targets[f"d.{name}"] = t
    extra = {}
    failures = []
    for entry in header["tensors"]:
        name = entry["name"]
        dtype = entry["dtype"]
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * (8 if dtype == "float64" else 4)
        start = entry["offset"]
        if start + nbytes > len(payload):
            raise TruncatedCheckpointError(
                f"{path}: payload truncated at tensor {name!r}")
        raw = payload[start:start + nbytes]
        if zlib.crc32(raw) != entry["crc32"]:
            failures.append(name)
        arr = np.frombuffer(raw, dtype=_LE[dtype]).reshape(entry["shape"])
        arr = arr.astype(DTYPES[dtype], copy=True)
        if name in targets:
            if targets[name].shape != arr.shape:
                raise CheckpointError(
                    f"{path}: tensor {name!r} has shape {arr.shape}, "
                    f"model expects {targets[name].shape}")
            targets[name].array[...] = arr
        else:
            extra[name] = arr
    return Checkpoint(config=cfg, generator=gen, discriminator=disc,
                      extra=extra, counters=header.get("counters", {}),
                      checksum_failures=failures)
