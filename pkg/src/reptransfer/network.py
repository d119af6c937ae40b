"""Mini-VGG segmentation network with five pooling taps and a 1x1 + upsample head."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import InputError
from .layers import bilinear_upsample, conv2d, maxpool2, relu
from .tensor import Tensor, default_dtype

TAP_NAMES = ("pool_1", "pool_2", "pool_3", "pool_4", "pool_5")
HEAD_DEPTH = len(TAP_NAMES) + 1

_MAGIC = b"FBCK"
_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    """Five conv blocks ``[conv3x3-relu-conv3x3-relu-maxpool2]`` then a 1x1 head.

    Blocks with pool stride 1 keep resolution and use dilated convolutions,
    so the head sees features at output stride ``prod(pool_strides)``.
    """

    n_classes: int = 5
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 48, 64, 64)
    pool_strides: tuple[int, ...] = (2, 2, 2, 1, 1)
    dilations: tuple[int, ...] = (1, 1, 1, 2, 4)
    convs_per_block: int = 2

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "pool_strides", tuple(self.pool_strides))
        object.__setattr__(self, "dilations", tuple(self.dilations))
        if not len(self.widths) == len(self.pool_strides) == len(self.dilations) == len(TAP_NAMES):
            raise InputError("widths, pool_strides and dilations need one entry per block (5)")
        if self.n_classes < 2:
            raise InputError(f"n_classes must be >= 2, got {self.n_classes}")
        if any(s not in (1, 2) for s in self.pool_strides):
            raise InputError(f"pool strides must be 1 or 2, got {self.pool_strides}")

    @property
    def output_stride(self) -> int:
        return int(np.prod(self.pool_strides))

    def tap_strides(self) -> dict[str, int]:
        return {tap: int(np.prod(self.pool_strides[:i + 1])) for i, tap in enumerate(TAP_NAMES)}

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = self.in_channels
        for b, width in enumerate(self.widths, start=1):
            for k in range(1, self.convs_per_block + 1):
                shapes[f"block{b}.conv{k}.weight"] = (width, c_in, 3, 3)
                shapes[f"block{b}.conv{k}.bias"] = (width,)
                c_in = width
        shapes["head.weight"] = (self.n_classes, c_in, 1, 1)
        shapes["head.bias"] = (self.n_classes,)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def param_depth(name: str) -> int:
    """Block index (1..5) of a parameter, or HEAD_DEPTH for the head."""
    if name.startswith("head."):
        return HEAD_DEPTH
    if name.startswith("block"):
        return int(name.split(".")[0][len("block"):])
    raise InputError(f"unknown parameter name {name!r}")


def tap_depth(tap: str) -> int:
    if tap not in TAP_NAMES:
        raise InputError(f"unknown tap {tap!r}; expected one of {TAP_NAMES}")
    return TAP_NAMES.index(tap) + 1


@dataclass
class Checkpoint:
    """Parameters theta of one network instance plus its config and metadata."""

    config: NetworkConfig
    params: dict[str, Tensor]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = self.config.param_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise InputError(f"checkpoint parameters do not match config (missing={missing}, extra={extra})")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise InputError(f"parameter {name} has shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "Checkpoint":
        params = {k: Tensor(v.data.copy(), dtype=v.dtype) for k, v in self.params.items()}
        return Checkpoint(self.config, params, json.loads(json.dumps(self.meta)))

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return load_checkpoint(path)


def init_checkpoint(config: NetworkConfig, seed: int = 0, dtype=None) -> Checkpoint:
    """Kaiming fan-in normal weights, zero biases."""
    rng = np.random.default_rng(seed)
    dtype = dtype or default_dtype()
    params = {}
    for name, shape in config.param_shapes().items():
        if name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            arr = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(arr, dtype=dtype)
    return Checkpoint(config, params, {"seed": seed, "iterations": 0})


def forward_with_taps(net: Checkpoint, batch: Tensor, upto: str | None = None):
    """Run the network and capture pool_1..pool_5.

    With ``upto`` set, the pass stops after that tap and ``logits`` is None;
    parameters of deeper layers are never touched.  Records on the active
    tape, if any.
    """
    cfg = net.config
    if batch.data.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise InputError(f"batch must be (N,{cfg.in_channels},H,W), got {batch.shape}")
    stride = cfg.output_stride
    if batch.shape[2] % stride or batch.shape[3] % stride:
        raise InputError(f"spatial size {batch.shape[2:]} must be divisible by {stride}")
    last = tap_depth(upto) if upto is not None else HEAD_DEPTH
    p = net.params
    taps: dict[str, Tensor] = {}
    h = batch
    for b in range(1, len(TAP_NAMES) + 1):
        if b > last:
            break
        for k in range(1, cfg.convs_per_block + 1):
            h = relu(conv2d(h, p[f"block{b}.conv{k}.weight"], p[f"block{b}.conv{k}.bias"],
                            dilation=cfg.dilations[b - 1]))
        h = maxpool2(h, stride=cfg.pool_strides[b - 1])
        taps[TAP_NAMES[b - 1]] = h
    if last < HEAD_DEPTH:
        return None, taps
    logits = conv2d(h, p["head.weight"], p["head.bias"])
    logits = bilinear_upsample(logits, stride)
    return logits, taps


def forward(net: Checkpoint, batch: Tensor) -> Tensor:
    return forward_with_taps(net, batch)[0]


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout: "FBCK", version u8, then little-endian entries and a text trailer."""
    path = Path(path)
    chunks = [_MAGIC, struct.pack("<B", _VERSION), struct.pack("<I", len(ckpt.params))]
    for name in sorted(ckpt.params):
        t = ckpt.params[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", t.data.ndim))
        chunks.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        chunks.append(t.data.astype("<f4").tobytes())
    meta = dict(ckpt.meta)
    meta["config"] = ckpt.config.to_dict()
    text = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<I", len(text)))
    chunks.append(text)
    try:
        path.write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path, dtype=None) -> Checkpoint:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    if buf[:4] != _MAGIC:
        raise InputError(f"{path}: not a checkpoint (bad magic)")
    if buf[4:5] != bytes([_VERSION]):
        raise InputError(f"{path}: unsupported checkpoint version {buf[4:5]!r}")
    try:
        pos = 5
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", buf, pos)
            pos += 2
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            rank = buf[pos]
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            n = int(np.prod(shape))
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape)
            pos += 4 * n
        (meta_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        meta = json.loads(buf[pos:pos + meta_len].decode("utf-8"))
    except (struct.error, ValueError, UnicodeDecodeError, IndexError) as exc:
        raise InputError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    config = NetworkConfig.from_dict(meta.pop("config"))
    dtype = dtype or default_dtype()
    params = {k: Tensor(v, dtype=dtype) for k, v in arrays.items()}
    return Checkpoint(config, params, meta)
