"""Network assembly from a declarative config, and the checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"SCIN"                 4 bytes  magic
    version                 1 byte   (currently 1)
    header_len              4 bytes  uint32
    header                  header_len bytes of UTF-8 JSON:
                            {"config": ..., "params": [{"name", "shape"}...],
                             "metadata": {...}}
    payload                 float32 parameters, concatenated in header order
    checksum                8 bytes, BLAKE2b (digest_size=8) of every
                            preceding byte
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptCheckpointError, ShapeError, SciError
from .layers import Activation, Conv2D, Dense, Dropout, Flatten, Layer, MaxPool2D, he_std, softmax
from .tensor import TRAIN_DTYPE, Rng

MAGIC = b"SCIN"
VERSION = 1
CHECKSUM_SIZE = 8

DEFAULT_FILTERS = {1: [32], 2: [32, 64], 4: [32, 32, 64, 64]}


@dataclass
class ArchitectureConfig:
    num_classes: int = 3
    filters: list[int] = field(default_factory=lambda: [32, 64])
    in_channels: int = 3
    height: int = 32
    width: int = 32
    conv_stride: int = 2
    conv_padding: str = "same"
    # convs whose input is this small or smaller run at stride 1
    min_stride2_size: int = 4
    activation: str = "leaky_relu"
    alpha: float = 0.01
    pool_window: int = 3
    pool_stride: int = 2
    pool_padding: str = "same"
    fc_sizes: list[int] = field(default_factory=lambda: [256, 512])
    dropout_keep: float = 0.5

    @property
    def conv_depth(self) -> int:
        return len(self.filters)

    @classmethod
    def for_depth(cls, depth: int, **kw) -> "ArchitectureConfig":
        if depth not in DEFAULT_FILTERS:
            raise ConfigError(f"no default filter counts for conv depth {depth}; pass filters explicitly")
        return cls(filters=list(DEFAULT_FILTERS[depth]), **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        d = dict(d)
        depth = d.pop("conv_depth", None)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown architecture fields: {sorted(unknown)}")
        if depth is not None and "filters" not in d:
            d["filters"] = list(DEFAULT_FILTERS.get(int(depth), []))
        cfg = cls(**d)
        if depth is not None and int(depth) != cfg.conv_depth:
            raise ConfigError(f"conv_depth={depth} but {len(cfg.filters)} filter counts given")
        return cfg

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if not self.filters or any(f < 1 for f in self.filters):
            raise ConfigError(f"filters must be a non-empty list of positive ints, got {self.filters}")
        if any(s < 1 for s in self.fc_sizes):
            raise ConfigError(f"fc sizes must be positive, got {self.fc_sizes}")
        if min(self.in_channels, self.height, self.width) < 1:
            raise ConfigError("input dimensions must be positive")
        if not 0 < self.dropout_keep <= 1:
            raise ConfigError(f"dropout keep probability must lie in (0, 1], got {self.dropout_keep}")


class Network:
    """Ordered layer stack ending in logits; ``forward`` applies softmax."""

    def __init__(self, config: ArchitectureConfig, layers: list[tuple[str, Layer]], dtype=TRAIN_DTYPE):
        self.config = config
        self.layers = layers
        self.dtype = np.dtype(dtype)
        self.metadata: dict = {}

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{lname}.{pname}", arr) for lname, layer in self.layers
                for pname, arr in layer.params.items()]

    def grad_items(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{lname}.{pname}", layer.grads[pname]) for lname, layer in self.layers
                for pname in layer.params]

    @property
    def num_params(self) -> int:
        return sum(a.size for _, a in self.param_items())

    def layer(self, name: str) -> Layer:
        return dict(self.layers)[name]

    def input_shape(self) -> tuple[int, int, int]:
        c = self.config
        return (c.in_channels, c.height, c.width)

    def logits(self, x, training=False, rng=None):
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.input_shape():
            raise ShapeError(f"network expects patches of shape {list(self.input_shape())}, "
                             f"got {list(x.shape[1:])}")
        h = x.astype(self.dtype, copy=False)
        for _, layer in self.layers:
            h = layer.forward(h, training=training, rng=rng)
        if not training:
            self.clear_caches()
        return h[0] if single else h

    def forward(self, x, training=False, rng=None):
        return softmax(self.logits(x, training=training, rng=rng))

    def backward(self, grad_logits):
        g = grad_logits.astype(self.dtype, copy=False)
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def clear_caches(self):
        for _, layer in self.layers:
            layer.clear_cache()

    def astype(self, dtype) -> "Network":
        """Copy of this network with parameters cast to ``dtype``."""
        net = build_network(self.config, None, dtype=dtype)
        for (_, dst), (_, src) in zip(net.param_items(), self.param_items()):
            dst[...] = src
        net.metadata = dict(self.metadata)
        return net

    def shape_trace(self) -> list[tuple[str, tuple[int, ...]]]:
        shape = self.input_shape()
        trace = [("input", shape)]
        for name, layer in self.layers:
            shape = layer.output_shape(shape)
            trace.append((name, shape))
        return trace


def build_network(cfg: ArchitectureConfig, rng: Rng | None, dtype=TRAIN_DTYPE) -> Network:
    """Assemble the conv/pool/fc stack and He-initialize it from ``rng``.

    Biases start at zero. With ``rng=None`` all parameters are left at zero
    (used when loading a checkpoint).
    """
    cfg.validate()
    layers: list[tuple[str, Layer]] = []
    shape = (cfg.in_channels, cfg.height, cfg.width)

    def add(name, layer):
        nonlocal shape
        try:
            shape = layer.output_shape(shape)
        except ShapeError as exc:
            raise ConfigError(f"incompatible shape chain at {name}: {exc}") from exc
        layers.append((name, layer))

    try:
        for i, f in enumerate(cfg.filters, start=1):
            stride = cfg.conv_stride if min(shape[1:]) > cfg.min_stride2_size else 1
            add(f"conv{i}", Conv2D(shape[0], f, stride=stride, padding=cfg.conv_padding, dtype=dtype))
            add(f"act{i}", Activation(cfg.activation, cfg.alpha))
        add("pool", MaxPool2D(cfg.pool_window, cfg.pool_stride, cfg.pool_padding))
        add("flatten", Flatten())
        for i, size in enumerate(cfg.fc_sizes, start=1):
            add(f"fc{i}", Dense(shape[0], size, dtype=dtype))
            add(f"act_fc{i}", Activation(cfg.activation, cfg.alpha))
            add(f"drop{i}", Dropout(cfg.dropout_keep))
        add(f"fc{len(cfg.fc_sizes) + 1}", Dense(shape[0], cfg.num_classes, dtype=dtype))
    except ConfigError:
        raise
    except SciError as exc:
        raise ConfigError(str(exc)) from exc

    net = Network(cfg, layers, dtype=dtype)
    if rng is not None:
        for _, layer in layers:
            if isinstance(layer, Conv2D):
                fan_in = layer.in_channels * layer.k * layer.k
                layer.params["kernels"][...] = rng.gaussian(layer.kernels.shape, 0.0, he_std(fan_in), dtype=dtype)
            elif isinstance(layer, Dense):
                layer.params["weights"][...] = rng.gaussian(layer.weights.shape, 0.0, he_std(layer.in_dim), dtype=dtype)
    return net


def forward(net: Network, patch, training=False, rng=None):
    """Probability vector(s) for ``patch``; layer caches survive only in training mode."""
    return net.forward(patch, training=training, rng=rng)


def _header_bytes(net: Network) -> bytes:
    header = {
        "config": net.config.to_dict(),
        "params": [{"name": n, "shape": list(a.shape)} for n, a in net.param_items()],
        "metadata": net.metadata,
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(net: Network) -> bytes:
    header = _header_bytes(net)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for _, a in net.param_items())
    body = MAGIC + struct.pack("<BI", VERSION, len(header)) + header + payload
    return body + hashlib.blake2b(body, digest_size=CHECKSUM_SIZE).digest()


def save_checkpoint(net: Network, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def checkpoint_from_bytes(raw: bytes) -> Network:
    fixed = len(MAGIC) + 5
    if len(raw) < fixed + CHECKSUM_SIZE:
        raise CorruptCheckpointError("file too short for a checkpoint", field="length")
    if raw[:4] != MAGIC:
        raise CorruptCheckpointError(f"bad magic {raw[:4]!r}", field="magic")
    version, hlen = struct.unpack("<BI", raw[4:fixed])
    if version != VERSION:
        raise CorruptCheckpointError(f"unsupported version {version}", field="version")
    if fixed + hlen + CHECKSUM_SIZE > len(raw):
        raise CorruptCheckpointError("header length exceeds file size", field="header_length")
    body, digest = raw[:-CHECKSUM_SIZE], raw[-CHECKSUM_SIZE:]
    if hashlib.blake2b(body, digest_size=CHECKSUM_SIZE).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch", field="checksum")
    try:
        header = json.loads(raw[fixed:fixed + hlen].decode("utf-8"))
        cfg = ArchitectureConfig.from_dict(header["config"])
        specs = header["params"]
    except (ValueError, KeyError, TypeError, ConfigError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}", field="header") from exc
    net = build_network(cfg, None)
    items = net.param_items()
    if [(n, list(a.shape)) for n, a in items] != [(s["name"], s["shape"]) for s in specs]:
        raise CorruptCheckpointError("parameter list does not match config", field="params")
    payload = body[fixed + hlen:]
    if len(payload) != 4 * net.num_params:
        raise CorruptCheckpointError(f"payload is {len(payload)} bytes, expected {4 * net.num_params}",
                                     field="payload")
    flat = np.frombuffer(payload, dtype="<f4")
    offset = 0
    for _, arr in items:
        arr[...] = flat[offset:offset + arr.size].reshape(arr.shape)
        offset += arr.size
    net.metadata = header.get("metadata", {})
    return net


def load_checkpoint(path) -> Network:
    return checkpoint_from_bytes(Path(path).read_bytes())
