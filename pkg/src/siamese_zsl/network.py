"""Siamese embedding network, its Euclidean energy, and checkpoint files.

Builtin backbone: three blocks of conv3x3(same) -> relu -> maxpool2, dropout on
the flattened features, then a dense head to a 128-unit embedding.  The
precomputed backbone skips the conv stack and feeds externally extracted
feature vectors straight into dropout + head.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

EMBED_DIM = 128
CONV_FILTERS = (16, 32, 64)
KERNEL_SIZE = 3
BACKBONES = ("builtin", "precomputed")

CHECKPOINT_MAGIC = b"SNNC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is malformed."""


class CheckpointTruncated(CheckpointError):
    """A checkpoint file ends before its declared content."""


@dataclass
class Layer:
    name: str
    role: str  # conv1 | conv2 | conv3 | head
    weight: Tensor
    bias: Tensor


@dataclass
class ModelParameters:
    """All trainable weights plus the configuration they were built for."""

    layers: list[Layer]
    input_size: int = 64
    in_channels: int = 3
    backbone: str = "builtin"
    normalize: bool = True
    feature_dim: int = 0
    keep_prob: float = 0.8

    def tensors(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in self.layers:
            out.append((f"{layer.name}.weight", layer.weight))
            out.append((f"{layer.name}.bias", layer.bias))
        return out

    def layer(self, role: str) -> Layer:
        for layer in self.layers:
            if layer.role == role:
                return layer
        raise KeyError(role)

    def metadata(self) -> dict[str, str]:
        return {
            "backbone": self.backbone,
            "input_size": str(self.input_size),
            "in_channels": str(self.in_channels),
            "normalize": "1" if self.normalize else "0",
            "feature_dim": str(self.feature_dim),
            "keep_prob": repr(self.keep_prob),
        }

    def copy(self) -> "ModelParameters":
        layers = [Layer(l.name, l.role, Tensor(l.weight.data.copy(), requires_grad=True),
                        Tensor(l.bias.data.copy(), requires_grad=True)) for l in self.layers]
        return ModelParameters(layers, self.input_size, self.in_channels, self.backbone,
                               self.normalize, self.feature_dim, self.keep_prob)

    def astype(self, dtype) -> "ModelParameters":
        """Copy with every tensor cast to ``dtype`` (float64 for gradient checks)."""
        clone = self.copy()
        for layer in clone.layers:
            layer.weight.data = layer.weight.data.astype(dtype)
            layer.bias.data = layer.bias.data.astype(dtype)
        return clone


def flattened_dim(input_size: int) -> int:
    side = input_size
    for _ in CONV_FILTERS:
        side = (side + 1) // 2
    return side * side * CONV_FILTERS[-1]


def init_params(rng: np.random.Generator, input_size: int = 64, in_channels: int = 3,
                backbone: str = "builtin", normalize: bool = True, feature_dim: int = 0,
                keep_prob: float = 0.8) -> ModelParameters:
    """He-uniform initialisation: U(-b, b) with b = sqrt(6 / fan_in), zero biases."""
    if backbone not in BACKBONES:
        raise ValueError(f"backbone must be one of {BACKBONES}, got {backbone!r}")

    def he(shape, fan_in):
        bound = np.sqrt(6.0 / fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32),
                      requires_grad=True)

    def zeros(n):
        return Tensor(np.zeros(n, dtype=np.float32), requires_grad=True)

    layers = []
    if backbone == "builtin":
        if input_size < 8:
            raise ValueError(f"input_size must be at least 8, got {input_size}")
        cin = in_channels
        for i, cout in enumerate(CONV_FILTERS, start=1):
            shape = (KERNEL_SIZE, KERNEL_SIZE, cin, cout)
            layers.append(Layer(f"conv{i}", f"conv{i}", he(shape, KERNEL_SIZE * KERNEL_SIZE * cin),
                                zeros(cout)))
            cin = cout
        head_in = flattened_dim(input_size)
    else:
        if feature_dim < 1:
            raise ValueError("precomputed backbone needs feature_dim >= 1")
        head_in = feature_dim
    layers.append(Layer("head", "head", he((head_in, EMBED_DIM), head_in), zeros(EMBED_DIM)))
    return ModelParameters(layers, input_size, in_channels, backbone, normalize,
                           feature_dim if backbone == "precomputed" else 0, keep_prob)


def embed(params: ModelParameters, inputs, mode: str = "infer",
          rng: Optional[np.random.Generator] = None) -> Tensor:
    """Map a batch of images ``[N,H,W,C]`` (or features ``[N,D]``) to ``[N,128]``."""
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs, dtype=params.layers[0].weight.dtype)
    if params.backbone == "builtin":
        expected = (params.input_size, params.input_size, params.in_channels)
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ShapeError(f"builtin backbone expects images of shape [N,{','.join(map(str, expected))}], "
                             f"got {x.shape}")
        h = x
        for role in ("conv1", "conv2", "conv3"):
            layer = params.layer(role)
            # relu and 2x2 max-pool commute (values and gradients); pooling first is 4x cheaper
            h = T.relu(T.maxpool2d(T.conv2d(h, layer.weight, layer.bias)))
        h = T.flatten(h)
    else:
        if x.data.ndim != 2 or x.shape[1] != params.feature_dim:
            raise ShapeError(f"precomputed backbone expects features [N,{params.feature_dim}], "
                             f"got {x.shape}")
        h = x
    h = T.dropout(h, params.keep_prob, mode, rng)
    head = params.layer("head")
    e = T.dense(h, head.weight, head.bias)
    if params.normalize:
        e = T.l2_normalize(e)
    return e


def energy(e1, e2) -> np.ndarray:
    """Euclidean distance between embeddings (row-wise for batches)."""
    a = np.asarray(e1.data if isinstance(e1, Tensor) else e1)
    b = np.asarray(e2.data if isinstance(e2, Tensor) else e2)
    if a.shape != b.shape:
        raise ShapeError(f"energy needs equal shapes, got {a.shape} and {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    d = np.sqrt(np.sum(diff * diff, axis=-1))
    return d if d.ndim else float(d)


def similarity_score(d, normalized: bool = True):
    """Score compared against the decision threshold; d/2 in [0, 1] for unit embeddings."""
    d_arr = np.asarray(d, dtype=np.float64)
    if np.any(d_arr < 0):
        raise ValueError("distance must be nonnegative")
    score = d_arr / 2.0 if normalized else d_arr
    return score if score.ndim else float(score)


# --------------------------------------------------------------------------
# checkpoint files


def _pack_metadata(meta: dict[str, str]) -> bytes:
    text = "\n".join(f"{k}={v}" for k, v in meta.items())
    return text.encode("utf-8")


def save_checkpoint(params: ModelParameters, path) -> None:
    """Write the little-endian SNNC format.

    Layout: magic, version u32, record count u32, metadata (u32 length +
    ``key=value`` lines), then per tensor record: name length u16, name,
    rank u8, dims u32 each, raw float32 values.
    """
    named = params.named_tensors()
    meta = _pack_metadata(params.metadata())
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(named)),
             struct.pack("<I", len(meta)), meta]
    for name, t in named:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", t.data.ndim))
        parts.append(struct.pack(f"<{t.data.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncated(
                f"file truncated while reading {what} at byte {self.pos} "
                f"(needs {n}, {len(self.buf) - self.pos} left)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> ModelParameters:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version, count = r.unpack("<II", "header")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (meta_len,) = r.unpack("<I", "metadata length")
    try:
        meta_text = r.take(meta_len, "metadata").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"metadata is not UTF-8: {exc}") from None
    meta = {}
    for line in meta_text.splitlines():
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"malformed metadata line {line!r}")
        meta[key] = value

    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<H", f"record {i} name length")
        name = r.take(name_len, f"record {i} name").decode("utf-8", errors="strict")
        (rank,) = r.unpack("<B", f"record {i} rank")
        dims = r.unpack(f"<{rank}I", f"record {i} dims")
        n = int(np.prod(dims)) if rank else 1
        raw = r.take(4 * n, f"tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")

    try:
        backbone = meta["backbone"]
        input_size = int(meta["input_size"])
        in_channels = int(meta["in_channels"])
        normalize = meta["normalize"] == "1"
        feature_dim = int(meta["feature_dim"])
        keep_prob = float(meta["keep_prob"])
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"incomplete metadata: {exc}") from None
    if backbone not in BACKBONES:
        raise CheckpointError(f"unknown backbone {backbone!r}")

    roles = ["conv1", "conv2", "conv3", "head"] if backbone == "builtin" else ["head"]
    layers = []
    for role in roles:
        try:
            w, b = tensors.pop(f"{role}.weight"), tensors.pop(f"{role}.bias")
        except KeyError as exc:
            raise CheckpointError(f"missing tensor {exc}") from None
        layers.append(Layer(role, role, Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
    if tensors:
        raise CheckpointError(f"unexpected tensors {sorted(tensors)}")
    params = ModelParameters(layers, input_size, in_channels, backbone, normalize,
                             feature_dim, keep_prob)
    _check_shapes(params)
    return params


def _check_shapes(params: ModelParameters) -> None:
    expected = init_params(np.random.default_rng(0), params.input_size, params.in_channels,
                           params.backbone, params.normalize, max(params.feature_dim, 1)
                           if params.backbone == "precomputed" else 0)
    for got, want in zip(params.layers, expected.layers):
        if got.weight.shape != want.weight.shape or got.bias.shape != want.bias.shape:
            raise CheckpointError(
                f"layer {got.name}: shapes {got.weight.shape}/{got.bias.shape} inconsistent "
                f"with metadata (expected {want.weight.shape}/{want.bias.shape})")
