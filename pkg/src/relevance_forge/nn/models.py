"""Desk-scale 3D residual classifier and U-Net style mask generator.

Both architectures are plain functions over a :class:`ModelParams` store.
The forward pass is fully determined by the architecture tag plus the
parameter names and shapes, which is what lets ``.rnet`` files carry no
separate architecture description.
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import FormatError, MissingInputError, SpecError, TruncationError
from . import tensor as T
from .tensor import Tensor

CLASSIFIER = "classifier"
GENERATOR = "generator"
ARCHITECTURES = (CLASSIFIER, GENERATOR)

# Fixed multiplier on every residual branch; stands in for normalization layers.
LAYER_SCALE = 0.5
# Weights are stored at unit scale and multiplied by 1/sqrt(fan_in) at use, so an
# Adam step of size lr moves every layer by the same relative amount.

RNET_MAGIC = b"RNP1"


@dataclass
class ModelParams:
    arch: str
    params: dict[str, Tensor]
    epoch: int = 0
    seed: int | None = None

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise SpecError(f"unknown architecture tag {self.arch!r}")

    def __iter__(self):
        return iter(self.params.values())

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    @property
    def count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def copy(self) -> "ModelParams":
        params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return ModelParams(self.arch, params, self.epoch, self.seed)

    def astype(self, dtype) -> "ModelParams":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad) for k, v in self.params.items()}
        return ModelParams(self.arch, params, self.epoch, self.seed)

    def requires_grad(self, flag: bool) -> "ModelParams":
        T.parameters_require_grad(self.params.values(), flag)
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ClassifierSpec:
    in_channels: int = 2
    dims: tuple[int, int, int] = (32, 32, 32)
    stem_width: int = 8
    block_widths: tuple[int, ...] = (16, 16)

    def validate(self) -> None:
        if self.in_channels < 1 or self.stem_width < 1 or not self.block_widths:
            raise SpecError("classifier needs positive channel counts and at least one residual block")
        if not 2 <= len(self.block_widths) <= 3:
            raise SpecError(f"classifier uses 2-3 residual blocks, got {len(self.block_widths)}")
        factor = 2 ** len(self.block_widths)
        if any(d % factor for d in self.dims):
            raise SpecError(f"dims {self.dims} not divisible by downsampling factor {factor}")


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 2
    dims: tuple[int, int, int] = (32, 32, 32)
    encoder_widths: tuple[int, ...] = (4, 8)
    bottleneck_width: int = 4
    # Initial mask is sigmoid(out_bias_init); a positive value starts close to the identity mask.
    out_bias_init: float = 3.0

    def validate(self) -> None:
        if self.in_channels < 1 or not self.encoder_widths or min(self.encoder_widths) < 1:
            raise SpecError("generator needs positive channel counts and at least one encoder stage")
        if self.bottleneck_width < 1 or self.bottleneck_width >= max(self.encoder_widths):
            raise SpecError(
                f"bottleneck width {self.bottleneck_width} must be smaller than the widest "
                f"encoder stage ({max(self.encoder_widths)})"
            )
        factor = 2 ** len(self.encoder_widths)
        if any(d % factor for d in self.dims):
            raise SpecError(f"dims {self.dims} not divisible by downsampling factor {factor}")


def fan_in_scale(shape: tuple[int, ...]) -> float:
    return 1.0 / float(np.sqrt(np.prod(shape[1:])))


def _unit_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

    def conv(self, name: str, cin: int, cout: int, k: int = 3, bias_value: float | None = None):
        self.params[f"{name}.w"] = Tensor(_unit_uniform(self.rng, (cout, cin, k, k, k)), requires_grad=True)
        if bias_value is None:
            b = _unit_uniform(self.rng, (cout,)) * fan_in_scale((cout, cin, k, k, k))
        else:
            b = np.full(cout, bias_value, dtype=np.float32)
        self.params[f"{name}.b"] = Tensor(b, requires_grad=True)


def build_classifier(spec: ClassifierSpec | None = None, seed: int = 0) -> ModelParams:
    spec = spec or ClassifierSpec()
    spec.validate()
    b = _Builder(seed)
    b.conv("stem", spec.in_channels, spec.stem_width)
    width = spec.stem_width
    for i, out in enumerate(spec.block_widths):
        b.conv(f"block{i}.conv1", width, out)
        b.conv(f"block{i}.conv2", out, out)
        b.conv(f"block{i}.shortcut", width, out, k=1)
        width = out
    b.params["head.w"] = Tensor(_unit_uniform(b.rng, (width, 1)), requires_grad=True)
    b.params["head.b"] = Tensor(np.zeros(1, dtype=np.float32), requires_grad=True)
    return ModelParams(CLASSIFIER, b.params, epoch=0, seed=seed)


def build_generator(spec: GeneratorSpec | None = None, seed: int = 0) -> ModelParams:
    spec = spec or GeneratorSpec()
    spec.validate()
    b = _Builder(seed)
    width = spec.in_channels
    for i, out in enumerate(spec.encoder_widths):
        b.conv(f"enc{i}", width, out)
        width = out
    b.conv("bottleneck", width, spec.bottleneck_width)
    width = spec.bottleneck_width
    # Each decoder stage narrows to the width of the skip it will meet next, which
    # keeps the full-resolution stage (the expensive one) small.
    for i in reversed(range(len(spec.encoder_widths))):
        out = spec.encoder_widths[max(i - 1, 0)]
        b.conv(f"dec{i}", width + spec.encoder_widths[i], out)
        width = out
    b.conv("out", width, spec.in_channels, k=1, bias_value=spec.out_bias_init)
    return ModelParams(GENERATOR, b.params, epoch=0, seed=seed)


def _act(x: Tensor) -> Tensor:
    return T.silu(x)


def _conv(m: ModelParams, name: str, x: Tensor, stride: int = 1) -> Tensor:
    w = m[f"{name}.w"]
    return T.conv3d(x, w * fan_in_scale(w.shape), m[f"{name}.b"], stride=stride, pad=w.shape[2] // 2)


def _count_blocks(m: ModelParams, prefix: str) -> int:
    pattern = re.compile(rf"^{prefix}(\d+)\.")
    return len({int(mt.group(1)) for name in m.params if (mt := pattern.match(name))})


def residual_block(m: ModelParams, i: int, x: Tensor) -> Tensor:
    """activation(scale * F(x) + shortcut(x)) with a stride-2 downsample."""
    f = _act(_conv(m, f"block{i}.conv1", x, stride=2))
    f = _conv(m, f"block{i}.conv2", f)
    shortcut = _conv(m, f"block{i}.shortcut", x, stride=2)
    return _act(shortcut + f * LAYER_SCALE)


def classifier_logits(m: ModelParams, x) -> Tensor:
    x = T.as_tensor(x, m.dtype)
    h = _act(_conv(m, "stem", x))
    for i in range(_count_blocks(m, "block")):
        h = residual_block(m, i, h)
    pooled = T.global_avg_pool(h)
    head = m["head.w"]
    logits = T.matmul(pooled, head * (1.0 / np.sqrt(head.shape[0]))) + m["head.b"]
    return T.reshape(logits, (x.shape[0],))


def classify(m: ModelParams, x) -> Tensor:
    """Class-1 probability per batch item, shape (N,)."""
    return T.sigmoid(classifier_logits(m, x))


def generate_mask(m: ModelParams, x) -> Tensor:
    """Per-voxel, per-channel multiplicative mask in [0, 1], shaped like ``x``."""
    x = T.as_tensor(x, m.dtype)
    levels = _count_blocks(m, "enc")
    skips = []
    h = x
    for i in range(levels):
        h = _act(_conv(m, f"enc{i}", h, stride=1 if i == 0 else 2))
        skips.append(h)
    h = _act(_conv(m, "bottleneck", h, stride=2))
    for i in reversed(range(levels)):
        h = T.upsample_nearest(h, 2)
        h = T.concat([h, skips[i]], axis=1)
        h = _act(_conv(m, f"dec{i}", h))
    return T.sigmoid(_conv(m, "out", h))


def predict(m: ModelParams, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Classifier probabilities without recording a graph."""
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(classify(m, x[start : start + batch_size]).data)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.float32)


def predict_masks(m: ModelParams, x: np.ndarray, batch_size: int = 4) -> np.ndarray:
    out = []
    with T.no_grad():
        for start in range(0, len(x), batch_size):
            out.append(generate_mask(m, x[start : start + batch_size]).data)
    return np.concatenate(out)


# .rnet parameter files


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_params(m: ModelParams, path) -> None:
    chunks = [RNET_MAGIC, _pack_str(m.arch), struct.pack("<II", m.epoch, len(m.params))]
    for name, p in m.params.items():
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<I", p.data.ndim))
        chunks.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int, field: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncationError(f"needs {n} bytes at offset {self.pos}, file has {len(self.raw)}", field=field)
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, field: str) -> int:
        return struct.unpack("<I", self.take(4, field))[0]

    def string(self, field: str) -> str:
        n = self.u32(field)
        try:
            return self.take(n, field).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("invalid UTF-8", field=field) from exc


def load_params(path, expect: str | None = None) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"parameter file not found: {path}")
    r = _Reader(path.read_bytes())
    magic = r.take(4, "magic")
    if magic != RNET_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {RNET_MAGIC!r}", field="magic")
    arch = r.string("architecture")
    if arch not in ARCHITECTURES:
        raise FormatError(f"unknown architecture tag {arch!r}", field="architecture")
    if expect is not None and arch != expect:
        raise FormatError(f"file holds a {arch} but a {expect} was expected", field="architecture")
    epoch = r.u32("epoch")
    count = r.u32("parameter count")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        name = r.string("parameter name")
        if name in params:
            raise FormatError(f"duplicate parameter {name!r}", field="parameter name")
        rank = r.u32(f"{name}.rank")
        if rank > 8:
            raise FormatError(f"rank {rank} too large", field=f"{name}.rank")
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name}.extents"))
        size = int(np.prod(shape, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size, f"{name}.values"), dtype="<f4").reshape(shape)
        params[name] = Tensor(data.astype(np.float32), requires_grad=True)
    if r.pos != len(r.raw):
        raise FormatError(f"{len(r.raw) - r.pos} trailing bytes", field="payload")
    return ModelParams(arch, params, epoch=epoch)
