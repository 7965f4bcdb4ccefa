"""Layer specifications, the four GAN networks, and model checkpoints."""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import ops
from .ops import BatchNormState
from .tensor import DimensionError, Tensor

LAYER_KINDS = ("conv", "tconv", "fc", "batchnorm", "relu", "sigmoid", "reshape")
INIT_STD = 0.02
CHECKPOINT_MAGIC = b"SKGAN1"


class BuildError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    kernel: tuple = ()  # (out_c, in_c, kh, kw) for conv/tconv, (out, in) for fc
    stride: int = 1  # stride for conv, upsampling factor for tconv
    shape: tuple = ()  # per-sample target shape for reshape

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise BuildError(f"unknown layer kind {self.kind!r}")

    @property
    def has_params(self) -> bool:
        return self.kind in ("conv", "tconv", "fc", "batchnorm")


def conv(out_c, in_c, k, stride=2):
    return LayerSpec("conv", (out_c, in_c, k, k), stride)


def tconv(out_c, in_c, k, up=2):
    return LayerSpec("tconv", (out_c, in_c, k, k), up)


def fc(out_f, in_f):
    return LayerSpec("fc", (out_f, in_f))


def bn(channels):
    return LayerSpec("batchnorm", (channels,))


RELU = LayerSpec("relu")
SIGMOID = LayerSpec("sigmoid")


def reshape(*shape):
    return LayerSpec("reshape", shape=tuple(shape))


def layer_output_shape(layer: LayerSpec, shape: tuple) -> tuple:
    """Statically propagate a per-sample shape through one layer."""
    k = layer.kind
    if k in ("conv", "tconv"):
        out_c, in_c, kh, kw = layer.kernel
        if len(shape) != 3 or shape[0] != in_c:
            raise BuildError(f"{k} expects ({in_c}, h, w), got {shape}")
        _, h, w = shape
        if k == "conv":
            return (out_c, ops.conv_output_size(h, kh, layer.stride, kh // 2),
                    ops.conv_output_size(w, kw, layer.stride, kw // 2))
        return (out_c, h * layer.stride, w * layer.stride)
    if k == "fc":
        out_f, in_f = layer.kernel
        if int(np.prod(shape)) != in_f:
            raise BuildError(f"fc expects {in_f} inputs, got shape {shape}")
        return (out_f,)
    if k == "batchnorm":
        if len(shape) != 3 or shape[0] != layer.kernel[0]:
            raise BuildError(f"batchnorm({layer.kernel[0]}) got shape {shape}")
        return shape
    if k == "reshape":
        if int(np.prod(shape)) != int(np.prod(layer.shape)):
            raise BuildError(f"cannot reshape {shape} to {layer.shape}")
        return layer.shape
    return shape


@dataclass(frozen=True)
class NetworkSpec:
    name: str
    layers: tuple
    input_shape: tuple  # per sample, without the batch axis

    def shape_chain(self) -> list:
        """Per-sample shape after each layer, starting with the input shape."""
        chain = [tuple(self.input_shape)]
        for i, layer in enumerate(self.layers):
            try:
                chain.append(layer_output_shape(layer, chain[-1]))
            except BuildError as exc:
                raise BuildError(f"{self.name}: layer {i - 1} -> {i} ({layer.kind}): {exc}") from None
        return chain

    @property
    def output_shape(self) -> tuple:
        return self.shape_chain()[-1]

    @property
    def is_discriminator(self) -> bool:
        return self.name.endswith("-D")


# Every hidden layer is followed by ReLU; batch normalisation comes after the
# activation so that the last batch-norm output is the 1024-d representation.

def sketch_discriminator() -> NetworkSpec:
    return NetworkSpec("sketch-D", (
        conv(8, 1, 9, stride=1), RELU,
        conv(16, 8, 5), RELU, bn(16),
        conv(16, 16, 5), RELU, bn(16),
        conv(16, 16, 5), RELU, bn(16),
        reshape(1024),
        fc(1, 1024), SIGMOID,
    ), (1, 64, 64))


def thin_discriminator() -> NetworkSpec:
    return NetworkSpec("thin-D", (
        conv(8, 1, 3), RELU,
        conv(16, 8, 3), RELU, bn(16),
        conv(32, 16, 3), RELU, bn(32),
        conv(64, 32, 3), RELU, bn(64),
        reshape(1024),
        fc(1, 1024), SIGMOID,
    ), (1, 64, 64))


def sketch_generator(dz: int = 2) -> NetworkSpec:
    return NetworkSpec("sketch-G", (
        fc(128, dz), RELU, reshape(8, 4, 4),
        tconv(16, 8, 3), RELU, bn(16),
        tconv(16, 16, 5), RELU, bn(16),
        tconv(16, 16, 5), RELU, bn(16),
        tconv(16, 16, 5), RELU, bn(16),
        tconv(1, 16, 9, up=1), SIGMOID,
    ), (dz,))


def thin_generator(dz: int = 2) -> NetworkSpec:
    return NetworkSpec("thin-G", (
        fc(1024, dz), RELU, reshape(64, 4, 4),
        tconv(32, 64, 3), RELU, bn(32),
        tconv(16, 32, 3), RELU, bn(16),
        tconv(8, 16, 3), RELU, bn(8),
        tconv(1, 8, 3), SIGMOID,
    ), (dz,))


ARCHITECTURES = {
    "sketch": (sketch_generator, sketch_discriminator),
    "thin": (thin_generator, thin_discriminator),
}


def spec_by_name(name: str, dz: int = 2) -> NetworkSpec:
    builders = {
        "sketch-G": lambda: sketch_generator(dz),
        "sketch-D": sketch_discriminator,
        "thin-G": lambda: thin_generator(dz),
        "thin-D": thin_discriminator,
    }
    if name not in builders:
        raise BuildError(f"unknown network {name!r}")
    return builders[name]()


@dataclass
class Model:
    spec: NetworkSpec
    params: dict = field(default_factory=dict)  # "<layer>.<kind>" -> Tensor
    bn_states: dict = field(default_factory=dict)  # layer index -> BatchNormState
    seed: int = 0

    def parameters(self) -> dict:
        return self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def forward(self, x: Tensor, mode: str = "train", stop: Optional[int] = None,
                activations: Optional[list] = None) -> Tensor:
        """Run layers ``[0, stop)`` (all by default).

        If ``activations`` is a list, each layer's output is appended to it.
        """
        expected = tuple(self.spec.input_shape)
        if tuple(x.shape[1:]) != expected:
            raise DimensionError(
                f"{self.spec.name} expects per-sample shape {expected}, got {tuple(x.shape[1:])}",
                axis="input",
            )
        layers = self.spec.layers if stop is None else self.spec.layers[:stop]
        for i, layer in enumerate(layers):
            x = self._apply(i, layer, x, mode)
            if activations is not None:
                activations.append(x)
        return x

    __call__ = forward

    def _apply(self, i: int, layer: LayerSpec, x: Tensor, mode: str) -> Tensor:
        p = self.params
        k = layer.kind
        if k == "conv":
            kh = layer.kernel[2]
            return ops.conv2d(x, p[f"{i}.weight"], p[f"{i}.bias"], layer.stride, kh // 2)
        if k == "tconv":
            return ops.conv2d_transpose(x, p[f"{i}.weight"], p[f"{i}.bias"], layer.stride)
        if k == "fc":
            return ops.fully_connected(x, p[f"{i}.weight"], p[f"{i}.bias"])
        if k == "batchnorm":
            return ops.batch_norm(x, p[f"{i}.gamma"], p[f"{i}.beta"], self.bn_states[i], mode)
        if k == "relu":
            return ops.relu(x)
        if k == "sigmoid":
            return ops.sigmoid(x)
        return ops.reshape(x, (x.shape[0],) + tuple(layer.shape))


def build_model(spec: NetworkSpec, seed: int = 0, init_std: float = INIT_STD,
                bn_momentum: float = ops.BN_MOMENTUM, bn_eps: float = ops.BN_EPS) -> Model:
    """Instantiate ``spec``: weights ~ N(0, init_std), zero biases, unit gamma, zero beta."""
    spec.shape_chain()  # raises BuildError on a non-chaining spec
    rng = np.random.default_rng(seed)
    model = Model(spec, seed=seed)
    for i, layer in enumerate(spec.layers):
        if layer.kind in ("conv", "tconv", "fc"):
            model.params[f"{i}.weight"] = Tensor(rng.normal(0.0, init_std, layer.kernel), requires_grad=True)
            model.params[f"{i}.bias"] = Tensor(np.zeros(layer.kernel[0]), requires_grad=True)
        elif layer.kind == "batchnorm":
            c = layer.kernel[0]
            model.params[f"{i}.gamma"] = Tensor(np.ones(c), requires_grad=True)
            model.params[f"{i}.beta"] = Tensor(np.zeros(c), requires_grad=True)
            model.bn_states[i] = BatchNormState(c, bn_momentum, bn_eps)
    return model


def forward(model: Model, x: Tensor, mode: str = "train") -> Tensor:
    return model.forward(x, mode)


def count_params(model: Model) -> int:
    return int(sum(t.size for t in model.params.values()))


def param_breakdown(model: Model) -> dict:
    """Parameter counts keyed by layer kind and by parameter role."""
    out: dict = {}
    for name, t in model.params.items():
        i, role = name.split(".")
        kind = model.spec.layers[int(i)].kind
        out[kind] = out.get(kind, 0) + t.size
        out[role] = out.get(role, 0) + t.size
    out["total"] = count_params(model)
    return out


# -- checkpoints -------------------------------------------------------------
#
# Layout (little-endian):
#   b"SKGAN1"
#   u32 len + utf-8 network name, i64 seed
#   u32 count, then per parameter tensor:  u32 len + name, u32 ndim, u32 dims..., f64 values
#   u32 count, then per batch-norm layer:  u32 layer index, f64 momentum, f64 eps,
#                                          u32 channels, f64 running_mean, f64 running_var

def _write_str(buf, s: str) -> None:
    b = s.encode("utf-8")
    buf.write(struct.pack("<I", len(b)))
    buf.write(b)


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    _write_str(buf, model.spec.name)
    buf.write(struct.pack("<q", model.seed))
    buf.write(struct.pack("<I", len(model.params)))
    for name, t in model.params.items():
        _write_str(buf, name)
        buf.write(struct.pack("<I", t.values.ndim))
        buf.write(struct.pack(f"<{t.values.ndim}I", *t.shape))
        buf.write(t.values.astype("<f8").tobytes())
    buf.write(struct.pack("<I", len(model.bn_states)))
    for i, st in sorted(model.bn_states.items()):
        buf.write(struct.pack("<IddI", i, st.momentum, st.eps, st.channels))
        buf.write(st.running_mean.astype("<f8").tobytes())
        buf.write(st.running_var.astype("<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> str:
    """Write ``model`` to ``path``; returns the sha256 hex digest of the file."""
    data = checkpoint_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        b = self.data[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def checkpoint_from_bytes(data: bytes) -> Model:
    r = _Reader(data)
    if r.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a SKGAN1 checkpoint")
    name = r.string()
    (seed,) = r.unpack("<q")
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        pname = r.string()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I")
        tensors[pname] = r.floats(int(np.prod(shape))).reshape(shape)
    (nbn,) = r.unpack("<I")
    states = {}
    for _ in range(nbn):
        i, momentum, eps, c = r.unpack("<IddI")
        states[i] = BatchNormState(c, momentum, eps, r.floats(c), r.floats(c))
    if r.pos != len(data):
        raise CheckpointError(f"trailing bytes after offset {r.pos}")

    dz = 2
    if name.endswith("-G"):
        dz = tensors["0.weight"].shape[1]
    model = build_model(spec_by_name(name, dz), seed)
    if set(tensors) != set(model.params):
        raise CheckpointError(f"parameter names do not match network {name}")
    for pname, values in tensors.items():
        if values.shape != model.params[pname].shape:
            raise CheckpointError(f"{pname}: shape {values.shape} != {model.params[pname].shape}")
        model.params[pname].values = np.ascontiguousarray(values)
    model.bn_states = states
    return model


def load_checkpoint(path) -> Model:
    return checkpoint_from_bytes(Path(path).read_bytes())


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
