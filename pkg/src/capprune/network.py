"""Sequential network representation, reference inference, surgery and FLOPs.

A :class:`Model` is an immutable chain of layer values. Every pruning or
compensation step returns a new model; the arrays of untouched layers are
shared, never mutated.

Weight layouts follow the common deep-learning convention: ``Conv2d.weight``
is ``C_out x C_in x k x k`` and ``Dense.weight`` is ``D_out x D_in``. The
flattened view used by statistics and compensation is
``weight.reshape(C_out, -1).T``, a ``(C_in*k*k) x C_out`` matrix whose rows
follow the :func:`capprune.tensor.im2col` convention.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Union

import numpy as np

from .errors import FormatError, PruneError, ShapeError
from .tensor import conv_output_size, im2col

ACTIVATIONS = ("relu", "sigmoid", "identity")
# per-element cost of an activation; sigmoid counted as negate, exp, add, divide
ACTIVATION_FLOPS = {"relu": 1, "identity": 1, "sigmoid": 4}


def _f32(a) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Conv2d:
    weight: np.ndarray
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight", _f32(self.weight))
        if self.bias is not None:
            object.__setattr__(self, "bias", _f32(self.bias))
        w = self.weight
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise ShapeError(f"Conv2d weight must be C_out x C_in x k x k, got {w.shape}")
        if self.bias is not None and self.bias.shape != (w.shape[0],):
            raise ShapeError(f"Conv2d bias shape {self.bias.shape} != ({w.shape[0]},)")
        if self.stride < 1 or self.padding < 0:
            raise ShapeError("Conv2d stride must be >= 1 and padding >= 0")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "weight", _f32(self.weight))
        if self.bias is not None:
            object.__setattr__(self, "bias", _f32(self.bias))
        if self.weight.ndim != 2:
            raise ShapeError(f"Dense weight must be D_out x D_in, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"Dense bias shape {self.bias.shape} != ({self.weight.shape[0]},)")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    kernel = 1


@dataclass(frozen=True, eq=False)
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_var"):
            object.__setattr__(self, name, _f32(getattr(self, name)))
        c = self.gamma.shape
        if len(c) != 1 or any(getattr(self, n).shape != c for n in ("beta", "running_mean", "running_var")):
            raise ShapeError("BatchNorm parameters must be equal-length vectors")
        if np.any(self.running_var < 0):
            raise ShapeError("BatchNorm running_var must be non-negative")
        if not self.eps > 0:
            raise ShapeError("BatchNorm eps must be positive")

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def scale(self) -> np.ndarray:
        """Per-channel multiplier ``gamma / sqrt(var + eps)`` in float64."""
        return self.gamma.astype(np.float64) / np.sqrt(self.running_var.astype(np.float64) + self.eps)

    def apply(self, y: np.ndarray, axis: int = 1) -> np.ndarray:
        shape = [1] * y.ndim
        shape[axis] = -1
        scale = self.scale().reshape(shape)
        shift = (self.beta.astype(np.float64) - self.running_mean.astype(np.float64) * self.scale()).reshape(shape)
        return y * scale + shift


@dataclass(frozen=True)
class Activation:
    kind: str = "relu"

    def __post_init__(self):
        if self.kind not in ACTIVATIONS:
            raise ShapeError(f"unknown activation {self.kind!r}")

    def apply(self, y: np.ndarray) -> np.ndarray:
        if self.kind == "relu":
            return np.maximum(y, 0.0)
        if self.kind == "sigmoid":
            return sigmoid(y)
        return y


@dataclass(frozen=True)
class MaxPool:
    kernel: int = 2
    stride: int = 2


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Conv2d, Dense, BatchNorm, Activation, MaxPool, GlobalAvgPool, Flatten]
PRUNABLE = (Conv2d, Dense)


def sigmoid(y: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * y))


def _out_shape(layer: Layer, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv2d):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise ShapeError(f"Conv2d expects {layer.in_channels} x H x W input, got {shape}")
        h = conv_output_size(shape[1], layer.kernel, layer.stride, layer.padding)
        w = conv_output_size(shape[2], layer.kernel, layer.stride, layer.padding)
        return (layer.out_channels, h, w)
    if isinstance(layer, Dense):
        if len(shape) != 1 or shape[0] != layer.in_channels:
            raise ShapeError(f"Dense expects a {layer.in_channels}-vector, got {shape}")
        return (layer.out_channels,)
    if isinstance(layer, BatchNorm):
        if shape[0] != layer.channels:
            raise ShapeError(f"BatchNorm over {layer.channels} channels got input {shape}")
        return shape
    if isinstance(layer, Activation):
        return shape
    if isinstance(layer, MaxPool):
        if len(shape) != 3:
            raise ShapeError(f"MaxPool expects C x H x W input, got {shape}")
        h = conv_output_size(shape[1], layer.kernel, layer.stride, 0)
        w = conv_output_size(shape[2], layer.kernel, layer.stride, 0)
        return (shape[0], h, w)
    if isinstance(layer, GlobalAvgPool):
        if len(shape) != 3:
            raise ShapeError(f"GlobalAvgPool expects C x H x W input, got {shape}")
        return (shape[0], 1, 1)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise ShapeError(f"unsupported layer {type(layer).__name__}")


@dataclass(frozen=True, eq=False)
class Model:
    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Input shape of every layer followed by the model output shape."""
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(_out_shape(layer, shapes[-1]))
        return shapes

    def prunable_layers(self) -> list[int]:
        """Conv2d/Dense layers whose input channels have an upstream producer."""
        out = []
        for i, layer in enumerate(self.layers):
            if isinstance(layer, PRUNABLE):
                try:
                    _trace_producer(self, i)
                except PruneError:
                    continue
                out.append(i)
        return out

    def conv_layers(self) -> list[int]:
        """Default pruning set: prunable Conv2d layers, fully-connected layers excluded."""
        return [i for i in self.prunable_layers() if isinstance(self.layers[i], Conv2d)]

    def replace_layer(self, index: int, layer: Layer) -> "Model":
        layers = list(self.layers)
        layers[index] = layer
        return Model(tuple(layers), self.input_shape)


# ---------------------------------------------------------------------------
# inference


def layer_forward(layer: Layer, x: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv2d):
        n = x.shape[0]
        cols = im2col(x, layer.kernel, layer.stride, layer.padding)
        h = conv_output_size(x.shape[2], layer.kernel, layer.stride, layer.padding)
        w = conv_output_size(x.shape[3], layer.kernel, layer.stride, layer.padding)
        y = layer.weight.reshape(layer.out_channels, -1).astype(np.float64) @ cols
        y = y.reshape(layer.out_channels, n, h, w).transpose(1, 0, 2, 3)
        if layer.bias is not None:
            y = y + layer.bias.astype(np.float64)[None, :, None, None]
        return np.ascontiguousarray(y)
    if isinstance(layer, Dense):
        y = x @ layer.weight.astype(np.float64).T
        if layer.bias is not None:
            y = y + layer.bias.astype(np.float64)
        return y
    if isinstance(layer, BatchNorm):
        return layer.apply(x, axis=1)
    if isinstance(layer, Activation):
        return layer.apply(x)
    if isinstance(layer, MaxPool):
        win = np.lib.stride_tricks.sliding_window_view(x, (layer.kernel, layer.kernel), axis=(2, 3))
        return win[:, :, :: layer.stride, :: layer.stride].max(axis=(4, 5))
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(2, 3), keepdims=True)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    raise ShapeError(f"unsupported layer {type(layer).__name__}")


def forward(
    model: Model,
    batch: np.ndarray,
    capture: Iterable[int] = (),
    *,
    batch_size: int = 256,
) -> tuple[np.ndarray, dict[int, np.ndarray]]:
    """Run inference and optionally capture the input of selected layers.

    The batch is processed in fixed-size chunks so the result never depends
    on how callers split the work. Computation is float64.
    """
    batch = np.asarray(batch)
    if batch.ndim != len(model.input_shape) + 1 or tuple(batch.shape[1:]) != model.input_shape:
        raise ShapeError(f"batch shape {batch.shape} does not match model input {model.input_shape}")
    capture = sorted(set(capture))
    for c in capture:
        if not 0 <= c < len(model.layers):
            raise ShapeError(f"capture index {c} out of range")
    outputs, captured = [], {c: [] for c in capture}
    for start in range(0, batch.shape[0], batch_size):
        x = batch[start : start + batch_size].astype(np.float64)
        for i, layer in enumerate(model.layers):
            if i in captured:
                captured[i].append(x)
            x = layer_forward(layer, x)
        outputs.append(x)
    out = np.concatenate(outputs) if outputs else np.zeros((0,) + tuple(model.shapes()[-1]))
    return out, {c: np.concatenate(v) for c, v in captured.items()}


def predict(model: Model, batch: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Top-1 class per example; ties resolve to the lowest class index."""
    out, _ = forward(model, batch, batch_size=batch_size)
    return np.argmax(out.reshape(out.shape[0], -1), axis=1)


# ---------------------------------------------------------------------------
# surgery


@dataclass(frozen=True)
class _ProducerPath:
    producer: int
    batchnorms: tuple[int, ...]


def _trace_producer(model: Model, index: int) -> _ProducerPath:
    layer = model.layers[index]
    if not isinstance(layer, PRUNABLE):
        raise PruneError(f"layer {index} ({type(layer).__name__}) does not consume prunable channels")
    shapes = model.shapes()
    bns = []
    for j in range(index - 1, -1, -1):
        up = model.layers[j]
        if isinstance(up, PRUNABLE):
            return _ProducerPath(j, tuple(bns))
        if isinstance(up, BatchNorm):
            bns.append(j)
        elif isinstance(up, Flatten):
            c, *spatial = shapes[j]
            if spatial and int(np.prod(spatial)) != 1:
                raise PruneError(
                    f"layer {index}: Flatten at {j} mixes spatial positions into features; "
                    "channel pruning needs a 1x1 spatial map before flattening"
                )
    raise PruneError(f"layer {index} has no prunable upstream producer (first parameterized layer)")


def _channel_indices(retained, n_channels: int) -> np.ndarray:
    idx = np.asarray(getattr(retained, "retained", retained), dtype=np.int64)
    if idx.ndim != 1 or idx.size == 0:
        raise PruneError("retained channel set must be a non-empty 1-D sequence")
    if np.any(np.diff(idx) <= 0) or idx[0] < 0 or idx[-1] >= n_channels:
        raise PruneError(f"retained channels must be strictly increasing within [0, {n_channels})")
    return idx


def prune_layer(model: Model, layer: int, retained) -> Model:
    """Keep only ``retained`` input channels of ``layer``.

    The producing Conv2d/Dense loses the matching output filters (and bias
    entries) and every BatchNorm in between loses the matching channels.
    Pooling, activation and flatten layers pass channel identity through.
    """
    path = _trace_producer(model, layer)
    consumer = model.layers[layer]
    idx = _channel_indices(retained, consumer.in_channels)
    layers = list(model.layers)
    layers[layer] = replace(consumer, weight=consumer.weight[:, idx])
    prod = model.layers[path.producer]
    layers[path.producer] = replace(
        prod,
        weight=prod.weight[idx],
        bias=None if prod.bias is None else prod.bias[idx],
    )
    for b in path.batchnorms:
        bn = model.layers[b]
        layers[b] = BatchNorm(bn.gamma[idx], bn.beta[idx], bn.running_mean[idx], bn.running_var[idx], bn.eps)
    return Model(tuple(layers), model.input_shape)


def flat_weight(layer: Conv2d | Dense) -> np.ndarray:
    """``(C_in*k*k) x C_out`` float64 view of a layer's weights."""
    return layer.weight.reshape(layer.out_channels, -1).T.astype(np.float64)


def unflat_weight(flat: np.ndarray, out_channels: int, kernel: int, conv: bool) -> np.ndarray:
    """Inverse of :func:`flat_weight` for a given output-channel count and kernel."""
    w = np.asarray(flat).T
    if conv:
        return w.reshape(out_channels, -1, kernel, kernel)
    return w.reshape(out_channels, -1)


def apply_compensation(model: Model, layer: int, w_hat: np.ndarray, b_hat: np.ndarray) -> Model:
    """Install compensated weights and bias; a bias field is created if absent."""
    target = model.layers[layer]
    if not isinstance(target, PRUNABLE):
        raise ShapeError(f"layer {layer} is not a Conv2d/Dense layer")
    w_hat = np.asarray(w_hat)
    b_hat = np.asarray(b_hat).reshape(-1)
    if w_hat.shape != target.weight.shape:
        raise ShapeError(f"compensated weight shape {w_hat.shape} != layer weight shape {target.weight.shape}")
    if b_hat.shape != (target.out_channels,):
        raise ShapeError(f"compensated bias length {b_hat.shape} != {target.out_channels}")
    return model.replace_layer(layer, replace(target, weight=w_hat, bias=b_hat))


# ---------------------------------------------------------------------------
# FLOPs


@dataclass(frozen=True)
class FlopsReport:
    per_layer: tuple[tuple[int, int], ...]
    total: int

    def to_dict(self) -> dict:
        return {"per_layer": [{"layer": i, "flops": f} for i, f in self.per_layer], "total": self.total}


def layer_flops(layer: Layer, in_shape: tuple[int, ...], out_shape: tuple[int, ...]) -> int:
    # bias additions are not counted, for conv and dense alike
    if isinstance(layer, Conv2d):
        c, h, w = in_shape
        return layer.kernel**2 * w * h * c * layer.out_channels // layer.stride**2
    if isinstance(layer, Dense):
        return layer.in_channels * layer.out_channels
    elements = int(np.prod(in_shape))
    if isinstance(layer, BatchNorm):
        return 2 * elements
    if isinstance(layer, Activation):
        return ACTIVATION_FLOPS[layer.kind] * elements
    if isinstance(layer, MaxPool):
        return layer.kernel**2 * int(np.prod(out_shape))
    if isinstance(layer, GlobalAvgPool):
        return elements
    return 0


def flops(model: Model) -> FlopsReport:
    """Per-layer FLOPs for one inference pass of a single example."""
    shapes = model.shapes()
    per = tuple((i, layer_flops(layer, shapes[i], shapes[i + 1])) for i, layer in enumerate(model.layers))
    return FlopsReport(per, sum(f for _, f in per))


# ---------------------------------------------------------------------------
# model file

MAGIC = b"CPRN"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_BRANCHING_KINDS = {"add", "residual", "concat", "branch", "shortcut"}


def _layer_entry(layer: Layer) -> tuple[dict, dict[str, np.ndarray]]:
    if isinstance(layer, Conv2d):
        meta = {"kind": "conv2d", "stride": layer.stride, "padding": layer.padding}
        tensors = {"weight": layer.weight}
    elif isinstance(layer, Dense):
        meta = {"kind": "dense"}
        tensors = {"weight": layer.weight}
    elif isinstance(layer, BatchNorm):
        meta = {"kind": "batchnorm", "eps": layer.eps}
        tensors = {n: getattr(layer, n) for n in ("gamma", "beta", "running_mean", "running_var")}
    elif isinstance(layer, Activation):
        return {"kind": "activation", "function": layer.kind}, {}
    elif isinstance(layer, MaxPool):
        return {"kind": "maxpool", "kernel": layer.kernel, "stride": layer.stride}, {}
    elif isinstance(layer, GlobalAvgPool):
        return {"kind": "globalavgpool"}, {}
    elif isinstance(layer, Flatten):
        return {"kind": "flatten"}, {}
    else:
        raise ShapeError(f"cannot serialize {type(layer).__name__}")
    if layer.__class__ in PRUNABLE and layer.bias is not None:
        tensors["bias"] = layer.bias
    return meta, tensors


def model_to_bytes(model: Model) -> bytes:
    layers_meta, payload, offset = [], [], 0
    for layer in model.layers:
        meta, tensors = _layer_entry(layer)
        entries = {}
        for name, arr in tensors.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            entries[name] = {"shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
            payload.append(raw)
            offset += len(raw)
        if entries:
            meta["tensors"] = entries
        layers_meta.append(meta)
    manifest = {"input_shape": list(model.input_shape), "layers": layers_meta, "payload_bytes": offset}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(blob)) + blob + b"".join(payload)


def save_model(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def _read_tensor(payload: bytes, entry: dict, name: str) -> np.ndarray:
    try:
        shape = tuple(int(s) for s in entry["shape"])
        offset = int(entry["offset"])
    except (KeyError, TypeError, ValueError):
        raise FormatError(f"tensor {name!r}: malformed manifest entry") from None
    count = int(np.prod(shape)) if shape else 1
    end = offset + 4 * count
    if offset < 0 or end > len(payload):
        raise FormatError(f"tensor {name!r}: payload truncated (needs bytes {offset}..{end}, have {len(payload)})")
    return np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)


def model_from_bytes(data: bytes) -> Model:
    if len(data) < _HEADER.size:
        raise FormatError("model file truncated before header end")
    magic, version, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported model file version {version} (expected {VERSION})")
    start = _HEADER.size
    if start + length > len(data):
        raise FormatError("model file truncated inside manifest")
    try:
        manifest = json.loads(data[start : start + length].decode("utf-8"))
        layer_metas = manifest["layers"]
        input_shape = tuple(manifest["input_shape"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed manifest: {exc}") from None
    payload = data[start + length :]
    if len(payload) < int(manifest.get("payload_bytes", 0)):
        raise FormatError("model file payload truncated")
    layers = []
    for i, meta in enumerate(layer_metas):
        kind = meta.get("kind")
        tensors = {n: _read_tensor(payload, e, f"layers[{i}].{n}") for n, e in meta.get("tensors", {}).items()}
        try:
            if kind == "conv2d":
                layers.append(Conv2d(tensors["weight"], tensors.get("bias"), int(meta["stride"]), int(meta["padding"])))
            elif kind == "dense":
                layers.append(Dense(tensors["weight"], tensors.get("bias")))
            elif kind == "batchnorm":
                layers.append(
                    BatchNorm(tensors["gamma"], tensors["beta"], tensors["running_mean"], tensors["running_var"], float(meta["eps"]))
                )
            elif kind == "activation":
                layers.append(Activation(meta["function"]))
            elif kind == "maxpool":
                layers.append(MaxPool(int(meta["kernel"]), int(meta["stride"])))
            elif kind == "globalavgpool":
                layers.append(GlobalAvgPool())
            elif kind == "flatten":
                layers.append(Flatten())
            elif kind in _BRANCHING_KINDS:
                raise FormatError(f"layer {i}: residual/branching layer {kind!r} is not supported (sequential chains only)")
            else:
                raise FormatError(f"layer {i}: unknown layer kind {kind!r}")
        except KeyError as exc:
            raise FormatError(f"layer {i} ({kind}): missing field {exc}") from None
        except ShapeError as exc:
            raise FormatError(f"layer {i} ({kind}): {exc}") from None
    try:
        return Model(tuple(layers), input_shape)
    except ShapeError as exc:
        raise FormatError(f"inconsistent model: {exc}") from None


def load_model(path: str | Path) -> Model:
    return model_from_bytes(Path(path).read_bytes())


def models_equal(a: Model, b: Model) -> bool:
    """Structural and bitwise parameter equality."""
    return model_to_bytes(a) == model_to_bytes(b)
