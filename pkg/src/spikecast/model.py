"""Architecture descriptions, concrete layer graphs, and the .smod container.

A :class:`ModelSpec` captures the tunable hyperparameters of the VGG-style
family (block count, kernels per block, FC widths).  :func:`instantiate`
expands a spec into a :class:`LayerGraph`, a flat list of layers with real
weights that both the trainer and the spiking simulator execute.

The .smod container is a JSON text header followed by the raw little-endian
weight arrays in layer-declaration order; see docs/formats.md for a
byte-level example.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .rng import RandomStream, he_uniform

SMOD_MAGIC = b"SMOD"
SMOD_VERSION = 1


class SpecError(ValueError):
    """Invalid architecture description."""


class SmodParseError(ValueError):
    """Malformed .smod container; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class SmodVersionError(SmodParseError):
    pass


# ---------------------------------------------------------------------------
# Layers


@dataclass
class Conv:
    kernel: np.ndarray  # (kh, kw, cin, cout)
    bias: np.ndarray  # (cout,)
    stride: int = 1
    padding: str = "same"
    off_chip: bool = False
    name: str = ""

    kind = "conv"

    def out_shape(self, shape):
        h, w, c = shape
        kh, kw, cin, cout = self.kernel.shape
        if c != cin:
            raise tensor.ShapeMismatchError(
                f"layer {self.name or 'conv'}: input channels ({c}) != kernel cin ({cin})"
            )
        oh = tensor.conv_output_extent(h, kh, self.stride, self.padding)
        ow = tensor.conv_output_extent(w, kw, self.stride, self.padding)
        if oh <= 0 or ow <= 0:
            raise tensor.ShapeMismatchError(
                f"layer {self.name or 'conv'}: non-positive output extent for input {h}x{w}"
            )
        return (oh, ow, cout)

    def forward(self, x):
        return tensor.conv2d_forward(x, self.kernel, self.bias, self.stride, self.padding)

    def backward(self, x, upstream, need_input_grad=True):
        gx, gk, gb = tensor.conv2d_backward(
            x, self.kernel, upstream, self.stride, self.padding, need_input_grad
        )
        return gx, {"kernel": gk, "bias": gb}

    def params(self):
        return ("kernel", "bias")


@dataclass
class Activation:
    """Pointwise nonlinearity.

    kind "relu" and "tanh" are plain ANN activations.  kind "spiking" is the
    integrate-and-fire rate abstraction: the forward pass (used for training
    and any non-simulated evaluation) is amplitude * min(gain * relu(x),
    max_rate), which reduces to relu(x) when amplitude == 1/gain and the
    drive stays below the rate ceiling.  The discrete-time dynamics live in
    simulate.py.
    """

    kind: str = "relu"
    gain: float = 1.0
    amplitude: float = 1.0
    dt: float = 1e-3
    max_rate: float | None = None
    v_threshold: float = 1.0
    reset: str = "subtract"
    tau: float | None = None  # leak time constant; None = pure integrator
    off_chip: bool = False
    name: str = ""

    def __post_init__(self):
        if self.kind == "spiking":
            if self.gain <= 0:
                raise SpecError("spiking activation needs gain > 0")
            if self.dt <= 0:
                raise SpecError("spiking activation needs dt > 0")

    def rate_ceiling(self) -> float:
        """Saturation rate in Hz; one spike per timestep unless lowered."""
        cap = 1.0 / self.dt
        return cap if self.max_rate is None else min(self.max_rate, cap)

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        if self.kind == "relu":
            return tensor.relu_forward(x)
        if self.kind == "tanh":
            return np.tanh(x)
        if self.kind == "spiking":
            ceiling = self.rate_ceiling() / self.gain  # in activation units
            return self.amplitude * self.gain * tensor.rate_relu_forward(x, ceiling)
        raise SpecError(f"unknown activation kind {self.kind!r}")

    def backward(self, x, upstream, need_input_grad=True):
        if self.kind == "relu":
            return tensor.relu_backward(x, upstream), {}
        if self.kind == "tanh":
            t = np.tanh(x)
            return upstream * (1.0 - t * t), {}
        if self.kind == "spiking":
            ceiling = self.rate_ceiling() / self.gain
            g = tensor.rate_relu_backward(x, ceiling, upstream)
            return self.amplitude * self.gain * g, {}
        raise SpecError(f"unknown activation kind {self.kind!r}")

    def params(self):
        return ()

    @property
    def is_spiking(self):
        return self.kind == "spiking"


@dataclass
class MaxPool:
    size: int = 2
    stride: int = 2
    name: str = ""

    kind = "max_pool"

    def out_shape(self, shape):
        h, w, c = shape
        return ((h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1, c)

    def forward(self, x):
        return tensor.maxpool_forward(x, self.size, self.stride)

    def backward(self, x, upstream, need_input_grad=True):
        return tensor.maxpool_backward(x, upstream, self.size, self.stride), {}

    def params(self):
        return ()


@dataclass
class Flatten:
    name: str = ""

    kind = "flatten"

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x):
        x = np.asarray(x)
        if x.ndim == 3:
            return x.reshape(-1)
        return x.reshape(x.shape[0], -1)

    def backward(self, x, upstream, need_input_grad=True):
        return upstream.reshape(np.asarray(x).shape), {}

    def params(self):
        return ()


@dataclass
class Dense:
    weights: np.ndarray  # (cin, cout)
    bias: np.ndarray
    name: str = ""

    kind = "dense"

    def out_shape(self, shape):
        (n,) = shape
        din, dout = self.weights.shape
        if n != din:
            raise tensor.ShapeMismatchError(
                f"layer {self.name or 'dense'}: input length ({n}) != weight rows ({din})"
            )
        return (dout,)

    def forward(self, x):
        return tensor.dense_forward(x, self.weights, self.bias)

    def backward(self, x, upstream, need_input_grad=True):
        gx, gw, gb = tensor.dense_backward(x, self.weights, upstream)
        return gx, {"weights": gw, "bias": gb}

    def params(self):
        return ("weights", "bias")


@dataclass
class Softmax:
    name: str = ""

    kind = "softmax"

    def out_shape(self, shape):
        return shape

    def forward(self, x):
        return tensor.softmax(x, axis=-1)

    def backward(self, x, upstream, need_input_grad=True):
        raise RuntimeError("softmax backward is fused into the cross-entropy loss")

    def params(self):
        return ()


Layer = Conv | Activation | MaxPool | Flatten | Dense | Softmax


# ---------------------------------------------------------------------------
# Model spec and search space

TABLE1_RANGES = {
    "blocks": (2, 4, 1),
    "k1": (6, 16, 2),
    "k2": (24, 32, 4),
    "k3": (36, 48, 4),
    "k4": (52, 64, 4),
    "fc1": (100, 120, 5),
    "fc2": (80, 100, 5),
}


@dataclass
class ModelSpec:
    """Hyperparameters of one VGG-style candidate."""

    blocks: int
    kernels: list[int]
    fc: tuple[int, int]
    downsample: str = "max_pool"  # or "strided_conv"
    classes: int = 7
    input: tuple[int, int, int] = (48, 48, 1)
    strict_table1: bool = False

    def __post_init__(self):
        self.kernels = [int(k) for k in self.kernels]
        self.fc = (int(self.fc[0]), int(self.fc[1]))
        self.validate()

    def validate(self):
        if len(self.kernels) != self.blocks:
            raise SpecError(
                f"kernels list has {len(self.kernels)} entries for {self.blocks} blocks"
            )
        if self.downsample not in ("max_pool", "strided_conv"):
            raise SpecError(f"unknown downsample {self.downsample!r}")
        if self.classes < 2:
            raise SpecError("need at least two classes")
        if any(k < 1 for k in self.kernels) or any(f < 1 for f in self.fc):
            raise SpecError("kernel and FC widths must be positive")
        h, w, c = self.input
        if min(h, w) < 2**self.blocks or c < 1:
            raise SpecError(f"input {self.input} too small for {self.blocks} downsampling steps")
        problems = []
        grid = [("blocks", self.blocks)]
        grid += [(f"k{i + 1}", k) for i, k in enumerate(self.kernels)]
        grid += [("fc1", self.fc[0]), ("fc2", self.fc[1])]
        for name, value in grid:
            lo, hi, step = TABLE1_RANGES[name]
            if not (lo <= value <= hi) or (value - lo) % step != 0:
                problems.append(f"{name}={value} outside {lo}..{hi} step {step}")
        if problems:
            msg = "; ".join(problems)
            if self.strict_table1:
                raise SpecError(f"spec violates the search-table ranges: {msg}")
            warnings.warn(f"spec off the search-table grid: {msg}", stacklevel=3)

    def to_dict(self):
        return {
            "blocks": self.blocks,
            "kernels": list(self.kernels),
            "fc": list(self.fc),
            "downsample": self.downsample,
            "classes": self.classes,
            "input": list(self.input),
        }

    @classmethod
    def from_dict(cls, d, strict_table1=False):
        return cls(
            blocks=int(d["blocks"]),
            kernels=list(d["kernels"]),
            fc=tuple(d["fc"]),
            downsample=d.get("downsample", "max_pool"),
            classes=int(d.get("classes", 7)),
            input=tuple(d.get("input", (48, 48, 1))),
            strict_table1=strict_table1,
        )


@dataclass
class ParamRange:
    min: int
    max: int
    step: int

    def __post_init__(self):
        if self.min > self.max:
            raise SpecError(f"range min {self.min} > max {self.max}")
        if self.step <= 0 or (self.max - self.min) % self.step != 0:
            raise SpecError(f"step {self.step} does not divide {self.max - self.min}")

    def values(self):
        return list(range(self.min, self.max + 1, self.step))


@dataclass
class SearchSpace:
    block: ParamRange
    k1: ParamRange
    k2: ParamRange
    k3: ParamRange
    k4: ParamRange
    fc1: ParamRange
    fc2: ParamRange

    def params(self):
        return {
            "block": self.block,
            "k1": self.k1,
            "k2": self.k2,
            "k3": self.k3,
            "k4": self.k4,
            "fc1": self.fc1,
            "fc2": self.fc2,
        }


def table1_space() -> SearchSpace:
    r = TABLE1_RANGES
    return SearchSpace(
        block=ParamRange(*r["blocks"]),
        k1=ParamRange(*r["k1"]),
        k2=ParamRange(*r["k2"]),
        k3=ParamRange(*r["k3"]),
        k4=ParamRange(*r["k4"]),
        fc1=ParamRange(*r["fc1"]),
        fc2=ParamRange(*r["fc2"]),
    )


# Best-model rows as published for each target device.  Two of them sit off
# the search-table grid (coral_dev K1=18, loihi K2=22), hence strict=False.
PRESETS = {
    "pi": dict(blocks=2, kernels=[16, 24], fc=(100, 80)),
    "jetson_l": dict(blocks=2, kernels=[10, 28], fc=(120, 85)),
    "jetson_h": dict(blocks=2, kernels=[16, 24], fc=(100, 80)),
    "pi_ncs2": dict(blocks=2, kernels=[16, 24], fc=(100, 80)),
    "pi_tpu": dict(blocks=2, kernels=[16, 32], fc=(115, 85)),
    "coral_dev": dict(blocks=2, kernels=[18, 24], fc=(110, 95)),
    "loihi": dict(blocks=3, kernels=[12, 22, 48], fc=(100, 85)),
}


def preset_spec(name: str, **overrides) -> ModelSpec:
    key = name.lower().replace("-", "_").replace("+", "_")
    if key not in PRESETS:
        raise SpecError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    kw = dict(PRESETS[key])
    kw.update(overrides)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return ModelSpec(strict_table1=False, **kw)


# ---------------------------------------------------------------------------
# Layer graph


@dataclass
class LayerGraph:
    layers: list
    input_shape: tuple[int, int, int]
    flavor: str = "ann"
    class_names: list[str] | None = None
    meta: dict = field(default_factory=dict)

    def shapes(self):
        """Per-layer output shapes; raises if adjacent layers do not chain."""
        out = []
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.out_shape(shape)
            out.append(shape)
        return out

    def validate(self, require_encoder: bool | None = None):
        self.shapes()
        if self.flavor == "snn":
            for layer in self.layers:
                if isinstance(layer, MaxPool):
                    raise SpecError("snn graph contains a pooling layer")
                if isinstance(layer, Activation) and not layer.is_spiking:
                    raise SpecError(f"snn graph contains a non-spiking activation {layer.kind!r}")
            encoders = [
                l for l in self.layers if isinstance(l, Conv) and l.off_chip
            ]
            if require_encoder is None:
                require_encoder = True
            if require_encoder and len(encoders) != 1:
                raise SpecError(f"snn graph needs exactly one off-chip encoder, found {len(encoders)}")
        return self

    def forward(self, x, stop_before_softmax=False):
        """Run the graph; returns probabilities, or logits when asked."""
        for layer in self.layers:
            if stop_before_softmax and isinstance(layer, Softmax):
                break
            x = layer.forward(x)
        return x

    def predict(self, x):
        return np.argmax(self.forward(x, stop_before_softmax=True), axis=-1)

    def param_arrays(self):
        """(layer_index, attr_name, array) for every trainable array, in order."""
        out = []
        for i, layer in enumerate(self.layers):
            for attr in layer.params():
                out.append((i, attr, getattr(layer, attr)))
        return out

    def param_count(self):
        return sum(arr.size for _, _, arr in self.param_arrays())

    def copy(self) -> "LayerGraph":
        layers = []
        for layer in self.layers:
            d = {
                f.name: (getattr(layer, f.name).copy()
                         if isinstance(getattr(layer, f.name), np.ndarray)
                         else getattr(layer, f.name))
                for f in dataclasses.fields(layer)
            }
            layers.append(type(layer)(**d))
        return LayerGraph(
            layers=layers,
            input_shape=tuple(self.input_shape),
            flavor=self.flavor,
            class_names=list(self.class_names) if self.class_names else None,
            meta=dict(self.meta),
        )

    def __eq__(self, other):
        if not isinstance(other, LayerGraph):
            return NotImplemented
        if (
            self.flavor != other.flavor
            or tuple(self.input_shape) != tuple(other.input_shape)
            or len(self.layers) != len(other.layers)
        ):
            return False
        for a, b in zip(self.layers, other.layers):
            if type(a) is not type(b):
                return False
            for f in dataclasses.fields(a):
                va, vb = getattr(a, f.name), getattr(b, f.name)
                if isinstance(va, np.ndarray):
                    if va.dtype != vb.dtype or va.shape != vb.shape or not np.array_equal(va, vb):
                        return False
                elif va != vb:
                    return False
        return True


def instantiate(spec: ModelSpec, seed: int = 0) -> LayerGraph:
    """Expand a spec into an ANN graph with He-uniform seeded weights.

    Structure per block: conv3x3 same, relu, conv3x3 same, relu, then one
    downsampling step (factor 2).  Head: flatten, fc1, relu, fc2, relu,
    dense(classes), softmax.
    """
    rng = RandomStream(seed)
    layers: list = []
    h, w, cin = spec.input

    def conv(kh, kw, ci, co, stride, padding, name):
        fan_in = kh * kw * ci
        kernel = he_uniform(rng, (kh, kw, ci, co), fan_in)
        return Conv(kernel=kernel, bias=np.zeros(co), stride=stride, padding=padding, name=name)

    def dense(ci, co, name):
        return Dense(weights=he_uniform(rng, (ci, co), ci), bias=np.zeros(co), name=name)

    c = cin
    for b, k in enumerate(spec.kernels, start=1):
        layers.append(conv(3, 3, c, k, 1, "same", f"b{b}c1"))
        layers.append(Activation("relu", name=f"b{b}c1_act"))
        layers.append(conv(3, 3, k, k, 1, "same", f"b{b}c2"))
        layers.append(Activation("relu", name=f"b{b}c2_act"))
        if spec.downsample == "max_pool":
            layers.append(MaxPool(2, 2, name=f"down{b}"))
        else:
            layers.append(conv(2, 2, k, k, 2, "valid", f"down{b}"))
            layers.append(Activation("relu", name=f"down{b}_act"))
        c = k
        h, w = h // 2, w // 2
    flat = h * w * c
    layers.append(Flatten(name="flatten"))
    layers.append(dense(flat, spec.fc[0], "fc1"))
    layers.append(Activation("relu", name="fc1_act"))
    layers.append(dense(spec.fc[0], spec.fc[1], "fc2"))
    layers.append(Activation("relu", name="fc2_act"))
    layers.append(dense(spec.fc[1], spec.classes, "readout"))
    layers.append(Softmax(name="softmax"))
    graph = LayerGraph(
        layers=layers,
        input_shape=tuple(spec.input),
        flavor="ann",
        meta={"spec": spec.to_dict(), "seed": int(seed)},
    )
    graph.validate()
    return graph


def param_count(spec: ModelSpec) -> int:
    """Trainable parameter count of instantiate(spec), by pure arithmetic."""
    h, w, c = spec.input
    total = 0
    for k in spec.kernels:
        total += (3 * 3 * c + 1) * k
        total += (3 * 3 * k + 1) * k
        if spec.downsample == "strided_conv":
            total += (2 * 2 * k + 1) * k
        c = k
        h, w = h // 2, w // 2
    flat = h * w * c
    total += (flat + 1) * spec.fc[0]
    total += (spec.fc[0] + 1) * spec.fc[1]
    total += (spec.fc[1] + 1) * spec.classes
    return total


# ---------------------------------------------------------------------------
# .smod serialization

def _layer_header(layer) -> dict:
    if isinstance(layer, Conv):
        return {
            "kind": "conv",
            "kernel_shape": list(layer.kernel.shape),
            "stride": layer.stride,
            "padding": layer.padding,
            "off_chip": layer.off_chip,
            "name": layer.name,
        }
    if isinstance(layer, Activation):
        return {
            "kind": "activation",
            "activation": layer.kind,
            "gain": layer.gain,
            "amplitude": layer.amplitude,
            "dt": layer.dt,
            "max_rate": layer.max_rate,
            "v_threshold": layer.v_threshold,
            "reset": layer.reset,
            "tau": layer.tau,
            "off_chip": layer.off_chip,
            "name": layer.name,
        }
    if isinstance(layer, MaxPool):
        return {"kind": "max_pool", "size": layer.size, "stride": layer.stride, "name": layer.name}
    if isinstance(layer, Flatten):
        return {"kind": "flatten", "name": layer.name}
    if isinstance(layer, Dense):
        return {"kind": "dense", "shape": list(layer.weights.shape), "name": layer.name}
    if isinstance(layer, Softmax):
        return {"kind": "softmax", "name": layer.name}
    raise SpecError(f"cannot serialize layer {layer!r}")


def save_model(graph: LayerGraph, path) -> None:
    arrays = [arr for _, _, arr in graph.param_arrays()]
    dtype = "float64" if (not arrays or arrays[0].dtype == np.float64) else "float32"
    header = {
        "format": "smod",
        "version": SMOD_VERSION,
        "flavor": graph.flavor,
        "dtype": dtype,
        "input_shape": list(graph.input_shape),
        "class_names": graph.class_names,
        "meta": graph.meta,
        "layers": [_layer_header(l) for l in graph.layers],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    np_dtype = "<f8" if dtype == "float64" else "<f4"
    with open(path, "wb") as fh:
        fh.write(SMOD_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=np_dtype).tobytes())


def _build_layer(d: dict) -> Layer:
    kind = d.get("kind")
    if kind == "conv":
        kh, kw, ci, co = d["kernel_shape"]
        return Conv(
            kernel=np.zeros((kh, kw, ci, co)),
            bias=np.zeros(co),
            stride=int(d["stride"]),
            padding=d["padding"],
            off_chip=bool(d.get("off_chip", False)),
            name=d.get("name", ""),
        )
    if kind == "activation":
        return Activation(
            kind=d["activation"],
            gain=float(d.get("gain", 1.0)),
            amplitude=float(d.get("amplitude", 1.0)),
            dt=float(d.get("dt", 1e-3)),
            max_rate=None if d.get("max_rate") is None else float(d["max_rate"]),
            v_threshold=float(d.get("v_threshold", 1.0)),
            reset=d.get("reset", "subtract"),
            tau=None if d.get("tau") is None else float(d["tau"]),
            off_chip=bool(d.get("off_chip", False)),
            name=d.get("name", ""),
        )
    if kind == "max_pool":
        return MaxPool(size=int(d["size"]), stride=int(d["stride"]), name=d.get("name", ""))
    if kind == "flatten":
        return Flatten(name=d.get("name", ""))
    if kind == "dense":
        ci, co = d["shape"]
        return Dense(weights=np.zeros((ci, co)), bias=np.zeros(co), name=d.get("name", ""))
    if kind == "softmax":
        return Softmax(name=d.get("name", ""))
    raise SpecError(f"unknown layer kind {kind!r}")


def load_model(path) -> LayerGraph:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != SMOD_MAGIC:
        raise SmodParseError("not a .smod file (bad magic)", 0)
    if len(raw) < 12:
        raise SmodParseError("truncated before header length", len(raw))
    hlen = int.from_bytes(raw[4:12], "little")
    if len(raw) < 12 + hlen:
        raise SmodParseError("truncated inside JSON header", len(raw))
    try:
        header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SmodParseError(f"bad JSON header: {exc}", 12) from exc
    version = header.get("version")
    if version != SMOD_VERSION:
        raise SmodVersionError(f"unsupported container version {version!r}", 12)
    try:
        layers = [_build_layer(d) for d in header["layers"]]
        graph = LayerGraph(
            layers=layers,
            input_shape=tuple(header["input_shape"]),
            flavor=header.get("flavor", "ann"),
            class_names=header.get("class_names"),
            meta=header.get("meta", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SmodParseError):
            raise
        raise SmodParseError(f"bad layer table: {exc}", 12) from exc
    np_dtype = "<f8" if header.get("dtype", "float64") == "float64" else "<f4"
    itemsize = 8 if np_dtype == "<f8" else 4
    offset = 12 + hlen
    for i, attr, arr in graph.param_arrays():
        nbytes = arr.size * itemsize
        if offset + nbytes > len(raw):
            raise SmodParseError(
                f"truncated weights for layer {i} ({graph.layers[i].name or attr})", offset
            )
        data = np.frombuffer(raw, dtype=np_dtype, count=arr.size, offset=offset)
        setattr(graph.layers[i], attr, data.reshape(arr.shape).astype(arr.dtype).copy())
        offset += nbytes
    if offset != len(raw):
        raise SmodParseError(f"{len(raw) - offset} trailing bytes after weights", offset)
    graph.validate(require_encoder=False)
    return graph
