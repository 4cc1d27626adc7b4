"""Declarative layer specs, shape-validated graph building, and serialization.

A graph is an ordered list of layer specs (sequential, with nested residual
skip sections) plus a flat weight arena. Building infers every layer's
input/output shape up front and fails atomically with the offending layer
index; no partially-built graph is observable. Downsampling is always done
with exact-tiling max pools so that every convolution satisfies the
exact-output-extent contract of the kernel layer.

File formats:
  graph JSON   -- {"version": 1, "input_shape": [...], "layers": [{"type": ...}, ...]}
  weight file  -- 16-byte magic, one JSON header line {digest, param_count},
                  then raw little-endian float64 values.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields, replace
from typing import ClassVar

import numpy as np

from .condenser import AttentionCondenserParams, ac_param_layout
from .errors import ConfigError, DataError, GraphBuildError, IntegrityError, ShapeError
from .tensor import Tape, Tensor, activation, add, conv2d, dense, depthwise_conv2d, pointwise_conv2d, pool2d

__all__ = [
    "Conv",
    "Depthwise",
    "Pointwise",
    "AttnCondenser",
    "MaxPool",
    "GlobalAvgPool",
    "Dense",
    "Activation",
    "ResidualBegin",
    "ResidualEnd",
    "ModelGraph",
    "WeightStore",
    "PrototypeConfig",
    "build_graph",
    "serialize_graph",
    "deserialize_graph",
    "save_weights",
    "load_weights",
    "graph_digest",
    "seed_prototype",
    "resnet50_descriptor",
]

FORMAT_VERSION = 1
WEIGHT_MAGIC = b"USATTN-WEIGHTS-1"


# ---------------------------------------------------------------------------
# layer specs


@dataclass(frozen=True)
class Conv:
    out_ch: int
    k: int
    stride: int = 1
    pad: int = 0
    tag: ClassVar[str] = "conv"


@dataclass(frozen=True)
class Depthwise:
    k: int
    stride: int = 1
    pad: int = 1
    tag: ClassVar[str] = "depthwise"


@dataclass(frozen=True)
class Pointwise:
    out_ch: int
    tag: ClassVar[str] = "pointwise"


@dataclass(frozen=True)
class AttnCondenser:
    factor: int = 2
    tag: ClassVar[str] = "attn_condenser"


@dataclass(frozen=True)
class MaxPool:
    window: int = 2
    stride: int = 2
    tag: ClassVar[str] = "max_pool"


@dataclass(frozen=True)
class GlobalAvgPool:
    tag: ClassVar[str] = "global_avg_pool"


@dataclass(frozen=True)
class Dense:
    out: int
    tag: ClassVar[str] = "dense"


@dataclass(frozen=True)
class Activation:
    kind: str
    tag: ClassVar[str] = "activation"


@dataclass(frozen=True)
class ResidualBegin:
    proj_out_ch: int | None = None  # optional 1x1 projection on the skip path
    tag: ClassVar[str] = "residual_begin"


@dataclass(frozen=True)
class ResidualEnd:
    tag: ClassVar[str] = "residual_end"


_SPEC_TYPES = {
    cls.tag: cls
    for cls in (
        Conv,
        Depthwise,
        Pointwise,
        AttnCondenser,
        MaxPool,
        GlobalAvgPool,
        Dense,
        Activation,
        ResidualBegin,
        ResidualEnd,
    )
}


def spec_to_dict(spec):
    d = {"type": spec.tag}
    for f in fields(spec):
        value = getattr(spec, f.name)
        if value is not None:
            d[f.name] = value
    return d


def spec_from_dict(d, where="layer"):
    if not isinstance(d, dict):
        raise DataError(f"{where}: expected an object, got {type(d).__name__}")
    tag = d.get("type")
    if tag is None:
        raise DataError(f"{where}: missing 'type' field")
    cls = _SPEC_TYPES.get(tag)
    if cls is None:
        raise DataError(
            f"{where}: unknown layer type {tag!r} (format version {FORMAT_VERSION} "
            f"supports: {', '.join(sorted(_SPEC_TYPES))})"
        )
    kwargs = {k: v for k, v in d.items() if k != "type"}
    known = {f.name for f in fields(cls)}
    for k in kwargs:
        if k not in known:
            raise DataError(f"{where}: unknown field {k!r} for layer type {tag!r}")
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise DataError(f"{where}: {exc}") from exc


# ---------------------------------------------------------------------------
# shape inference


def _infer_shapes(specs, input_shape):
    """Per-layer (in_shape, out_shape) as (C,H,W); raises GraphBuildError."""
    if not specs:
        raise GraphBuildError("empty layer list")
    if len(input_shape) != 4:
        raise GraphBuildError(f"input shape must be 4-D (N,C,H,W), got {input_shape}")

    shape = tuple(input_shape[1:])
    out = []
    skip_stack = []  # (layer_idx, skip_shape)
    for i, spec in enumerate(specs):
        cur = shape
        try:
            if isinstance(spec, Conv):
                shape = (spec.out_ch, _extent(cur[1], spec.k, spec.stride, spec.pad),
                         _extent(cur[2], spec.k, spec.stride, spec.pad))
            elif isinstance(spec, Depthwise):
                shape = (cur[0], _extent(cur[1], spec.k, spec.stride, spec.pad),
                         _extent(cur[2], spec.k, spec.stride, spec.pad))
            elif isinstance(spec, Pointwise):
                shape = (spec.out_ch, cur[1], cur[2])
            elif isinstance(spec, AttnCondenser):
                if spec.factor < 2:
                    raise ConfigError(f"condense factor must be >= 2, got {spec.factor}")
                if cur[1] % spec.factor or cur[2] % spec.factor:
                    raise ConfigError(
                        f"{cur[1]}x{cur[2]} input not divisible by condense factor {spec.factor}")
            elif isinstance(spec, MaxPool):
                if spec.window != spec.stride:
                    raise ConfigError(f"max pool requires window == stride, got {spec.window}/{spec.stride}")
                if cur[1] % spec.window or cur[2] % spec.window:
                    raise ConfigError(f"{cur[1]}x{cur[2]} input does not tile with window {spec.window}")
                shape = (cur[0], cur[1] // spec.window, cur[2] // spec.window)
            elif isinstance(spec, GlobalAvgPool):
                shape = (cur[0], 1, 1)
            elif isinstance(spec, Dense):
                if spec.out < 1:
                    raise ConfigError(f"dense out must be >= 1, got {spec.out}")
                shape = (spec.out, 1, 1)
            elif isinstance(spec, Activation):
                if spec.kind not in ("relu", "sigmoid", "softmax-rows"):
                    raise ConfigError(f"unknown activation kind {spec.kind!r}")
                if spec.kind == "softmax-rows" and (cur[1] != 1 or cur[2] != 1):
                    raise ConfigError(f"softmax-rows needs (N,K,1,1) input, got spatial {cur[1]}x{cur[2]}")
            elif isinstance(spec, ResidualBegin):
                skip = (spec.proj_out_ch, cur[1], cur[2]) if spec.proj_out_ch else cur
                skip_stack.append((i, skip))
            elif isinstance(spec, ResidualEnd):
                if not skip_stack:
                    raise ConfigError("residual_end without matching residual_begin")
                begin_idx, skip = skip_stack.pop()
                if skip != cur:
                    raise ConfigError(
                        f"residual skip shape {skip} (from layer {begin_idx}) != main path shape {cur}")
            else:  # pragma: no cover
                raise ConfigError(f"unhandled spec type {type(spec).__name__}")
        except ConfigError as exc:
            raise GraphBuildError(f"layer {i} ({spec.tag}): {exc}") from exc
        out.append((cur, shape))

    if skip_stack:
        raise GraphBuildError(f"layer {skip_stack[-1][0]} (residual_begin): never closed")
    c, h, w = shape
    if h != 1 or w != 1 or c < 2:
        raise GraphBuildError(f"graph must end with (N,K,1,1) logits, K >= 2; final shape is {shape}")
    return out


def _extent(extent, k, stride, pad):
    span = extent + 2 * pad - k
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ConfigError(f"pad must be >= 0, got {pad}")
    if span < 0:
        raise ConfigError(f"kernel {k} exceeds padded extent {extent + 2 * pad}")
    if span % stride != 0:
        raise ConfigError(f"non-integral output extent ({extent}+2*{pad}-{k})/{stride}+1")
    return span // stride + 1


def _param_layout(spec, in_shape):
    """(name, shape, init, fan_in) for one layer, in deterministic draw order."""
    cin = in_shape[0]
    if isinstance(spec, Conv):
        return [("weight", (spec.out_ch, cin, spec.k, spec.k), "he", cin * spec.k * spec.k),
                ("bias", (1, spec.out_ch, 1, 1), "zero", 0)]
    if isinstance(spec, Depthwise):
        return [("weight", (cin, 1, spec.k, spec.k), "he", spec.k * spec.k),
                ("bias", (1, cin, 1, 1), "zero", 0)]
    if isinstance(spec, Pointwise):
        return [("weight", (spec.out_ch, cin, 1, 1), "he", cin),
                ("bias", (1, spec.out_ch, 1, 1), "zero", 0)]
    if isinstance(spec, AttnCondenser):
        return ac_param_layout(cin)
    if isinstance(spec, Dense):
        fan_in = in_shape[0] * in_shape[1] * in_shape[2]
        return [("weight", (spec.out, fan_in, 1, 1), "he", fan_in),
                ("bias", (1, spec.out, 1, 1), "zero", 0)]
    if isinstance(spec, ResidualBegin) and spec.proj_out_ch:
        return [("proj_weight", (spec.proj_out_ch, cin, 1, 1), "he", cin),
                ("proj_bias", (1, spec.proj_out_ch, 1, 1), "zero", 0)]
    return []


# ---------------------------------------------------------------------------
# weight store and graph


class WeightStore:
    """Flat float64 arena; every layer parameter is a reshaped view into it."""

    def __init__(self, arena, offsets):
        self.arena = arena
        self.offsets = offsets  # list per layer: [(name, offset, shape)]

    def __len__(self):
        return self.arena.size


class ModelGraph:
    """Built, shape-validated network: specs + inferred shapes + weights."""

    def __init__(self, specs, input_shape, layer_shapes, store, params):
        self.specs = tuple(specs)
        self.input_shape = tuple(input_shape)
        self.layer_shapes = layer_shapes
        self.store = store
        self.params = params  # list of {name: Tensor} aligned with specs
        self.class_count = layer_shapes[-1][1][0]
        self._condensers = {}
        for i, spec in enumerate(self.specs):
            if isinstance(spec, AttnCondenser):
                p = self.params[i]
                self._condensers[i] = AttentionCondenserParams(
                    channels=layer_shapes[i][0][0],
                    condense_factor=spec.factor,
                    dw_weight=p["dw_weight"],
                    pw_weight=p["pw_weight"],
                    pw_bias=p["pw_bias"],
                    scale=p["scale"],
                )

    @property
    def num_params(self):
        return int(self.store.arena.size)

    def parameters(self):
        """(qualified name, Tensor) pairs in layer order."""
        out = []
        for i, layer_params in enumerate(self.params):
            for name, t in layer_params.items():
                out.append((f"layer{i}.{name}", t))
        return out

    def zero_grad(self):
        for _, t in self.parameters():
            t.zero_grad()

    def get_weight_vector(self):
        return self.store.arena.copy()

    def set_weight_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != self.store.arena.shape:
            raise ShapeError(f"weight vector length {vec.size} != arena length {self.store.arena.size}")
        self.store.arena[:] = vec

    def forward(self, x, tape=None):
        """Run the network; returns the (N,K,1,1) logits tensor."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if tuple(x.shape[1:]) != tuple(self.input_shape[1:]):
            raise ShapeError(
                f"input shape {x.shape} incompatible with graph input {self.input_shape} (batch may differ)")
        from .condenser import ac_forward  # local import to avoid cycle at module load

        cur = x
        skip_stack = []
        for i, spec in enumerate(self.specs):
            p = self.params[i]
            if isinstance(spec, Conv):
                cur = conv2d(cur, p["weight"], p["bias"], spec.stride, spec.pad, tape=tape)
            elif isinstance(spec, Depthwise):
                cur = depthwise_conv2d(cur, p["weight"], p["bias"], spec.stride, spec.pad, tape=tape)
            elif isinstance(spec, Pointwise):
                cur = pointwise_conv2d(cur, p["weight"], p["bias"], tape=tape)
            elif isinstance(spec, AttnCondenser):
                cur = ac_forward(cur, self._condensers[i], tape=tape)
            elif isinstance(spec, MaxPool):
                cur = pool2d(cur, "max", spec.window, spec.stride, tape=tape)
            elif isinstance(spec, GlobalAvgPool):
                cur = pool2d(cur, "global-avg", tape=tape)
            elif isinstance(spec, Dense):
                cur = dense(cur, p["weight"], p["bias"], tape=tape)
            elif isinstance(spec, Activation):
                cur = activation(spec.kind, cur, tape=tape)
            elif isinstance(spec, ResidualBegin):
                skip_stack.append((cur, p))
            elif isinstance(spec, ResidualEnd):
                saved, bp = skip_stack.pop()
                if bp:
                    saved = pointwise_conv2d(saved, bp["proj_weight"], bp["proj_bias"], tape=tape)
                cur = add(cur, saved, tape=tape)
        return cur

    def forward_logits(self, x, tape=None):
        """Logits as a plain (N, K) array."""
        out = self.forward(x, tape=tape)
        n = out.shape[0]
        return out.data.reshape(n, self.class_count)


def build_graph(specs, input_shape, rng_seed=0):
    """Infer shapes, allocate the arena, and draw weights (var 2/fan_in)."""
    specs = list(specs)
    layer_shapes = _infer_shapes(specs, input_shape)

    layouts = [_param_layout(spec, layer_shapes[i][0]) for i, spec in enumerate(specs)]
    total = sum(int(np.prod(shape)) for layout in layouts for _, shape, _, _ in layout)
    arena = np.empty(total, dtype=np.float64)

    rng = np.random.default_rng(rng_seed)
    offsets = []
    params = []
    pos = 0
    for layout in layouts:
        layer_offsets = []
        layer_params = {}
        for name, shape, init, fan_in in layout:
            size = int(np.prod(shape))
            view = arena[pos : pos + size].reshape(shape)
            if init == "he":
                view[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)
            elif init == "zero":
                view[...] = 0.0
            else:
                view[...] = 1.0
            layer_offsets.append((name, pos, shape))
            layer_params[name] = Tensor(view)
            pos += size
        offsets.append(layer_offsets)
        params.append(layer_params)

    store = WeightStore(arena, offsets)
    return ModelGraph(specs, tuple(input_shape), layer_shapes, store, params)


# ---------------------------------------------------------------------------
# serialization


def serialize_graph(graph):
    """Canonical JSON text for the graph's specs and input shape."""
    doc = {
        "version": FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "layers": [spec_to_dict(s) for s in graph.specs],
    }
    return json.dumps(doc, indent=2) + "\n"


def parse_graph_text(text):
    """(specs, input_shape) from graph JSON; raises DataError with context."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"graph file is not valid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})") from exc
    if not isinstance(doc, dict):
        raise DataError("graph file must contain a JSON object")
    for key in ("version", "input_shape", "layers"):
        if key not in doc:
            raise DataError(f"graph file missing required field {key!r}")
    if doc["version"] != FORMAT_VERSION:
        raise DataError(f"unsupported graph format version {doc['version']!r} (expected {FORMAT_VERSION})")
    input_shape = doc["input_shape"]
    if not (isinstance(input_shape, list) and len(input_shape) == 4
            and all(isinstance(v, int) and v > 0 for v in input_shape)):
        raise DataError(f"input_shape must be 4 positive integers, got {input_shape!r}")
    layers = doc["layers"]
    if not isinstance(layers, list) or not layers:
        raise DataError("'layers' must be a non-empty array")
    specs = [spec_from_dict(d, where=f"layers[{i}]") for i, d in enumerate(layers)]
    return specs, tuple(input_shape)


def deserialize_graph(text, rng_seed=0):
    """Parse graph JSON and build it (weights drawn from rng_seed)."""
    specs, input_shape = parse_graph_text(text)
    return build_graph(specs, input_shape, rng_seed=rng_seed)


def graph_digest(graph):
    """SHA-256 over the canonical structural serialization."""
    doc = {
        "version": FORMAT_VERSION,
        "input_shape": list(graph.input_shape),
        "layers": [spec_to_dict(s) for s in graph.specs],
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def save_weights(graph, path):
    """Magic + JSON header line {digest, param_count} + little-endian float64 arena."""
    header = json.dumps(
        {"digest": graph_digest(graph), "param_count": graph.num_params}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHT_MAGIC)
        fh.write(header + b"\n")
        fh.write(graph.store.arena.astype("<f8").tobytes())


def load_weights(graph, path):
    """Load a weight file into a built graph; digests must match."""
    with open(path, "rb") as fh:
        magic = fh.read(len(WEIGHT_MAGIC))
        if magic != WEIGHT_MAGIC:
            raise IntegrityError(f"{path}: not a weight file (bad magic)")
        header_line = fh.readline()
        try:
            header = json.loads(header_line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise IntegrityError(f"{path}: corrupt weight header") from exc
        digest = header.get("digest")
        count = header.get("param_count")
        if digest != graph_digest(graph):
            raise IntegrityError(
                f"{path}: weight file digest {str(digest)[:12]}... does not match this graph "
                f"({graph_digest(graph)[:12]}...)")
        if count != graph.num_params:
            raise IntegrityError(f"{path}: header declares {count} params, graph has {graph.num_params}")
        blob = fh.read()
    if len(blob) != count * 8:
        raise IntegrityError(f"{path}: expected {count * 8} bytes of weights, found {len(blob)}")
    graph.store.arena[:] = np.frombuffer(blob, dtype="<f8")


# ---------------------------------------------------------------------------
# reference architectures


@dataclass(frozen=True)
class PrototypeConfig:
    """Residual condenser-network family searched over by the design loop."""

    stage_channels: tuple = (16, 24, 32)
    blocks_per_stage: tuple = (2, 2, 2)
    condensers: tuple | None = None  # per stage, per block on/off; None = all on
    input_shape: tuple = (1, 1, 128, 128)

    def condenser_flags(self):
        if self.condensers is None:
            return tuple(tuple(True for _ in range(b)) for b in self.blocks_per_stage)
        return self.condensers

    def normalized(self):
        """Condenser flags made explicit and length-matched to the block counts."""
        flags = []
        current = self.condensers or ()
        for s, b in enumerate(self.blocks_per_stage):
            stage = list(current[s]) if s < len(current) else []
            stage = (stage + [True] * b)[:b]
            flags.append(tuple(stage))
        return replace(self, condensers=tuple(flags))


def seed_prototype(config=None):
    """Layer list for the hand-designed starting network.

    Stem conv + relu + pool, then three stages of residual condenser blocks
    (condenser -> depthwise -> pointwise -> relu) separated by 2x2 max
    pools, then global average pooling into a 2-way head. Blocks whose
    input and output widths differ are left un-skipped.
    """
    config = (config or PrototypeConfig()).normalized()
    chans = tuple(config.stage_channels)
    blocks = tuple(config.blocks_per_stage)
    if len(chans) != 3 or len(blocks) != 3:
        raise ConfigError(f"prototype needs 3 stages, got {len(chans)} channel / {len(blocks)} block entries")
    if any(c < 2 or c % 2 for c in chans):
        raise ConfigError(f"stage channels must be even and >= 2, got {chans}")
    if any(b < 1 for b in blocks):
        raise ConfigError(f"blocks per stage must be >= 1, got {blocks}")
    n, c, h, w = config.input_shape
    div = 2 ** (len(chans) + 1)
    if h % div or w % div:
        raise ConfigError(f"input {h}x{w} must be divisible by {div}")

    specs = [Conv(chans[0], k=3, stride=1, pad=1), Activation("relu"), MaxPool(2, 2)]
    in_ch = chans[0]
    for s, (c_out, n_blocks) in enumerate(zip(chans, blocks)):
        for b in range(n_blocks):
            use_cond = config.condensers[s][b]
            body = []
            if use_cond:
                body.append(AttnCondenser(2))
            body += [Depthwise(3, 1, 1), Pointwise(c_out), Activation("relu")]
            if in_ch == c_out:
                specs += [ResidualBegin()] + body + [ResidualEnd()]
            else:
                specs += body
            in_ch = c_out
        if s < len(chans) - 1:
            specs.append(MaxPool(2, 2))
    specs += [GlobalAvgPool(), Dense(2)]
    return specs


def resnet50_descriptor(num_classes=2, input_shape=(1, 3, 224, 224)):
    """50-layer bottleneck residual network used as the complexity baseline.

    Matches the classic design's parameter shapes (with per-conv biases and
    no batch norm); spatial downsampling uses exact-tiling 2x2 max pools
    ahead of each stage instead of strided convolutions, which leaves the
    parameter count unchanged. Training it is out of scope; it exists for
    parameter/FLOP accounting and latency comparison.
    """
    specs = [Conv(64, k=7, stride=1, pad=3), Activation("relu"), MaxPool(2, 2), MaxPool(2, 2)]
    in_ch = 64
    for stage, (width, n_blocks) in enumerate([(64, 3), (128, 4), (256, 6), (512, 3)]):
        if stage > 0:
            specs.append(MaxPool(2, 2))
        out_ch = width * 4
        for b in range(n_blocks):
            project = in_ch != out_ch
            specs.append(ResidualBegin(proj_out_ch=out_ch if project else None))
            specs += [
                Pointwise(width), Activation("relu"),
                Conv(width, k=3, stride=1, pad=1), Activation("relu"),
                Pointwise(out_ch),
            ]
            specs += [ResidualEnd(), Activation("relu")]
            in_ch = out_ch
    specs += [GlobalAvgPool(), Dense(num_classes)]
    return specs
