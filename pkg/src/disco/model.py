"""Network shape descriptions and cost accounting.

A model is an ordered list of layer shape records. Records carry enough
geometry to compute operation counts, transmitted-feature sizes, and memory
footprints, and to drive both the functional forward pass and the distributed
simulator. Dataflow is a chain with optional explicit edges: each layer reads
the output of the preceding layer unless ``input_from`` names another one, and
``elementwise_add`` layers read a second operand named by ``residual_from``.

Conventions fixed here and relied on everywhere else:

- one multiply-accumulate counts as 2 ops;
- ``pool`` means average pooling and charges one op per input element;
- ``elementwise_add`` charges one op per output element;
- transmitted features of a layer are its *inputs*: ``in_features *
  in_height * in_width * bytes_per_value`` for spatial kinds and
  ``in_features * bytes_per_value`` for ``dense``;
- ``feature_matmul`` is accounting-only (attention-style score product,
  ``2 * in_height * in_width * out_features`` ops, always-dense traffic);
- ``dwconv`` touches each channel independently and therefore moves no
  features between nodes under a channel partition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

LAYER_KINDS = ("conv2d", "dense", "dwconv", "elementwise_add", "pool", "feature_matmul")
WEIGHTED_KINDS = ("conv2d", "dense", "dwconv")
ACTIVATIONS = ("none", "relu")


@dataclass(frozen=True)
class LayerSpec:
    """Shape record for one layer.

    ``id`` values are consecutive from 0 in model order. ``input_from`` is the
    id of the layer whose output this layer consumes (default: previous layer;
    the first layer consumes the model input). ``residual_from`` names the
    second operand of an ``elementwise_add``. ``sparsifiable`` marks layers
    whose cross-node input traffic may be pruned.
    """

    id: int
    kind: str
    in_features: int
    out_features: int
    kernel_h: int = 1
    kernel_w: int = 1
    in_height: int = 1
    in_width: int = 1
    stride: int = 1
    padding: int = 0
    residual_from: int | None = None
    input_from: int | None = None
    sparsifiable: bool = False
    activation: str = "none"

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"layer {self.id}: unknown kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"layer {self.id}: unknown activation {self.activation!r}")
        if self.in_features <= 0 or self.out_features <= 0:
            raise ValueError(f"layer {self.id}: feature counts must be positive")
        if self.stride < 1:
            raise ValueError(f"layer {self.id}: stride must be >= 1")
        if self.kind == "dwconv" and self.in_features != self.out_features:
            raise ValueError(f"layer {self.id}: dwconv requires in_features == out_features")
        if self.kind == "elementwise_add":
            if self.residual_from is None:
                raise ValueError(f"layer {self.id}: elementwise_add requires residual_from")
            if self.in_features != self.out_features:
                raise ValueError(f"layer {self.id}: elementwise_add keeps its feature count")

    # -- derived geometry -------------------------------------------------

    @property
    def out_height(self) -> int:
        if self.kind in ("conv2d", "dwconv", "pool"):
            return (self.in_height + 2 * self.padding - self.kernel_h) // self.stride + 1
        if self.kind == "dense":
            return 1
        return self.in_height

    @property
    def out_width(self) -> int:
        if self.kind in ("conv2d", "dwconv", "pool"):
            return (self.in_width + 2 * self.padding - self.kernel_w) // self.stride + 1
        if self.kind == "dense":
            return 1
        return self.in_width

    @property
    def has_weights(self) -> bool:
        return self.kind in WEIGHTED_KINDS

    @property
    def weight_shape(self) -> tuple[int, int, int, int] | None:
        """Kernel tensor shape (O, I, kh, kw); None for weight-free kinds."""
        if self.kind == "conv2d":
            return (self.out_features, self.in_features, self.kernel_h, self.kernel_w)
        if self.kind == "dense":
            return (self.out_features, self.in_features, 1, 1)
        if self.kind == "dwconv":
            return (self.out_features, 1, self.kernel_h, self.kernel_w)
        return None

    @property
    def in_elements(self) -> int:
        if self.kind == "dense":
            return self.in_features
        return self.in_features * self.in_height * self.in_width

    @property
    def out_elements(self) -> int:
        if self.kind == "dense":
            return self.out_features
        return self.out_features * self.out_height * self.out_width


def flop_count(layer: LayerSpec) -> int:
    """Operation count of one layer under the 2-ops-per-MAC convention."""
    if layer.kind == "conv2d":
        return (2 * layer.kernel_h * layer.kernel_w * layer.in_features
                * layer.out_features * layer.out_height * layer.out_width)
    if layer.kind == "dense":
        return 2 * layer.in_features * layer.out_features
    if layer.kind == "dwconv":
        return (2 * layer.kernel_h * layer.kernel_w * layer.in_features
                * layer.out_height * layer.out_width)
    if layer.kind == "elementwise_add":
        return layer.out_elements
    if layer.kind == "pool":
        return layer.in_elements
    if layer.kind == "feature_matmul":
        return 2 * layer.in_height * layer.in_width * layer.out_features
    raise ValueError(f"unknown kind {layer.kind!r}")


def feature_bytes(layer: LayerSpec, bytes_per_value: int = 4) -> int:
    """Size of the layer's input feature set (the transmittable quantity)."""
    return layer.in_elements * bytes_per_value


def output_feature_bytes(layer: LayerSpec, bytes_per_value: int = 4) -> int:
    return layer.out_elements * bytes_per_value


def weight_bytes(layer: LayerSpec, bytes_per_value: int = 4) -> int:
    """Dense parameter bytes (kernels plus one bias per output feature)."""
    shape = layer.weight_shape
    if shape is None:
        return 0
    o, i, kh, kw = shape
    return (o * i * kh * kw + o) * bytes_per_value


@dataclass(frozen=True)
class FlopsAndBytes:
    """Per-layer cost summary used by the latency model and reports."""

    layer_id: int
    kind: str
    ops: int
    input_feature_bytes: int
    output_feature_bytes: int
    weight_bytes: int


def model_costs(model: "ModelSpec", bytes_per_value: int = 4) -> list[FlopsAndBytes]:
    return [
        FlopsAndBytes(
            layer_id=l.id,
            kind=l.kind,
            ops=flop_count(l),
            input_feature_bytes=feature_bytes(l, bytes_per_value),
            output_feature_bytes=output_feature_bytes(l, bytes_per_value),
            weight_bytes=weight_bytes(l, bytes_per_value),
        )
        for l in model.layers
    ]


@dataclass(frozen=True)
class ModelSpec:
    """Ordered layer list plus the network input/output contract."""

    name: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (channels, height, width)
    output_count: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(self.input_shape))
        self._validate()

    def _validate(self) -> None:
        for pos, layer in enumerate(self.layers):
            if layer.id != pos:
                raise ValueError(f"layer ids must be consecutive from 0; got {layer.id} at {pos}")
        if not self.layers:
            raise ValueError("model needs at least one layer")
        if self.layers[0].sparsifiable:
            raise ValueError("the first layer is never sparsifiable")
        for layer in self.layers:
            if layer.kind in ("elementwise_add", "pool", "feature_matmul") and layer.sparsifiable:
                raise ValueError(f"layer {layer.id}: kind {layer.kind} is never sparsifiable")
            src = self._source_shape(layer)
            if layer.kind == "dense":
                c, h, w = src
                if layer.in_features != c * h * w:
                    raise ValueError(
                        f"layer {layer.id}: dense expects {c * h * w} inputs "
                        f"(flattened {c}x{h}x{w}), declared {layer.in_features}")
            else:
                if (layer.in_features, layer.in_height, layer.in_width) != src:
                    raise ValueError(
                        f"layer {layer.id}: declared input {layer.in_features}x"
                        f"{layer.in_height}x{layer.in_width} does not match source {src}")
            if layer.residual_from is not None:
                if not (0 <= layer.residual_from < layer.id):
                    raise ValueError(f"layer {layer.id}: residual_from must be an earlier layer")
                other = self.layers[layer.residual_from]
                out = (layer.out_features, layer.out_height, layer.out_width)
                if (other.out_features, other.out_height, other.out_width) != out:
                    raise ValueError(
                        f"layer {layer.id}: residual source {other.id} output shape mismatch")
            if layer.input_from is not None and not (0 <= layer.input_from < layer.id):
                raise ValueError(f"layer {layer.id}: input_from must be an earlier layer")

    def _source_shape(self, layer: LayerSpec) -> tuple[int, int, int]:
        src_id = layer.input_from if layer.input_from is not None else layer.id - 1
        if layer.id == 0 or src_id < 0:
            return self.input_shape
        src = self.layers[src_id]
        return (src.out_features, src.out_height, src.out_width)

    def input_source(self, layer_id: int) -> int:
        """Id of the layer feeding this one; -1 means the model input."""
        layer = self.layers[layer_id]
        if layer.input_from is not None:
            return layer.input_from
        return layer_id - 1

    @property
    def weighted_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.has_weights)

    @property
    def sparsifiable_layers(self) -> tuple[LayerSpec, ...]:
        return tuple(l for l in self.layers if l.sparsifiable)

    def layer(self, layer_id: int) -> LayerSpec:
        return self.layers[layer_id]


# -- reference model builders ---------------------------------------------


def toy_cnn_shapes(name: str = "toy_cnn") -> ModelSpec:
    """Small residual CNN for 1x28x28 inputs, 10 classes.

    Every sparsifiable layer has feature counts divisible by 8 so the same
    model can be partitioned over 2, 4, or 8 nodes. The first conv is not
    sparsifiable (single input channel); the classifier is not (10 outputs).
    """
    layers = [
        LayerSpec(0, "conv2d", 1, 16, 3, 3, 28, 28, 1, 1, activation="relu"),
        LayerSpec(1, "conv2d", 16, 16, 3, 3, 28, 28, 1, 1, activation="relu",
                  sparsifiable=True),
        LayerSpec(2, "pool", 16, 16, 2, 2, 28, 28, 2, 0),
        LayerSpec(3, "conv2d", 16, 32, 3, 3, 14, 14, 1, 1, activation="relu",
                  sparsifiable=True),
        LayerSpec(4, "conv2d", 32, 32, 3, 3, 14, 14, 1, 1, activation="relu",
                  sparsifiable=True),
        LayerSpec(5, "elementwise_add", 32, 32, 1, 1, 14, 14, 1, 0,
                  residual_from=3, activation="relu"),
        LayerSpec(6, "pool", 32, 32, 2, 2, 14, 14, 2, 0),
        LayerSpec(7, "dense", 1568, 64, activation="relu", sparsifiable=True),
        LayerSpec(8, "dense", 64, 10),
    ]
    return ModelSpec(name=name, layers=tuple(layers), input_shape=(1, 28, 28), output_count=10)


def resnet50_shapes(name: str = "resnet50") -> ModelSpec:
    """ResNet-50 at 224x224: 54 weighted layers (53 convs + final dense).

    Bottleneck blocks contribute three convs each; the first block of every
    stage adds a 1x1 projection on the skip path. Pools and residual adds are
    listed as weight-free entries so the dataflow is complete; they carry no
    cross-node traffic under a channel partition.
    """
    layers: list[LayerSpec] = []

    def add(kind: str, **kw) -> int:
        lid = len(layers)
        layers.append(LayerSpec(id=lid, kind=kind, **kw))
        return lid

    add("conv2d", in_features=3, out_features=64, kernel_h=7, kernel_w=7,
        in_height=224, in_width=224, stride=2, padding=3, activation="relu")
    add("pool", in_features=64, out_features=64, kernel_h=3, kernel_w=3,
        in_height=112, in_width=112, stride=2, padding=1)

    stages = (
        (64, 256, 3, 1, 56),
        (128, 512, 4, 2, 56),
        (256, 1024, 6, 2, 28),
        (512, 2048, 3, 2, 14),
    )
    in_ch = 64
    for width, out_ch, blocks, first_stride, in_sp in stages:
        for b in range(blocks):
            stride = first_stride if b == 0 else 1
            sp = in_sp if b == 0 else in_sp // first_stride
            block_in = len(layers) - 1
            a = add("conv2d", in_features=in_ch, out_features=width, kernel_h=1,
                    kernel_w=1, in_height=sp, in_width=sp, stride=1, padding=0,
                    activation="relu", sparsifiable=True)
            out_sp = (sp + 2 - 3) // stride + 1
            add("conv2d", in_features=width, out_features=width, kernel_h=3,
                kernel_w=3, in_height=sp, in_width=sp, stride=stride, padding=1,
                activation="relu", sparsifiable=True)
            c = add("conv2d", in_features=width, out_features=out_ch, kernel_h=1,
                    kernel_w=1, in_height=out_sp, in_width=out_sp, stride=1,
                    padding=0, sparsifiable=True)
            if b == 0:
                add("conv2d", in_features=in_ch, out_features=out_ch, kernel_h=1,
                    kernel_w=1, in_height=sp, in_width=sp, stride=stride,
                    padding=0, input_from=block_in,
                    sparsifiable=in_ch % 8 == 0 and out_ch % 8 == 0)
                add("elementwise_add", in_features=out_ch, out_features=out_ch,
                    in_height=out_sp, in_width=out_sp, residual_from=c,
                    activation="relu")
            else:
                add("elementwise_add", in_features=out_ch, out_features=out_ch,
                    in_height=out_sp, in_width=out_sp, residual_from=block_in,
                    activation="relu")
            in_ch = out_ch

    add("pool", in_features=2048, out_features=2048, kernel_h=7, kernel_w=7,
        in_height=7, in_width=7, stride=7, padding=0)
    add("dense", in_features=2048, out_features=1000, sparsifiable=True)
    return ModelSpec(name=name, layers=tuple(layers), input_shape=(3, 224, 224),
                     output_count=1000)


# -- manifest serialization -------------------------------------------------


def model_to_dict(model: ModelSpec) -> dict:
    return {
        "name": model.name,
        "input_shape": list(model.input_shape),
        "output_count": model.output_count,
        "layers": [
            {
                "id": l.id,
                "kind": l.kind,
                "in_features": l.in_features,
                "out_features": l.out_features,
                "kernel_h": l.kernel_h,
                "kernel_w": l.kernel_w,
                "in_height": l.in_height,
                "in_width": l.in_width,
                "stride": l.stride,
                "padding": l.padding,
                "residual_from": l.residual_from,
                "input_from": l.input_from,
                "sparsifiable": l.sparsifiable,
                "activation": l.activation,
            }
            for l in model.layers
        ],
    }


def model_from_dict(data: dict) -> ModelSpec:
    try:
        layers = tuple(LayerSpec(**entry) for entry in data["layers"])
        return ModelSpec(
            name=data["name"],
            layers=layers,
            input_shape=tuple(data["input_shape"]),
            output_count=int(data["output_count"]),
        )
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed model manifest: {exc}") from exc


def save_model(model: ModelSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n",
                          encoding="utf-8")


def load_model(path: str | Path) -> ModelSpec:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed model manifest {path}: {exc}") from exc
    return model_from_dict(data)


BUILTIN_MODELS = {
    "toy_cnn": toy_cnn_shapes,
    "resnet50": resnet50_shapes,
}


def resolve_model(name_or_path: str) -> ModelSpec:
    """Accept a builtin model name or a path to a manifest file."""
    if name_or_path in BUILTIN_MODELS:
        return BUILTIN_MODELS[name_or_path]()
    if not Path(name_or_path).exists():
        names = ", ".join(sorted(BUILTIN_MODELS))
        raise ValueError(f"{name_or_path!r} is neither a builtin model ({names}) "
                         "nor an existing manifest path")
    return load_model(name_or_path)
