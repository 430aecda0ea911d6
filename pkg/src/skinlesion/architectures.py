"""Builders for the twelve classifier architectures, and shape tracing.

Every builder tags nodes with the table row they belong to (``ModelGraph.begin_row``)
so a trace can be compared row by row with the published layer tables.
"""
from __future__ import annotations

from enum import Enum

import numpy as np

from .nn.graph import ModelGraph, TraceEntry


class ArchitectureId(str, Enum):
    MODEL1 = "model1"
    MODEL2 = "model2"
    MODEL3 = "model3"
    MODEL4 = "model4"
    VGG16 = "vgg16_mod"
    MOBILENET = "mobilenet_mod"
    DENSENET121 = "densenet121_mod"
    DENSENET169 = "densenet169_mod"
    DENSENET201 = "densenet201_mod"
    RESNET50 = "resnet50_mod"
    RESNET101 = "resnet101_mod"
    RESNET152 = "resnet152_mod"

    @classmethod
    def parse(cls, value) -> "ArchitectureId":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(a.value for a in cls)
            raise ValueError(f"unknown architecture {value!r}; choose one of: {names}") from None


DENSENET_BLOCKS = {
    ArchitectureId.DENSENET121: (6, 12, 24, 16),
    ArchitectureId.DENSENET169: (6, 12, 32, 32),
    ArchitectureId.DENSENET201: (6, 12, 48, 32),
}
RESNET_BLOCKS = {
    ArchitectureId.RESNET50: (3, 4, 6, 3),
    ArchitectureId.RESNET101: (3, 4, 23, 3),
    ArchitectureId.RESNET152: (3, 8, 36, 3),
}
GROWTH_RATE = 32
DENSENET_INIT = 64
COMPRESSION = 0.5


def _head(g, num_classes, variant, label="Classification"):
    if variant == "original":
        g.begin_row(label, "1000 fully-connected, softmax")
        g.add("logits", "dense", units=1000)
    else:
        g.begin_row(label, f"{num_classes} fully-connected, softmax")
        g.add("logits", "dense", units=num_classes)
    g.add("probs", "softmax")


def _conv_bn_relu(g, name, filters, kernel, stride, inputs=None, relu=True):
    g.add(f"{name}_conv", "conv2d", inputs=inputs, filters=filters, kernel=kernel, stride=stride, bias=False)
    g.add(f"{name}_bn", "batchnorm")
    if relu:
        g.add(f"{name}_relu", "relu")
    return g.last


def build_plain_cnn(n_sets, num_classes=7, filters=64, g=None):
    for i in range(1, n_sets + 1):
        g.begin_row("Convolution", "3×3 conv, stride 1")
        g.add(f"conv{i}", "conv2d", filters=filters, kernel=3, stride=1)
        g.add(f"relu{i}", "relu")
        g.begin_row("Pooling", "2×2 max pool, stride 2")
        g.add(f"pool{i}", "maxpool2d", kernel=2, stride=2)
    g.begin_row("Flatten", "flatten")
    g.add("flatten", "flatten")
    g.begin_row("Dropout", "0.5 dropout")
    g.add("dropout1", "dropout", rate=0.5)
    g.begin_row("Dense", "fully connected")
    g.add("fc", "dense", units=128)
    g.add("fc_relu", "relu")
    g.begin_row("Dropout", "0.5 dropout")
    g.add("dropout2", "dropout", rate=0.5)
    _head(g, num_classes, "modified")
    return g


def build_vgg16(num_classes=7, variant="modified", g=None):
    stages = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
    for s, (filters, convs) in enumerate(stages, 1):
        for c in range(1, convs + 1):
            g.begin_row("Convolution", "3×3 conv, stride 1")
            g.add(f"block{s}_conv{c}", "conv2d", filters=filters, kernel=3, stride=1)
            g.add(f"block{s}_relu{c}", "relu")
        g.begin_row("Pooling", "2×2 max pool, stride 2")
        g.add(f"block{s}_pool", "maxpool2d", kernel=2, stride=2)
    g.begin_row("Flatten", "flatten")
    g.add("flatten", "flatten")
    if variant == "original":
        for i in (1, 2):
            g.begin_row("Dense", "4096")
            g.add(f"fc{i}", "dense", units=4096)
            g.add(f"fc{i}_relu", "relu")
    _head(g, num_classes, variant)
    return g


def build_mobilenet(num_classes=7, variant="modified", g=None):
    g.begin_row("Convolution", "3×3×32 conv, stride 2")
    _conv_bn_relu(g, "conv1", 32, 3, 2)
    # (pointwise filters, depthwise stride)
    plan = [(64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2)]
    plan += [(512, 1)] * 5 + [(1024, 2), (1024, 1)]
    for i, (filters, stride) in enumerate(plan, 1):
        repeated = 7 <= i <= 11
        if not repeated or i == 7:
            g.begin_row("5 x Convolution" if repeated else "Convolution", f"3×3 depthwise conv, stride {stride}")
        g.add(f"dw{i}", "depthwise_conv2d", kernel=3, stride=stride)
        g.add(f"dw{i}_bn", "batchnorm")
        g.add(f"dw{i}_relu", "relu")
        if not repeated or i == 11:
            g.begin_row("Convolution", f"1×1×{filters} conv, stride 1")
        _conv_bn_relu(g, f"pw{i}", filters, 1, 1)
    if variant == "original":
        g.begin_row("Classification", "7×7 global average pool")
        g.add("gap", "global_avgpool")
        g.add("flatten", "flatten")
        _head(g, num_classes, variant, label="")
    else:
        g.begin_row("Classification", "flatten")
        g.add("flatten", "flatten")
        _head(g, num_classes, variant, label="")
    return g


def build_densenet(blocks, num_classes=7, variant="modified", g=None):
    g.begin_row("Convolution", "7×7 conv, stride 2")
    _conv_bn_relu(g, "conv1", DENSENET_INIT, 7, 2)
    g.begin_row("Pooling", "3×3 max pool, stride 2")
    g.add("pool1", "maxpool2d", kernel=3, stride=2, padding="same")
    channels = DENSENET_INIT
    for b, layers in enumerate(blocks, 1):
        g.begin_row(f"Dense Block ({b})", f"[1×1 conv, 3×3 conv] × {layers}")
        for i in range(1, layers + 1):
            prev = g.last
            name = f"block{b}_layer{i}"
            g.add(f"{name}_bn1", "batchnorm", inputs=prev)
            g.add(f"{name}_relu1", "relu")
            g.add(f"{name}_conv1", "conv2d", filters=4 * GROWTH_RATE, kernel=1, stride=1, bias=False)
            g.add(f"{name}_bn2", "batchnorm")
            g.add(f"{name}_relu2", "relu")
            g.add(f"{name}_conv2", "conv2d", filters=GROWTH_RATE, kernel=3, stride=1, bias=False)
            g.add(f"{name}_concat", "concat", inputs=[prev, f"{name}_conv2"])
            channels += GROWTH_RATE
        if b < len(blocks):
            channels = int(channels * COMPRESSION)
            g.begin_row(f"Transition ({b})", "1×1 conv")
            g.add(f"trans{b}_bn", "batchnorm")
            g.add(f"trans{b}_relu", "relu")
            g.add(f"trans{b}_conv", "conv2d", filters=channels, kernel=1, stride=1, bias=False)
            g.begin_row(f"Transition ({b})", "2×2 average pool, stride 2")
            g.add(f"trans{b}_pool", "avgpool2d", kernel=2, stride=2)
    if variant == "original":
        g.begin_row("Classification", "7×7 global average pool")
        g.add("final_bn", "batchnorm")
        g.add("final_relu", "relu")
        g.add("gap", "global_avgpool")
        g.add("flatten", "flatten")
    else:
        g.begin_row("Classification", "flatten")
        g.add("final_bn", "batchnorm")
        g.add("final_relu", "relu")
        g.add("flatten", "flatten")
    _head(g, num_classes, variant, label="")
    return g


def _bottleneck(g, name, filters, stride, project):
    entry = g.last
    g.add(f"{name}_conv1", "conv2d", inputs=entry, filters=filters, kernel=1, stride=stride, bias=False)
    g.add(f"{name}_bn1", "batchnorm")
    g.add(f"{name}_relu1", "relu")
    _conv_bn_relu(g, f"{name}_2", filters, 3, 1)
    out = _conv_bn_relu(g, f"{name}_3", 4 * filters, 1, 1, relu=False)
    if project:
        shortcut = _conv_bn_relu(g, f"{name}_proj", 4 * filters, 1, stride, inputs=entry, relu=False)
    else:
        shortcut = entry
    g.add(f"{name}_add", "add", inputs=[out, shortcut])
    g.add(f"{name}_out", "relu")


def build_resnet(blocks, num_classes=7, variant="modified", g=None):
    g.begin_row("Convolution", "7×7 conv, stride 2")
    _conv_bn_relu(g, "conv1", 64, 7, 2)
    g.begin_row("Pooling", "3×3 max pool, stride 2")
    g.add("pool1", "maxpool2d", kernel=3, stride=2, padding="same")
    for s, (count, filters) in enumerate(zip(blocks, (64, 128, 256, 512)), 1):
        g.begin_row("Convolution", f"[1×1, {filters}; 3×3, {filters}; 1×1, {4 * filters}] × {count}")
        for i in range(1, count + 1):
            stride = 2 if (i == 1 and s > 1) else 1
            _bottleneck(g, f"stage{s}_block{i}", filters, stride, project=(i == 1))
    if variant == "original":
        g.begin_row("Classification", "7×7 global average pool")
        g.add("gap", "global_avgpool")
        g.add("flatten", "flatten")
    else:
        g.begin_row("Classification", "flatten")
        g.add("flatten", "flatten")
    _head(g, num_classes, variant, label="")
    return g


def build_model(arch, num_classes: int = 7, seed: int = 0, *, variant: str = "modified",
                input_shape=None, filters: int = 64, dtype=np.float32) -> ModelGraph:
    """Build one architecture as a ModelGraph (weights are created lazily).

    `variant="original"` reproduces the 224x224 ImageNet layout with its
    1000-way head; it is meant for shape tracing only. `filters` applies to
    Models 1-4.
    """
    arch = ArchitectureId.parse(arch)
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if variant not in ("modified", "original"):
        raise ValueError(f"unknown variant {variant!r}")
    plain = arch.value.startswith("model")
    if variant == "original" and plain:
        raise ValueError(f"{arch.value} has no original (ImageNet) variant")
    if input_shape is None:
        input_shape = (3, 224, 224) if variant == "original" else (3, 64, 64)
    g = ModelGraph(input_shape, seed=seed, dtype=dtype, name=f"{arch.value}" + ("" if variant == "modified" else "-original"))
    if plain:
        return build_plain_cnn(int(arch.value[-1]), num_classes, filters, g=g)
    if arch is ArchitectureId.VGG16:
        return build_vgg16(num_classes, variant, g=g)
    if arch is ArchitectureId.MOBILENET:
        return build_mobilenet(num_classes, variant, g=g)
    if arch in DENSENET_BLOCKS:
        return build_densenet(DENSENET_BLOCKS[arch], num_classes, variant, g=g)
    return build_resnet(RESNET_BLOCKS[arch], num_classes, variant, g=g)


def with_input(g: ModelGraph, input_shape) -> ModelGraph:
    """Structural copy of `g` (no weights) fed by a different input shape."""
    clone = ModelGraph(input_shape, seed=g.seed, dtype=g.dtype, name=g.name)
    clone.nodes = dict(g.nodes)
    clone.rows = list(g.rows)
    return clone


def trace_shapes(g: ModelGraph, input_shape=None) -> list[TraceEntry]:
    """Symbolic per-node output shapes; allocates no activations or weights."""
    if input_shape is not None and tuple(input_shape) != g.input_shape:
        g = with_input(g, input_shape)
    return g.trace()


def parameter_count(g: ModelGraph) -> int:
    return g.parameter_count()


def table_rows(g: ModelGraph, input_shape=None):
    """Collapse a trace into table rows: (layer, structure, output shape of the row's last node)."""
    rows = {}
    for entry in trace_shapes(g, input_shape):
        if entry.row is not None:
            rows[entry.row] = entry.shape
    return [(g.rows[i][0], g.rows[i][1], rows[i]) for i in sorted(rows)]


def format_size(shape) -> str:
    if len(shape) == 3:
        return f"{shape[1]}×{shape[2]}×{shape[0]}"
    return str(shape[0])


def summary_records(g: ModelGraph) -> list[dict]:
    """Machine-readable per-node summary: label, kind, hyperparameters, output shape."""
    records = []
    for entry in g.trace()[1:]:
        node = g.nodes[entry.node]
        records.append({
            "node": entry.node,
            "kind": entry.kind,
            "hyperparams": dict(node.layer.hp),
            "inputs": list(node.inputs),
            "output_shape": list(entry.shape),
            "row": None if entry.row is None else g.rows[entry.row][0],
        })
    return records


def format_table(g: ModelGraph) -> str:
    lines = [f"{'Layers':<18}{'output size':<16}layer's structure"]
    for layer, structure, shape in table_rows(g):
        lines.append(f"{layer:<18}{format_size(shape):<16}{structure}")
    return "\n".join(lines)
