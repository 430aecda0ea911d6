"""Model graphs: a DAG of layer nodes with lazily materialized parameters."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .layers import Layer, ShapeError, make_layer, softmax


class GraphError(ValueError):
    pass


class StateError(RuntimeError):
    pass


INPUT = "input"


@dataclass
class Node:
    id: str
    layer: Layer
    inputs: list
    row: int | None = None

    @property
    def kind(self) -> str:
        return self.layer.kind


@dataclass
class TraceEntry:
    node: str
    kind: str
    shape: tuple
    row: int | None = None

    def to_dict(self):
        return {"node": self.node, "kind": self.kind, "shape": list(self.shape), "row": self.row}


@dataclass
class ForwardPass:
    mode: str
    activations: dict
    caches: dict = field(default_factory=dict)

    @property
    def output(self):
        return self.activations[self.last]

    last: str = ""


class ModelGraph:
    """Directed acyclic graph of layers fed by a single ``input`` source.

    Parameters are created on first access, each node seeded from
    ``(seed, node index)`` with numpy's PCG64 generator, so initialization does
    not depend on access order. Building and tracing never allocate weights.
    """

    def __init__(self, input_shape=(3, 64, 64), seed: int = 0, dtype=np.float32, name: str = ""):
        self.input_shape = tuple(input_shape)
        self.seed = int(seed)
        self.dtype = np.dtype(dtype)
        self.name = name
        self.nodes: dict[str, Node] = {}
        self.rows: list[tuple[str, str]] = []  # (table layer label, structure text)
        self._current_row = None
        self._params: dict[str, dict] = {}
        self._buffers: dict[str, dict] = {}
        self._shapes = None
        self._order = None

    # construction ---------------------------------------------------------

    def begin_row(self, layer: str, structure: str) -> None:
        """Tag subsequently added nodes as one row of an architecture table."""
        self.rows.append((layer, structure))
        self._current_row = len(self.rows) - 1

    def add(self, node_id: str, kind: str, inputs=None, **hp) -> str:
        if node_id in self.nodes or node_id == INPUT:
            raise GraphError(f"duplicate node id {node_id!r}")
        if inputs is None:
            inputs = [self.last] if self.nodes else [INPUT]
        elif isinstance(inputs, str):
            inputs = [inputs]
        layer = make_layer(kind, **hp)
        if layer.arity is None and len(inputs) < 2:
            raise GraphError(f"node {node_id!r}: {kind} needs at least 2 inputs")
        if layer.arity is not None and len(inputs) != layer.arity:
            raise GraphError(f"node {node_id!r}: {kind} takes exactly {layer.arity} input")
        self.nodes[node_id] = Node(node_id, layer, list(inputs), self._current_row)
        self._shapes = self._order = None
        return node_id

    @property
    def last(self) -> str:
        return next(reversed(self.nodes))

    @property
    def output(self) -> str:
        return self.order()[-1]

    # structure ------------------------------------------------------------

    def order(self) -> list[str]:
        """Topological order (Kahn); raises GraphError on cycles or dangling inputs."""
        if self._order is not None:
            return self._order
        users = {INPUT: []}
        users.update({nid: [] for nid in self.nodes})
        indeg = {}
        for nid, node in self.nodes.items():
            for src in node.inputs:
                if src not in users:
                    raise GraphError(f"node {nid!r} reads unknown node {src!r}")
                users[src].append(nid)
            indeg[nid] = sum(1 for src in node.inputs if src != INPUT)
        position = {nid: i for i, nid in enumerate(self.nodes)}
        # heap keyed by insertion position keeps the order stable
        heap = [position[nid] for nid, d in indeg.items() if d == 0]
        heapq.heapify(heap)
        names = list(self.nodes)
        order = []
        while heap:
            nid = names[heapq.heappop(heap)]
            order.append(nid)
            for u in users[nid]:
                indeg[u] -= 1
                if indeg[u] == 0:
                    heapq.heappush(heap, position[u])
        if len(order) != len(self.nodes):
            stuck = [nid for nid in self.nodes if indeg[nid] > 0]
            raise GraphError(f"graph has a cycle through nodes {stuck[:5]}")
        self._order = order
        return order

    def shapes(self) -> dict[str, tuple]:
        """Per-sample output shape of every node, by symbolic propagation."""
        if self._shapes is not None:
            return self._shapes
        shapes = {INPUT: self.input_shape}
        for nid in self.order():
            node = self.nodes[nid]
            try:
                shapes[nid] = tuple(node.layer.output_shape([shapes[s] for s in node.inputs]))
            except ShapeError as e:
                raise ShapeError(f"node {nid!r} ({node.kind}) fed by {node.inputs}: {e}") from None
        self._shapes = shapes
        return shapes

    def trace(self) -> list[TraceEntry]:
        shapes = self.shapes()
        entries = [TraceEntry(INPUT, INPUT, self.input_shape)]
        entries += [TraceEntry(nid, self.nodes[nid].kind, shapes[nid], self.nodes[nid].row) for nid in self.order()]
        return entries

    def param_shapes(self) -> dict[str, dict]:
        shapes = self.shapes()
        out = {}
        for nid in self.order():
            node = self.nodes[nid]
            ps = node.layer.param_shapes([shapes[s] for s in node.inputs])
            if ps:
                out[nid] = ps
        return out

    def parameter_count(self) -> int:
        return int(sum(np.prod(s) for ps in self.param_shapes().values() for s in ps.values()))

    # parameters -----------------------------------------------------------

    def _materialize(self, nid):
        if nid in self._params:
            return
        shapes = self.shapes()
        node = self.nodes[nid]
        in_shapes = [shapes[s] for s in node.inputs]
        index = list(self.nodes).index(nid)
        rng = np.random.default_rng([self.seed, index])
        self._params[nid] = node.layer.init_params(in_shapes, rng, self.dtype)
        self._buffers[nid] = node.layer.init_buffers(in_shapes, self.dtype)

    def params_of(self, nid: str) -> dict:
        self._materialize(nid)
        return self._params[nid]

    def buffers_of(self, nid: str) -> dict:
        self._materialize(nid)
        return self._buffers[nid]

    def named_params(self):
        """Yield (node id, name, array) for every trainable parameter."""
        for nid in self.order():
            for name, arr in self.params_of(nid).items():
                yield nid, name, arr

    def named_buffers(self):
        for nid in self.order():
            for name, arr in self.buffers_of(nid).items():
                yield nid, name, arr

    def astype(self, dtype) -> "ModelGraph":
        """Cast all parameters and buffers in place (materializing them)."""
        dtype = np.dtype(dtype)
        for nid in self.order():
            self._materialize(nid)
            self._params[nid] = {k: v.astype(dtype) for k, v in self._params[nid].items()}
            self._buffers[nid] = {k: v.astype(dtype) for k, v in self._buffers[nid].items()}
        self.dtype = dtype
        return self

    # execution ------------------------------------------------------------

    def forward(self, x, mode: str = "eval", seed: int = 0, check_finite: bool = False) -> ForwardPass:
        return graph_forward(self, x, mode, seed, check_finite)


def graph_forward(g: ModelGraph, x, mode: str = "eval", seed: int = 0, check_finite: bool = False) -> ForwardPass:
    """Evaluate every node in topological order.

    In train mode the per-node caches needed by ``graph_backward`` are kept and
    batchnorm updates its running statistics. Dropout draws from a generator
    seeded by ``(seed, node index)``. `check_finite` raises FloatingPointError
    at the first node producing NaN or Inf.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = np.asarray(x, dtype=g.dtype)
    if tuple(x.shape[1:]) != g.input_shape:
        raise ShapeError(f"graph input expects (N, {', '.join(map(str, g.input_shape))}), got {x.shape}")
    train = mode == "train"
    acts = {INPUT: x}
    caches = {}
    index = {nid: i for i, nid in enumerate(g.nodes)}
    for nid in g.order():
        node = g.nodes[nid]
        rng = np.random.default_rng([seed, index[nid]]) if node.kind == "dropout" else None
        try:
            y, cache = node.layer.forward([acts[s] for s in node.inputs], g.params_of(nid), g.buffers_of(nid), train, rng)
        except ShapeError as e:
            raise ShapeError(f"node {nid!r} ({node.kind}): {e}") from None
        if check_finite and not np.all(np.isfinite(y)):
            raise FloatingPointError(f"node {nid!r} ({node.kind}) produced non-finite values")
        acts[nid] = y
        if train:
            caches[nid] = cache
    return ForwardPass(mode, acts, caches, last=g.order()[-1])


def softmax_cross_entropy(logits, labels):
    """Mean categorical cross entropy and the softmax probabilities."""
    logits = np.asarray(logits)
    if logits.ndim == 1:
        logits = logits[None, :]
    labels = np.atleast_1d(np.asarray(labels))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -log_probs[np.arange(n), labels].mean()
    return float(loss), np.exp(log_probs)


def loss_of(g: ModelGraph, fp: ForwardPass, labels) -> float:
    out = fp.last
    logits = fp.activations[g.nodes[out].inputs[0]]
    return softmax_cross_entropy(logits, labels)[0]


def graph_backward(g: ModelGraph, fp: ForwardPass, labels, wrt_input: bool = False):
    """Gradients of the mean cross-entropy loss w.r.t. every parameter.

    The graph must end in a softmax node; its backward is fused with the loss
    (d loss / d logits = (probs - onehot) / N). Gradients arriving at a node
    from several consumers are summed.

    Returns ``{node_id: {param_name: grad}}``, plus the input gradient when
    `wrt_input` is set.
    """
    if fp is None or fp.mode != "train" or not fp.caches:
        raise StateError("graph_backward needs a train-mode forward pass")
    out = fp.last
    if g.nodes[out].kind != "softmax":
        raise GraphError("graph_backward expects the final node to be a softmax")
    probs = fp.activations[out]
    labels = np.asarray(labels)
    n = probs.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n

    pending = {g.nodes[out].inputs[0]: dlogits}
    grads = {}
    for nid in reversed(g.order()[:-1]):
        dy = pending.pop(nid, None)
        if dy is None:
            continue
        node = g.nodes[nid]
        dxs, dparams = node.layer.backward(dy, fp.caches[nid], g.params_of(nid))
        if dparams:
            grads[nid] = dparams
        for src, dx in zip(node.inputs, dxs):
            if src in pending:
                pending[src] = pending[src] + dx
            else:
                pending[src] = dx
    if wrt_input:
        return grads, pending.get(INPUT)
    return grads


def predict_proba(g: ModelGraph, x, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class probabilities, computed in chunks."""
    x = np.asarray(x)
    out = []
    for i in range(0, len(x), batch_size):
        out.append(graph_forward(g, x[i:i + batch_size], "eval").output)
    if not out:
        return np.zeros((0, g.shapes()[g.output][0]), dtype=g.dtype)
    return np.concatenate(out)


__all__ = [
    "GraphError", "StateError", "ModelGraph", "Node", "TraceEntry", "ForwardPass",
    "graph_forward", "graph_backward", "softmax_cross_entropy", "softmax", "predict_proba", "loss_of",
]
