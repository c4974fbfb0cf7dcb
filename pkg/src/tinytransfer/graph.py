"""Operator-graph container and the ``.ttml`` file format.

File layout (little-endian)::

    b"TTML"              magic
    u32                  format version
    u64                  manifest length in bytes
    manifest             UTF-8 JSON, sorted keys
    blob section         float32 blobs as raw IEEE-754; int8 blobs as raw
                         bytes followed by one float32 scale

Weight layouts for imported weights: conv2d kernels HWIO, depthwise kernels
(kh, kw, C, 1), dense weights (F, K), biases 1-D.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidTruncation, ShapeMismatch, ValidationError
from .tensor import ACTIVATIONS, PADDINGS, QTensor, conv_output_size

MAGIC = b"TTML"
VERSION = 1
INPUT = "input"

OPS = (
    "conv2d",
    "depthwise_conv2d",
    "dense",
    "global_average_pool",
    "activation",
    "add",
    "dropout_marker",
    "flatten",
)
WEIGHTED_OPS = ("conv2d", "depthwise_conv2d", "dense")

Shape = tuple  # batch dimension is None


@dataclass
class GraphNode:
    id: str
    op: str
    params: dict = field(default_factory=dict)
    inputs: list = field(default_factory=list)
    weight_refs: list = field(default_factory=list)

    def to_json(self):
        return {
            "id": self.id,
            "op": self.op,
            "params": self.params,
            "inputs": list(self.inputs),
            "weights": list(self.weight_refs),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["id"], obj["op"], dict(obj.get("params", {})), list(obj["inputs"]), list(obj.get("weights", [])))


def _blob_equal(a, b):
    if isinstance(a, QTensor) or isinstance(b, QTensor):
        return isinstance(a, QTensor) and isinstance(b, QTensor) and a == b
    a, b = np.asarray(a), np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class ModelGraph:
    name: str
    nodes: list
    weights: dict
    input_shape: Shape
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.input_shape = (None,) + tuple(int(d) for d in self.input_shape[1:])

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (
            self.name == other.name
            and self.input_shape == other.input_shape
            and self.metadata == other.metadata
            and [n.to_json() for n in self.nodes] == [n.to_json() for n in other.nodes]
            and self.weights.keys() == other.weights.keys()
            and all(_blob_equal(self.weights[k], other.weights[k]) for k in self.weights)
        )

    __hash__ = object.__hash__

    @property
    def output_id(self):
        return self.nodes[-1].id

    def node(self, node_id):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def referenced_blobs(self):
        """Blob ids in order of first reference."""
        seen = {}
        for n in self.nodes:
            for ref in n.weight_refs:
                seen.setdefault(ref, None)
        return list(seen)

    def is_quantized(self):
        return any(isinstance(w, QTensor) for w in self.weights.values())

    def weight_count(self):
        return sum(int(np.prod(w.shape)) for w in self.weights.values())


class GraphBuilder:
    """Appends nodes to a chain; each new node consumes the previous output by default."""

    def __init__(self, name, input_shape, metadata=None):
        self.graph = ModelGraph(name, [], {}, input_shape, dict(metadata or {}))
        self.last = INPUT
        self._counter = 0

    def _new_id(self, op):
        self._counter += 1
        return f"{op}_{self._counter}"

    def add(self, op, params=None, weights=(), inputs=None, node_id=None):
        node_id = node_id or self._new_id(op)
        refs = []
        for suffix, value in zip(("kernel", "bias"), weights):
            ref = f"{node_id}/{suffix}"
            self.graph.weights[ref] = value
            refs.append(ref)
        node = GraphNode(node_id, op, dict(params or {}), list(inputs or [self.last]), refs)
        self.graph.nodes.append(node)
        self.last = node_id
        return node_id

    def build(self):
        validate(self.graph)
        return self.graph


# -- shape inference ----------------------------------------------------------


def _weight(graph, node, idx):
    try:
        ref = node.weight_refs[idx]
    except IndexError:
        raise ValidationError(f"{node.op} needs weight #{idx}", node.id) from None
    if ref not in graph.weights:
        raise ValidationError(f"missing weight blob {ref!r}", node.id)
    return graph.weights[ref]


def _infer_node(graph, node, in_shapes):
    op, p = node.op, node.params
    if op not in OPS:
        raise ValidationError(f"unknown op {op!r}", node.id)
    if op == "add":
        if len(in_shapes) != 2:
            raise ValidationError("add takes exactly two inputs", node.id)
        if in_shapes[0] != in_shapes[1]:
            raise ValidationError(f"add shapes differ: {in_shapes[0]} vs {in_shapes[1]}", node.id)
        return in_shapes[0]
    if len(in_shapes) != 1:
        raise ValidationError(f"{op} takes exactly one input", node.id)
    (s,) = in_shapes

    if op in ("conv2d", "depthwise_conv2d"):
        if len(s) != 4:
            raise ValidationError(f"{op} needs rank-4 input, got {s}", node.id)
        kernel = _weight(graph, node, 0)
        stride = int(p.get("stride", 1))
        padding = p.get("padding", "same")
        if padding not in PADDINGS or stride < 1:
            raise ValidationError(f"bad stride/padding {stride}/{padding}", node.id)
        if len(kernel.shape) != 4:
            raise ValidationError(f"kernel must be rank 4, got {kernel.shape}", node.id)
        kh, kw, cin, cout = kernel.shape
        if op == "depthwise_conv2d":
            if cout != 1:
                raise ValidationError("depthwise kernel must be (kh,kw,C,1)", node.id)
            cout = cin
        if s[3] != cin:
            raise ValidationError(f"input channels {s[3]} != kernel channels {cin}", node.id)
        if len(node.weight_refs) > 1 and tuple(_weight(graph, node, 1).shape) != (cout,):
            raise ValidationError(f"bias shape must be ({cout},)", node.id)
        try:
            ho = conv_output_size(s[1], kh, stride, padding)
            wo = conv_output_size(s[2], kw, stride, padding)
        except ShapeMismatch as exc:
            raise ValidationError(str(exc), node.id) from None
        return (s[0], ho, wo, cout)
    if op == "dense":
        if len(s) != 2:
            raise ValidationError(f"dense needs rank-2 input, got {s}", node.id)
        w = _weight(graph, node, 0)
        if len(w.shape) != 2 or w.shape[0] != s[1]:
            raise ValidationError(f"dense weights {tuple(w.shape)} do not fit input {s}", node.id)
        if len(node.weight_refs) > 1 and tuple(_weight(graph, node, 1).shape) != (w.shape[1],):
            raise ValidationError(f"bias shape must be ({w.shape[1]},)", node.id)
        return (s[0], w.shape[1])
    if op == "global_average_pool":
        if len(s) != 4:
            raise ValidationError(f"global_average_pool needs rank-4 input, got {s}", node.id)
        return (s[0], s[3])
    if op == "activation":
        if p.get("kind") not in ACTIVATIONS:
            raise ValidationError(f"unknown activation {p.get('kind')!r}", node.id)
        return s
    if op == "dropout_marker":
        rate = float(p.get("rate", 0.0))
        if not 0.0 <= rate < 1.0:
            raise ValidationError(f"dropout rate {rate} outside [0,1)", node.id)
        return s
    if op == "flatten":
        if len(s) < 2:
            raise ValidationError("flatten needs rank >= 2", node.id)
        return (s[0], int(np.prod(s[1:])))
    raise AssertionError(op)


def infer_shapes(graph: ModelGraph, input_shape=None) -> dict:
    """Resolve every node's output shape; raises ValidationError naming the bad node."""
    if not graph.nodes:
        raise ValidationError("graph has no nodes")
    shapes = {INPUT: tuple(input_shape) if input_shape is not None else graph.input_shape}
    consumers = {INPUT: 0}
    for node in graph.nodes:
        if node.id in shapes:
            raise ValidationError("duplicate node id", node.id)
        if not node.inputs:
            raise ValidationError("node has no inputs", node.id)
        for ref in node.inputs:
            if ref not in shapes:
                raise ValidationError(f"input {ref!r} is not defined before this node", node.id)
            consumers[ref] += 1
        for ref in node.weight_refs:
            if ref not in graph.weights:
                raise ValidationError(f"missing weight blob {ref!r}", node.id)
        shapes[node.id] = _infer_node(graph, node, [shapes[r] for r in node.inputs])
        consumers[node.id] = 0
    dangling = [k for k, v in consumers.items() if v == 0 and k != graph.output_id]
    if dangling:
        raise ValidationError(f"graph has more than one output: {dangling}", dangling[0])
    return shapes


def validate(graph: ModelGraph) -> Shape:
    return infer_shapes(graph)[graph.output_id]


# -- serialization ------------------------------------------------------------


def _blob_bytes(blob):
    if isinstance(blob, QTensor):
        return "int8", blob.q.astype("<i1").tobytes() + struct.pack("<f", blob.scale)
    arr = np.asarray(blob)
    if arr.dtype != np.float32:
        raise ValidationError(f"weight blobs must be float32 or QTensor, got {arr.dtype}")
    return "float32", arr.astype("<f4").tobytes()


def pack_container(manifest: dict, blobs, magic: bytes = MAGIC) -> bytes:
    """Serialize ``manifest`` plus ordered ``(id, blob)`` pairs; fills ``manifest["blobs"]``."""
    entries, payload, offset = [], [], 0
    for ref, w in blobs:
        dtype, raw = _blob_bytes(w)
        entries.append({"id": ref, "dtype": dtype, "shape": list(w.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    manifest = dict(manifest, blobs=entries)
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<IQ", VERSION, len(text)) + text + b"".join(payload)


def to_bytes(graph: ModelGraph) -> bytes:
    validate(graph)
    manifest = {
        "name": graph.name,
        "input_shape": list(graph.input_shape),
        "nodes": [n.to_json() for n in graph.nodes],
        "metadata": graph.metadata,
    }
    return pack_container(manifest, [(ref, graph.weights[ref]) for ref in graph.referenced_blobs()])


def read_container(data: bytes, magic: bytes = MAGIC):
    """Split a container into (manifest dict, blob dict)."""
    if len(data) < 16 or data[:4] != magic:
        raise FormatError(f"bad magic: expected {magic!r}")
    version, mlen = struct.unpack_from("<IQ", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    if 16 + mlen > len(data):
        raise FormatError("truncated manifest")
    try:
        manifest = json.loads(data[16 : 16 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}") from None
    base = 16 + mlen
    blobs = {}
    for b in manifest.get("blobs", []):
        start, nbytes = base + b["offset"], b["nbytes"]
        if start + nbytes > len(data):
            raise FormatError(f"truncated blob {b['id']!r}")
        raw = data[start : start + nbytes]
        shape = tuple(b["shape"])
        count = int(np.prod(shape)) if shape else 1
        if b["dtype"] == "float32":
            if nbytes != 4 * count:
                raise FormatError(f"blob {b['id']!r} size mismatch")
            arr = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
            blobs[b["id"]] = arr
        elif b["dtype"] == "int8":
            if nbytes != count + 4:
                raise FormatError(f"blob {b['id']!r} size mismatch")
            q = np.frombuffer(raw[:count], dtype=np.int8).reshape(shape).copy()
            (scale,) = struct.unpack("<f", raw[count:])
            blobs[b["id"]] = QTensor(q, float(np.float32(scale)))
        else:
            raise FormatError(f"unknown blob dtype {b['dtype']!r}")
    return manifest, blobs


def from_bytes(data: bytes) -> ModelGraph:
    manifest, blobs = read_container(data)
    try:
        graph = ModelGraph(
            manifest["name"],
            [GraphNode.from_json(n) for n in manifest["nodes"]],
            blobs,
            tuple(manifest["input_shape"]),
            dict(manifest.get("metadata", {})),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"manifest missing field: {exc}") from None
    validate(graph)
    return graph


def save_model(graph: ModelGraph, path) -> int:
    data = to_bytes(graph)
    Path(path).write_bytes(data)
    return len(data)


def load_model(path) -> ModelGraph:
    return from_bytes(Path(path).read_bytes())


def manifest_of(path) -> dict:
    data = Path(path).read_bytes()
    manifest, _ = read_container(data)
    return manifest


# -- graph surgery ------------------------------------------------------------


def _subgraph(graph, nodes, input_shape, name=None):
    refs = {r for n in nodes for r in n.weight_refs}
    weights = {k: v for k, v in graph.weights.items() if k in refs}
    return ModelGraph(
        name or graph.name,
        [GraphNode(n.id, n.op, dict(n.params), list(n.inputs), list(n.weight_refs)) for n in nodes],
        weights,
        input_shape,
        dict(graph.metadata),
    )


def truncate(graph: ModelGraph, drop_last: int) -> ModelGraph:
    """Drop the final ``drop_last`` nodes (and any blobs only they used)."""
    if drop_last < 0:
        raise ValueError("drop_last must be >= 0")
    if drop_last >= len(graph.nodes):
        raise InvalidTruncation(f"cannot drop {drop_last} of {len(graph.nodes)} nodes")
    kept = graph.nodes[: len(graph.nodes) - drop_last]
    out = _subgraph(graph, kept, graph.input_shape)
    try:
        validate(out)
    except ValidationError as exc:
        raise InvalidTruncation(f"cut after {kept[-1].id!r} is not a single-output graph: {exc}", exc.node_id) from None
    return out


def tail(graph: ModelGraph, k: int) -> ModelGraph:
    """The last ``k`` nodes rebuilt as a standalone graph fed by the cut point."""
    if not 1 <= k < len(graph.nodes):
        raise InvalidTruncation(f"tail size {k} outside [1, {len(graph.nodes) - 1}]")
    shapes = infer_shapes(graph)
    cut = graph.nodes[-k - 1].id
    suffix = graph.nodes[-k:]
    own = {n.id for n in suffix}
    nodes = []
    for n in suffix:
        inputs = []
        for ref in n.inputs:
            if ref in own:
                inputs.append(ref)
            elif ref == cut:
                inputs.append(INPUT)
            else:
                raise InvalidTruncation(f"suffix reads {ref!r} from before the cut", n.id)
        nodes.append(GraphNode(n.id, n.op, dict(n.params), inputs, list(n.weight_refs)))
    out = _subgraph(graph, [], shapes[cut], name=f"{graph.name}/tail")
    out.nodes = nodes
    out.weights = {r: graph.weights[r] for n in nodes for r in n.weight_refs}
    validate(out)
    return out


def identity_graph(input_shape, name="identity") -> ModelGraph:
    """Single dropout_marker node with rate 0: the identity map."""
    g = ModelGraph(name, [GraphNode("identity", "dropout_marker", {"rate": 0.0}, [INPUT])], {}, input_shape)
    validate(g)
    return g


def _fresh(name, taken):
    if name not in taken:
        return name
    i = 1
    while f"{name}~{i}" in taken:
        i += 1
    return f"{name}~{i}"


def compose(backbone: ModelGraph, head: ModelGraph) -> ModelGraph:
    """Feed the backbone's output into the head; the head's metadata wins on conflicts."""
    out_shape = validate(backbone)
    validate(head)
    if tuple(out_shape[1:]) != tuple(head.input_shape[1:]):
        raise ShapeMismatch(f"backbone output {out_shape} does not match head input {head.input_shape}")
    taken_nodes = {n.id for n in backbone.nodes} | {INPUT}
    taken_blobs = set(backbone.weights)
    node_map, blob_map = {}, {}
    nodes = [GraphNode(n.id, n.op, dict(n.params), list(n.inputs), list(n.weight_refs)) for n in backbone.nodes]
    weights = dict(backbone.weights)
    for n in head.nodes:
        nid = _fresh(n.id, taken_nodes)
        taken_nodes.add(nid)
        node_map[n.id] = nid
        refs = []
        for r in n.weight_refs:
            if r not in blob_map:
                blob_map[r] = _fresh(r, taken_blobs)
                taken_blobs.add(blob_map[r])
                weights[blob_map[r]] = head.weights[r]
            refs.append(blob_map[r])
        inputs = [backbone.output_id if r == INPUT else node_map[r] for r in n.inputs]
        nodes.append(GraphNode(nid, n.op, dict(n.params), inputs, refs))
    metadata = {**backbone.metadata, **head.metadata}
    graph = ModelGraph(f"{backbone.name}+{head.name}", nodes, weights, backbone.input_shape, metadata)
    validate(graph)
    return graph


def class_names(graph: ModelGraph):
    raw = graph.metadata.get("class_names")
    return None if raw is None else json.loads(raw)
