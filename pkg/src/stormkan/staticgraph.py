"""Deployment lowering: branch-free static graphs + a standalone interpreter.

``export`` lowers a deploy-variant model to a topologically ordered,
fixed-shape op list: spline layers become clamp/piecewise-polynomial
basis evaluation against precomputed coefficients plus the silu path,
every adaptive pool becomes fixed kernel/stride average pooling, and
pools wider than the 63-kernel limit are split into two balanced
stages.  The serialized form ("KFG1") round-trips bit-exactly; a
``Session`` pre-allocates every buffer at load and then executes with
no steady-state allocation.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as _k
from .errors import ExportError, GraphError, ShapeError
from .spline import KanLinear, SplineGrid, precompute_basis_coefficients
from .tape import Tape
from .tensor import Tensor

MAGIC = b"KFG1"
VERSION = 1
MAX_POOL_KERNEL = 63

# op ids
CONV2D, RELU, SILU, TANH, MAXPOOL2D, AVGPOOL2D, SLICE, CONCAT, RESHAPE, \
    TRANSPOSE, MATMUL, MUL, ADD, SOFTMAX, MEAN, SPLINE_BASIS = range(16)

_OP_NAMES = {
    CONV2D: "conv2d", RELU: "relu", SILU: "silu", TANH: "tanh",
    MAXPOOL2D: "maxpool2d", AVGPOOL2D: "avgpool2d", SLICE: "slice",
    CONCAT: "concat", RESHAPE: "reshape", TRANSPOSE: "transpose",
    MATMUL: "matmul", MUL: "mul", ADD: "add", SOFTMAX: "softmax",
    MEAN: "mean", SPLINE_BASIS: "spline_basis",
}


# ---------------------------------------------------------------------------
# pooling plans


def decompose_pooling(kernel: int, stride: int) -> list[tuple[int, int]]:
    """Split a non-overlapping mean pool into <= 2 stages within the limit.

    Requires stride == kernel.  Balanced factor pairs are preferred;
    kernels with no two-factor split whose parts both fit (e.g. primes
    beyond the limit) are an error.
    """
    if kernel < 1:
        raise ShapeError(f"pool kernel must be >= 1, got {kernel}")
    if stride != kernel:
        raise ShapeError("pool decomposition requires stride == kernel")
    if kernel <= MAX_POOL_KERNEL:
        return [(kernel, kernel)]
    for k1 in range(math.isqrt(kernel), 1, -1):
        if kernel % k1 == 0 and kernel // k1 <= MAX_POOL_KERNEL:
            return [(k1, k1), (kernel // k1, kernel // k1)]
    raise ShapeError(
        f"pool kernel {kernel} has no two-stage factorization with both "
        f"stages <= {MAX_POOL_KERNEL}")


def fixed_pool_spec(extent: int, out: int = 2) -> tuple[int, int]:
    """(kernel, stride) of the fixed pool equal to adaptive extent->out."""
    if extent % out == 0:
        return extent // out, extent // out
    if out == 2:
        return -(-extent // 2), extent // 2
    raise ShapeError(
        f"adaptive pool {extent}->{out} has no fixed kernel/stride equivalent")


def _pool_stages(extent: int, out: int = 2) -> list[tuple[int, int]]:
    kernel, stride = fixed_pool_spec(extent, out)
    if kernel <= MAX_POOL_KERNEL:
        return [(kernel, stride)]
    return decompose_pooling(kernel, stride)


def spatial_pool_plan(cfg) -> list[tuple[int, int]]:
    """Fixed stages replacing the spatial adaptive 2x2 pool."""
    return _pool_stages(cfg.image_hw // 2, 2)


def ring_pool_plan(cfg) -> list[list[tuple[int, int]]]:
    """Fixed stages replacing each ring's adaptive 2x2 pool."""
    from .model import ring_bounds
    return [_pool_stages(hi - lo, 2) for lo, hi in ring_bounds(cfg)]


# ---------------------------------------------------------------------------
# graph structure


@dataclass
class GraphNode:
    op: int
    attrs: tuple[int, ...]
    inputs: tuple[int, ...]
    output: int


@dataclass
class StaticGraph:
    inputs: list[tuple[str, tuple[int, ...]]]
    constants: dict[int, np.ndarray]
    nodes: list[GraphNode]
    outputs: list[tuple[str, int]]
    version: int = VERSION

    @property
    def n_values(self) -> int:
        return len(self.inputs) + len(self.constants) + len(self.nodes)

    def parameter_count(self) -> int:
        return int(sum(c.size for c in self.constants.values()))

    def infer_shapes(self) -> list[tuple[int, ...]]:
        """Shape-check every node; raises GraphError on any violation."""
        shapes: list[tuple[int, ...] | None] = [None] * self.n_values
        for i, (_, shape) in enumerate(self.inputs):
            shapes[i] = tuple(shape)
        for vid, arr in self.constants.items():
            if not (len(self.inputs) <= vid < len(self.inputs) + len(self.constants)):
                raise GraphError(f"constant id {vid} out of range")
            shapes[vid] = arr.shape
        base = len(self.inputs) + len(self.constants)
        for n, node in enumerate(self.nodes):
            if node.output != base + n:
                raise GraphError("node outputs must be contiguous and ordered")
            for j in node.inputs:
                if not (0 <= j < node.output) or shapes[j] is None:
                    raise GraphError(
                        f"node {n} ({_OP_NAMES.get(node.op)}) reads undefined "
                        f"value {j}")
            try:
                shapes[node.output] = _infer_shape(
                    node, [shapes[j] for j in node.inputs])
            except (ShapeError, GraphError) as exc:
                raise GraphError(
                    f"node {n} ({_OP_NAMES.get(node.op, node.op)}): {exc}"
                ) from exc
        for _, vid in self.outputs:
            if shapes[vid] is None:
                raise GraphError(f"output value {vid} undefined")
        return [s if s is not None else () for s in shapes]


def _infer_shape(node: GraphNode, in_shapes) -> tuple[int, ...]:
    op, attrs = node.op, node.attrs
    if op == CONV2D:
        stride, padding, dilation = attrs
        x, w = in_shapes[0], in_shapes[1]
        if len(x) != 4 or len(w) != 4 or x[1] != w[1]:
            raise ShapeError(f"conv shapes {x} x {w}")
        oh = (x[2] + 2 * padding - dilation * (w[2] - 1) - 1)
        ow = (x[3] + 2 * padding - dilation * (w[3] - 1) - 1)
        if oh % stride or ow % stride or oh < 0 or ow < 0:
            raise ShapeError("non-integral conv output extent")
        return (x[0], w[0], oh // stride + 1, ow // stride + 1)
    if op in (RELU, SILU, TANH, SOFTMAX):
        return in_shapes[0]
    if op in (MAXPOOL2D, AVGPOOL2D):
        kernel, stride = attrs
        if kernel > MAX_POOL_KERNEL:
            raise GraphError(
                f"pool kernel {kernel} exceeds limit {MAX_POOL_KERNEL}")
        x = in_shapes[0]
        span_h, span_w = x[2] - kernel, x[3] - kernel
        if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
            raise ShapeError(f"pool {kernel}/{stride} does not tile {x}")
        return (x[0], x[1], span_h // stride + 1, span_w // stride + 1)
    if op == SLICE:
        x = in_shapes[0]
        if len(attrs) != 2 * len(x):
            raise ShapeError("slice attrs must give begin/end per axis")
        out = []
        for a in range(len(x)):
            b, e = attrs[2 * a], attrs[2 * a + 1]
            if not (0 <= b < e <= x[a]):
                raise ShapeError(f"slice [{b}:{e}] out of bounds on axis {a}")
            out.append(e - b)
        return tuple(out)
    if op == CONCAT:
        axis = attrs[0]
        ref = list(in_shapes[0])
        total = 0
        for s in in_shapes:
            if list(s[:axis]) + list(s[axis + 1:]) != ref[:axis] + ref[axis + 1:]:
                raise ShapeError("concat extent mismatch")
            total += s[axis]
        ref[axis] = total
        return tuple(ref)
    if op == RESHAPE:
        if int(np.prod(attrs)) != int(np.prod(in_shapes[0])):
            raise ShapeError(f"reshape {in_shapes[0]} -> {attrs}")
        return tuple(attrs)
    if op == TRANSPOSE:
        x = in_shapes[0]
        if sorted(attrs) != list(range(len(x))):
            raise ShapeError("transpose perm invalid")
        return tuple(x[a] for a in attrs)
    if op == MATMUL:
        a, b = in_shapes
        if a[-1] != b[-2]:
            raise ShapeError(f"matmul inner extents {a} x {b}")
        lead = np.broadcast_shapes(a[:-2], b[:-2])
        return tuple(lead) + (a[-2], b[-1])
    if op in (MUL, ADD):
        return tuple(np.broadcast_shapes(*in_shapes))
    if op == MEAN:
        axis = attrs[0]
        x = in_shapes[0]
        return tuple(e for i, e in enumerate(x) if i != axis)
    if op == SPLINE_BASIS:
        x, coeffs, meta = in_shapes
        if len(meta) != 1 or meta[0] != 3:
            raise ShapeError("spline meta constant must be [lo, step, n_intervals]")
        return tuple(x) + (coeffs[1],)
    raise GraphError(f"unknown op id {node.op}")


# ---------------------------------------------------------------------------
# serialization


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _read_str(buf: memoryview, off: int) -> tuple[str, int]:
    (n,) = struct.unpack_from("<H", buf, off)
    off += 2
    return bytes(buf[off:off + n]).decode("utf-8"), off + n


def save_graph(graph: StaticGraph) -> bytes:
    parts = [MAGIC, struct.pack("<I", graph.version)]

    sec = [struct.pack("<I", len(graph.inputs))]
    for name, shape in graph.inputs:
        sec.append(_pack_str(name))
        sec.append(struct.pack("<BB", 0, len(shape)))
        sec.append(struct.pack(f"<{len(shape)}I", *shape))
    parts.append(_section(b"".join(sec)))

    sec = [struct.pack("<I", len(graph.constants))]
    for vid in sorted(graph.constants):
        blob = Tensor(graph.constants[vid]).tobytes()
        sec.append(struct.pack("<IQ", vid, len(blob)))
        sec.append(blob)
    parts.append(_section(b"".join(sec)))

    sec = [struct.pack("<I", len(graph.nodes))]
    for node in graph.nodes:
        sec.append(struct.pack("<BH", node.op, len(node.attrs)))
        sec.append(struct.pack(f"<{len(node.attrs)}q", *node.attrs))
        sec.append(struct.pack("<H", len(node.inputs)))
        sec.append(struct.pack(f"<{len(node.inputs)}I", *node.inputs))
        sec.append(struct.pack("<I", node.output))
    parts.append(_section(b"".join(sec)))

    sec = [struct.pack("<I", len(graph.outputs))]
    for name, vid in graph.outputs:
        sec.append(_pack_str(name))
        sec.append(struct.pack("<I", vid))
    parts.append(_section(b"".join(sec)))
    return b"".join(parts)


def _section(payload: bytes) -> bytes:
    return struct.pack("<Q", len(payload)) + payload


def load_graph(data: bytes) -> StaticGraph:
    """Parse and fully validate a serialized graph."""
    buf = memoryview(data)
    if len(buf) < 8 or bytes(buf[:4]) != MAGIC:
        raise GraphError("bad graph magic")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise GraphError(f"unsupported graph version {version}")
    off = 8

    def section(off):
        if off + 8 > len(buf):
            raise GraphError("truncated graph payload")
        (n,) = struct.unpack_from("<Q", buf, off)
        end = off + 8 + n
        if end > len(buf):
            raise GraphError("truncated graph section")
        return off + 8, end

    try:
        start, end = section(off)
        (n_in,) = struct.unpack_from("<I", buf, start)
        p = start + 4
        inputs = []
        for _ in range(n_in):
            name, p = _read_str(buf, p)
            dtype_code, rank = struct.unpack_from("<BB", buf, p)
            p += 2
            if dtype_code != 0:
                raise GraphError("interpreter precision is fixed to float32")
            shape = struct.unpack_from(f"<{rank}I", buf, p)
            p += 4 * rank
            inputs.append((name, tuple(shape)))
        off = end

        start, end = section(off)
        (n_const,) = struct.unpack_from("<I", buf, start)
        p = start + 4
        constants = {}
        for _ in range(n_const):
            vid, blob_len = struct.unpack_from("<IQ", buf, p)
            p += 12
            arr = Tensor.frombytes(bytes(buf[p:p + blob_len])).data
            if arr.dtype != np.float32:
                raise GraphError("graph constants must be float32")
            constants[vid] = arr
            p += blob_len
        off = end

        start, end = section(off)
        (n_nodes,) = struct.unpack_from("<I", buf, start)
        p = start + 4
        nodes = []
        for _ in range(n_nodes):
            op, n_attrs = struct.unpack_from("<BH", buf, p)
            p += 3
            attrs = struct.unpack_from(f"<{n_attrs}q", buf, p)
            p += 8 * n_attrs
            (n_inputs,) = struct.unpack_from("<H", buf, p)
            p += 2
            node_in = struct.unpack_from(f"<{n_inputs}I", buf, p)
            p += 4 * n_inputs
            (out_id,) = struct.unpack_from("<I", buf, p)
            p += 4
            nodes.append(GraphNode(op, tuple(attrs), tuple(node_in), out_id))
        off = end

        start, end = section(off)
        (n_out,) = struct.unpack_from("<I", buf, start)
        p = start + 4
        outputs = []
        for _ in range(n_out):
            name, p = _read_str(buf, p)
            (vid,) = struct.unpack_from("<I", buf, p)
            p += 4
            outputs.append((name, vid))
    except struct.error as exc:
        raise GraphError(f"truncated graph payload: {exc}") from exc

    graph = StaticGraph(inputs, constants, nodes, outputs, version)
    graph.infer_shapes()  # validation is total at load time
    return graph


# ---------------------------------------------------------------------------
# export


class _Builder:
    def __init__(self):
        self.inputs: list[tuple[str, tuple[int, ...]]] = []
        self.constants: dict[int, np.ndarray] = {}
        self.nodes: list[GraphNode] = []
        self._const_cache: dict[int, int] = {}
        self._pending_consts: list[np.ndarray] = []
        self.shapes: dict[int, tuple[int, ...]] = {}
        self._next = 0

    def input(self, name, shape):
        vid = self._next
        self._next += 1
        self.inputs.append((name, tuple(shape)))
        self.shapes[vid] = tuple(shape)
        return vid

    def const(self, arr):
        arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float32))
        key = id(arr)
        if key in self._const_cache:
            return self._const_cache[key]
        vid = self._next
        self._next += 1
        self.constants[vid] = arr
        self.shapes[vid] = arr.shape
        self._const_cache[key] = vid
        return vid

    def node(self, op, attrs, inputs):
        vid = self._next
        self._next += 1
        node = GraphNode(op, tuple(int(a) for a in attrs),
                         tuple(inputs), vid)
        self.nodes.append(node)
        self.shapes[vid] = _infer_shape(node,
                                        [self.shapes[j] for j in inputs])
        return vid

    def finish(self, outputs) -> StaticGraph:
        # renumber so constants sit between inputs and nodes
        order = (list(range(len(self.inputs)))
                 + sorted(self.constants)
                 + [n.output for n in self.nodes])
        remap = {old: new for new, old in enumerate(order)}
        constants = {remap[k]: v for k, v in self.constants.items()}
        nodes = [GraphNode(n.op, n.attrs,
                           tuple(remap[j] for j in n.inputs),
                           remap[n.output]) for n in self.nodes]
        outs = [(name, remap[vid]) for name, vid in outputs]
        return StaticGraph(self.inputs, constants, nodes, outs)


def _lower_dense(b: _Builder, layer, x_id, coeff_cache):
    """Lower a KanLinear or LinearBlock applied to a 2-d value."""
    n = b.shapes[x_id][0]
    if isinstance(layer, KanLinear):
        grid = layer.grid
        key = (grid.grid_size, grid.spline_order, grid.lo, grid.hi)
        if key not in coeff_cache:
            coeffs = precompute_basis_coefficients(grid).astype(np.float32)
            meta = np.array([grid.lo, grid.step, grid.grid_size],
                            dtype=np.float32)
            coeff_cache[key] = (b.const(coeffs), b.const(meta))
        coeff_id, meta_id = coeff_cache[key]
        bases = b.node(SPLINE_BASIS, (), (x_id, coeff_id, meta_id))
        in_dim, nb = layer.in_dim, grid.basis_count
        bases2 = b.node(RESHAPE, (n, in_dim * nb), (bases,))
        sw2t = layer.spline_weight.data.reshape(
            layer.out_dim, in_dim * nb).T.copy()
        spline_out = b.node(MATMUL, (), (bases2, b.const(sw2t)))
        sil = b.node(SILU, (), (x_id,))
        base_out = b.node(MATMUL, (),
                          (sil, b.const(layer.base_weight.data.T.copy())))
        return b.node(ADD, (), (base_out, spline_out))
    # LinearBlock
    y = b.node(MATMUL, (), (x_id, b.const(layer.w.data.T.copy())))
    y = b.node(ADD, (), (y, b.const(layer.b.data)))
    if layer.activation == "relu":
        y = b.node(RELU, (), (y,))
    elif layer.activation == "tanh":
        y = b.node(TANH, (), (y,))
    return y


def _lower_conv(b, layer, x_id):
    w_id = b.const(layer.w.data)
    bias_id = b.const(layer.b.data.reshape(1, -1, 1, 1))
    y = b.node(CONV2D, (1, layer.padding, layer.dilation), (x_id, w_id))
    return b.node(ADD, (), (y, bias_id))


def export(model) -> StaticGraph:
    """Lower a deploy-variant model to a validated static graph."""
    cfg = model.cfg
    if getattr(model, "lstm", None) is not None:
        raise ExportError(
            "cannot lower op 'lstm': the recurrent temporal path has no "
            "static-graph form; rebuild the model with variant='deploy'")
    if cfg.variant != "deploy":
        raise ExportError(
            f"export requires the deploy variant, got {cfg.variant!r}")

    from .model import ATTN_CHANNEL, IMG_CHANNELS, ring_bounds

    b = _Builder()
    coeff_cache: dict = {}
    x_seq = b.input("x_seq_flat", (1, cfg.flat_seq))
    x_img = b.input("x_img", (1, IMG_CHANNELS, cfg.image_hw, cfg.image_hw))

    # temporal path
    f_seq = _lower_dense(b, model.deploy_seq1, x_seq, coeff_cache)
    f_seq = _lower_dense(b, model.deploy_seq2, f_seq, coeff_cache)

    # spatial trunk
    h = b.node(RELU, (), (_lower_conv(b, model.conv1, x_img),))
    h = b.node(RELU, (), (_lower_conv(b, model.conv2, h),))
    h = b.node(MAXPOOL2D, (2, 2), (h,))
    res = _lower_conv(b, model.res, h)
    dsum = _lower_conv(b, model.dilated[0], h)
    for layer in model.dilated[1:]:
        dsum = b.node(ADD, (), (dsum, _lower_conv(b, layer, h)))
    multi = b.node(CONCAT, (1,), (res, dsum))
    red = _lower_conv(b, model.reduce, multi)
    for kernel, stride in spatial_pool_plan(cfg):
        red = b.node(AVGPOOL2D, (kernel, stride), (red,))
    flat = b.node(RESHAPE, (1, cfg.flatten_width), (red,))
    f_img = _lower_dense(b, model.img_proj, flat, coeff_cache)
    f_shared = b.node(CONCAT, (1,), (f_seq, f_img))

    # ring features (identical for both heads)
    hw = cfg.image_hw
    ch7 = b.node(SLICE, (0, 1, ATTN_CHANNEL, ATTN_CHANNEL + 1, 0, hw, 0, hw),
                 (x_img,))
    ring_ids = []
    for (lo, hi), stages in zip(ring_bounds(cfg), ring_pool_plan(cfg)):
        crop = b.node(SLICE, (0, 1, 0, 1, lo, hi, lo, hi), (ch7,))
        for kernel, stride in stages:
            crop = b.node(AVGPOOL2D, (kernel, stride), (crop,))
        ring_ids.append(b.node(RESHAPE, (1, 4), (crop,)))
    rings2 = b.node(RESHAPE, (cfg.ring_count, 4),
                    (b.node(CONCAT, (1,), tuple(ring_ids)),))

    def lower_head(head):
        d, heads = cfg.d_attn, cfg.heads
        dh = d // heads
        rings = cfg.ring_count
        qv = _lower_dense(b, head.content, rings2, coeff_cache)
        q = b.node(SLICE, (0, rings, 0, d), (qv,))
        v = b.node(SLICE, (0, rings, d, 2 * d), (qv,))
        qh = b.node(TRANSPOSE, (1, 0, 2),
                    (b.node(RESHAPE, (rings, heads, dh), (q,)),))
        vh = b.node(TRANSPOSE, (1, 0, 2),
                    (b.node(RESHAPE, (rings, heads, dh), (v,)),))
        # K depends only on the fixed ring-distance vector: precompute
        tape = Tape()
        g = tape.constant(np.linspace(0.0, 1.0, rings,
                                      dtype=np.float32)[:, None])
        k_vals = head.dist.forward(g).data                 # [rings, d]
        kh_t = np.ascontiguousarray(
            k_vals.reshape(rings, heads, dh).transpose(1, 2, 0))
        scores = b.node(MATMUL, (), (qh, b.const(kh_t)))   # [h, rings, rings]
        scal = b.const(np.array([1.0 / math.sqrt(dh)], dtype=np.float32))
        attn = b.node(SOFTMAX, (2,), (b.node(MUL, (), (scores, scal)),))
        ctx = b.node(MATMUL, (), (attn, vh))               # [h, rings, dh]
        merged = b.node(RESHAPE, (rings, d),
                        (b.node(TRANSPOSE, (1, 0, 2), (ctx,)),))
        c_avg = b.node(RESHAPE, (1, d), (b.node(MEAN, (0,), (merged,)),))
        fused = b.node(CONCAT, (1,), (c_avg, f_seq))
        return _lower_dense(b, head.out, fused, coeff_cache)

    a_msw = lower_head(model.head_msw)
    a_rmw = lower_head(model.head_rmw)
    gamma_m2r = b.node(ADD, (), (a_rmw, _lower_dense(b, model.k_msw2rmw,
                                                     a_msw, coeff_cache)))
    gamma_r2m = b.node(ADD, (), (a_msw, _lower_dense(b, model.k_rmw2msw,
                                                     a_rmw, coeff_cache)))
    y_msw = _lower_dense(
        b, model.dec_msw,
        b.node(CONCAT, (1,), (a_msw, gamma_r2m, f_shared)), coeff_cache)
    y_rmw = _lower_dense(
        b, model.dec_rmw,
        b.node(CONCAT, (1,), (a_rmw, gamma_m2r, f_shared)), coeff_cache)

    graph = b.finish([("y_msw", y_msw), ("y_rmw", y_rmw)])
    graph.infer_shapes()
    return graph


# ---------------------------------------------------------------------------
# interpreter


class Session:
    """Executes a loaded graph against pre-allocated buffers.

    All value and scratch buffers are allocated when the session is
    created; ``alloc_count`` stays constant across ``run`` calls.  A
    loaded graph is immutable, so independent sessions may run
    concurrently.
    """

    def __init__(self, graph: StaticGraph):
        self.graph = graph
        self.alloc_count = 0
        self.shapes = graph.infer_shapes()
        self._values: list[np.ndarray | None] = [None] * graph.n_values
        for vid, arr in graph.constants.items():
            self._values[vid] = arr
        for node in graph.nodes:
            self._values[node.output] = self._alloc(self.shapes[node.output])
        self._scratch: dict[int, tuple] = {}
        for i, node in enumerate(graph.nodes):
            self._scratch[i] = self._make_scratch(node)
        self._input_ids = {name: i for i, (name, _) in enumerate(graph.inputs)}

    def _alloc(self, shape, dtype=np.float32) -> np.ndarray:
        self.alloc_count += 1
        return np.zeros(shape, dtype=dtype)

    def _make_scratch(self, node: GraphNode):
        shapes = self.shapes
        if node.op == CONV2D:
            _, padding, _ = node.attrs
            x = shapes[node.inputs[0]]
            w = shapes[node.inputs[1]]
            xp = None
            if padding:
                xp = self._alloc((x[0], x[1], x[2] + 2 * padding,
                                  x[3] + 2 * padding))
            out = shapes[node.output]
            cols = self._alloc((w[1] * w[2] * w[3],
                                x[0] * out[2] * out[3]))
            out2 = self._alloc((w[0], x[0] * out[2] * out[3])) \
                if x[0] > 1 else None
            return xp, cols, out2
        if node.op == SOFTMAX:
            axis = node.attrs[0]
            red = list(shapes[node.inputs[0]])
            red[axis] = 1
            return (self._alloc(tuple(red)),)
        if node.op == SPLINE_BASIS:
            x = shapes[node.inputs[0]]
            m = int(np.prod(x))
            coeffs = shapes[node.inputs[1]]
            return (self._alloc((m,)), self._alloc((m,)),
                    self._alloc((m,), dtype=np.int64),
                    self._alloc((m,) + tuple(coeffs[1:])))
        if node.op == SILU:
            return (self._alloc(shapes[node.inputs[0]]),)
        return ()

    def run(self, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        graph = self.graph
        if set(inputs) != set(self._input_ids):
            raise GraphError(
                f"inputs {sorted(inputs)} do not match graph inputs "
                f"{sorted(self._input_ids)}")
        for name, arr in inputs.items():
            vid = self._input_ids[name]
            expect = self.shapes[vid]
            arr = np.asarray(arr)
            if arr.shape != expect:
                raise GraphError(
                    f"input {name!r} shape {arr.shape} != declared {expect}")
            if arr.dtype != np.float32:
                if arr.dtype.kind != "f":
                    raise GraphError(f"input {name!r} must be float")
                arr = arr.astype(np.float32)
            self._values[vid] = arr
        for i, node in enumerate(graph.nodes):
            self._exec(node, self._scratch[i])
        return {name: self._values[vid].copy()
                for name, vid in graph.outputs}

    def _exec(self, node: GraphNode, scratch) -> None:
        vals = self._values
        out = vals[node.output]
        ins = [vals[j] for j in node.inputs]
        op, attrs = node.op, node.attrs
        if op == CONV2D:
            stride, padding, dilation = attrs
            x, w = ins
            xp, cols, out2 = scratch
            if xp is not None:
                xp[:, :, padding:-padding, padding:-padding] = x
                x = xp
            kh, kw = w.shape[2], w.shape[3]
            oh, ow = out.shape[2], out.shape[3]
            cout = w.shape[0]
            w2 = w.reshape(cout, -1)
            if _k.HAS_NUMBA:
                _k.pack_cols(x, cols, kh, kw, stride, dilation, oh, ow)
            else:
                from .ops import _window_view
                win = _window_view(x, kh, kw, stride, dilation)
                np.copyto(cols,
                          win.transpose(1, 2, 3, 0, 4, 5).reshape(cols.shape))
            if out2 is None:
                np.matmul(w2, cols, out=out.reshape(cout, -1))
            else:
                np.matmul(w2, cols, out=out2)
                bsz, ohw = x.shape[0], oh * ow
                if _k.HAS_NUMBA:
                    _k.unpack_nchw(out2, out, 0)
                else:
                    np.copyto(out, out2.reshape(cout, bsz, ohw)
                              .transpose(1, 0, 2).reshape(out.shape))
        elif op == RELU:
            np.maximum(ins[0], 0.0, out=out)
        elif op == SILU:
            (t,) = scratch
            np.negative(ins[0], out=t)
            np.exp(t, out=t)
            t += 1.0
            np.divide(ins[0], t, out=out)
        elif op == TANH:
            np.tanh(ins[0], out=out)
        elif op in (MAXPOOL2D, AVGPOOL2D):
            kernel, stride = attrs
            from .ops import _window_view
            win = _window_view(ins[0], kernel, kernel, stride, 1)
            if op == MAXPOOL2D:
                np.max(win, axis=(2, 3), out=out)
            else:
                np.mean(win, axis=(2, 3), out=out)
        elif op == SLICE:
            key = tuple(slice(attrs[2 * a], attrs[2 * a + 1])
                        for a in range(len(attrs) // 2))
            np.copyto(out, ins[0][key])
        elif op == CONCAT:
            axis = attrs[0]
            pos = 0
            for arr in ins:
                key = [slice(None)] * arr.ndim
                key[axis] = slice(pos, pos + arr.shape[axis])
                np.copyto(out[tuple(key)], arr)
                pos += arr.shape[axis]
        elif op == RESHAPE:
            np.copyto(out, ins[0].reshape(attrs))
        elif op == TRANSPOSE:
            np.copyto(out, np.transpose(ins[0], attrs))
        elif op == MATMUL:
            np.matmul(ins[0], ins[1], out=out)
        elif op == MUL:
            np.multiply(ins[0], ins[1], out=out)
        elif op == ADD:
            np.add(ins[0], ins[1], out=out)
        elif op == SOFTMAX:
            axis = attrs[0]
            (red,) = scratch
            np.max(ins[0], axis=axis, keepdims=True, out=red)
            np.subtract(ins[0], red, out=out)
            np.exp(out, out=out)
            np.sum(out, axis=axis, keepdims=True, out=red)
            out /= red
        elif op == MEAN:
            np.mean(ins[0], axis=attrs[0], out=out)
        elif op == SPLINE_BASIS:
            x, coeffs, meta = ins
            t, u, idx, cg = scratch
            lo, step, n_int = float(meta[0]), float(meta[1]), int(meta[2])
            xf = x.reshape(-1)
            np.subtract(xf, lo, out=t)
            t /= step
            np.clip(t, 0.0, float(n_int), out=t)
            np.floor(t, out=u)
            np.clip(u, 0.0, float(n_int - 1), out=u)
            np.subtract(t, u, out=t)       # fractional part in [0, 1]
            t *= step
            np.copyto(idx, u, casting="unsafe")
            np.take(coeffs, idx, axis=0, out=cg)
            acc = out.reshape(cg.shape[:-1])
            np.copyto(acc, cg[..., -1])
            for p in range(cg.shape[-1] - 2, -1, -1):
                acc *= t[:, None]
                acc += cg[..., p]
        else:
            raise GraphError(f"unknown op id {op}")


def run(graph: StaticGraph, inputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return Session(graph).run(inputs)


def bench(graph: StaticGraph, n_warmup: int = 5, n_runs: int = 50,
          inputs: dict[str, np.ndarray] | None = None) -> dict:
    """Per-sample latency statistics on a private session."""
    if n_runs < 1:
        raise ShapeError("bench needs n_runs >= 1")
    session = Session(graph)
    if inputs is None:
        rng = np.random.default_rng(0)
        inputs = {name: rng.uniform(0, 1, shape).astype(np.float32)
                  for name, shape in graph.inputs}
    for _ in range(n_warmup):
        session.run(inputs)
    allocs_before = session.alloc_count
    times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        session.run(inputs)
        times.append((time.perf_counter() - t0) * 1e3)
    times_arr = np.array(times)
    return {
        "mean_ms": float(times_arr.mean()),
        "p50_ms": float(np.percentile(times_arr, 50)),
        "p95_ms": float(np.percentile(times_arr, 95)),
        "runs": n_runs,
        "warmup": n_warmup,
        "param_count": graph.parameter_count(),
        "steady_state_allocs": session.alloc_count - allocs_before,
    }
