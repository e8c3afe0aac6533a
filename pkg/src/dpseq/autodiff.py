"""Reverse-mode automatic differentiation on dense float64 tensors.

A Tape records a fixed vocabulary of array operations as they run and replays
them in reverse to produce gradients for every tensor marked as a parameter.
Axis 0 of example-indexed tensors is tracked so per-example gradients can be
extracted, and any operation that mixes examples taints its downstream graph.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeMismatch",
    "GraphError",
    "OP_KINDS",
    "backward",
    "per_example_grads",
]

# The engine deliberately supports only the operations the seq2seq model
# needs; anything else is a programming error, not a missing feature.
OP_KINDS = frozenset(
    {
        "add",
        "mul",
        "matmul",
        "transpose",
        "reshape",
        "slice",
        "softmax",
        "layer_norm",
        "embedding",
        "cross_entropy",
        "relu",
        "sum",
        "scale",
    }
)

_LN_EPS = 1e-5


class ShapeMismatch(ValueError):
    """Raised when operand shapes are incompatible with an op."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {self.shapes}")


class GraphError(ValueError):
    """Raised for structural problems: bad loss node, example mixing, etc."""


class Tensor:
    """Dense n-dimensional float64 array, optionally recorded on a tape.

    Construction rejects NaN/Inf so numerical blow-ups surface at the op
    that produced them rather than propagating silently.
    """

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Tensor rejects non-finite values (NaN/Inf)")
        self.data = arr
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        nid = "" if self.node_id is None else f", node_id={self.node_id}"
        return f"Tensor(shape={self.shape}{nid})"


class _Node:
    __slots__ = ("op", "parents", "value", "attrs", "batched", "mixed")

    def __init__(self, op, parents, value, attrs, batched, mixed):
        self.op = op
        self.parents = parents
        self.value = value
        self.attrs = attrs
        self.batched = batched
        self.mixed = mixed


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Tape:
    """Append-only record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.parameter_set: set[int] = set()

    # ------------------------------------------------------------------
    # construction

    def leaf(self, data, *, param: bool = False, batched: bool = False) -> Tensor:
        """Put a raw array on the tape; param=True marks it trainable."""
        t = Tensor(data)
        node = _Node("leaf", (), t.data, {}, batched, False)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        if param:
            self.parameter_set.add(nid)
        return Tensor(t.data, self, nid)

    def record(self, op_kind: str, inputs: list[Tensor], **attrs) -> Tensor:
        """Execute op_kind on inputs, append the node, return the result."""
        if op_kind not in OP_KINDS:
            raise GraphError(f"unknown op kind {op_kind!r}")
        for t in inputs:
            if t.tape is not self:
                raise GraphError(f"{op_kind}: input tensor not recorded on this tape")
        values = [t.data for t in inputs]
        out = _FORWARD[op_kind](values, attrs)
        parents = tuple(t.node_id for t in inputs)
        parent_nodes = [self.nodes[p] for p in parents]
        batched = any(n.batched for n in parent_nodes) or bool(attrs.get("batched"))
        mixed = any(n.mixed for n in parent_nodes)
        if not mixed and batched:
            mixed = _op_mixes(op_kind, values, parent_nodes, attrs, out.shape)
        if op_kind == "slice" and parent_nodes and parent_nodes[0].batched:
            # indexing axis 0 with an int extracts a single example
            key = attrs["key"]
            first = key[0] if isinstance(key, tuple) else key
            if isinstance(first, (int, np.integer)):
                batched = False
        node = _Node(op_kind, parents, out, attrs, batched, mixed)
        self.nodes.append(node)
        result = Tensor(out, self, len(self.nodes) - 1)
        return result

    # thin wrappers; model code reads better with names than string literals
    def add(self, a, b):
        return self.record("add", [a, b])

    def mul(self, a, b):
        return self.record("mul", [a, b])

    def matmul(self, a, b):
        return self.record("matmul", [a, b])

    def transpose(self, a, perm):
        return self.record("transpose", [a], perm=tuple(perm))

    def reshape(self, a, shape):
        return self.record("reshape", [a], shape=tuple(shape))

    def slice(self, a, key):
        return self.record("slice", [a], key=key)

    def softmax(self, a):
        return self.record("softmax", [a])

    def layer_norm(self, x, scale, offset):
        return self.record("layer_norm", [x, scale, offset])

    def embedding(self, table, ids, *, batched=False):
        return self.record("embedding", [table], ids=np.asarray(ids), batched=batched)

    def cross_entropy(self, logits, targets, mask):
        return self.record(
            "cross_entropy",
            [logits],
            targets=np.asarray(targets),
            mask=np.asarray(mask, dtype=np.float64),
        )

    def relu(self, a):
        return self.record("relu", [a])

    def sum(self, a, axis=None):
        return self.record("sum", [a], axis=axis)

    def scale(self, a, c):
        return self.record("scale", [a], c=float(c))

    # ------------------------------------------------------------------
    # differentiation

    def _check_on_tape(self, t: Tensor) -> _Node:
        if t.tape is not self or t.node_id is None or t.node_id >= len(self.nodes):
            raise GraphError("tensor is not recorded on this tape")
        return self.nodes[t.node_id]

    def _ancestors(self, root: int) -> list[int]:
        seen = {root}
        stack = [root]
        while stack:
            for p in self.nodes[stack.pop()].parents:
                if p not in seen:
                    seen.add(p)
                    stack.append(p)
        return sorted(seen, reverse=True)

    def _backprop(self, root: int, seed: np.ndarray, order: list[int]) -> dict[int, Tensor]:
        adjoint: dict[int, np.ndarray] = {root: seed}
        for nid in order:
            grad = adjoint.get(nid)
            if grad is None:
                continue
            node = self.nodes[nid]
            if node.op == "leaf":
                continue
            parent_values = [self.nodes[p].value for p in node.parents]
            pgrads = _BACKWARD[node.op](node.value, parent_values, node.attrs, grad)
            for pid, pg in zip(node.parents, pgrads):
                if pg is None:
                    continue
                acc = adjoint.get(pid)
                adjoint[pid] = pg if acc is None else acc + pg
        out = {}
        for pid in self.parameter_set:
            g = adjoint.get(pid)
            if g is None:
                g = np.zeros_like(self.nodes[pid].value)
            out[pid] = Tensor(g)
        return out

    def backward(self, loss: Tensor) -> dict[int, Tensor]:
        """Gradient of a scalar loss with respect to every parameter node."""
        node = self._check_on_tape(loss)
        if node.value.size != 1:
            raise GraphError(f"loss must be scalar, got shape {node.value.shape}")
        seed = np.ones_like(node.value)
        return self._backprop(loss.node_id, seed, self._ancestors(loss.node_id))

    def per_example_grads(self, per_example_losses: Tensor) -> list[dict[int, Tensor]]:
        """One gradient map per example, equal to looping backward() over
        each loss entry in isolation."""
        node = self._check_on_tape(per_example_losses)
        if node.value.ndim != 1:
            raise GraphError(
                f"per-example losses must be a vector, got shape {node.value.shape}"
            )
        if not node.batched:
            raise GraphError("loss vector is not example-indexed (batched axis lost)")
        if node.mixed:
            raise GraphError(
                "graph mixes examples upstream of the loss; "
                "per-example gradients would be meaningless"
            )
        order = self._ancestors(per_example_losses.node_id)
        batch = node.value.shape[0]
        grads = []
        for i in range(batch):
            seed = np.zeros_like(node.value)
            seed[i] = 1.0
            grads.append(self._backprop(per_example_losses.node_id, seed, order))
        return grads


def backward(tape: Tape, loss: Tensor) -> dict[int, Tensor]:
    return tape.backward(loss)


def per_example_grads(tape: Tape, per_example_losses: Tensor) -> list[dict[int, Tensor]]:
    return tape.per_example_grads(per_example_losses)


# ----------------------------------------------------------------------
# forward implementations (shape checks + value)


def _fwd_add(values, attrs):
    a, b = values
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch("add", a.shape, b.shape) from None
    return a + b


def _fwd_mul(values, attrs):
    a, b = values
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch("mul", a.shape, b.shape) from None
    return a * b


def _fwd_matmul(values, attrs):
    a, b = values
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeMismatch("matmul", a.shape, b.shape) from None
    return a @ b


def _fwd_transpose(values, attrs):
    (a,) = values
    perm = attrs["perm"]
    if sorted(perm) != list(range(a.ndim)):
        raise ShapeMismatch("transpose", a.shape, perm)
    return np.transpose(a, perm)


def _fwd_reshape(values, attrs):
    (a,) = values
    shape = attrs["shape"]
    if int(np.prod(shape)) != a.size:
        raise ShapeMismatch("reshape", a.shape, shape)
    return a.reshape(shape)


def _fwd_slice(values, attrs):
    (a,) = values
    try:
        out = a[attrs["key"]]
    except IndexError:
        raise ShapeMismatch("slice", a.shape, (attrs["key"],)) from None
    return np.array(out, dtype=np.float64)  # contiguous copy, 0-d stays 0-d


def _fwd_softmax(values, attrs):
    (a,) = values
    if a.ndim < 1:
        raise ShapeMismatch("softmax", a.shape)
    z = a - a.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _fwd_layer_norm(values, attrs):
    x, scale, offset = values
    d = x.shape[-1]
    if scale.shape != (d,) or offset.shape != (d,):
        raise ShapeMismatch("layer_norm", x.shape, scale.shape, offset.shape)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + _LN_EPS)
    attrs["_cache"] = (xc, inv)
    return (xc * inv) * scale + offset


def _fwd_embedding(values, attrs):
    (table,) = values
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeMismatch("embedding", table.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise GraphError(
            f"embedding: id out of range [0, {table.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    return table[ids]


def _fwd_cross_entropy(values, attrs):
    (logits,) = values
    targets = attrs["targets"]
    mask = attrs["mask"]
    if logits.ndim != 3 or targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeMismatch("cross_entropy", logits.shape, targets.shape, mask.shape)
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise GraphError(f"cross_entropy: target id outside vocab of size {vocab}")
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise GraphError("cross_entropy: example with no unmasked target positions")
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    nll = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    attrs["_cache"] = (np.exp(logp), counts)
    return (nll * mask).sum(axis=-1) / counts


def _fwd_relu(values, attrs):
    (a,) = values
    return np.maximum(a, 0.0)


def _fwd_sum(values, attrs):
    (a,) = values
    axes = _normalize_axes(attrs.get("axis"), a.ndim)
    return a.sum(axis=axes if axes else None)


def _fwd_scale(values, attrs):
    (a,) = values
    c = attrs["c"]
    if not np.isfinite(c):
        raise ValueError("scale: factor must be finite")
    return a * c


_FORWARD = {
    "add": _fwd_add,
    "mul": _fwd_mul,
    "matmul": _fwd_matmul,
    "transpose": _fwd_transpose,
    "reshape": _fwd_reshape,
    "slice": _fwd_slice,
    "softmax": _fwd_softmax,
    "layer_norm": _fwd_layer_norm,
    "embedding": _fwd_embedding,
    "cross_entropy": _fwd_cross_entropy,
    "relu": _fwd_relu,
    "sum": _fwd_sum,
    "scale": _fwd_scale,
}


# ----------------------------------------------------------------------
# backward implementations: (out_value, parent_values, attrs, grad) -> parent grads


def _bwd_add(out, parents, attrs, g):
    a, b = parents
    return [_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)]


def _bwd_mul(out, parents, attrs, g):
    a, b = parents
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _bwd_matmul(out, parents, attrs, g):
    a, b = parents
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _bwd_transpose(out, parents, attrs, g):
    perm = attrs["perm"]
    inverse = np.argsort(perm)
    return [np.transpose(g, inverse)]


def _bwd_reshape(out, parents, attrs, g):
    (a,) = parents
    return [g.reshape(a.shape)]


def _bwd_slice(out, parents, attrs, g):
    (a,) = parents
    ga = np.zeros_like(a)
    ga[attrs["key"]] = g
    return [ga]


def _bwd_softmax(out, parents, attrs, g):
    dot = (g * out).sum(axis=-1, keepdims=True)
    return [out * (g - dot)]


def _bwd_layer_norm(out, parents, attrs, g):
    x, scale, offset = parents
    xc, inv = attrs["_cache"]
    xhat = xc * inv
    axes = tuple(range(x.ndim - 1))
    gscale = (g * xhat).sum(axis=axes)
    goffset = g.sum(axis=axes)
    gxhat = g * scale
    mean1 = gxhat.mean(axis=-1, keepdims=True)
    mean2 = (gxhat * xhat).mean(axis=-1, keepdims=True)
    gx = inv * (gxhat - mean1 - xhat * mean2)
    return [gx, gscale, goffset]


def _bwd_embedding(out, parents, attrs, g):
    (table,) = parents
    ids = attrs["ids"]
    gt = np.zeros_like(table)
    np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
    return [gt]


def _bwd_cross_entropy(out, parents, attrs, g):
    (logits,) = parents
    targets = attrs["targets"]
    mask = attrs["mask"]
    probs, counts = attrs["_cache"]
    onehot_sub = probs.copy()
    np.subtract.at(onehot_sub, (*np.indices(targets.shape), targets), 1.0)
    w = (g / counts)[:, None] * mask
    return [onehot_sub * w[..., None]]


def _bwd_relu(out, parents, attrs, g):
    (a,) = parents
    return [g * (a > 0.0)]


def _bwd_sum(out, parents, attrs, g):
    (a,) = parents
    axes = _normalize_axes(attrs.get("axis"), a.ndim)
    shape = list(a.shape)
    for ax in axes:
        shape[ax] = 1
    return [np.broadcast_to(np.reshape(g, shape), a.shape).copy()]


def _bwd_scale(out, parents, attrs, g):
    return [g * attrs["c"]]


_BACKWARD = {
    "add": _bwd_add,
    "mul": _bwd_mul,
    "matmul": _bwd_matmul,
    "transpose": _bwd_transpose,
    "reshape": _bwd_reshape,
    "slice": _bwd_slice,
    "softmax": _bwd_softmax,
    "layer_norm": _bwd_layer_norm,
    "embedding": _bwd_embedding,
    "cross_entropy": _bwd_cross_entropy,
    "relu": _bwd_relu,
    "sum": _bwd_sum,
    "scale": _bwd_scale,
}


# ----------------------------------------------------------------------
# example-mixing detection


def _op_mixes(op, values, parent_nodes, attrs, out_shape):
    """True when an op with a batched input combines distinct examples."""
    if op == "sum":
        a = values[0]
        if parent_nodes[0].batched and 0 in _normalize_axes(attrs.get("axis"), a.ndim):
            return True
    elif op == "reshape":
        a = values[0]
        if parent_nodes[0].batched and (not out_shape or out_shape[0] != a.shape[0]):
            return True
    elif op == "transpose":
        if parent_nodes[0].batched and attrs["perm"][0] != 0:
            return True
    elif op == "matmul":
        b_node = parent_nodes[1]
        if b_node.batched and values[1].ndim == 2:
            return True  # batch axis of b is the contracted axis
    elif op in ("softmax", "layer_norm"):
        if parent_nodes[0].batched and values[0].ndim == 1:
            return True  # normalizing over the batch axis itself
    return False
