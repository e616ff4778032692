"""Reverse-mode automatic differentiation on float64 numpy arrays.

A :class:`Graph` is a static tape of primitive operations built once through
the :class:`Var` wrapper API and evaluated many times with different leaf
bindings.  Everything runs in 64-bit precision so finite-difference gradient
checks are meaningful.

Two conventions make the engine batch-safe:

* every primitive treats any number of *leading* axes as batch axes and only
  interprets trailing axes (reductions are expressed as "reduce the last k
  axes", reshapes replace the last k axes, slices address axes from the end);
* binary elementwise ops broadcast, and their backward pass sums gradients
  over broadcast axes.

This lets the same graph evaluate a single sample, a training batch, or a
stack of finite-difference perturbations without being rebuilt.
"""

from __future__ import annotations

import math
from typing import Callable, Optional, Sequence

import numpy as np

from . import rotation


class GraphError(Exception):
    """Raised when graph construction or evaluation fails; names the node."""

    def __init__(self, node: Optional["Node"], message: str):
        self.node_name = node.name if node is not None else "<graph>"
        super().__init__(f"{self.node_name}: {message}")


def as_tensor(value) -> np.ndarray:
    """Coerce to a C-contiguous float64 array (the engine's tensor type)."""
    arr = np.ascontiguousarray(value, dtype=np.float64)
    return arr


class Node:
    __slots__ = ("idx", "op", "inputs", "attrs", "name")

    def __init__(self, idx: int, op: str, inputs: tuple, attrs: dict, name: str):
        self.idx = idx
        self.op = op
        self.inputs = inputs  # indices of input nodes
        self.attrs = attrs
        self.name = name

    def __repr__(self):
        return f"Node({self.idx}, {self.op!r}, name={self.name!r})"


class Var:
    """Symbolic handle to a node of a Graph; supports operator overloading."""

    __slots__ = ("graph", "idx")

    def __init__(self, graph: "Graph", idx: int):
        self.graph = graph
        self.idx = idx

    # -- arithmetic sugar ------------------------------------------------
    def _coerce(self, other) -> "Var":
        if isinstance(other, Var):
            if other.graph is not self.graph:
                raise GraphError(None, "cannot mix nodes from different graphs")
            return other
        return self.graph.constant(other)

    def __add__(self, other):
        return self.graph._prim("add", (self, self._coerce(other)))

    def __radd__(self, other):
        return self._coerce(other).__add__(self)

    def __sub__(self, other):
        return self.graph._prim("sub", (self, self._coerce(other)))

    def __rsub__(self, other):
        return self._coerce(other).__sub__(self)

    def __mul__(self, other):
        return self.graph._prim("mul", (self, self._coerce(other)))

    def __rmul__(self, other):
        return self._coerce(other).__mul__(self)

    def __truediv__(self, other):
        return self.graph._prim("div", (self, self._coerce(other)))

    def __rtruediv__(self, other):
        return self._coerce(other).__truediv__(self)

    def __neg__(self):
        return self.graph._prim("neg", (self,))

    def __matmul__(self, other):
        return self.graph.matmul(self, self._coerce(other))

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        return self.graph._prim("powc", (self,), p=float(exponent))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if keep:
        grad = grad.sum(axis=keep, keepdims=True)
    return grad


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Graph:
    """Static computation tape: ordered primitive nodes over named leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}  # name -> node idx
        self.outputs: dict[str, int] = {}
        self._consts: dict[int, np.ndarray] = {}

    # -- construction ----------------------------------------------------
    def _add_node(self, op: str, inputs: tuple, name: Optional[str] = None, **attrs) -> Var:
        idx = len(self.nodes)
        node = Node(idx, op, tuple(v.idx for v in inputs), attrs, name or f"{op}_{idx}")
        self.nodes.append(node)
        return Var(self, idx)

    def _prim(self, op: str, inputs: tuple, name: Optional[str] = None, **attrs) -> Var:
        return self._add_node(op, inputs, name=name, **attrs)

    def leaf(self, name: str, shape: Sequence[int] = ()) -> Var:
        """Declare a named leaf (input or trainable parameter)."""
        if name in self.leaves:
            raise GraphError(None, f"duplicate leaf name {name!r}")
        var = self._add_node("leaf", (), name=name, shape=tuple(shape))
        self.leaves[name] = var.idx
        return var

    def constant(self, value) -> Var:
        var = self._add_node("const", ())
        self._consts[var.idx] = as_tensor(value)
        return var

    def add_output(self, name: str, var: Var) -> None:
        self.outputs[name] = var.idx

    # -- primitives ------------------------------------------------------
    def matmul(self, a: Var, b: Var, name=None) -> Var:
        return self._prim("matmul", (a, b), name=name)

    def einsum(self, spec: str, a: Var, b: Var, name=None) -> Var:
        """Two-operand einsum.  Each operand's indices must appear in the
        output or the other operand, and ellipsis axes must match exactly."""
        return self._prim("einsum", (a, b), name=name, spec=spec)

    def conv1d(self, x: Var, w: Var, stride: int = 1, name=None) -> Var:
        """Temporal convolution over axis -2: x (..., L, Cin), w (K, Cin, Cout).

        Same-style padding (total K-1) so L_out = ceil(L / stride).
        """
        return self._prim("conv1d", (x, w), name=name, stride=int(stride))

    def layernorm(self, x: Var, eps: float = 1e-5, name=None) -> Var:
        return self._prim("layernorm", (x,), name=name, eps=float(eps))

    def softmax(self, x: Var, name=None) -> Var:
        return self._prim("softmax", (x,), name=name)

    def sigmoid(self, x: Var) -> Var:
        return self._prim("sigmoid", (x,))

    def silu(self, x: Var) -> Var:
        return self._prim("silu", (x,))

    def gelu(self, x: Var) -> Var:
        return self._prim("gelu", (x,))

    def tanh(self, x: Var) -> Var:
        return self._prim("tanh", (x,))

    def exp(self, x: Var) -> Var:
        return self._prim("exp", (x,))

    def log(self, x: Var) -> Var:
        return self._prim("log", (x,))

    def sqrt(self, x: Var) -> Var:
        return self._prim("sqrt", (x,))

    def sin(self, x: Var) -> Var:
        return self._prim("sin", (x,))

    def cos(self, x: Var) -> Var:
        return self._prim("cos", (x,))

    def rot_sin_ratio(self, s: Var) -> Var:
        """sin(sqrt(s))/sqrt(s) of the squared rotation angle; smooth at 0."""
        return self._prim("rot_sin_ratio", (s,))

    def rot_versine_ratio(self, s: Var) -> Var:
        """(1-cos(sqrt(s)))/s of the squared rotation angle; smooth at 0."""
        return self._prim("rot_versine_ratio", (s,))

    def concat(self, parts: Sequence[Var], name=None) -> Var:
        """Concatenate along the last axis."""
        return self._prim("concat", tuple(parts), name=name)

    def sum_last(self, x: Var, k: int, name=None) -> Var:
        return self._prim("sum_last", (x,), name=name, k=int(k))

    def mean_last(self, x: Var, k: int, name=None) -> Var:
        return self._prim("mean_last", (x,), name=name, k=int(k))

    def reshape_last(self, x: Var, k: int, new_dims: Sequence[int], name=None) -> Var:
        """Replace the last k axes by new_dims (sizes must agree)."""
        return self._prim("reshape_last", (x,), name=name, k=int(k), dims=tuple(int(d) for d in new_dims))

    def slice_axis(self, x: Var, axis_from_end: int, start: int, stop: int, name=None) -> Var:
        """Slice [start:stop) along a trailing axis given as a negative index."""
        if axis_from_end >= 0:
            raise GraphError(None, "slice_axis expects a negative axis index")
        return self._prim("slice_axis", (x,), name=name, axis=int(axis_from_end), start=int(start), stop=int(stop))

    def repeat_axis(self, x: Var, axis_from_end: int, reps: int, name=None) -> Var:
        """Repeat each entry `reps` times along a trailing axis (nearest upsample)."""
        if axis_from_end >= 0:
            raise GraphError(None, "repeat_axis expects a negative axis index")
        return self._prim("repeat_axis", (x,), name=name, axis=int(axis_from_end), reps=int(reps))

    def reverse_axis(self, x: Var, axis_from_end: int, name=None) -> Var:
        """Reverse a trailing axis (used to swap the two participant streams)."""
        if axis_from_end >= 0:
            raise GraphError(None, "reverse_axis expects a negative axis index")
        return self._prim("reverse_axis", (x,), name=name, axis=int(axis_from_end))

    # -- composites ------------------------------------------------------
    def cosine_between(self, a: Var, b: Var, eps: float = 1e-12) -> Var:
        """Cosine of the angle between vectors along the last axis."""
        dot = self.sum_last(a * b, 1)
        na = self.sqrt(self.sum_last(a * a, 1) + self.constant(eps))
        nb = self.sqrt(self.sum_last(b * b, 1) + self.constant(eps))
        return dot / (na * nb)

    def attention(self, q: Var, k: Var, v: Var, heads: int, head_dim: int) -> Var:
        """Multi-head softmax attention over axis -2 (time).

        q, k, v: (..., L, H*D).  Returns (..., L, H*D).  No output projection.
        """
        def split(x):
            return self.reshape_last(x, 1, (heads, head_dim))  # (..., L, H, D)

        qh, kh, vh = split(q), split(k), split(v)
        scores = self.einsum("...lhd,...mhd->...hlm", qh, kh) * self.constant(1.0 / math.sqrt(head_dim))
        attn = self.softmax(scores)
        out = self.einsum("...hlm,...mhd->...lhd", attn, vh)
        return self.reshape_last(out, 2, (heads * head_dim,))

    # -- evaluation -------------------------------------------------------
    def _forward_values(self, bindings: dict) -> list:
        missing = [n for n in self.leaves if n not in bindings]
        if missing:
            raise GraphError(None, f"missing leaf bindings: {missing}")
        values: list = [None] * len(self.nodes)
        for node in self.nodes:
            try:
                values[node.idx] = _forward_op(node, values, self, bindings)
            except GraphError:
                raise
            except Exception as exc:  # numpy shape errors etc.
                raise GraphError(node, f"{type(exc).__name__}: {exc}") from exc
        return values

    def eval(self, bindings: dict) -> dict:
        """Evaluate all declared outputs for the given leaf bindings."""
        values = self._forward_values({k: as_tensor(v) for k, v in bindings.items()})
        return {name: values[idx] for name, idx in self.outputs.items()}

    def eval_var(self, var: Var, bindings: dict) -> np.ndarray:
        values = self._forward_values({k: as_tensor(v) for k, v in bindings.items()})
        return values[var.idx]

    def backward(self, output: Var, bindings: dict, leaf_names: Optional[Sequence[str]] = None):
        """Gradients of a scalar output with respect to (selected) leaves.

        Returns (output_value, {leaf_name: gradient array}).
        """
        bindings = {k: as_tensor(v) for k, v in bindings.items()}
        values = self._forward_values(bindings)
        out_val = values[output.idx]
        if np.shape(out_val) != ():
            raise GraphError(self.nodes[output.idx], f"backward requires a scalar output, got shape {np.shape(out_val)}")
        wanted = set(leaf_names) if leaf_names is not None else set(self.leaves)
        grads: list = [None] * len(self.nodes)
        grads[output.idx] = np.array(1.0)
        for node in self.nodes[output.idx:: -1]:
            g = grads[node.idx]
            if g is None or node.op in ("leaf", "const"):
                continue
            try:
                input_grads = _backward_op(node, g, values, self, bindings)
            except GraphError:
                raise
            except Exception as exc:
                raise GraphError(node, f"backward {type(exc).__name__}: {exc}") from exc
            for inp_idx, ig in zip(node.inputs, input_grads):
                if ig is None:
                    continue
                if grads[inp_idx] is None:
                    grads[inp_idx] = ig
                else:
                    grads[inp_idx] = grads[inp_idx] + ig
        result = {}
        for name in self.leaves:
            if name not in wanted:
                continue
            idx = self.leaves[name]
            g = grads[idx]
            if g is None:
                g = np.zeros_like(bindings[name])
            result[name] = np.broadcast_to(g, bindings[name].shape).astype(np.float64, copy=True) if g.shape != bindings[name].shape else g
        return float(out_val), result


def forward_eval(graph: Graph, inputs: dict) -> dict:
    """Evaluate a graph's named outputs; pure and deterministic."""
    return graph.eval(inputs)


def backward(graph: Graph, output: Var, inputs: dict, leaf_names=None):
    """Gradients of the scalar `output` for every (selected) leaf."""
    return graph.backward(output, inputs, leaf_names)


# ---------------------------------------------------------------------------
# primitive forward / backward implementations
# ---------------------------------------------------------------------------

def _conv1d_geometry(L: int, K: int, stride: int):
    pad_l = (K - 1) // 2
    pad_r = K - 1 - pad_l
    L_out = (L + K - 1 - K) // stride + 1
    return pad_l, pad_r, L_out


def _conv1d_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    K, Cin, Cout = w.shape
    if x.shape[-1] != Cin:
        raise ValueError(f"conv1d channel mismatch: input {x.shape[-1]}, weight {Cin}")
    L = x.shape[-2]
    pad_l, pad_r, L_out = _conv1d_geometry(L, K, stride)
    pad = [(0, 0)] * (x.ndim - 2) + [(pad_l, pad_r), (0, 0)]
    xp = np.pad(x, pad)
    out = None
    for k in range(K):
        sl = xp[..., k: k + stride * (L_out - 1) + 1: stride, :]
        term = sl @ w[k]
        out = term if out is None else out + term
    return out


def _conv1d_backward(g: np.ndarray, x: np.ndarray, w: np.ndarray, stride: int):
    K, Cin, Cout = w.shape
    L = x.shape[-2]
    pad_l, pad_r, L_out = _conv1d_geometry(L, K, stride)
    pad = [(0, 0)] * (x.ndim - 2) + [(pad_l, pad_r), (0, 0)]
    xp = np.pad(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    g2 = g.reshape(-1, Cout)
    for k in range(K):
        sl = xp[..., k: k + stride * (L_out - 1) + 1: stride, :]
        gw[k] = sl.reshape(-1, Cin).T @ g2
        gxp[..., k: k + stride * (L_out - 1) + 1: stride, :] += g @ w[k].T
    gx = gxp[..., pad_l: pad_l + L, :]
    return gx, gw


def _einsum_grad_spec(spec: str):
    lhs, out = spec.split("->")
    a_spec, b_spec = lhs.split(",")
    return a_spec, b_spec, out


def _forward_op(node: Node, values: list, graph: Graph, bindings: dict) -> np.ndarray:
    op = node.op
    a = values[node.inputs[0]] if node.inputs else None
    b = values[node.inputs[1]] if len(node.inputs) > 1 else None
    if op == "leaf":
        v = bindings[node.name]
        shape = node.attrs.get("shape")
        if shape and tuple(v.shape[-len(shape):]) != tuple(shape) and tuple(v.shape) != tuple(shape):
            raise GraphError(node, f"leaf bound with shape {v.shape}, declared {shape}")
        return v
    if op == "const":
        return graph._consts[node.idx]
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        return a / b
    if op == "neg":
        return -a
    if op == "powc":
        return a ** node.attrs["p"]
    if op == "exp":
        return np.exp(a)
    if op == "log":
        return np.log(a)
    if op == "sqrt":
        return np.sqrt(a)
    if op == "sin":
        return np.sin(a)
    if op == "cos":
        return np.cos(a)
    if op == "tanh":
        return np.tanh(a)
    if op == "sigmoid":
        return _sigmoid(a)
    if op == "silu":
        return a * _sigmoid(a)
    if op == "gelu":
        return 0.5 * a * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (a + 0.044715 * a ** 3)))
    if op == "rot_sin_ratio":
        return rotation.sin_ratio(a)
    if op == "rot_versine_ratio":
        return rotation.versine_ratio(a)
    if op == "matmul":
        return a @ b
    if op == "einsum":
        return np.einsum(node.attrs["spec"], a, b)
    if op == "conv1d":
        return _conv1d_forward(a, b, node.attrs["stride"])
    if op == "layernorm":
        mu = a.mean(axis=-1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
        return (a - mu) / np.sqrt(var + node.attrs["eps"])
    if op == "softmax":
        m = a.max(axis=-1, keepdims=True)
        e = np.exp(a - m)
        return e / e.sum(axis=-1, keepdims=True)
    if op == "concat":
        return np.concatenate([values[i] for i in node.inputs], axis=-1)
    if op == "sum_last":
        k = node.attrs["k"]
        return a.sum(axis=tuple(range(-k, 0)))
    if op == "mean_last":
        k = node.attrs["k"]
        return a.mean(axis=tuple(range(-k, 0)))
    if op == "reshape_last":
        k, dims = node.attrs["k"], node.attrs["dims"]
        lead = a.shape[: a.ndim - k]
        return a.reshape(lead + dims)
    if op == "slice_axis":
        ax, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, stop)
        return a[tuple(sl)]
    if op == "repeat_axis":
        return np.repeat(a, node.attrs["reps"], axis=node.attrs["axis"])
    if op == "reverse_axis":
        return np.flip(a, axis=node.attrs["axis"])
    raise GraphError(node, f"unknown op {op!r}")


def _backward_op(node: Node, g: np.ndarray, values: list, graph: Graph, bindings: dict):
    op = node.op
    a = values[node.inputs[0]] if node.inputs else None
    b = values[node.inputs[1]] if len(node.inputs) > 1 else None
    y = values[node.idx]
    if op == "add":
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)
    if op == "sub":
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)
    if op == "mul":
        return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)
    if op == "div":
        return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)
    if op == "neg":
        return (-g,)
    if op == "powc":
        p = node.attrs["p"]
        return (g * p * a ** (p - 1),)
    if op == "exp":
        return (g * y,)
    if op == "log":
        return (g / a,)
    if op == "sqrt":
        return (g * 0.5 / y,)
    if op == "sin":
        return (g * np.cos(a),)
    if op == "cos":
        return (-g * np.sin(a),)
    if op == "tanh":
        return (g * (1.0 - y * y),)
    if op == "sigmoid":
        return (g * y * (1.0 - y),)
    if op == "silu":
        s = _sigmoid(a)
        return (g * (s + a * s * (1.0 - s)),)
    if op == "gelu":
        c = math.sqrt(2.0 / math.pi)
        u = c * (a + 0.044715 * a ** 3)
        t = np.tanh(u)
        du = c * (1.0 + 3 * 0.044715 * a ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * du),)
    if op == "rot_sin_ratio":
        return (g * rotation.sin_ratio_grad(a),)
    if op == "rot_versine_ratio":
        return (g * rotation.versine_ratio_grad(a),)
    if op == "matmul":
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)
    if op == "einsum":
        a_spec, b_spec, out = _einsum_grad_spec(node.attrs["spec"])
        ga = np.einsum(f"{out},{b_spec}->{a_spec}", g, b)
        gb = np.einsum(f"{out},{a_spec}->{b_spec}", g, a)
        return ga, gb
    if op == "conv1d":
        return _conv1d_backward(g, a, b, node.attrs["stride"])
    if op == "layernorm":
        eps = node.attrs["eps"]
        mu = a.mean(axis=-1, keepdims=True)
        var = ((a - mu) ** 2).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + eps)
        gm = g.mean(axis=-1, keepdims=True)
        gym = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gym),)
    if op == "softmax":
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)
    if op == "concat":
        grads = []
        ofs = 0
        for i in node.inputs:
            w = values[i].shape[-1]
            part = g[..., ofs: ofs + w]
            grads.append(_unbroadcast(part, values[i].shape))
            ofs += w
        return tuple(grads)
    if op == "sum_last":
        k = node.attrs["k"]
        return (np.broadcast_to(g.reshape(g.shape + (1,) * k), a.shape).copy(),)
    if op == "mean_last":
        k = node.attrs["k"]
        n = int(np.prod(a.shape[-k:]))
        return (np.broadcast_to((g / n).reshape(g.shape + (1,) * k), a.shape).copy(),)
    if op == "reshape_last":
        return (g.reshape(a.shape),)
    if op == "slice_axis":
        ax, start, stop = node.attrs["axis"], node.attrs["start"], node.attrs["stop"]
        ga = np.zeros_like(a)
        sl = [slice(None)] * a.ndim
        sl[ax] = slice(start, stop)
        ga[tuple(sl)] = g
        return (ga,)
    if op == "repeat_axis":
        ax, reps = node.attrs["axis"], node.attrs["reps"]
        axis = g.ndim + ax
        new_shape = g.shape[:axis] + (g.shape[axis] // reps, reps) + g.shape[axis + 1:]
        return (g.reshape(new_shape).sum(axis=axis + 1),)
    if op == "reverse_axis":
        return (np.flip(g, axis=node.attrs["axis"]),)
    raise GraphError(node, f"no gradient for op {op!r}")
