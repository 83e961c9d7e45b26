"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation records a :class:`Node` on its output.  Nodes
carry a global sequence number, so the tape reachable from a loss can be
replayed in exact reverse execution order by :func:`backward`.  There is no
global tape object: independent forward passes (for instance model replicas
on separate threads) never share mutable state.

All operations act on the trailing (channel) axis; leading axes are treated
as independent positions.  Float64 is the default dtype.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import weakref
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import DimensionError, InputError, VerificationError

MAX_RANK = 4
BN_EPS = 1e-5

_seq = itertools.count()
_local = threading.local()
_faulty_ops: set[str] = set()


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording in the current thread."""
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@contextlib.contextmanager
def inject_gradient_fault(op: str) -> Iterator[None]:
    """Negate the input gradients produced by ``op`` (test hook for gradcheck)."""
    _faulty_ops.add(op)
    try:
        yield
    finally:
        _faulty_ops.discard(op)


class Node:
    __slots__ = ("seq", "op", "inputs", "output", "backward_fn")

    def __init__(self, op, inputs, output, backward_fn):
        self.seq = next(_seq)
        self.op = op
        self.inputs = inputs
        # weak, so a graph is freed by refcounting as soon as its loss is dropped
        self.output = weakref.ref(output)
        self.backward_fn = backward_fn

    def __repr__(self):
        return f"Node({self.op!r}, seq={self.seq})"


class Tensor:
    """A dense real array with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if arr.ndim > MAX_RANK:
            raise DimensionError(f"tensor rank {arr.ndim} exceeds {MAX_RANK}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def node(self) -> Node | None:
        return self._node

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(op: str, out: np.ndarray, inputs: Sequence[Tensor],
             backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out`` in a Tensor and record the node when any input needs grad.

    ``backward_fn`` receives the output gradient and returns one gradient (or
    None) per input, in order.
    """
    result = Tensor(out)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result._node = Node(op, tuple(inputs), result, backward_fn)
    return result


class ComputeTape:
    """The operations reachable from an output, in execution order."""

    def __init__(self, nodes: list[Node]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "ComputeTape":
        seen: dict[int, Node] = {}
        stack = [output._node] if output._node is not None else []
        while stack:
            node = stack.pop()
            if node.seq in seen:
                continue
            seen[node.seq] = node
            for t in node.inputs:
                if t._node is not None and t._node.seq not in seen:
                    stack.append(t._node)
        return cls(sorted(seen.values(), key=lambda n: n.seq))

    def __len__(self):
        return len(self.nodes)

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def backward(loss: Tensor) -> ComputeTape:
    """Populate ``.grad`` on every tensor that requires grad and feeds ``loss``.

    Gradients accumulate into existing buffers; call ``zero_grad`` on
    parameters between steps.  Gradient arrays may share memory with each
    other and must be treated as read-only.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")
    tape = ComputeTape.from_output(loss)
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
    for node in reversed(tape.nodes):
        out = node.output()
        g = None if out is None else out.grad
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        if node.op in _faulty_ops:
            in_grads = [None if gi is None else -gi for gi in in_grads]
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi
    return tape


# ---------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return apply_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return apply_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return apply_op("scale", x.data * c, (x,), lambda g: (g * c,))


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor."""
    return apply_op("sum", np.asarray(x.data.sum()), (x,),
                    lambda g: (np.full_like(x.data, g),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = x.data.reshape(shape)
    return apply_op("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply_op("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or when ``rate`` is 0."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.data.dtype)
    return apply_op("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# channel-axis layers


def _linear(x2d: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    out = x2d @ w
    if b is not None:
        out += b
    return out


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pointwise convolution ``x[..., :] @ weight + bias`` over the last axis."""
    c_in = x.shape[-1]
    if weight.ndim != 2 or weight.shape[0] != c_in:
        raise DimensionError(
            f"conv1x1: input shape {x.shape} incompatible with weight shape {weight.shape}")
    c_out = weight.shape[1]
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"conv1x1: bias shape {bias.shape} != ({c_out},)")
    lead = x.shape[:-1]
    x2d = x.data.reshape(-1, c_in)
    out = _linear(x2d, weight.data, None if bias is None else bias.data)

    def bw(g):
        g2d = g.reshape(-1, c_out)
        gx = (g2d @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2d.T @ g2d if weight.requires_grad else None
        gb = g2d.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("conv1x1", out.reshape(*lead, c_out), inputs, bw)


def group_conv1x1(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Grouped pointwise convolution.

    ``weight`` has shape ``(g, c_in/g, c_out/g)``.  Group ``j`` maps the
    contiguous input channel block ``j`` through ``weight[j]`` into output
    block ``j``.  Groups are computed sequentially in a fixed order, so the
    result does not depend on scheduling.
    """
    if weight.ndim != 3:
        raise DimensionError(f"group_conv1x1: weight must be rank 3, got {weight.shape}")
    g, a, b = weight.shape
    c_in = x.shape[-1]
    if c_in != g * a:
        raise DimensionError(
            f"group_conv1x1: input shape {x.shape} incompatible with weight shape {weight.shape}")
    c_out = g * b
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"group_conv1x1: bias shape {bias.shape} != ({c_out},)")
    lead = x.shape[:-1]
    x2d = x.data.reshape(-1, c_in)
    bd = None if bias is None else bias.data
    blocks = [_linear(x2d[:, j * a:(j + 1) * a], weight.data[j],
                      None if bd is None else bd[j * b:(j + 1) * b]) for j in range(g)]
    out = blocks[0] if g == 1 else np.concatenate(blocks, axis=1)

    def bw(g_out):
        g2d = g_out.reshape(-1, c_out)
        gx = np.empty_like(x2d) if x.requires_grad else None
        gw = np.empty_like(weight.data) if weight.requires_grad else None
        for j in range(g):
            gj = g2d[:, j * b:(j + 1) * b]
            if gx is not None:
                gx[:, j * a:(j + 1) * a] = gj @ weight.data[j].T
            if gw is not None:
                gw[j] = x2d[:, j * a:(j + 1) * a].T @ gj
        gx = None if gx is None else gx.reshape(x.shape)
        if bias is None:
            return gx, gw
        return gx, gw, g2d.sum(axis=0) if bias.requires_grad else None

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return apply_op("group_conv1x1", out.reshape(*lead, c_out), inputs, bw)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, momentum: float, training: bool,
               eps: float = BN_EPS) -> Tensor:
    """Batch normalization over every axis except the last.

    In training mode the running statistics are updated in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} vs channels {c}")
    if not 0.0 < momentum < 1.0:
        raise ValueError(f"batch_norm momentum must lie in (0, 1), got {momentum}")
    x2 = x.data.reshape(-1, c)
    m = x2.shape[0]
    if training:
        mean = x2.sum(axis=0) / m
        xhat = x2 - mean
        var = np.einsum("ij,ij->j", xhat, xhat) / m
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat *= inv_std
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var

        def bw(g):
            g2 = g.reshape(-1, c)
            gb = g2.sum(axis=0)
            gg = np.einsum("ij,ij->j", g2, xhat)
            gx = g2 - gb / m
            gx -= xhat * (gg / m)
            gx *= gamma.data * inv_std
            return gx.reshape(x.shape), gg, gb
    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x2 - running_mean) * inv_std

        def bw(g):
            g2 = g.reshape(-1, c)
            return ((g2 * (gamma.data * inv_std)).reshape(x.shape),
                    np.einsum("ij,ij->j", g2, xhat), g2.sum(axis=0))

    out = xhat * gamma.data
    out += beta.data
    return apply_op("batch_norm", out.reshape(x.shape), (x, gamma, beta), bw)


def maxpool_neighbors(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Max over the second-to-last axis; ties go to the lowest index."""
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"maxpool_neighbors: need at least one neighbor, got {x.shape}")
    arg = x.data.argmax(axis=-2)
    out = np.take_along_axis(x.data, arg[..., None, :], axis=-2)[..., 0, :]

    def bw(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, arg[..., None, :], g[..., None, :], axis=-2)
        return (gx,)

    return apply_op("maxpool_neighbors", out, (x,), bw), arg


def concat_channels(*tensors: Tensor) -> Tensor:
    if not tensors:
        raise ValueError("concat_channels needs at least one tensor")
    lead = tensors[0].shape[:-1]
    for t in tensors[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(
                f"concat_channels: leading dims {t.shape[:-1]} != {lead}")
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([0] + [t.shape[-1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=-1)

    def bw(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return apply_op("concat_channels", out, tensors, bw)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= x.shape[-1]:
        raise DimensionError(f"slice_channels: [{start}, {stop}) out of range for {x.shape}")

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[..., start:stop] = g
        return (gx,)

    return apply_op("slice_channels", x.data[..., start:stop].copy(), (x,), bw)


def permute_channels(x: Tensor, perm: np.ndarray) -> Tensor:
    """``out[..., i] = x[..., perm[i]]`` for a permutation ``perm``."""
    perm = np.asarray(perm)
    if perm.shape != (x.shape[-1],):
        raise DimensionError(f"permute_channels: perm length {perm.shape} vs {x.shape}")
    inv = np.argsort(perm)
    return apply_op("permute_channels", x.data[..., perm], (x,), lambda g: (g[..., inv],))


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(
            f"softmax_cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n, n_cls = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise InputError(f"labels must lie in [0, {n_cls}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = (lse - z[rows, labels]).mean()

    def bw(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return apply_op("softmax_cross_entropy", np.asarray(loss), (logits,), bw)


# ---------------------------------------------------------------------------
# verification


def finite_difference_check(fn: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6,
                            return_worst: bool = False, coords: np.ndarray | None = None):
    """Max relative error between backprop and central differences of ``fn`` at ``x``.

    The error per coordinate is ``|a - d| / max(|a|, |d|, 1e-8)``.  ``fn`` is
    evaluated twice at ``x`` first; a mismatch raises VerificationError.
    ``x.data`` is perturbed in place and restored afterwards.  ``coords``
    (flat indices) restricts the comparison to a subset, for large tensors.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.requires_grad = True
    x.grad = None
    loss = fn(x)
    with no_grad():
        again = fn(x)
    if not np.array_equal(loss.data, again.data):
        raise VerificationError("fn is not deterministic: repeated evaluation differs")
    backward(loss)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.unique(np.asarray(coords, dtype=np.int64))
    numeric = np.empty(idx.size)
    with no_grad():
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(x).data)
            flat[i] = orig - eps
            fm = float(fn(x).data)
            flat[i] = orig
            numeric[j] = (fp - fm) / (2.0 * eps)
    a = analytic.reshape(-1)[idx]
    rel = np.abs(a - numeric) / np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-8)
    worst = int(idx[rel.argmax()]) if rel.size else 0
    err = float(rel.max()) if rel.size else 0.0
    if return_worst:
        return err, np.unravel_index(worst, x.shape) if rel.size else ()
    return err
