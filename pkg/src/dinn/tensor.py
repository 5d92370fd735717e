"""Dense NHWC tensors with tape-free reverse-mode autodiff.

Every op returns a new :class:`Tensor` holding references to its inputs and
a closure that maps the output gradient to input gradients.  :func:`backward`
orders the reachable nodes topologically (a :class:`Graph`) and sweeps them in
reverse.  Spatial ops take either a single ``H x W x C`` image or a batch
``N x H x W x C``; dense ops take ``n`` or ``N x n``.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    pass


@contextlib.contextmanager
def no_grad():
    """Build no graph inside the block (evaluation only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "op", "id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn = None
        self.op = "leaf"
        self.id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    out.op = op
    return out


# ---------------------------------------------------------------------------
# graph + backward


@dataclass(frozen=True)
class OpRecord:
    op: str
    inputs: tuple[int, ...]
    output: int


class Graph:
    """Topologically ordered view of everything ``loss`` depends on."""

    def __init__(self, loss: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node.parents:
                if p.id not in seen:
                    stack.append((p, False))
        self.nodes = order
        self.loss = loss

    @property
    def records(self) -> list[OpRecord]:
        return [OpRecord(n.op, tuple(p.id for p in n.parents), n.id) for n in self.nodes]

    def is_topological(self) -> bool:
        pos = {n.id: i for i, n in enumerate(self.nodes)}
        return all(pos[p.id] < pos[n.id] for n in self.nodes for p in n.parents)


def backward(
    loss: Tensor,
    params: Iterable[Tensor] | None = None,
    graph: Graph | None = None,
    accumulate: bool = True,
) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. ``params``.

    With ``params=None`` every leaf that requires grad is a target.  Targets
    the loss does not depend on get exact zeros.  When ``accumulate`` is true
    the results are also written to each target's ``.grad`` (overwriting).
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    graph = graph if graph is not None else Graph(loss)
    if params is None:
        targets = [n for n in graph.nodes if not n.parents and n.requires_grad]
    else:
        targets = list(params)
    target_ids = {t.id for t in targets}

    relevant: set[int] = set()
    for node in graph.nodes:
        if node.id in target_ids or any(p.id in relevant for p in node.parents):
            relevant.add(node.id)

    grads: dict[int, np.ndarray] = {}
    if loss.id in relevant:
        grads[loss.id] = np.ones_like(loss.data)
    for node in reversed(graph.nodes):
        g = grads.get(node.id)
        if g is None or node.backward_fn is None:
            continue
        needs = tuple(p.id in relevant and p.requires_grad for p in node.parents)
        if not any(needs):
            continue
        in_grads = node.backward_fn(g, needs)
        for p, need, pg in zip(node.parents, needs, in_grads):
            if not need or pg is None:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
        if node.id not in target_ids:
            del grads[node.id]

    out = []
    for t in targets:
        g = grads.get(t.id)
        g = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.dtype).reshape(t.shape)
        if accumulate:
            t.grad = g
        out.append(g)
    return out


def finite_diff_grad(
    f: Callable[[Tensor], float],
    theta: Tensor,
    eps: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> np.ndarray:
    """Central-difference gradient of ``f`` at ``theta``.

    ``theta.data`` is perturbed in place and restored.  With ``indices`` only
    those flat coordinates are probed; the result then has ``len(indices)``
    entries instead of ``theta``'s shape.
    """
    flat = theta.data.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    out = np.empty(len(coords), dtype=np.float64)
    for i, c in enumerate(coords):
        orig = flat[c]
        flat[c] = orig + eps
        fp = float(f(theta))
        flat[c] = orig - eps
        fm = float(f(theta))
        flat[c] = orig
        out[i] = (fp - fm) / (2 * eps)
    return out.reshape(theta.shape) if indices is None else out


# ---------------------------------------------------------------------------
# elementwise / reductions


def _same_shape(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return _make(a.data + b, (a,), lambda g, needs: (g,), "add_scalar")
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g, needs: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        return add(a, -b)
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g, needs: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor) and np.ndim(b) == 0:
        c = float(b)
        return _make(a.data * c, (a,), lambda g, needs: (g * c,), "mul_scalar")
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g, needs: (g * b.data if needs[0] else None, g * a.data if needs[1] else None),
        "mul",
    )


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g, needs: (2.0 * x.data * g,), "square")


def tsum(x: Tensor) -> Tensor:
    return _make(
        np.asarray(x.data.sum()),
        (x,),
        lambda g, needs: (np.broadcast_to(g, x.shape).copy(),),
        "sum",
    )


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(
        np.asarray(x.data.mean()),
        (x,),
        lambda g, needs: (np.full(x.shape, g / n, dtype=x.dtype),),
        "mean",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    return _make(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    """Row-major flatten of everything after the batch axis."""
    if x.ndim <= 2:
        return x
    return reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))


# ---------------------------------------------------------------------------
# activations


def relu(x: Tensor) -> Tensor:
    mask = x.data >= 0  # slope 1 at the kink
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g, needs: (g * mask,), "relu")


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0 < alpha < 1:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    slope = np.where(x.data >= 0, 1.0, alpha).astype(x.dtype)
    return _make(x.data * slope, (x,), lambda g, needs: (g * slope,), "leaky_relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids exp overflow
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make(s, (x,), lambda g, needs: (g * s * (1.0 - s),), "sigmoid")


def activation(x: Tensor, kind: str, alpha: float = 0.2) -> Tensor:
    kind = kind.lower()
    if kind == "relu":
        return relu(x)
    if kind in ("lrelu", "leaky_relu"):
        return leaky_relu(x, alpha)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g, needs):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make(s, (x,), bw, "softmax")


# ---------------------------------------------------------------------------
# layers


def _batched(x: Tensor, rank: int, fn):
    """Run a batched op on an unbatched input by adding/removing axis 0."""
    if x.ndim == rank - 1:
        out = fn(reshape(x, (1,) + x.shape))
        return reshape(out, out.shape[1:])
    if x.ndim != rank:
        raise ShapeError(f"expected rank {rank - 1} or {rank} input, got shape {x.shape}")
    return fn(x)


def same_padding(size: int, k: int, s: int) -> tuple[int, int, int]:
    """(out, pad_before, pad_after) with out = ceil(size / s); extra pad goes after."""
    out = -(-size // s)
    total = max((out - 1) * s + k - size, 0)
    return out, total // 2, total - total // 2


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride=(1, 1)) -> Tensor:
    """Cross-correlation, NHWC, kernel ``kh x kw x C_in x C_out``, ceil-same padding."""
    if isinstance(stride, int):
        stride = (stride, stride)
    kh, kw, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input has {x.shape[-1]} channels but kernel expects C_in={cin}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    return _batched(x, 4, lambda xb: _conv2d(xb, kernel, bias, stride))


def _conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride) -> Tensor:
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    sh, sw = stride
    ho, pt, pb = same_padding(h, kh, sh)
    wo, pl, pr = same_padding(w, kw, sw)
    taps = [(dy, dx) for dy in range(kh) for dx in range(kw)]

    def window(a, dy, dx):
        # positions read by tap (dy, dx) for every output pixel
        return a[:, dy : dy + sh * (ho - 1) + 1 : sh, dx : dx + sw * (wo - 1) + 1 : sw]

    if kh == kw == 1 and sh == sw == 1:
        xp = x.data
        out = (xp.reshape(-1, cin) @ kernel.data[0, 0]).reshape(n, ho, wo, cout)
    else:
        xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
        # one GEMM against all taps, then shifted accumulation
        wcat = kernel.data.transpose(2, 0, 1, 3).reshape(cin, kh * kw * cout)
        resp = (xp.reshape(-1, cin) @ wcat).reshape(xp.shape[:3] + (kh * kw, cout))
        out = np.zeros((n, ho, wo, cout), dtype=x.dtype)
        for t, (dy, dx) in enumerate(taps):
            out += window(resp[..., t, :], dy, dx)
    out += bias.data

    def bw(g, needs):
        g2 = g.reshape(-1, cout)
        gx = gk = gb = None
        if kh == kw == 1 and sh == sw == 1:
            if needs[0]:
                gx = (g2 @ kernel.data[0, 0].T).reshape(x.shape)
            if needs[1]:
                gk = (xp.reshape(-1, cin).T @ g2).reshape(kernel.shape)
        elif needs[0] or needs[1]:
            # stack[q, t] = g[q - offset_t]: both gradients are GEMMs against it
            stack = np.zeros(xp.shape[:3] + (kh * kw, cout), dtype=g.dtype)
            for t, (dy, dx) in enumerate(taps):
                window(stack[..., t, :], dy, dx)[...] = g
            stack = stack.reshape(-1, kh * kw * cout)
            if needs[0]:
                wstack = kernel.data.transpose(0, 1, 3, 2).reshape(kh * kw * cout, cin)
                gxp = (stack @ wstack).reshape(xp.shape)
                gx = gxp[:, pt : pt + h, pl : pl + w, :]
            if needs[1]:
                gk = (xp.reshape(-1, cin).T @ stack).reshape(cin, kh, kw, cout).transpose(1, 2, 0, 3)
        if needs[2]:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    return _make(out, (x, kernel, bias), bw, "conv2d")


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """``out_j = sum_i x_i W_ij + b_j``.

    A 1-D input is a single sample; otherwise axis 0 is the batch and the
    remaining axes are flattened row-major.
    """
    n, m = weights.shape
    if bias.shape != (m,):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({m},)")
    unbatched = x.ndim == 1
    xb = reshape(x, (1, x.shape[0])) if unbatched else flatten(x)
    if xb.shape[1] != n:
        raise ShapeError(f"dense: input has {xb.shape[1]} features, weights expect {n}")

    def bw(g, needs):
        return (
            g @ weights.data.T if needs[0] else None,
            xb.data.T @ g if needs[1] else None,
            g.sum(axis=0) if needs[2] else None,
        )

    out = _make(xb.data @ weights.data + bias.data, (xb, weights, bias), bw, "dense")
    return reshape(out, (m,)) if unbatched else out


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) * n_in) // n_out


def resize_nearest(x: Tensor, target: tuple[int, int]) -> Tensor:
    """Nearest-neighbour upscaling, ``out[i, j] = in[floor(i H/H'), floor(j W/W')]``."""
    return _batched(x, 4, lambda xb: _resize_nearest(xb, tuple(target)))


def _resize_nearest(x: Tensor, target) -> Tensor:
    _, h, w, _ = x.shape
    th, tw = target
    if th < h or tw < w:
        raise ShapeError(f"resize_nearest only upsamples: {h}x{w} -> {th}x{tw}")
    ri, ci = _nearest_index(h, th), _nearest_index(w, tw)
    r_start = np.searchsorted(ri, np.arange(h))
    c_start = np.searchsorted(ci, np.arange(w))
    out = x.data[:, ri][:, :, ci]

    def bw(g, needs):
        n, _, _, c = g.shape
        if th % h == 0:
            g = g.reshape(n, h, th // h, tw, c).sum(axis=2)
        else:
            g = np.add.reduceat(g, r_start, axis=1)
        if tw % w == 0:
            return (g.reshape(n, h, w, tw // w, c).sum(axis=3),)
        return (np.add.reduceat(g, c_start, axis=2),)

    return _make(out, (x,), bw, "resize_nearest")


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: ``H x W x C -> C``."""
    return _batched(x, 4, _gap)


def _gap(x: Tensor) -> Tensor:
    n, h, w, c = x.shape
    scale = 1.0 / (h * w)

    def bw(g, needs):
        return (np.broadcast_to(g[:, None, None, :] * scale, x.shape).astype(x.dtype),)

    return _make(x.data.mean(axis=(1, 2)), (x,), bw, "global_avg_pool")


def channel_scale(x: Tensor, gate: Tensor) -> Tensor:
    """``out[..., c] = x[..., c] * gate[c]``, gate shaped like the pooled input."""
    if gate.shape != x.shape[:-3] + x.shape[-1:]:
        raise ShapeError(f"channel_scale: gate {gate.shape} does not match input {x.shape}")
    gb = gate.data[..., None, None, :]

    def bw(g, needs):
        return (
            g * gb if needs[0] else None,
            (g * x.data).sum(axis=(-3, -2)) if needs[1] else None,
        )

    return _make(x.data * gb, (x, gate), bw, "channel_scale")


def binary_cross_entropy(p: Tensor, target, eps: float = 1e-7) -> Tensor:
    """``(1/M) sum [t ln(1/p) + (1-t) ln(1/(1-p))]`` over all but the batch axis.

    ``p`` is clipped to ``[eps, 1 - eps]``; clipped entries get zero gradient.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=p.dtype)
    if t.shape != p.shape:
        raise ShapeError(f"binary_cross_entropy: prediction {p.shape} vs target {t.shape}")
    m = p.shape[0] if p.ndim > 1 else 1
    pc = np.clip(p.data, eps, 1.0 - eps)
    val = -(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).sum() / m
    inside = (p.data >= eps) & (p.data <= 1.0 - eps)

    def bw(g, needs):
        return (g * inside * ((pc - t) / (pc * (1.0 - pc))) / m,)

    return _make(np.asarray(val, dtype=p.dtype), (p,), bw, "bce")
