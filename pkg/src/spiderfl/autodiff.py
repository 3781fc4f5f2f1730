"""Dense tensors with reverse-mode automatic differentiation.

Only the primitives needed by the search space and the trainer are provided.
Arrays are float32 by default; a float64 array passed in stays float64, which
is what the finite-difference tests rely on.

Graph recording is implicit: every primitive applied to a tensor that requires
gradients stores its parents and a closure computing the vector-Jacobian
product. :func:`backward` linearizes the graph into a :class:`Tape` and replays
it in reverse.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DimensionError, NumericError, UsageError

DTYPE = np.float32

BackwardFn = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    """An n-dimensional array plus the bookkeeping needed for backprop."""

    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_consumed", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(_as_tensor(other, self.dtype), -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def zeros(shape, dtype=DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite output in {op}")


def _result(op: str, out: np.ndarray, parents: tuple[Tensor, ...], backward_fn: BackwardFn) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and structural primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return _result(
        "add",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        ),
    )


def add_n(tensors: Sequence[Tensor]) -> Tensor:
    """Sum of equally shaped tensors as a single graph node."""
    if not tensors:
        raise UsageError("add_n needs at least one tensor")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise DimensionError(f"add_n shape mismatch {t.shape} vs {shape}")
    if len(tensors) == 1:
        return tensors[0]
    out = tensors[0].data.copy()
    for t in tensors[1:]:
        out += t.data
    parents = tuple(tensors)
    return _result("add_n", out, parents, lambda g: tuple(g if p.requires_grad else None for p in parents))


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return _result(
        "mul",
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    return _result("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", x.data * mask, (x,), lambda g: (g * mask,))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    shape = x.shape
    return _result("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])
    parents = tuple(tensors)

    def backward_fn(g):
        grads = []
        for p, lo, hi in zip(parents, bounds[:-1], bounds[1:]):
            if p.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(lo, hi)
                grads.append(g[tuple(index)])
            else:
                grads.append(None)
        return grads

    return _result("concat", out, parents, backward_fn)


def shift(x: Tensor) -> Tensor:
    """``out[..., i, j] = x[..., i+1, j+1]`` with zeros past the border; shape is preserved."""
    out = np.zeros_like(x.data)
    out[:, :, :-1, :-1] = x.data[:, :, 1:, 1:]

    def backward_fn(g):
        gx = np.zeros_like(g)
        gx[:, :, 1:, 1:] = g[:, :, :-1, :-1]
        return (gx,)

    return _result("shift", out, (x,), backward_fn)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return _result(
        "global_avg_pool",
        out,
        (x,),
        lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(x.dtype),),
    )


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        grads = [
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return grads

    return _result("linear", out, parents, backward_fn)


# ---------------------------------------------------------------------------
# convolution and pooling


def _out_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int, dilation: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    return as_strided(
        xp,
        shape=(n, c, ho, wo, kh, kw),
        strides=(sn, sc, sh * stride, sw * stride, sh * dilation, sw * dilation),
        writeable=False,
    )


def _col2im(dcols: np.ndarray, padded_shape, stride: int, dilation: int, padding: int) -> np.ndarray:
    """Scatter-add window gradients (N, C, Ho, Wo, kh, kw) back onto the padded input."""
    _, _, ho, wo, kh, kw = dcols.shape
    gxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        r0 = i * dilation
        for j in range(kw):
            c0 = j * dilation
            gxp[:, :, r0 : r0 + stride * (ho - 1) + 1 : stride, c0 : c0 + stride * (wo - 1) + 1 : stride] += dcols[
                :, :, :, :, i, j
            ]
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return gxp


def conv2d(
    x: Tensor,
    kernel: Tensor,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of ``x`` (N, C, H, W) with ``kernel`` (F, C/groups, kh, kw)."""
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.shape
    f, cg, kh, kw = kernel.shape
    if groups < 1 or c % groups or f % groups or cg != c // groups:
        raise DimensionError(f"conv2d: input channels {c}, kernel {kernel.shape}, groups {groups}")
    ho = _out_size(h, kh, stride, padding, dilation)
    wo = _out_size(w, kw, stride, padding, dilation)
    if ho < 1 or wo < 1:
        raise DimensionError(f"conv2d: empty output for input {x.shape} and kernel {kernel.shape}")
    if kh == kw == 1 and padding == 0 and groups == 1:
        return _pointwise_conv(x, kernel, stride, ho, wo)
    if groups == c == f:
        return _depthwise_conv(x, kernel, stride, padding, dilation, ho, wo)
    g, fg = groups, f // groups
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, kh, kw, stride, dilation, ho, wo)
    # (G, N*Ho*Wo, Cg*kh*kw)
    cols = (
        win.reshape(n, g, cg, ho, wo, kh, kw).transpose(1, 0, 3, 4, 2, 5, 6).reshape(g, n * ho * wo, cg * kh * kw)
    )
    kmat = kernel.data.reshape(g, fg, cg * kh * kw)
    out = np.matmul(cols, kmat.transpose(0, 2, 1))
    out = out.reshape(g, n, ho, wo, fg).transpose(1, 0, 4, 2, 3).reshape(n, f, ho, wo)

    def backward_fn(grad):
        gm = grad.reshape(n, g, fg, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, fg)
        gx = gk = None
        if kernel.requires_grad:
            gk = np.matmul(gm.transpose(0, 2, 1), cols).reshape(f, cg, kh, kw)
        if x.requires_grad:
            dcols = np.matmul(gm, kmat)
            dcols = (
                dcols.reshape(g, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 2, 3, 5, 6).reshape(n, c, ho, wo, kh, kw)
            )
            gx = _col2im(dcols, xp.shape, stride, dilation, padding)
        return gx, gk

    return _result("conv2d", np.ascontiguousarray(out), (x, kernel), backward_fn)


def _pointwise_conv(x: Tensor, kernel: Tensor, stride: int, ho: int, wo: int) -> Tensor:
    """1x1 convolution as a channel contraction over (optionally strided) pixels."""
    xs = x.data[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride] if stride > 1 else x.data
    wmat = kernel.data[:, :, 0, 0]
    out = np.tensordot(wmat, xs, axes=([1], [1])).transpose(1, 0, 2, 3)

    def backward_fn(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
        if x.requires_grad:
            gxs = np.tensordot(wmat, g, axes=([0], [1])).transpose(1, 0, 2, 3)
            if stride > 1:
                gx = np.zeros_like(x.data)
                gx[:, :, : stride * (ho - 1) + 1 : stride, : stride * (wo - 1) + 1 : stride] = gxs
            else:
                gx = gxs
        return gx, gk

    return _result("conv2d", np.ascontiguousarray(out), (x, kernel), backward_fn)


def _depthwise_conv(x: Tensor, kernel: Tensor, stride, padding, dilation, ho, wo) -> Tensor:
    """One filter per channel, accumulated tap by tap."""
    n, c, _, _ = x.shape
    _, _, kh, kw = kernel.shape
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    k = kernel.data[:, 0]
    taps = [
        (i, j, (slice(None), slice(None), slice(i * dilation, i * dilation + stride * (ho - 1) + 1, stride),
                slice(j * dilation, j * dilation + stride * (wo - 1) + 1, stride)))
        for i in range(kh)
        for j in range(kw)
    ]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for i, j, sl in taps:
        out += xp[sl] * k[:, i, j][None, :, None, None]

    def backward_fn(g):
        gx = gk = None
        if kernel.requires_grad:
            gk = np.empty_like(kernel.data)
            for i, j, sl in taps:
                gk[:, 0, i, j] = np.einsum("nchw,nchw->c", g, xp[sl])
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i, j, sl in taps:
                gxp[sl] += g * k[:, i, j][None, :, None, None]
            gx = gxp[:, :, padding:-padding, padding:-padding] if padding else gxp
        return gx, gk

    return _result("conv2d", out, (x, kernel), backward_fn)


def pool2d(x: Tensor, kind: str, k: int = 3, stride: int = 1, padding: int = 0) -> Tensor:
    """Max or average pooling. Average pooling always divides by ``k*k``, padding included."""
    if kind not in ("max", "avg"):
        raise UsageError(f"unknown pooling kind {kind!r}")
    if x.data.ndim != 4:
        raise DimensionError("pool2d expects 4-D input")
    if padding >= k:
        raise DimensionError("pool2d: padding must be smaller than the window")
    n, c, h, w = x.shape
    ho = _out_size(h, k, stride, padding, 1)
    wo = _out_size(w, k, stride, padding, 1)
    if ho < 1 or wo < 1:
        raise DimensionError(f"pool2d: window {k} does not fit input {x.shape}")
    fill = -np.inf if kind == "max" else 0.0
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad, constant_values=fill) if padding else x.data
    win = _windows(xp, k, k, stride, 1, ho, wo)
    if kind == "max":
        flat = win.reshape(n, c, ho, wo, k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def backward_fn(g):
            dflat = np.zeros((n, c, ho, wo, k * k), dtype=g.dtype)
            np.put_along_axis(dflat, idx[..., None], g[..., None], axis=-1)
            return (_col2im(dflat.reshape(n, c, ho, wo, k, k), xp.shape, stride, 1, padding),)

    else:
        out = win.sum(axis=(4, 5)) / x.dtype.type(k * k)

        def backward_fn(g):
            dcols = np.broadcast_to((g / g.dtype.type(k * k))[..., None, None], (n, c, ho, wo, k, k))
            return (_col2im(dcols, xp.shape, stride, 1, padding),)

    return _result(f"{kind}_pool", out.astype(x.dtype, copy=False), (x,), backward_fn)


def batch_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-channel standardization with the current minibatch statistics; no affine terms."""
    if x.data.ndim != 4:
        raise DimensionError("batch_norm expects 4-D input")
    n, c, h, w = x.shape
    m = n * h * w
    if m < 2:
        raise DimensionError("batch_norm needs at least two values per channel")
    mean = x.data.mean(axis=(0, 2, 3), keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
    denom = var + x.dtype.type(eps)
    if not (denom > 0).all():
        raise NumericError("batch_norm: variance + eps is not positive")
    inv_std = 1.0 / np.sqrt(denom)
    xhat = centered * inv_std

    def backward_fn(g):
        gsum = g.sum(axis=(0, 2, 3), keepdims=True)
        gxsum = (g * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return ((inv_std / m) * (m * g - gsum - xhat * gxsum),)

    return _result("batch_norm", xhat, (x,), backward_fn)


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``softmax(logits)``."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_loss: logits {logits.shape}, labels {labels.shape}")
    n, classes = logits.shape
    if n == 0:
        raise DimensionError("cross_entropy_loss on an empty batch")
    if labels.min() < 0 or labels.max() >= classes:
        raise UsageError(f"labels must lie in [0, {classes})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray((logsumexp - z[rows, labels]).mean(), dtype=logits.dtype)

    def backward_fn(g):
        probs = np.exp(z - logsumexp[:, None])
        probs[rows, labels] -= 1.0
        return (probs * (g / n),)

    return _result("cross_entropy", loss, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# reverse accumulation


class Tape:
    """Topologically ordered list of graph nodes reachable from a root."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            if node._consumed:
                raise UsageError("graph was already consumed by backward(); run the forward pass again")
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def run(self, root: Tensor) -> dict[Tensor, np.ndarray]:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if node.is_leaf:
                if node.requires_grad:
                    leaves[node] = g if g is not None else np.zeros_like(node.data)
                continue
            if g is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
        for node in self.nodes:
            if not node.is_leaf:
                node._consumed = True
                node._backward = None
                node._parents = ()
        return leaves


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` with respect to every reachable leaf requiring grad."""
    if loss.data.size != 1:
        raise UsageError(f"backward needs a scalar root, got shape {loss.shape}")
    if loss._consumed:
        raise UsageError("backward() already called on this graph; run the forward pass again")
    if not loss.requires_grad:
        return {}
    return Tape.from_root(loss).run(loss)


def sgd_step(params, grads: Mapping[str, np.ndarray], lr: float):
    """Return a new store with ``p - lr * g`` for every name in ``grads``."""
    unknown = set(grads) - set(params.names())
    if unknown:
        raise UsageError(f"gradients for unknown parameters: {sorted(unknown)[:5]}")
    if lr < 0:
        raise UsageError("learning rate must be non-negative")
    updated = {}
    for name, t in params.items():
        g = grads.get(name)
        if g is None:
            updated[name] = t.data
        else:
            updated[name] = t.data - t.dtype.type(lr) * g.astype(t.dtype, copy=False)
    return params.replace(updated)


def param_leaves(arrays: Iterable[tuple[str, np.ndarray]]) -> dict[str, Tensor]:
    return {name: Tensor(a, requires_grad=True) for name, a in arrays}
