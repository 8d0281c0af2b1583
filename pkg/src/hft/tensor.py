"""Small dense-tensor library with reverse-mode differentiation.

Only what the transcription model needs is here: elementwise arithmetic,
batched matmul, axis permutation, reshape/concat/slice, the usual
activations, softmax, layer norm, a single-input-channel-agnostic 1-D
convolution, dropout, embedding lookup and two fused loss reductions.

Tensors wrap a numpy array. An op records itself on the graph only when
gradient recording is enabled and at least one input requires gradients;
``backward`` walks that graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5
LOG_CLAMP = -100.0

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self):
        return sum_all(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _check_finite(out: np.ndarray, op: str) -> None:
    if not np.isfinite(out).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


def _make(out: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    _check_finite(out, op)
    t = Tensor(out)
    t.op = op
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = tuple(parents)
        t._backward = backward
    return t


def _trailing_compatible(big: tuple, small: tuple) -> bool:
    return len(small) <= len(big) and tuple(big[len(big) - len(small):]) == tuple(small)


def _reduce_to(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    return grad.reshape((-1,) + tuple(shape)).sum(axis=0) if lead else grad


# --------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    """Elementwise sum; the smaller operand may match only the trailing axes."""
    if not isinstance(a, Tensor) and not isinstance(b, Tensor):
        raise TypeError("add needs at least one Tensor")
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if a.data.ndim == 0 or b.data.ndim == 0:
        pass
    elif not (_trailing_compatible(a.shape, b.shape) or _trailing_compatible(b.shape, a.shape)):
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}")
    sa, sb = a.shape, b.shape

    def backward(g):
        return (_reduce_to(g, sa) if sa else g.sum(), _reduce_to(g, sb) if sb else g.sum())

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a, b) -> Tensor:
    """Elementwise product; scalars and trailing-axis operands are allowed."""
    if not isinstance(a, Tensor):
        a, b = b, a
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        if c.ndim:
            raise TypeError("mul: non-tensor operand must be a scalar")
        return _make(a.data * c, (a,), lambda g: (g * c,), "scale")
    if not (_trailing_compatible(a.shape, b.shape) or _trailing_compatible(b.shape, a.shape)):
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape

    def backward(g):
        return _reduce_to(g * bd, sa), _reduce_to(g * ad, sb)

    return _make(ad * bd, (a, b), backward, "mul")


def sigmoid(x: Tensor) -> Tensor:
    # split by sign so exp never overflows
    d = x.data
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(d.dtype, copy=False)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def sum_all(x: Tensor) -> Tensor:
    shape, dtype = x.shape, x.dtype
    return _make(np.asarray(x.data.sum(), dtype=dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).astype(dtype),), "sum")


# --------------------------------------------------------------------------
# shape


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: axes {axes} invalid for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    ax = axis % len(ref)
    for t in xs[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ValueError(f"concat: shape {t.shape} incompatible with {ref} on axis {axis}")
    sizes = [t.shape[ax] for t in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=ax))

    return _make(np.concatenate([t.data for t in xs], axis=ax), xs, backward, "concat")


def getitem(x: Tensor, idx) -> Tensor:
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _make(np.array(x.data[idx]), (x,), backward, "slice")


# --------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` where b is either a 2-D weight or shares a's leading axes."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: need rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    if b.ndim == 2:
        def backward(g):
            ga = g @ bd.T if a.requires_grad else None
            gb = None
            if b.requires_grad:
                k, n = bd.shape
                gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
            return ga, gb
    else:
        def backward(g):
            ga = g @ np.swapaxes(bd, -1, -2) if a.requires_grad else None
            gb = np.swapaxes(ad, -1, -2) @ g if b.requires_grad else None
            return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` as one node, so the pre-bias product is not kept."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out += bias.data
    k, n = wd.shape

    def backward(g):
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, k).T @ g.reshape(-1, n) if weight.requires_grad else None
        gb = g.reshape(-1, n).sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "linear")


# --------------------------------------------------------------------------
# normalisation, activations with axis


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               axis: int = -1, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalise over one axis, then apply the optional affine (last axis only)."""
    d = x.data
    mu = d.mean(axis=axis, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    n = d.shape[axis]

    def backward(g):
        gm = g.mean(axis=axis, keepdims=True)
        gxm = (g * xhat).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    y = _make(xhat.astype(d.dtype, copy=False), (x,), backward, "layer_norm")
    if n and gamma is not None:
        y = mul(y, gamma)
    if beta is not None:
        y = add(y, beta)
    return y


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Valid 1-D convolution, stride 1.

    x: (R, C_in, L), weight: (C_out, C_in, K) -> (R, C_out, L - K + 1).
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"conv1d: input {x.shape} incompatible with kernel {weight.shape}")
    k = weight.shape[2]
    if x.shape[2] < k:
        raise ValueError(f"conv1d: input length {x.shape[2]} shorter than kernel {k}")
    xd, wd = x.data, weight.data
    win = np.lib.stride_tricks.sliding_window_view(xd, k, axis=2)  # (R, Cin, Lout, K)
    out = np.einsum("rclk,ock->rol", win, wd, optimize=True)
    lout = out.shape[2]

    def backward(g):
        gx = gw = None
        if weight.requires_grad:
            gw = np.einsum("rol,rclk->ock", g, win, optimize=True)
        if x.requires_grad:
            gx = np.zeros_like(xd)
            for j in range(k):
                gx[:, :, j:j + lout] += np.einsum("rol,oc->rcl", g, wd[:, :, j], optimize=True)
        return gx, gw

    y = _make(out.astype(xd.dtype, copy=False), (x, weight), backward, "conv1d")
    if bias is not None:
        # bias is per output channel, which is not the trailing axis
        y = transpose(add(transpose(y, (0, 2, 1)), bias), (0, 2, 1))
    return y


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    if not train or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
    return _make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: ids outside [0, {weight.shape[0]})")
    shape, dtype = weight.shape, weight.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, ids, g)
        return (full,)

    return _make(weight.data[ids], (weight,), backward, "embedding")


# --------------------------------------------------------------------------
# fused loss reductions


def bce_sum(target, prob: Tensor) -> Tensor:
    """Summed binary cross entropy of posteriors against (soft) targets.

    log terms are clamped at -100 so saturated posteriors stay finite.
    """
    y = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=prob.dtype)
    if y.shape != prob.shape:
        raise ValueError(f"bce_sum: target {y.shape} vs prediction {prob.shape}")
    p = prob.data
    if (p < 0).any() or (p > 1).any():
        raise ValueError("bce_sum: predictions outside [0, 1]")
    with np.errstate(divide="ignore"):
        logp = np.maximum(np.log(p), LOG_CLAMP)
        log1p = np.maximum(np.log1p(-p), LOG_CLAMP)
    loss = -(y * logp + (1.0 - y) * log1p).sum()

    def backward(g):
        lo = np.exp(LOG_CLAMP)
        pc = np.clip(p, lo, 1.0 - np.finfo(p.dtype).eps)
        return (g * (-(y / pc) + (1.0 - y) / (1.0 - pc)),)

    return _make(np.asarray(loss, dtype=p.dtype), (prob,), backward, "bce_sum")


def cross_entropy_sum(logits: Tensor, ids) -> Tensor:
    """Summed categorical cross entropy over the last axis of ``logits``."""
    ids = np.asarray(ids, dtype=np.int64)
    ncls = logits.shape[-1]
    if ids.shape != logits.shape[:-1]:
        raise ValueError(f"cross_entropy_sum: ids {ids.shape} vs logits {logits.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= ncls):
        raise ValueError(f"cross_entropy_sum: class ids must lie in [0, {ncls})")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, ids[..., None], axis=-1)
    loss = -picked.sum()

    def backward(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, ids[..., None],
                          np.take_along_axis(grad, ids[..., None], axis=-1) - 1.0, axis=-1)
        return (g * grad,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy_sum")


# --------------------------------------------------------------------------
# backward pass


def _topo_order(root: Tensor) -> list[Tensor]:
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
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar loss.

    Leaf gradients are accumulated into ``.grad``; the returned map holds
    the gradient contributed by this call for every reachable leaf.
    """
    if loss.data.size != 1 or loss.ndim != 0:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[node] = g
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.dtype)
            if pg.shape != parent.shape:
                pg = pg.reshape(parent.shape)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    return leaves


def finite_diff_check(f: Callable[[], Tensor], params: Iterable[Tensor], eps: float = 1e-6,
                      max_coords: int = 200, seed: int = 0) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` re-evaluates the scalar loss from the current parameter values.
    Parameters are perturbed in place and restored. Use float64 tensors.
    """
    params = list(params)
    if not params:
        return 0.0
    for p in params:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, ga in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            coords = rng.choice(n, size=min(n, max_coords), replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + eps
                fp = float(f().data)
                flat[c] = orig - eps
                fm = float(f().data)
                flat[c] = orig
                num = (fp - fm) / (2.0 * eps)
                a = float(ga.reshape(-1)[c])
                rel = abs(a - num) / max(abs(a), abs(num), 1e-8)
                worst = max(worst, rel)
    return worst
