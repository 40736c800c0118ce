"""Dense N-d tensors with reverse-mode automatic differentiation.

Every differentiable op records a closure that pushes the output gradient back
into its inputs. ``backward`` walks the recorded graph in reverse topological
order, accumulating (never overwriting) into ``Tensor.grad``.

Convolutions go through a patch-matrix (im2col) layout so the inner work is a
single dense matrix product.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True
_RELU_SIGNS: list[np.ndarray] | None = None


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf from its inputs."""


def default_dtype() -> np.dtype:
    return np.dtype(_DEFAULT_DTYPE)


@contextlib.contextmanager
def precision(dtype) -> Iterable[None]:
    """Temporarily switch the dtype new tensors are created with.

    ``precision(np.float64)`` is the verification mode used by gradient checks.
    """
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad() -> Iterable[None]:
    """Disable graph recording; ops return plain untracked tensors."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def record_relu_signs() -> Iterable[list[np.ndarray]]:
    """Collect the activation pattern (input > 0) of every relu call, in order.

    Two evaluations whose patterns differ lie on different linear pieces; a
    finite difference between them straddles a kink.
    """
    global _RELU_SIGNS
    previous = _RELU_SIGNS
    _RELU_SIGNS = log = []
    try:
        yield log
    finally:
        _RELU_SIGNS = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = ""

    # construction helpers -------------------------------------------------

    @classmethod
    def zeros(cls, shape: Sequence[int], requires_grad: bool = False, dtype=None) -> "Tensor":
        return cls(np.zeros(tuple(shape), dtype=dtype or _DEFAULT_DTYPE), requires_grad)

    @classmethod
    def ones(cls, shape: Sequence[int], requires_grad: bool = False, dtype=None) -> "Tensor":
        return cls(np.ones(tuple(shape), dtype=dtype or _DEFAULT_DTYPE), requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # no copy; caller owns arr exclusively
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        t._op = ""
        return t

    # introspection ---------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def flat_index(self, *index: int) -> int:
        """Row-major offset of a multi-index, e.g. ((n*C + c)*H + h)*W + w."""
        if len(index) != self.ndim:
            raise ShapeError(f"expected {self.ndim} indices, got {len(index)}")
        offset = 0
        for i, extent in zip(index, self.shape):
            if not 0 <= i < extent:
                raise IndexError(f"index {index} out of range for shape {self.shape}")
            offset = offset * extent + i
        return offset

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}{', op=' + self._op if self._op else ''})"

    # arithmetic sugar --------------------------------------------------------

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad: np.ndarray | None = None) -> None:
        backward(self, grad)


def _result(
    data: np.ndarray,
    parents: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], tuple],
    op: str,
) -> Tensor:
    if not np.isfinite(data).all():
        if all(np.isfinite(p.data).all() for p in parents):
            raise NonFiniteError(f"{op} produced non-finite values from finite inputs")
    out = Tensor._wrap(data)
    out._op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    if t.grad is None:
        t.grad = np.array(g, copy=True, order="C")
    else:
        t.grad += g


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# graph traversal ---------------------------------------------------------------


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, grad: np.ndarray | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into every tracked leaf's ``grad``.

    Intermediate gradients live only for the duration of the call, so calling
    twice on the same graph adds the leaf gradients twice.
    """
    if grad is None:
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.data.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accumulate(node, g)
            continue
        _run_backward(node, g, grads)


def _run_backward(node: Tensor, g: np.ndarray, grads: dict[int, np.ndarray]) -> None:
    # each op's closure returns one gradient per parent (None for untracked)
    parent_grads = node._backward(g)
    for parent, pg in zip(node._parents, parent_grads):
        if pg is None or not parent.requires_grad:
            continue
        key = id(parent)
        if key in grads:
            grads[key] = grads[key] + pg
        else:
            grads[key] = pg


# elementwise ops ---------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, factor: float) -> Tensor:
    return _result(a.data * factor, (a,), lambda g: (g * factor,), "scale")


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    if _RELU_SIGNS is not None:
        _RELU_SIGNS.append(x.data > 0)
    return _result(out, (x,), lambda g: (g * (out > 0),), "relu")


def stable_sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    s = stable_sigmoid(x.data)
    return _result(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _result(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


# reductions and shape ops ------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g: (np.broadcast_to(g, shape).astype(g.dtype),),
        "sum",
    )


def mean_all(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g: (np.full(shape, g / n, dtype=g.dtype),),
        "mean",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.data.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    data = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def _backward(g):
        index = [slice(None)] * g.ndim
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            parts.append(g[tuple(index)])
        return tuple(parts)

    return _result(data, tensors, _backward, "concat")


def split(x: Tensor, sections: int, axis: int = 0) -> list[Tensor]:
    """Split into equal chunks along ``axis``; each chunk is its own graph node."""
    extent = x.shape[axis]
    if extent % sections:
        raise ShapeError(f"axis {axis} of extent {extent} not divisible into {sections}")
    step = extent // sections
    out = []
    for k in range(sections):
        index = [slice(None)] * x.ndim
        index[axis] = slice(k * step, (k + 1) * step)
        index = tuple(index)

        def _backward(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        out.append(_result(x.data[index], (x,), _backward, "split"))
    return out


def flip_width(x: Tensor) -> Tensor:
    return _result(np.ascontiguousarray(x.data[..., ::-1]), (x,), lambda g: (g[..., ::-1],), "flip")


# convolution ----------------------------------------------------------------------


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if not padding:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, :, padding : padding + h, padding : padding + w] = x
    return out


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Patch matrix of shape (C*kh*kw, N*Ho*Wo) from an already padded (N,C,Hp,Wp)."""
    xp = np.ascontiguousarray(xp)
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    sn, sc, sh, sw = xp.strides
    # view laid out as (C,kh,kw,N,Ho,Wo) so the reshape is the only copy
    win = as_strided(xp, (c, kh, kw, n, ho, wo), (sc, sh, sw, sn, sh * stride, sw * stride), writeable=False)
    return win.reshape(c * kh * kw, n * ho * wo), ho, wo


def _transposed_full(x: np.ndarray, weight: np.ndarray, stride: int) -> np.ndarray:
    """Uncropped transposed convolution of (N,Cin,H,W) with (Cin,Cout,kh,kw).

    Output is (N,Cout,(H-1)*s+kh,(W-1)*s+kw). Each of the s*s output phases is a
    stride-1 correlation with a ceil(k/s) sub-kernel, so all phases come from one
    im2col and one matmul followed by a pixel shuffle, with no scatter-add.
    """
    n, cin, h, w = x.shape
    _, cout, kh, kw = weight.shape
    s = stride
    mh, mw = -(-kh // s), -(-kw // s)
    wpad = np.zeros((cin, cout, s * mh, s * mw), dtype=weight.dtype)
    wpad[:, :, :kh, :kw] = weight
    # window offset t of phase r reads tap s*(m-1-t)+r
    sub = wpad.reshape(cin, cout, mh, s, mw, s)[:, :, ::-1, :, ::-1, :]
    wmat = sub.transpose(3, 5, 1, 0, 2, 4).reshape(s * s * cout, cin * mh * mw)
    xp = np.zeros((n, cin, h + 2 * (mh - 1), w + 2 * (mw - 1)), dtype=x.dtype)
    xp[:, :, mh - 1 : mh - 1 + h, mw - 1 : mw - 1 + w] = x
    cols, yh, yw = _im2col(xp, mh, mw, 1)
    phases = (wmat @ cols).reshape(s, s, cout, n, yh, yw)
    # pixel shuffle; per-phase strided writes beat one 6-d transpose copy
    full = np.empty((n, cout, yh, s, yw, s), dtype=phases.dtype)
    for ri in range(s):
        for rj in range(s):
            full[:, :, :, ri, :, rj] = phases[ri, rj].transpose(1, 0, 2, 3)
    full = full.reshape(n, cout, yh * s, yw * s)
    return full[:, :, : (h - 1) * s + kh, : (w - 1) * s + kw]


def _check_conv_args(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int, padding: int, op: str) -> None:
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ValueError(f"{op}: stride must be a positive int, got {stride!r}")
    if not isinstance(padding, (int, np.integer)) or padding < 0:
        raise ValueError(f"{op}: padding must be a nonnegative int, got {padding!r}")
    if x.ndim != 4:
        raise ShapeError(f"{op}: input must be (N,C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"{op}: weight must be 4-d, got {weight.shape}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of (N,Cin,H,W) with (Cout,Cin,kh,kw), zero padded."""
    _check_conv_args(x, weight, bias, stride, padding, "conv2d")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"conv2d: padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {cout} output channels")

    xp = _pad(x.data, padding)
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3))
    padded_shape = xp.shape

    def _backward(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gx = gw = gb = None
        if x.requires_grad:
            gp = _transposed_full(g, weight.data, stride)
            if gp.shape != padded_shape:
                # rows and columns no strided window reached get zero gradient
                gp = np.pad(gp, ((0, 0), (0, 0), (0, padded_shape[2] - gp.shape[2]), (0, padded_shape[3] - gp.shape[3])))
            gx = gp[:, :, padding : padding + h, padding : padding + w]
        if weight.requires_grad:
            gw = (gmat @ cols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=1)
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, _backward, "conv2d")


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of ``conv2d``'s input map; weight is (Cin,Cout,kh,kw)."""
    _check_conv_args(x, weight, bias, stride, padding, "conv_transpose2d")
    n, cin, h, w = x.shape
    wcin, cout, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels but weight expects {wcin}")
    hf = (h - 1) * stride + kh
    wf = (w - 1) * stride + kw
    if hf - 2 * padding < 1 or wf - 2 * padding < 1:
        raise ShapeError(f"conv_transpose2d: padding {padding} leaves an empty output")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} does not match {cout} output channels")

    wmat = weight.data.reshape(cin, -1)
    full = _transposed_full(x.data, weight.data, stride)
    out = full[:, :, padding : hf - padding, padding : wf - padding]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def _backward(g):
        gfull = _pad(g, padding)
        gcols, _, _ = _im2col(gfull, kh, kw, stride)
        gx = gw = gb = None
        if x.requires_grad:
            gx = np.ascontiguousarray((wmat @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3))
        if weight.requires_grad:
            xmat = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
            gw = (xmat @ gcols.T).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw, gb)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, _backward, "conv_transpose2d")


# loss -----------------------------------------------------------------------------


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy in the overflow-free form.

    max(z, 0) - z*t + log(1 + exp(-|z|)), averaged over all elements.
    """
    _check_same_shape(logits, targets, "bce_with_logits")
    t = targets.data
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("bce_with_logits: targets must lie in [0, 1]")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    value = np.asarray(per.mean(), dtype=z.dtype)

    def _backward(g):
        return ((stable_sigmoid(z) - t) * (g / n), None)

    return _result(value, (logits, targets), _backward, "bce_with_logits")
