"""Small reverse-mode autodiff over numpy arrays.

Every differentiable operation creates an ``_Op`` record carrying a global,
monotonically increasing sequence number.  ``backward`` gathers the records
reachable from the loss and replays them in decreasing sequence order, which
is the exact reverse of the order they were recorded in.  Leaves accumulate
into ``Tensor.grad`` additively until ``zero_grad`` is called.

Stack data uses the axis convention ``H x W x C x F`` (optionally with a
leading batch axis).
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

__all__ = [
    "Tensor",
    "Tape",
    "GradCheckError",
    "backward",
    "grad_check",
    "as_tensor",
    "conv3d",
    "activation",
    "relu",
    "leaky_relu",
    "softplus",
    "resample_spatial",
    "concat",
    "zero_grad",
]

_SEQ = itertools.count()

# softplus(x) is replaced by x above this threshold; exact to double precision
SOFTPLUS_LINEAR_ABOVE = 30.0


class _Op:
    __slots__ = ("seq", "name", "parents", "vjp")

    def __init__(self, name: str, parents: tuple, vjp: Callable):
        self.seq = next(_SEQ)
        self.name = name
        self.parents = parents
        self.vjp = vjp

    def __repr__(self):
        return f"_Op({self.name}, seq={self.seq})"


class Tensor:
    """A shaped float array that can take part in a recorded computation."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._op: _Op | None = None

    # ---- bookkeeping -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._op is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return len(self.data)

    # ---- arithmetic --------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _record("neg", -self.data, (self,), lambda g: (-g,))

    def __pow__(self, exponent: float):
        x = self.data
        return _record("pow", x**exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),))

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in _axes(axis)])
        return tsum(self, axis, keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _record("reshape", self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = np.argsort(axes)
        return _record("transpose", self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def abs(self):
        x = self.data
        return _record("abs", np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def exp(self):
        y = np.exp(self.data)
        return _record("exp", y, (self,), lambda g: (g * y,))

    def log(self):
        x = self.data
        return _record("log", np.log(x), (self,), lambda g: (g / x,))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def _axes(axis) -> tuple:
    return (axis,) if isinstance(axis, int) else tuple(axis)


def _record(name: str, out: np.ndarray, parents: tuple, vjp: Callable) -> Tensor:
    t = Tensor(out)
    if any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._op = _Op(name, parents, vjp)
    return t


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b, dtype_hint=None):
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    x, y = a.data, b.data
    return _record(
        "mul", x * y, (a, b), lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))
    )


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    x, y = a.data, b.data
    out = x / y

    def vjp(g):
        return _unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape)

    return _record("div", out, (a, b), vjp)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, _axes(axis))
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", np.asarray(out), (a,), vjp)


def getitem(a: Tensor, index) -> Tensor:
    shape, dtype = a.shape, a.dtype
    parts = index if isinstance(index, tuple) else (index,)
    fancy = any(isinstance(i, (list, np.ndarray)) for i in parts)

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        if fancy:
            np.add.at(full, index, g)
        else:
            full[index] += g
        return (full,)

    return _record("getitem", np.array(a.data[index]), (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def zero_grad(params):
    for p in params:
        p.grad = None


# ---- activations -----------------------------------------------------


def relu(x: Tensor) -> Tensor:
    d = x.data
    mask = d > 0
    return _record("relu", np.where(mask, d, 0).astype(d.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    d = x.data
    scale = np.where(d > 0, 1.0, slope).astype(d.dtype)
    return _record("leaky_relu", d * scale, (x,), lambda g: (g * scale,))


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x); evaluated as x itself above ``SOFTPLUS_LINEAR_ABOVE``."""
    d = x.data
    big = d > SOFTPLUS_LINEAR_ABOVE
    out = np.where(big, d, np.log1p(np.exp(np.minimum(d, SOFTPLUS_LINEAR_ABOVE))))
    slope = np.where(big, 1.0, expit(d)).astype(d.dtype)
    return _record("softplus", out.astype(d.dtype), (x,), lambda g: (g * slope,))


def activation(x: Tensor, kind: str = "relu", slope: float = 0.1) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "softplus":
        return softplus(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---- spatial resampling ----------------------------------------------


def resample_spatial(x: Tensor, direction: str, factor: int = 2) -> Tensor:
    """2x spatial resampling of an ``(..., H, W, C, F)`` tensor.

    ``down`` averages 2x2 blocks, ``up`` repeats each pixel into a 2x2 block.
    Channel and stack axes are left alone.
    """
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    d = x.data
    lead, (h, w, c, f) = d.shape[:-4], d.shape[-4:]
    if direction == "down":
        if h % 2 or w % 2:
            raise ValueError(f"down-sampling needs even H and W, got {h}x{w}")
        out = d.reshape(*lead, h // 2, 2, w // 2, 2, c, f).mean(axis=(-5, -3))

        def vjp(g):
            g = np.repeat(np.repeat(g, 2, axis=-4), 2, axis=-3)
            return (g * 0.25,)

        return _record("down2", out, (x,), vjp)
    if direction == "up":
        out = np.repeat(np.repeat(d, 2, axis=-4), 2, axis=-3)

        def vjp(g):
            return (g.reshape(*lead, h, 2, w, 2, c, f).sum(axis=(-5, -3)),)

        return _record("up2", out, (x,), vjp)
    raise ValueError(f"unknown direction {direction!r}")


# ---- 3D convolution --------------------------------------------------


def _im2col(xt: np.ndarray, k: int, kf: int, s: int, ho: int, wo: int, f: int) -> np.ndarray:
    """(B, Hp, Wp, Fp, C) -> contiguous (B*ho*wo*f, k*k*kf*C) patch matrix."""
    v = sliding_window_view(xt, (k, k, kf), axis=(1, 2, 3))
    v = v[:, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s, :f]
    col = np.ascontiguousarray(v.transpose(0, 1, 2, 3, 5, 6, 7, 4))
    return col.reshape(-1, k * k * kf * xt.shape[-1])


def conv3d(
    x: Tensor,
    weights: Tensor,
    bias: Tensor | None = None,
    spatial_stride: int = 1,
    padding: int | None = None,
) -> Tensor:
    """Convolve an ``(B?, H, W, Cin, F)`` tensor with ``(k, k, Cin, Cout, kf)`` weights.

    Spatial padding defaults to ``k // 2``; the stack axis is always zero
    padded by ``kf // 2`` on both sides with stride 1, so F is preserved.
    """
    w = weights.data
    if w.ndim != 5:
        raise ValueError(f"weights must be 5-D (k, k, Cin, Cout, kf), got shape {w.shape}")
    k, k2, cin, cout, kf = w.shape
    if k != k2 or k % 2 == 0 or kf % 2 == 0:
        raise ValueError(f"kernel extents must be odd and square, got weights shape {w.shape}")
    d = x.data
    if d.ndim not in (4, 5) or d.shape[-2] != cin:
        raise ValueError(f"input shape {d.shape} does not match weights shape {w.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match weights shape {w.shape}")
    batched = d.ndim == 5
    xb = d if batched else d[None]
    p = k // 2 if padding is None else int(padding)
    pf = kf // 2
    s = int(spatial_stride)
    b_, h, wd, _, f = xb.shape
    ho = (h + 2 * p - k) // s + 1
    wo = (wd + 2 * p - k) // s + 1
    if ho < 1 or wo < 1 or s < 1:
        raise ValueError(f"input shape {d.shape} too small for weights shape {w.shape}")

    xt = np.pad(xb.transpose(0, 1, 2, 4, 3), ((0, 0), (p, p), (p, p), (pf, pf), (0, 0)))
    col = _im2col(xt, k, kf, s, ho, wo, f)
    kdim = k * k * kf * cin
    wm = w.transpose(0, 1, 4, 2, 3).reshape(kdim, cout)
    out = col @ wm
    if bias is not None:
        out += bias.data
    out = out.reshape(b_, ho, wo, f, cout).transpose(0, 1, 2, 4, 3)
    out = np.ascontiguousarray(out if batched else out[0])

    def vjp(g):
        gb = g if batched else g[None]
        gt5 = gb.transpose(0, 1, 2, 4, 3)
        gt = np.ascontiguousarray(gt5).reshape(-1, cout)
        gx = gw = gbias = None
        if weights.requires_grad:
            gw = (col.T @ gt).reshape(k, k, kf, cin, cout).transpose(0, 1, 3, 4, 2)
        if bias is not None and bias.requires_grad:
            gbias = gt.sum(axis=0)
        if x.requires_grad:
            q = k - 1 - p
            if s == 1 and q >= 0:
                # input gradient = correlation of the padded output gradient with the flipped kernel
                gpad = np.pad(gt5, ((0, 0), (q, q), (q, q), (kf - 1 - pf, kf - 1 - pf), (0, 0)))
                wflip = w[::-1, ::-1, :, :, ::-1].transpose(0, 1, 4, 3, 2).reshape(k * k * kf * cout, cin)
                gxt = (_im2col(gpad, k, kf, 1, h, wd, f) @ wflip).reshape(b_, h, wd, f, cin)
            else:
                gcol = (gt @ wm.T).reshape(b_, ho, wo, f, k, k, kf, cin)
                gxt = np.zeros_like(xt)
                for di in range(k):
                    for dj in range(k):
                        for df in range(kf):
                            gxt[:, di : di + s * ho : s, dj : dj + s * wo : s, df : df + f, :] += gcol[
                                :, :, :, :, di, dj, df, :
                            ]
                gxt = gxt[:, p : p + h, p : p + wd, pf : pf + f, :]
            gxt = np.ascontiguousarray(gxt.transpose(0, 1, 2, 4, 3))
            gx = gxt if batched else gxt[0]
        return (gx, gw) if bias is None else (gx, gw, gbias)

    parents = (x, weights) if bias is None else (x, weights, bias)
    return _record("conv3d", out, parents, vjp)


# ---- tape and backward -----------------------------------------------


class Tape:
    """Recorded operations reachable from an output, in recording order."""

    def __init__(self, ops: list):
        self.ops = ops

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        seen = {}
        stack = [out._op] if out._op is not None else []
        while stack:
            op = stack.pop()
            if id(op) in seen:
                continue
            seen[id(op)] = op
            for p in op.parents:
                if p._op is not None and id(p._op) not in seen:
                    stack.append(p._op)
        return cls(sorted(seen.values(), key=lambda o: o.seq))

    def __len__(self):
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def replay_backward(self, out: Tensor, seed: np.ndarray) -> list:
        """Propagate ``seed`` from ``out`` back to the leaves; returns ops in visit order."""
        grads = {id(out._op): seed}
        visited = []
        for op in reversed(self.ops):
            g = grads.pop(id(op), None)
            visited.append(op)
            if g is None:
                continue
            for parent, pg in zip(op.parents, op.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._op is None:
                    parent.grad = pg.astype(parent.dtype, copy=True) if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent._op)
                    grads[key] = pg if key not in grads else grads[key] + pg
        return visited


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf's ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    seed = np.ones(loss.shape, dtype=loss.dtype)
    if loss._op is None:
        if loss.requires_grad:
            loss.grad = seed if loss.grad is None else loss.grad + seed
        return Tape([])
    tape = Tape.from_output(loss)
    tape.replay_backward(loss, seed)
    return tape


# ---- finite-difference checking --------------------------------------


class GradCheckError(ArithmeticError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


def grad_check(
    function: Callable[[Tensor], Tensor],
    point,
    step: float = 1e-5,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between the backward gradient and central differences.

    ``function`` maps a Tensor to a scalar Tensor.  The relative error of one
    coordinate is ``|a - b| / max(|a|, |b|, 1e-12)``.  ``indices`` restricts
    the finite-difference probe to a subset of flat coordinates.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x0 = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(x0.copy(), requires_grad=True)
    out = function(x)
    if not np.isfinite(out.data).all():
        raise GradCheckError("function value is not finite at the base point")
    backward(out)
    analytic = np.zeros_like(x0) if x.grad is None else x.grad.reshape(-1)
    flat = x0.reshape(-1)
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            v = float(function(Tensor(probe.reshape(x0.shape))).data)
            if not np.isfinite(v):
                raise GradCheckError(f"non-finite function value at coordinate {i}", index=int(i))
            vals.append(v)
        numeric = (vals[0] - vals[1]) / (2 * step)
        a = float(analytic[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst
