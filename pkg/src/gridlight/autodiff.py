"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every primitive op builds a result Tensor holding a backward closure and
references to its parents. Tensors are stamped with a global creation
counter; `backward()` walks the reachable graph in descending stamp order,
which is exactly reverse execution order, so no recursive topological sort
is needed and fan-out gradients accumulate correctly.

Includes the conv machinery (im2col based, with transposed convolution
implemented as the adjoint of convolution), layer containers with seeded
initialization, Adam, and JSON checkpoint manifests.
"""

from __future__ import annotations

import itertools
import json
import math

import numpy as np

_seq = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager: ops inside build no graph."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._seq = next(_seq)

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

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar, got shape {self.data.shape}")
        nodes: list[Tensor] = []
        seen = {id(self)}
        stack = [self]
        while stack:
            t = stack.pop()
            nodes.append(t)
            for p in t._parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append(p)
        nodes.sort(key=lambda t: t._seq, reverse=True)
        self.grad = np.ones_like(self.data)
        for t in nodes:
            if t._backward is not None and t.grad is not None:
                t._backward(t.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, scalar):
        if isinstance(scalar, Tensor):
            raise TypeError("tensor/tensor division not supported; multiply by a reciprocal")
        return mul(self, 1.0 / scalar)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], (tuple, list)) else shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
    t = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward
    return t


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient down to `shape` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g.reshape(shape)


# -- elementwise and structural ops -----------------------------------------


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data - b.data

    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(out_data, (a, b), bw)


def neg(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bw)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(out_data, (a, b), bw)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0  # derivative 0 at the kink

    def bw(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), bw)


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        _accum(a, g * s * (1.0 - s))

    return _make(s, (a,), bw)


def exp(a) -> Tensor:
    a = _wrap(a)
    e = np.exp(a.data)

    def bw(g):
        _accum(a, g * e)

    return _make(e, (a,), bw)


def log(a) -> Tensor:
    a = _wrap(a)

    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _wrap(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), bw)


def tmean(a, axis=None) -> Tensor:
    a = _wrap(a)
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = 1
        for ax in axes:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    out_data = a.data.reshape(shape)

    def bw(g):
        _accum(a, g.reshape(a.data.shape))

    return _make(out_data, (a,), bw)


def transpose(a, axes) -> Tensor:
    a = _wrap(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def clamp(a, lo=None, hi=None) -> Tensor:
    a = _wrap(a)
    out_data = np.clip(a.data, lo, hi)
    mask = np.ones_like(a.data, dtype=bool)
    if lo is not None:
        mask &= a.data >= lo
    if hi is not None:
        mask &= a.data <= hi

    def bw(g):
        _accum(a, g * mask)

    return _make(out_data, (a,), bw)


def minimum(a, b) -> Tensor:
    """Elementwise min. On ties the gradient goes to the FIRST argument."""
    a, b = _wrap(a), _wrap(b)
    take_a = a.data <= b.data

    def bw(g):
        _accum(a, _unbroadcast(g * take_a, a.data.shape))
        _accum(b, _unbroadcast(g * ~take_a, b.data.shape))

    return _make(np.minimum(a.data, b.data), (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - inner))

    return _make(y, (a,), bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _wrap(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    z = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        _accum(a, g - np.exp(z) * g.sum(axis=axis, keepdims=True))

    return _make(z, (a,), bw)


def linear(x, W, b) -> Tensor:
    """x @ W + b with x (N, in), W (in, out), b (out,)."""
    x, W, b = _wrap(x), _wrap(W), _wrap(b)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear shape mismatch: x {x.shape}, W {W.shape}")
    if b.data.shape != (W.shape[1],):
        raise ValueError(f"linear bias shape {b.shape} does not match W {W.shape}")
    out_data = x.data @ W.data + b.data

    def bw(g):
        _accum(x, g @ W.data.T)
        _accum(W, x.data.T @ g)
        _accum(b, g.sum(axis=0))

    return _make(out_data, (x, W, b), bw)


# -- convolution -------------------------------------------------------------


def _conv_out(h: int, w: int, kh: int, kw: int, s: int, p: int) -> tuple[int, int]:
    ho = (h + 2 * p - kh) // s + 1
    wo = (w + 2 * p - kw) // s + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv output empty for input {h}x{w}, kernel {kh}x{kw}, stride {s}, padding {p}")
    return ho, wo


def _im2col(x: np.ndarray, kh: int, kw: int, s: int, p: int, ho: int, wo: int) -> np.ndarray:
    n, c, _, _ = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + s * ho : s, j : j + s * wo : s]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(cols: np.ndarray, xshape, kh: int, kw: int, s: int, p: int, ho: int, wo: int) -> np.ndarray:
    n, c, h, w = xshape
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
    cols6 = cols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + s * ho : s, j : j + s * wo : s] += cols6[:, :, i, j]
    return xp[:, :, p : p + h, p : p + w]


def _conv_fwd(x: np.ndarray, kmat: np.ndarray, kh, kw, s, p, ho, wo):
    cols = _im2col(x, kh, kw, s, p, ho, wo)
    out = np.matmul(kmat[np.newaxis], cols)  # (N, Co, ho*wo)
    return out.reshape(x.shape[0], kmat.shape[0], ho, wo), cols


def _conv_dx(dout: np.ndarray, kmat: np.ndarray, xshape, kh, kw, s, p, ho, wo) -> np.ndarray:
    n = dout.shape[0]
    dmat = dout.reshape(n, kmat.shape[0], ho * wo)
    dcols = np.matmul(kmat.T[np.newaxis], dmat)
    return _col2im(dcols, xshape, kh, kw, s, p, ho, wo)


def _conv_dk(dout: np.ndarray, cols: np.ndarray, co: int, ho: int, wo: int) -> np.ndarray:
    n = dout.shape[0]
    dmat = dout.reshape(n, co, ho * wo)
    return np.matmul(dmat, cols.transpose(0, 2, 1)).sum(axis=0)  # (Co, C*kh*kw)


def conv2d(x, K, b, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution (cross-correlation): x (N,Ci,H,W), K (Co,Ci,kh,kw)."""
    x, K, b = _wrap(x), _wrap(K), _wrap(b)
    if x.ndim != 4 or K.ndim != 4:
        raise ValueError(f"conv2d expects 4-D x and K, got {x.shape}, {K.shape}")
    n, ci, h, w = x.shape
    co, ci_k, kh, kw = K.shape
    if ci != ci_k:
        raise ValueError(f"conv2d channel mismatch: x has {ci}, kernel wants {ci_k}")
    if b.data.shape != (co,):
        raise ValueError(f"conv2d bias shape {b.shape}, want ({co},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    ho, wo = _conv_out(h, w, kh, kw, stride, padding)
    kmat = K.data.reshape(co, ci * kh * kw)
    out, cols = _conv_fwd(x.data, kmat, kh, kw, stride, padding, ho, wo)
    out = out + b.data[:, np.newaxis, np.newaxis]

    def bw(g):
        _accum(x, _conv_dx(g, kmat, x.data.shape, kh, kw, stride, padding, ho, wo))
        _accum(K, _conv_dk(g, cols, co, ho, wo).reshape(K.data.shape))
        _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(out, (x, K, b), bw)


def conv_transpose2d(
    x, K, b, stride: int = 1, padding: int = 0, output_padding: int = 0
) -> Tensor:
    """Transposed 2-D convolution, the adjoint of conv2d: x (N,Ci,H,W),
    K (Ci,Co,kh,kw). Output spatial size (H-1)*stride - 2*padding + kh +
    output_padding."""
    x, K, b = _wrap(x), _wrap(K), _wrap(b)
    if x.ndim != 4 or K.ndim != 4:
        raise ValueError(f"conv_transpose2d expects 4-D x and K, got {x.shape}, {K.shape}")
    n, ci, h, w = x.shape
    ci_k, co, kh, kw = K.shape
    if ci != ci_k:
        raise ValueError(f"conv_transpose2d channel mismatch: x has {ci}, kernel wants {ci_k}")
    if stride < 1 or padding < 0:
        raise ValueError(
            f"conv_transpose2d needs stride >= 1 and padding >= 0, got {stride}, {padding}"
        )
    if not 0 <= output_padding < stride:
        raise ValueError("output_padding must be in [0, stride)")
    if b.data.shape != (co,):
        raise ValueError(f"conv_transpose2d bias shape {b.shape}, want ({co},)")
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if ho <= 0 or wo <= 0:
        raise ValueError("conv_transpose2d output would be empty")
    # Forward is the input-gradient of a conv with kernel K viewed as
    # (out=Ci, in=Co); geometry must invert: conv(ho,wo) -> (h,w).
    h_check, w_check = _conv_out(ho, wo, kh, kw, stride, padding)
    if (h_check, w_check) != (h, w):
        raise ValueError(
            f"conv_transpose2d geometry inconsistent: input {h}x{w} vs reconstructed {h_check}x{w_check}"
        )
    kmat = K.data.reshape(ci, co * kh * kw)
    out = _conv_dx(x.data, kmat, (n, co, ho, wo), kh, kw, stride, padding, h, w)
    out = out + b.data[:, np.newaxis, np.newaxis]

    def bw(g):
        gcols = _im2col(g, kh, kw, stride, padding, h, w)
        if x.requires_grad:
            gx = np.matmul(kmat[np.newaxis], gcols).reshape(n, ci, h, w)
            _accum(x, gx)
        if K.requires_grad:
            dk = _conv_dk(x.data, gcols, ci, h, w)
            _accum(K, dk.reshape(K.data.shape))
        _accum(b, g.sum(axis=(0, 2, 3)))

    return _make(out, (x, K, b), bw)


# -- layers ------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, init: str = "kaiming"):
        if init == "kaiming":
            w = kaiming_uniform(rng, (in_dim, out_dim), in_dim)
        else:
            w = xavier_uniform(rng, (in_dim, out_dim), in_dim, out_dim)
        self.W = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return linear(x, self.W, self.b)

    def parameters(self) -> list[Tensor]:
        return [self.W, self.b]


class Conv2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int,
                 rng: np.random.Generator):
        fan_in = in_ch * kernel * kernel
        self.K = Tensor(kaiming_uniform(rng, (out_ch, in_ch, kernel, kernel), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def __call__(self, x) -> Tensor:
        return conv2d(x, self.K, self.b, self.stride, self.padding)

    def parameters(self) -> list[Tensor]:
        return [self.K, self.b]


class ConvTranspose2d:
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int, padding: int,
                 output_padding: int, rng: np.random.Generator):
        fan_in = in_ch * kernel * kernel
        self.K = Tensor(kaiming_uniform(rng, (in_ch, out_ch, kernel, kernel), fan_in),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.output_padding = output_padding

    def __call__(self, x) -> Tensor:
        return conv_transpose2d(x, self.K, self.b, self.stride, self.padding, self.output_padding)

    def parameters(self) -> list[Tensor]:
        return [self.K, self.b]


# -- optimizer ---------------------------------------------------------------


class Adam:
    """Adam with bias correction. Parameters whose grad is None are skipped
    entirely (their moment state does not advance)."""

    def __init__(self, params: list[Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        if lr < 0:
            raise ValueError("lr must be nonnegative")
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = [0] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            self._t[i] += 1
            t = self._t[i]
            m, v = self._m[i], self._v[i]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            mhat = m / (1.0 - self.b1**t)
            vhat = v / (1.0 - self.b2**t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, named: dict[str, Tensor]) -> None:
    """Write a JSON manifest of named tensors: {name, shape, data}."""
    doc = {
        "format": "gridlight-checkpoint-v1",
        "tensors": [
            {"name": name, "shape": list(t.data.shape), "data": t.data.ravel().tolist()}
            for name, t in sorted(named.items())
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path, named: dict[str, Tensor]) -> None:
    """Load a manifest into existing tensors in place. Name or shape
    mismatches raise ValueError naming both sides."""
    with open(path) as f:
        doc = json.load(f)
    entries = {e["name"]: e for e in doc["tensors"]}
    missing = sorted(set(named) - set(entries))
    extra = sorted(set(entries) - set(named))
    if missing or extra:
        raise ValueError(f"checkpoint names do not match model (missing={missing}, unexpected={extra})")
    for name, t in named.items():
        e = entries[name]
        shape = tuple(e["shape"])
        if shape != t.data.shape:
            raise ValueError(f"checkpoint tensor {name!r} has shape {shape}, model wants {t.data.shape}")
        t.data[...] = np.asarray(e["data"], dtype=np.float64).reshape(shape)
