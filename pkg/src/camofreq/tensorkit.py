"""Minimal float64 tensor with reverse-mode differentiation.

Feature maps are laid out ``H x W x C``; every spatial op also accepts a
leading batch axis (``N x H x W x C``). Graph edges are recorded only when an
input requires gradients, and there is no global autograd state.
"""
from __future__ import annotations

import struct
import zlib
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import ConfigurationError, ContractError, DimensionError, FormatError

__all__ = [
    "Tensor", "ParamStore", "as_tensor", "conv2d", "conv_transpose2d", "activation",
    "gelu", "sigmoid", "relu", "maxpool2d", "avgpool2d", "resize_nearest", "resample",
    "concat", "bce_with_logits", "gradcheck", "numerical_grad",
]


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """Dense float64 array that can take part in a gradient tape.

    Parameters
    ----------
    data : array_like
        Values; converted to a float64 ndarray.
    requires_grad : bool
        Whether ``backward`` should populate ``grad`` for this tensor.
    """

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (),
                 _backward: Callable | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward = _backward
        self.name = name

    # ------------------------------------------------------------------ basics
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # ------------------------------------------------------------- graph glue
    @staticmethod
    def _make(data, parents: Sequence["Tensor"], backward) -> "Tensor":
        if not any(p.requires_grad for p in parents):
            return Tensor(data)
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t``."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # ------------------------------------------------------------- arithmetic
    def __add__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other),
                            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._make(x * y, (self, other),
                            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        x, y = self.data, other.data
        out = x / y
        return Tensor._make(out, (self, other),
                            lambda g: (_unbroadcast(g / y, x.shape),
                                       _unbroadcast(-g * out / y, y.shape)))

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, exponent: float):
        x = self.data
        return Tensor._make(x ** exponent, (self,),
                            lambda g: (g * exponent * x ** (exponent - 1),))

    # -------------------------------------------------------------- reductions
    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if np.isscalar(axis) else axis
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def amax(self, axis: int = -1, keepdims: bool = False):
        """Maximum along one axis; the gradient goes to the first argmax."""
        x = self.data
        idx = np.expand_dims(np.argmax(x, axis=axis), axis)
        out = np.take_along_axis(x, idx, axis=axis)

        def back(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            full = np.zeros_like(x)
            np.put_along_axis(full, idx, g, axis=axis)
            return (full,)

        return Tensor._make(out if keepdims else np.squeeze(out, axis), (self,), back)

    # ---------------------------------------------------------------- shaping
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def __getitem__(self, index):
        x = self.data

        def back(g):
            full = np.zeros_like(x)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(x[index], (self,), back)

    # ------------------------------------------------------------ elementwise
    def abs(self):
        x = self.data
        return Tensor._make(np.abs(x), (self,), lambda g: (g * np.sign(x),))

    def sqrt(self):
        out = np.sqrt(self.data)

        def back(g):
            # zero subgradient at the origin keeps all-zero inputs finite
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, g / (2.0 * safe), 0.0),)

        return Tensor._make(out, (self,), back)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- activations
def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = special.expit(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out * (1.0 - out),))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._make(np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF written via erf."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data ** 2)
    return Tensor._make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


_ACTIVATIONS = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu}


def activation(kind: str, x) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    return fn(x)


# ---------------------------------------------------------------- convolution
def _check_map(x: Tensor, what: str) -> None:
    if x.ndim not in (3, 4):
        raise DimensionError(f"{what} expects H x W x C or N x H x W x C, got shape {x.shape}")


def conv2d(x, kernel, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (``[N,]H,W,Cin``) with ``kernel`` (``k,k,Cin,Cout``)."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_map(x, "conv2d")
    if kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"kernel must be k x k x Cin x Cout, got {kernel.shape}")
    k, _, cin, cout = kernel.shape
    if k % 2 == 0:
        raise ConfigurationError(f"conv2d kernel size must be odd, got {k}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"invalid stride={stride} / padding={padding}")
    if x.shape[-1] != cin:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    H, W = x.shape[-3], x.shape[-2]
    ho = (H + 2 * padding - k) // stride + 1
    wo = (W + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise DimensionError(f"input {H}x{W} too small for kernel {k} with padding {padding}")
    pad = [(0, 0)] * (x.ndim - 3) + [(padding, padding), (padding, padding), (0, 0)]
    xp = np.pad(x.data, pad) if padding else x.data
    w = kernel.data
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    out = np.zeros(x.shape[:-3] + (ho, wo, cout))
    for i in range(k):
        for j in range(k):
            out += xp[..., i:i + span_h:stride, j:j + span_w:stride, :] @ w[i, j]

    def back(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w)
        g2 = g.reshape(-1, cout)
        for i in range(k):
            for j in range(k):
                patch = xp[..., i:i + span_h:stride, j:j + span_w:stride, :]
                gw[i, j] = patch.reshape(-1, cin).T @ g2
                gx[..., i:i + span_h:stride, j:j + span_w:stride, :] += g @ w[i, j].T
        if padding:
            gx = gx[..., padding:padding + H, padding:padding + W, :]
        return gx, gw

    result = Tensor._make(out, (x, kernel), back)
    if bias is not None:
        result = result + bias
    return result


def conv_transpose2d(x, kernel, bias=None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution; output side is ``(H-1)*stride + k - 2*padding``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    _check_map(x, "conv_transpose2d")
    k, k2, cin, cout = kernel.shape
    if k != k2:
        raise DimensionError(f"kernel must be square, got {kernel.shape}")
    if x.shape[-1] != cin:
        raise DimensionError(f"input has {x.shape[-1]} channels, kernel expects {cin}")
    H, W = x.shape[-3], x.shape[-2]
    hf, wf = (H - 1) * stride + k, (W - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise DimensionError("padding removes the whole output")
    span_h, span_w = stride * (H - 1) + 1, stride * (W - 1) + 1
    w = kernel.data
    full = np.zeros(x.shape[:-3] + (hf, wf, cout))
    for i in range(k):
        for j in range(k):
            full[..., i:i + span_h:stride, j:j + span_w:stride, :] += x.data @ w[i, j]
    out = full[..., padding:padding + ho, padding:padding + wo, :]

    def back(g):
        gfull = np.zeros(full.shape)
        gfull[..., padding:padding + ho, padding:padding + wo, :] = g
        gx = np.zeros_like(x.data)
        gw = np.zeros_like(w)
        xs = x.data.reshape(-1, cin)
        for i in range(k):
            for j in range(k):
                gs = gfull[..., i:i + span_h:stride, j:j + span_w:stride, :]
                gx += gs @ w[i, j].T
                gw[i, j] = xs.T @ gs.reshape(-1, cout)
        return gx, gw

    result = Tensor._make(np.ascontiguousarray(out), (x, kernel), back)
    if bias is not None:
        result = result + bias
    return result


# ------------------------------------------------------------------ resampling
def _blocks(x: np.ndarray, factor: int) -> np.ndarray:
    H, W, C = x.shape[-3:]
    if H % factor or W % factor:
        raise DimensionError(f"{H}x{W} is not divisible by pooling factor {factor}")
    return x.reshape(x.shape[:-3] + (H // factor, factor, W // factor, factor, C))


def maxpool2d(x, factor: int) -> Tensor:
    """Non-overlapping ``factor x factor`` max pooling."""
    x = as_tensor(x)
    _check_map(x, "maxpool2d")
    b = _blocks(x.data, factor)
    lead = b.shape[:-5]
    hb, wb, C = b.shape[-5], b.shape[-3], b.shape[-1]
    # windows flattened to the last-but-one axis
    win = np.moveaxis(b, -4, -3).reshape(lead + (hb, wb, factor * factor, C))
    idx = np.argmax(win, axis=-2)[..., None, :]
    out = np.take_along_axis(win, idx, axis=-2)[..., 0, :]

    def back(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx, g[..., None, :], axis=-2)
        gw = gw.reshape(lead + (hb, wb, factor, factor, C))
        return (np.moveaxis(gw, -3, -4).reshape(x.shape),)

    return Tensor._make(out, (x,), back)


def avgpool2d(x, factor: int) -> Tensor:
    x = as_tensor(x)
    _check_map(x, "avgpool2d")
    b = _blocks(x.data, factor)
    out = b.mean(axis=(-4, -2))

    def back(g):
        g = np.expand_dims(g, (-4, -2)) / (factor * factor)
        return (np.broadcast_to(g, b.shape).reshape(x.shape).copy(),)

    return Tensor._make(out, (x,), back)


def resize_nearest(x, hw: tuple[int, int]) -> Tensor:
    """Nearest-neighbour resize to ``hw``; source index ``floor(i * H_in / H_out)``."""
    x = as_tensor(x)
    _check_map(x, "resize_nearest")
    H, W = x.shape[-3], x.shape[-2]
    ho, wo = int(hw[0]), int(hw[1])
    if (ho, wo) == (H, W):
        return x
    rows = (np.arange(ho) * H) // ho
    cols = (np.arange(wo) * W) // wo
    out = x.data[..., rows[:, None], cols[None, :], :]

    def back(g):
        gx = np.zeros_like(x.data)
        # accumulate rows then columns; both are plain index scatters
        tmp = np.zeros(x.shape[:-3] + (H, wo, x.shape[-1]))
        np.add.at(tmp, (Ellipsis, rows, slice(None), slice(None)), g)
        np.add.at(gx, (Ellipsis, cols, slice(None)), tmp)
        return (gx,)

    return Tensor._make(out, (x,), back)


def resample(x, factor: int, direction: str, mode: str = "nearest", weight=None, bias=None) -> Tensor:
    """Scale the spatial grid by ``factor`` (2 or 4) up or down.

    ``mode`` is ``"transposed"`` (learned, needs ``weight`` of size ``2*factor``)
    or ``"nearest"`` for upsampling, ``"maxpool"`` or ``"nearest"`` for downsampling.
    """
    x = as_tensor(x)
    if factor not in (2, 4):
        raise ConfigurationError(f"resample factor must be 2 or 4, got {factor}")
    H, W = x.shape[-3], x.shape[-2]
    if direction == "up":
        if mode == "nearest":
            return resize_nearest(x, (H * factor, W * factor))
        if mode == "transposed":
            if weight is None:
                raise ConfigurationError("transposed resampling needs a weight tensor")
            if as_tensor(weight).shape[0] != 2 * factor:
                raise ConfigurationError(f"transposed kernel must be {2 * factor} wide for factor {factor}")
            return conv_transpose2d(x, weight, bias, stride=factor, padding=factor // 2)
    elif direction == "down":
        if H % factor or W % factor:
            raise DimensionError(f"{H}x{W} is not divisible by {factor}")
        if mode == "maxpool":
            return maxpool2d(x, factor)
        if mode == "nearest":
            return resize_nearest(x, (H // factor, W // factor))
    else:
        raise ConfigurationError(f"direction must be 'up' or 'down', got {direction!r}")
    raise ConfigurationError(f"mode {mode!r} not available for direction {direction!r}")


# --------------------------------------------------------------------- misc
def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in ts], axis=axis)
    return Tensor._make(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))


def bce_with_logits(logits, target) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a {0,1} target."""
    z = as_tensor(logits)
    t = np.asarray(as_tensor(target).data, dtype=np.float64)
    if z.shape != t.shape:
        raise DimensionError(f"logits {z.shape} and target {t.shape} differ")
    zd = z.data
    per = np.maximum(zd, 0.0) - zd * t + np.log1p(np.exp(-np.abs(zd)))
    n = zd.size
    return Tensor._make(np.asarray(per.mean()), (z,), lambda g: (g * (special.expit(zd) - t) / n,))


# ------------------------------------------------------------ gradient check
def numerical_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5,
                   indices: Iterable | None = None) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``param``.

    ``param.data`` is perturbed in place and restored. If ``indices`` is given
    (flat indices), only those entries are filled; the rest stay zero.
    """
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in (range(flat.size) if indices is None else indices):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn().data)
        flat[i] = orig - h
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return out.reshape(param.shape)


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst scale-normalised error between analytic and numerical gradients.

    For each parameter the error is ``max|analytic - numeric| / max(max|analytic|,
    max|numeric|)``; the maximum over parameters is returned.
    """
    for p in params:
        p.grad = None
    fn().backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros(p.shape) if p.grad is None else p.grad
        numeric = numerical_grad(fn, p, h)
        scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
        worst = max(worst, float(np.abs(analytic - numeric).max() / scale))
    return worst


# ----------------------------------------------------------------- parameters
_MAGIC = b"CFRQ1"


class ParamStore:
    """Named trainable tensors with seeded, order-independent initialisation.

    Each parameter draws from its own generator seeded with ``(rng_seed,
    crc32(name))``, so the value of a parameter depends only on the seed and
    its name.
    """

    def __init__(self, rng_seed: int = 0):
        if rng_seed < 0:
            raise ConfigurationError("rng_seed must be unsigned")
        self.rng_seed = int(rng_seed)
        self._params: dict[str, Tensor] = {}

    def _rng(self, name: str) -> np.random.Generator:
        return np.random.default_rng([self.rng_seed, zlib.crc32(name.encode("utf-8"))])

    def add(self, name: str, shape: Sequence[int], init: str = "he", fan_in: int | None = None,
            scale: float = 1.0) -> Tensor:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        elif init == "he":
            if fan_in is None:
                fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
            data = self._rng(name).standard_normal(shape) * (scale * np.sqrt(2.0 / fan_in))
        elif init == "normal":
            data = self._rng(name).standard_normal(shape) * scale
        else:
            raise ConfigurationError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def set(self, name: str, value) -> Tensor:
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise ConfigurationError(f"missing parameter {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self._params]
        if missing:
            raise ConfigurationError(f"parameter store lacks {missing}")

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def copy(self) -> "ParamStore":
        out = ParamStore(self.rng_seed)
        for k, v in self._params.items():
            out.set(k, v.data.copy())
        return out

    # --------------------------------------------------------- serialisation
    def save(self, path) -> None:
        """Write ``CFRQ1`` followed by (name length, name, rank, dims, float64 LE data)."""
        with open(path, "wb") as fh:
            fh.write(_MAGIC)
            for name, t in self._params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                fh.write(struct.pack("<I", t.ndim))
                fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            buf = fh.read()
        if buf[:len(_MAGIC)] != _MAGIC:
            raise FormatError(f"{path}: not a parameter file (bad magic)")
        store = cls()
        pos = len(_MAGIC)
        try:
            while pos < len(buf):
                (n,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                name = buf[pos:pos + n].decode("utf-8")
                pos += n
                (rank,) = struct.unpack_from("<I", buf, pos)
                pos += 4
                dims = struct.unpack_from(f"<{rank}Q", buf, pos)
                pos += 8 * rank
                count = int(np.prod(dims)) if rank else 1
                if pos + 8 * count > len(buf):
                    raise FormatError(f"{path}: truncated payload for {name!r}")
                data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
                pos += 8 * count
                if name in store:
                    raise FormatError(f"{path}: duplicate parameter {name!r}")
                store.set(name, data.astype(np.float64))
        except struct.error as exc:
            raise FormatError(f"{path}: truncated record at byte {pos}") from exc
        return store
