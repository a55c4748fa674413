"""Dense math and neural building blocks with hand-written backward passes.

Every block follows the same convention: ``forward`` returns ``(output, cache)``
and ``backward(dout, cache)`` returns the input gradient(s) followed by a
parameter-gradient object of the same type as the block. Parameter containers
are plain dataclasses of float64 arrays; :func:`arrays` walks them.
"""

from __future__ import annotations

import dataclasses
import math
import struct
from collections import Counter
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator

import numpy as np


class ShapeError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class EvaluationError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# deterministic randomness

def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator keyed by ``(seed, stream)``; identical keys give identical draws."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(stream)])))


# ---------------------------------------------------------------------------
# multiply-accumulate accounting

_MACS: ContextVar[Counter | None] = ContextVar("widthformer_macs", default=None)
_SCOPE: ContextVar[str] = ContextVar("widthformer_mac_scope", default="")


@contextmanager
def count_macs() -> Iterator[Counter]:
    """Collect MAC counts of every block executed inside the context.

    Keys are ``"<scope>.<kind>"`` where kind is ``proj`` (dense layers),
    ``attn`` (score and weighted-sum products), ``agg`` (weighted reductions)
    or ``matmul``.
    """
    counter: Counter = Counter()
    token = _MACS.set(counter)
    try:
        yield counter
    finally:
        _MACS.reset(token)


@contextmanager
def mac_scope(name: str) -> Iterator[None]:
    outer = _SCOPE.get()
    token = _SCOPE.set(f"{outer}.{name}" if outer else name)
    try:
        yield
    finally:
        _SCOPE.reset(token)


def tally(kind: str, n: int) -> None:
    counter = _MACS.get()
    if counter is None:
        return
    scope = _SCOPE.get()
    counter[f"{scope}.{kind}" if scope else kind] += int(n)


# ---------------------------------------------------------------------------
# primitives

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    tally("matmul", a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(dy: np.ndarray, y: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (dy - np.sum(dy * y, axis=axis, keepdims=True))


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


# ---------------------------------------------------------------------------
# parameter trees

def arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    """Yield ``(path, array)`` for every ndarray reachable through dataclass fields and lists."""
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            yield from arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from arrays(item, f"{prefix}[{i}]")


def tree_map(fn: Callable[[np.ndarray], np.ndarray], obj):
    if isinstance(obj, np.ndarray):
        return fn(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.replace(
            obj, **{f.name: tree_map(fn, getattr(obj, f.name)) for f in dataclasses.fields(obj) if f.init}
        )
    if isinstance(obj, list):
        return [tree_map(fn, item) for item in obj]
    if isinstance(obj, tuple):
        return tuple(tree_map(fn, item) for item in obj)
    return obj


def tree_copy(obj):
    return tree_map(np.copy, obj)


def param_count(obj) -> int:
    return sum(a.size for _, a in arrays(obj))


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# blocks

@dataclass
class Linear:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"inconsistent linear parameters {self.weight.shape} / {self.bias.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "Linear":
        return cls(uniform_init(rng, n_in, (n_out, n_in)), uniform_init(rng, n_in, (n_out,)))

    @classmethod
    def identity(cls, n: int) -> "Linear":
        return cls(np.eye(n), np.zeros(n))

    @classmethod
    def zeros(cls, n_in: int, n_out: int) -> "Linear":
        return cls(np.zeros((n_out, n_in)), np.zeros(n_out))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"linear expects trailing dim {self.n_in}, got {x.shape}")
        tally("proj", x.size // self.n_in * self.n_in * self.n_out)
        return x @ self.weight.T + self.bias, x

    def backward(self, dy: np.ndarray, x: np.ndarray):
        dy2 = dy.reshape(-1, self.n_out)
        x2 = x.reshape(-1, self.n_in)
        grads = Linear(dy2.T @ x2, dy2.sum(axis=0))
        return dy @ self.weight, grads

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


@dataclass
class Mlp:
    """Affine layers with ReLU between them (not after the last)."""

    layers: list[Linear]

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("an MLP needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise ShapeError(f"layer dims do not chain: {a.n_out} -> {b.n_in}")

    @classmethod
    def init(cls, rng: np.random.Generator, dims: list[int]) -> "Mlp":
        return cls([Linear.init(rng, a, b) for a, b in zip(dims, dims[1:])])

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def forward(self, x: np.ndarray):
        caches = []
        h = x
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            h, c = layer.forward(h)
            caches.append((c, h))
            if i < last:
                h = relu(h)
        return h, caches

    def backward(self, dy: np.ndarray, caches):
        grads = []
        d = dy
        for i in range(len(self.layers) - 1, -1, -1):
            layer_in, pre = caches[i]
            if i < len(self.layers) - 1:
                d = d * (pre > 0)
            d, g = self.layers[i].backward(d, layer_in)
            grads.append(g)
        return d, Mlp(grads[::-1])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def mlp_forward(m: Mlp, x: np.ndarray) -> np.ndarray:
    return m(np.asarray(x, dtype=float))


@dataclass
class LayerNorm:
    gain: np.ndarray
    shift: np.ndarray
    eps: float = 1e-5

    @classmethod
    def init(cls, c: int, eps: float = 1e-5) -> "LayerNorm":
        return cls(np.ones(c), np.zeros(c), eps)

    def forward(self, x: np.ndarray):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = xc * inv
        return xhat * self.gain + self.shift, (xhat, inv)

    def backward(self, dy: np.ndarray, cache):
        xhat, inv = cache
        c = xhat.shape[-1]
        grads = LayerNorm(
            (dy * xhat).reshape(-1, c).sum(axis=0), dy.reshape(-1, c).sum(axis=0), self.eps
        )
        dxhat = dy * self.gain
        dx = inv * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, grads

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]


def layer_norm(x, gain, shift, eps: float = 1e-5) -> np.ndarray:
    return LayerNorm(np.asarray(gain, float), np.asarray(shift, float), eps)(np.asarray(x, float))


@dataclass
class MultiHeadAttention:
    """Scaled dot-product attention over the last two axes; leading axes are batch."""

    q: Linear
    k: Linear
    v: Linear
    o: Linear
    heads: int = 4

    def __post_init__(self):
        c = self.q.n_out
        if c % self.heads:
            raise ConfigError(f"channels {c} not divisible by {self.heads} heads")

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, heads: int) -> "MultiHeadAttention":
        if heads < 1 or c % heads:
            raise ConfigError(f"channels {c} not divisible by {heads} heads")
        return cls(*(Linear.init(rng, c, c) for _ in range(4)), heads=heads)

    @classmethod
    def identity(cls, c: int, heads: int) -> "MultiHeadAttention":
        return cls(*(Linear.identity(c) for _ in range(4)), heads=heads)

    def _split(self, x: np.ndarray) -> np.ndarray:
        *lead, n, c = x.shape
        return x.reshape(*lead, n, self.heads, c // self.heads).swapaxes(-2, -3)

    @staticmethod
    def _merge(x: np.ndarray) -> np.ndarray:
        x = x.swapaxes(-2, -3)
        return x.reshape(*x.shape[:-2], -1)

    def forward(self, query: np.ndarray, key: np.ndarray, value: np.ndarray):
        c = query.shape[-1]
        if c % self.heads:
            raise ConfigError(f"channels {c} not divisible by {self.heads} heads")
        if key.shape[-2] < 1 or key.shape != value.shape or key.shape[-1] != c:
            raise ShapeError(f"bad attention operands {query.shape} {key.shape} {value.shape}")
        scale = 1.0 / math.sqrt(c // self.heads)
        qp, cq = self.q.forward(query)
        kp, ck = self.k.forward(key)
        vp, cv = self.v.forward(value)
        qh, kh, vh = self._split(qp), self._split(kp), self._split(vp)
        attn = softmax((qh @ kh.swapaxes(-1, -2)) * scale, axis=-1)
        oh = attn @ vh
        tally("attn", 2 * attn.size * (c // self.heads))
        out, co = self.o.forward(self._merge(oh))
        return out, (cq, ck, cv, co, qh, kh, vh, attn, scale)

    def backward(self, dout: np.ndarray, cache):
        cq, ck, cv, co, qh, kh, vh, attn, scale = cache
        dmerged, go = self.o.backward(dout, co)
        doh = self._split(dmerged)
        dattn = doh @ vh.swapaxes(-1, -2)
        dvh = attn.swapaxes(-1, -2) @ doh
        ds = softmax_backward(dattn, attn) * scale
        dqh = ds @ kh
        dkh = ds.swapaxes(-1, -2) @ qh
        dquery, gq = self.q.backward(self._merge(dqh), cq)
        dkey, gk = self.k.backward(self._merge(dkh), ck)
        dvalue, gv = self.v.backward(self._merge(dvh), cv)
        return dquery, dkey, dvalue, MultiHeadAttention(gq, gk, gv, go, heads=self.heads)

    def __call__(self, query, key, value) -> np.ndarray:
        return self.forward(query, key, value)[0]


def mha(query, key, value, heads: int, params: MultiHeadAttention) -> np.ndarray:
    if params.heads != heads:
        raise ConfigError(f"params built for {params.heads} heads, asked for {heads}")
    return params(np.asarray(query, float), np.asarray(key, float), np.asarray(value, float))


# ---------------------------------------------------------------------------
# finite-difference verification

def grad_check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x = np.array(x, dtype=float)
    analytic = np.asarray(analytic, dtype=float)
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise EvaluationError(f"non-finite function value near coordinate {i}")
        numeric = (fp - fm) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def grad_check_params(loss: Callable[[], float], params, grads, h: float = 1e-5) -> dict[str, float]:
    """Finite-difference check of every array in ``params`` against ``grads``.

    ``loss`` must read ``params`` at call time; arrays are perturbed in place
    and restored.
    """
    analytic = dict(arrays(grads))
    report = {}
    for name, arr in arrays(params):
        def f(values, arr=arr):
            saved = arr.copy()
            arr[...] = values
            try:
                return loss()
            finally:
                arr[...] = saved

        report[name] = grad_check(f, arr.copy(), analytic[name], h)
    return report


# ---------------------------------------------------------------------------
# BVT1 tensor dumps

_MAGIC = b"BVT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def write_tensor(path, array: np.ndarray, dtype: str = "f64") -> None:
    code = {"f32": 0, "f64": 1}[dtype]
    array = np.ascontiguousarray(array, dtype=_DTYPES[code])
    header = _MAGIC + struct.pack("<BB", code, array.ndim)
    header += struct.pack(f"<{array.ndim}Q", *array.shape)
    Path(path).write_bytes(header + array.tobytes(order="C"))


def read_tensor(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a BVT1 tensor file")
    code, ndim = struct.unpack_from("<BB", raw, 4)
    if code not in _DTYPES:
        raise ValueError(f"{path}: unknown dtype byte {code}")
    dims = struct.unpack_from(f"<{ndim}Q", raw, 6)
    offset = 6 + 8 * ndim
    count = int(np.prod(dims)) if dims else 1
    dt = _DTYPES[code]
    if len(raw) - offset != count * dt.itemsize:
        raise ValueError(f"{path}: payload size does not match dims {dims}")
    return np.frombuffer(raw, dtype=dt, count=count, offset=offset).reshape(dims).copy()
