"""Dense float64 tensors with a dynamic reverse-mode tape and AdamW.

Every operation that can participate in a gradient records a backward
closure on the output node; ``backward`` replays the recorded graph in
reverse topological order. The core is deliberately small: 2-D-centric
arithmetic with optional leading batch axes, trailing-axis affine
broadcasting, and a handful of fused network primitives (layer norm,
softmax, causal attention, cross entropy) with hand-derived backwards.

Determinism contract: all reductions run in a fixed sequential order, so a
fixed seed and config reproduce results bitwise on the same machine. The
backward sweep processes the subgraph of an earlier-constructed operand
before a later one, which makes gradient accumulation match the order of
separate backward passes.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError, InputError, NonFiniteError

_GRAD_ENABLED = True

_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / finite differences)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """A float64 array plus an optional gradient buffer and tape record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) and _GRAD_ENABLED
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def backward(self):
        backward(self)

    def item(self) -> float:
        return float(self.data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents, backward_fn) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError("operation produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> None:
    """Populate ``grad`` on every reachable requires_grad node with d(loss)/d(node).

    Repeated calls without ``grad = None`` resets accumulate.
    """
    if loss.data.shape != ():
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        # Natural push order makes the first-constructed parent's subgraph run
        # first in the reverse sweep (LIFO pops later parents for expansion
        # first, so they land earlier in topo order).
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    adjoint: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    for node in reversed(topo):
        g = adjoint.get(id(node))
        if g is None or node._backward is None:
            continue
        contribs = node._backward(g)
        for parent, c in zip(node._parents, contribs):
            if c is None or not parent.requires_grad:
                continue
            prev = adjoint.get(id(parent))
            adjoint[id(parent)] = c if prev is None else prev + c
    for node in topo:
        a = adjoint.get(id(node))
        if a is None:
            continue
        node.grad = a if node.grad is None else node.grad + a


# -- elementwise and affine ops ----------------------------------------------


def _suffix_reduce(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient over the leading axes not present in a trailing-shape operand."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, opname: str) -> None:
    # Allowed: equal shapes, b a trailing suffix of a, or either a scalar.
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        return
    raise DimensionError(f"{opname}: shapes {a.shape} and {b.shape} are not compatible")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim > a.data.ndim:
        a, b = b, a
    _check_broadcast(a.data, b.data, "add")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g if a.requires_grad else None
        gb = _suffix_reduce(g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(ad + bd, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim > a.data.ndim:
        raise DimensionError("sub: subtrahend may not have more axes than minuend")
    _check_broadcast(a.data, b.data, "sub")
    bd = b.data

    def bwd(g):
        ga = g if a.requires_grad else None
        gb = -_suffix_reduce(g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(a.data - bd, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if b.data.ndim > a.data.ndim:
        a, b = b, a
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g * bd if a.requires_grad else None
        gb = _suffix_reduce(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _from_op(ad * bd, (a, b), bwd)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        return (-g,)

    return _from_op(-a.data, (a,), bwd)


def tsum(a) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape

    def bwd(g):
        return (g * np.ones(shape, dtype=np.float64),)

    return _from_op(a.data.sum(), (a,), bwd)


def tmean(a) -> Tensor:
    a = as_tensor(a)
    shape = a.data.shape
    n = a.data.size

    def bwd(g):
        return (g * np.full(shape, 1.0 / n),)

    return _from_op(a.data.mean(), (a,), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    orig = a.data.shape

    def bwd(g):
        return (g.reshape(orig),)

    return _from_op(a.data.reshape(shape), (a,), bwd)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    """Take ``a[..., start:stop, ...]`` along ``axis``; backward zero-pads."""
    a = as_tensor(a)
    orig = a.data.shape
    idx = [slice(None)] * a.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        full = np.zeros(orig, dtype=np.float64)
        full[idx] = g
        return (full,)

    return _from_op(a.data[idx].copy(), (a,), bwd)


def slice_cols(a, start: int, stop: int) -> Tensor:
    return slice_axis(a, -1, start, stop)


def concat_cols(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[:-1] != b.data.shape[:-1]:
        raise DimensionError(f"concat_cols: leading shapes differ, {a.data.shape} vs {b.data.shape}")
    na = a.data.shape[-1]

    def bwd(g):
        ga = g[..., :na] if a.requires_grad else None
        gb = g[..., na:] if b.requires_grad else None
        return ga, gb

    return _from_op(np.concatenate([a.data, b.data], axis=-1), (a, b), bwd)


def matmul(a, b) -> Tensor:
    """``a @ b`` where ``b`` is 2-D and ``a`` has any number of leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul expects (..,M,K) x (K,N), got {a.data.shape} x {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise DimensionError(f"matmul inner dims differ: {a.data.shape} x {b.data.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        if b.requires_grad:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = None
        return ga, gb

    return _from_op(ad @ bd, (a, b), bwd)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def gelu(a) -> Tensor:
    """tanh-approximation GELU."""
    a = as_tensor(a)
    x = a.data
    u = _GELU_C * (x + _GELU_A * x ** 3)
    t = np.tanh(u)
    y = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3.0 * _GELU_A * x ** 2)
        dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * du
        return (g * dy,)

    return _from_op(y, (a,), bwd)


def layer_norm(x, gamma, beta, eps: float) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    if eps < 0:
        raise ContractError("layer_norm: eps must be >= 0")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.data.shape[-1]
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta must have shape ({d},), got {gamma.data.shape}/{beta.data.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = gamma.data * xhat + beta.data

    def bwd(g):
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        else:
            ggamma = None
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        else:
            gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        else:
            gx = None
        return gx, ggamma, gbeta

    return _from_op(y, (x, gamma, beta), bwd)


def softmax_last(x) -> Tensor:
    """Row-stabilized softmax over the last axis."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _from_op(y, (x,), bwd)


def cross_entropy(logits, targets) -> Tensor:
    """Mean next-token negative log-likelihood (natural log)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets)
    v = logits.data.shape[-1]
    flat = logits.data.reshape(-1, v)
    tflat = targets.reshape(-1)
    if tflat.shape[0] != flat.shape[0]:
        raise DimensionError(
            f"cross_entropy: {flat.shape[0]} rows of logits vs {tflat.shape[0]} targets")
    if tflat.min() < 0 or tflat.max() >= v:
        raise InputError("cross_entropy: target id out of range")
    m = flat.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(flat - m).sum(axis=-1))
    n = flat.shape[0]
    nll = (lse - flat[np.arange(n), tflat]).mean()
    shape = logits.data.shape

    def bwd(g):
        p = np.exp(flat - lse[:, None])
        p[np.arange(n), tflat] -= 1.0
        return ((float(g) / n) * p.reshape(shape),)

    return _from_op(np.asarray(nll), (logits,), bwd)


def embedding(table, ids) -> Tensor:
    """Gather rows of ``table`` by integer ids; backward scatter-adds."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.min() < 0 or ids.max() >= table.data.shape[0]:
        raise InputError("embedding: id out of range")
    tshape = table.data.shape

    def bwd(g):
        gt = np.zeros(tshape, dtype=np.float64)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, tshape[-1]))
        return (gt,)

    return _from_op(table.data[ids], (table,), bwd)


_MASK_CACHE: dict[int, np.ndarray] = {}


def _causal_mask(s: int) -> np.ndarray:
    m = _MASK_CACHE.get(s)
    if m is None:
        m = np.where(np.triu(np.ones((s, s)), k=1) > 0, -1e30, 0.0)
        _MASK_CACHE[s] = m
    return m


def causal_attention(q, k, v, n_heads: int) -> Tensor:
    """Multi-head scaled dot-product attention with a causal mask.

    Query/key/value are ``(..., S, D)`` with ``D`` divisible by ``n_heads``;
    position ``i`` attends to key positions ``j <= i``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.data.shape != k.data.shape or q.data.shape != v.data.shape:
        raise DimensionError(
            f"attention: q/k/v shapes differ: {q.data.shape}/{k.data.shape}/{v.data.shape}")
    s, d = q.data.shape[-2], q.data.shape[-1]
    if d % n_heads != 0:
        raise DimensionError(f"attention: d_model {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    lead = q.data.shape[:-2]

    def split(x):
        return x.reshape(*lead, s, n_heads, dh).swapaxes(-3, -2)

    def merge(x):
        return x.swapaxes(-3, -2).reshape(*lead, s, d)

    qh, kh, vh = split(q.data), split(k.data), split(v.data)
    scale = 1.0 / np.sqrt(dh)
    scores = (qh @ kh.swapaxes(-1, -2)) * scale + _causal_mask(s)
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    attn = e / e.sum(axis=-1, keepdims=True)
    out = merge(attn @ vh)

    def bwd(g):
        gh = split(g)
        gattn = gh @ vh.swapaxes(-1, -2)
        ds = attn * (gattn - (gattn * attn).sum(axis=-1, keepdims=True))
        gq = merge((ds @ kh) * scale) if q.requires_grad else None
        gk = merge((ds.swapaxes(-1, -2) @ qh) * scale) if k.requires_grad else None
        gv = merge(attn.swapaxes(-1, -2) @ gh) if v.requires_grad else None
        return gq, gk, gv

    return _from_op(out, (q, k, v), bwd)


# -- optimizer ----------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list."""

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.data.shape:
                raise DimensionError(f"adamw: grad shape {g.shape} != param shape {p.data.shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError("adamw: non-finite gradient")
            if self.weight_decay != 0.0:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


# -- verification --------------------------------------------------------------


def grad_check(f, wrt, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central finite differences.

    ``f`` rebuilds and returns the scalar loss on every call; ``wrt`` is the
    list of tensors to perturb. The numeric side never touches the tape.
    """
    if h <= 0:
        raise ContractError("grad_check: h must be positive")
    wrt = list(wrt)
    for p in wrt:
        p.grad = None
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in wrt]
    worst = 0.0
    for p, an in zip(wrt, analytic):
        flat = p.data.reshape(-1)
        aflat = an.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = float(f().data)
            flat[i] = orig - h
            with no_grad():
                down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2.0 * h)
            denom = max(abs(aflat[i]), abs(num), 1e-8)
            worst = max(worst, abs(aflat[i] - num) / denom)
    for p in wrt:
        p.grad = None
    return worst
