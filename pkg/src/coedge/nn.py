"""Minimal float64 autodiff kernel: dense layers, attention, masked softmax,
losses and Adam, with analytic gradients meant to be checked against central
finite differences.

Scope is deliberately small: reverse-mode on a dynamic graph of numpy arrays,
weights always 2-D, everything double precision. No views are shared between
graph nodes and caller arrays except parameter values, which optimizers update
in place between graphs.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = [
    "Var", "Param", "const", "stop_gradient", "backward", "zero_grads",
    "matmul", "relu", "tanh", "exp", "log", "vsum", "vmean", "square",
    "minimum", "clip", "gather_rows", "expand_dims", "dropout",
    "masked_log_softmax", "softmax_rows", "entropy_rows", "mse",
    "Linear", "MLP", "Attention", "Adam",
    "xavier_uniform", "finite_difference", "save_params", "load_params",
    "NEG_BIG",
]

# finite stand-in for -inf so 0 * NEG_BIG stays 0.0 instead of nan
NEG_BIG = -1.0e30


class Param:
    """Named trainable leaf. `value` is updated in place by optimizers."""

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    def var(self) -> "Var":
        return Var(self.value, leaf=self)

    def __repr__(self) -> str:
        return f"Param({self.name}, shape={self.value.shape})"


class Var:
    """Graph node: a value, its parents and the local backward rule."""

    __slots__ = ("value", "parents", "grad_fn", "leaf")

    def __init__(self, value, parents=(), grad_fn=None, leaf: Param | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.grad_fn = grad_fn  # upstream grad -> tuple of parent grads
        self.leaf = leaf

    @property
    def shape(self):
        return self.value.shape

    # arithmetic sugar; rhs may be Var, ndarray or scalar
    def __add__(self, other):
        return _add(self, _as_var(other))

    def __radd__(self, other):
        return _add(_as_var(other), self)

    def __sub__(self, other):
        return _add(self, _neg(_as_var(other)))

    def __rsub__(self, other):
        return _add(_as_var(other), _neg(self))

    def __mul__(self, other):
        return _mul(self, _as_var(other))

    def __rmul__(self, other):
        return _mul(_as_var(other), self)

    def __neg__(self):
        return _neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def const(value) -> Var:
    """Leafless node: constant input, no gradient flows past it."""
    return Var(value)


def _as_var(x) -> Var:
    return x if isinstance(x, Var) else const(x)


def stop_gradient(v: Var) -> Var:
    """Detach: same numbers, no parents."""
    return const(v.value.copy())


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _add(a: Var, b: Var) -> Var:
    out = a.value + b.value

    def grad_fn(up):
        return _unbroadcast(up, a.value.shape), _unbroadcast(up, b.value.shape)

    return Var(out, (a, b), grad_fn)


def _neg(a: Var) -> Var:
    return Var(-a.value, (a,), lambda up: (-up,))


def _mul(a: Var, b: Var) -> Var:
    out = a.value * b.value

    def grad_fn(up):
        return (_unbroadcast(up * b.value, a.value.shape),
                _unbroadcast(up * a.value, b.value.shape))

    return Var(out, (a, b), grad_fn)


def matmul(a: Var, b: Var) -> Var:
    """a @ b with b restricted to 2-D (weight matrices); a may be batched."""
    a, b = _as_var(a), _as_var(b)
    if b.value.ndim != 2:
        raise ValueError("matmul rhs must be 2-D")
    out = a.value @ b.value

    def grad_fn(up):
        ga = up @ b.value.T
        a2 = a.value.reshape(-1, a.value.shape[-1])
        up2 = up.reshape(-1, up.shape[-1])
        gb = a2.T @ up2
        return ga, gb

    return Var(out, (a, b), grad_fn)


def relu(a: Var) -> Var:
    keep = a.value > 0

    def grad_fn(up):
        return (up * keep,)

    return Var(a.value * keep, (a,), grad_fn)


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)

    def grad_fn(up):
        return (up * (1.0 - out * out),)

    return Var(out, (a,), grad_fn)


def exp(a: Var) -> Var:
    out = np.exp(a.value)

    def grad_fn(up):
        return (up * out,)

    return Var(out, (a,), grad_fn)


def log(a: Var) -> Var:
    out = np.log(a.value)

    def grad_fn(up):
        return (up / a.value,)

    return Var(out, (a,), grad_fn)


def square(a: Var) -> Var:
    def grad_fn(up):
        return (up * 2.0 * a.value,)

    return Var(a.value * a.value, (a,), grad_fn)


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def grad_fn(up):
        g = np.asarray(up)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Var(out, (a,), grad_fn)


def vmean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def minimum(a: Var, b: Var) -> Var:
    """Elementwise min; on ties the gradient routes to the first argument."""
    a, b = _as_var(a), _as_var(b)
    take_a = a.value <= b.value

    def grad_fn(up):
        return (_unbroadcast(up * take_a, a.value.shape),
                _unbroadcast(up * ~take_a, b.value.shape))

    return Var(np.minimum(a.value, b.value), (a, b), grad_fn)


def clip(a: Var, lo: float, hi: float) -> Var:
    inside = (a.value > lo) & (a.value < hi)

    def grad_fn(up):
        return (up * inside,)

    return Var(np.clip(a.value, lo, hi), (a,), grad_fn)


def gather_rows(a: Var, idx: np.ndarray) -> Var:
    """Pick one column per row: out[i] = a[i, idx[i]]."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.value.shape[0])
    out = a.value[rows, idx]

    def grad_fn(up):
        g = np.zeros_like(a.value)
        np.add.at(g, (rows, idx), up)
        return (g,)

    return Var(out, (a,), grad_fn)


def expand_dims(a: Var, axis: int) -> Var:
    out = np.expand_dims(a.value, axis)

    def grad_fn(up):
        return (np.squeeze(up, axis=axis),)

    return Var(out, (a,), grad_fn)


def reshape(a: Var, shape: tuple) -> Var:
    in_shape = a.value.shape
    out = a.value.reshape(shape)

    def grad_fn(up):
        return (up.reshape(in_shape),)

    return Var(out, (a,), grad_fn)


def dropout(a: Var, rate: float, rng: np.random.Generator | None) -> Var:
    """Inverted dropout. rng=None or rate<=0 is identity (eval mode)."""
    if rng is None or rate <= 0.0:
        return a
    keep = (rng.random(a.value.shape) >= rate) / (1.0 - rate)
    return a * const(keep)


def _logsumexp_rows(a: Var) -> Var:
    """log(sum(exp, last axis)) keepdims, with a detached max shift."""
    m = const(a.value.max(axis=-1, keepdims=True))
    return log(vsum(exp(a - m), axis=-1, keepdims=True)) + m


def masked_log_softmax(logits: Var, mask: np.ndarray) -> Var:
    """Row-wise log softmax over the valid entries of a 0/1 mask.

    Invalid entries come back at ~NEG_BIG (probability exactly 0 after exp).
    Every row must have at least one valid entry.
    """
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all(mask.sum(axis=-1) >= 1):
        raise ValueError("masked_log_softmax: a row has no valid action")
    zm = logits * const(mask) + const((1.0 - mask) * NEG_BIG)
    return zm - _logsumexp_rows(zm)


def softmax_rows(logits: Var, mask: np.ndarray | None = None) -> Var:
    """Row-wise (masked) softmax; masked-out probabilities are exactly 0."""
    if mask is None:
        mask = np.ones_like(logits.value)
    return exp(masked_log_softmax(logits, mask))


def entropy_rows(logits: Var, mask: np.ndarray) -> Var:
    """Shannon entropy per row of the masked distribution (nats)."""
    logp = masked_log_softmax(logits, mask)
    p = exp(logp)
    # p is exactly 0 where logp ~ NEG_BIG, and 0 * finite = 0
    return -vsum(p * logp, axis=-1)


def mse(pred: Var, target: np.ndarray) -> Var:
    """Mean squared error against a constant target."""
    diff = pred - const(np.asarray(target, dtype=np.float64))
    return vmean(square(diff))


def backward(loss: Var) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Accumulates into each reachable Param's .grad (so repeated calls add up,
    as optimizers expect between zero_grads calls) and returns {name: grad}
    for this sweep alone.
    """
    if loss.value.size != 1:
        raise ValueError("backward expects a scalar loss")

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    out: dict[str, np.ndarray] = {}
    for node in reversed(order):
        up = grads.pop(id(node), None)
        if up is None:
            continue
        if node.leaf is not None:
            node.leaf.grad += up
            if node.leaf.name in out:
                out[node.leaf.name] = out[node.leaf.name] + up
            else:
                out[node.leaf.name] = up.copy()
        if node.grad_fn is None:
            continue
        for parent, g in zip(node.parents, node.grad_fn(up)):
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = np.asarray(g, dtype=np.float64)
    return out


def zero_grads(params: list[Param]) -> None:
    for p in params:
        p.grad[...] = 0.0


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple | None = None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))


class Linear:
    """Dense layer y = x W + b."""

    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator):
        self.w = Param(f"{name}.w", xavier_uniform(rng, n_in, n_out))
        self.b = Param(f"{name}.b", np.zeros(n_out))

    def __call__(self, x: Var) -> Var:
        return matmul(x, self.w.var()) + self.b.var()

    def params(self) -> list[Param]:
        return [self.w, self.b]


class MLP:
    """Stack of Linear layers with a fixed activation between them."""

    def __init__(self, name: str, sizes: list[int], rng: np.random.Generator,
                 activation: str = "tanh"):
        if len(sizes) < 2:
            raise ValueError("MLP needs at least input and output sizes")
        self.layers = [Linear(f"{name}.{i}", sizes[i], sizes[i + 1], rng)
                       for i in range(len(sizes) - 1)]
        self.act = {"tanh": tanh, "relu": relu}[activation]

    def __call__(self, x: Var) -> Var:
        for layer in self.layers[:-1]:
            x = self.act(layer(x))
        return self.layers[-1](x)

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]


class Attention:
    """Scaled dot-product attention with a residual onto the query source.

    query source:  (B, d_model)
    key/value set: (B, K, d_model)
    output:        softmax(Q K^T / sqrt(d_k)) V + query source
    Dropout (train-time only) is applied to the attention weights.
    """

    def __init__(self, name: str, d_model: int, d_k: int,
                 rng: np.random.Generator, drop_rate: float = 0.1):
        self.wq = Param(f"{name}.wq", xavier_uniform(rng, d_model, d_k))
        self.wk = Param(f"{name}.wk", xavier_uniform(rng, d_model, d_k))
        self.wv = Param(f"{name}.wv", xavier_uniform(rng, d_model, d_model))
        self.d_k = d_k
        self.drop_rate = drop_rate

    def __call__(self, h_env: Var, h_ctx: Var,
                 drop_rng: np.random.Generator | None = None) -> Var:
        out, _ = self.forward_with_weights(h_env, h_ctx, drop_rng)
        return out

    def forward_with_weights(self, h_env: Var, h_ctx: Var,
                             drop_rng: np.random.Generator | None = None):
        q = matmul(h_env, self.wq.var())                      # (B, d_k)
        k = matmul(h_ctx, self.wk.var())                      # (B, K, d_k)
        v = matmul(h_ctx, self.wv.var())                      # (B, K, d_model)
        scores = vsum(expand_dims(q, 1) * k, axis=-1) * (1.0 / math.sqrt(self.d_k))
        alpha = softmax_rows(scores)                          # (B, K)
        alpha = dropout(alpha, self.drop_rate, drop_rng)
        fused = vsum(expand_dims(alpha, 2) * v, axis=1)       # (B, d_model)
        return fused + h_env, alpha

    def params(self) -> list[Param]:
        return [self.wq, self.wk, self.wv]


class Adam:
    """Adam with bias correction; optional multiplicative lr decay."""

    def __init__(self, params: list[Param], lr: float = 4e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        names = [p.name for p in params]
        if len(set(names)) != len(names):
            raise ValueError("duplicate parameter names in optimizer")
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self, max_grad_norm: float | None = None) -> float:
        """Apply one update from accumulated grads; returns global grad norm."""
        norm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params))
        scale = 1.0
        if max_grad_norm is not None and norm > max_grad_norm > 0:
            scale = max_grad_norm / (norm + 1e-12)
        self.t += 1
        for i, p in enumerate(self.params):
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in {p.name}")
            g = p.grad * scale
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mhat = self.m[i] / (1 - self.b1 ** self.t)
            vhat = self.v[i] / (1 - self.b2 ** self.t)
            p.value -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm

    def decay_lr(self, factor: float) -> None:
        self.lr *= factor


def finite_difference(f, params: list[Param], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central finite differences of scalar f() w.r.t. every param element.

    f must recompute the loss from the params' current values. Used as the
    independent oracle for backward(); O(2 * n_elements) evaluations.
    """
    grads = {}
    for p in params:
        g = np.zeros_like(p.value)
        flat = p.value.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = float(f())
            flat[i] = orig - h
            lo = float(f())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads[p.name] = g
    return grads


CHECKPOINT_VERSION = 1


def save_params(path: str, params: list[Param], extra: dict | None = None) -> None:
    """Write named arrays to an .npz; float64 round-trips bit-exactly."""
    payload = {f"param/{p.name}": p.value for p in params}
    payload["__version__"] = np.array([CHECKPOINT_VERSION], dtype=np.int64)
    for key, val in (extra or {}).items():
        payload[f"extra/{key}"] = np.asarray(val)
    np.savez(path, **payload)


def load_params(path: str, params: list[Param]) -> dict[str, np.ndarray]:
    """Load arrays saved by save_params into params (matched by name)."""
    with np.load(path) as data:
        version = int(data["__version__"][0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        for p in params:
            key = f"param/{p.name}"
            if key not in data:
                raise KeyError(f"checkpoint missing {p.name}")
            stored = data[key]
            if stored.shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {stored.shape} != {p.value.shape}")
            p.value[...] = stored
        return {k[len("extra/"):]: data[k] for k in data.files
                if k.startswith("extra/")}
