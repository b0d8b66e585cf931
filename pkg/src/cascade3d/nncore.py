"""Small neural-network kernels with hand-written backward passes.

Every ``forward`` returns ``(output, cache)``; the matching ``backward``
takes the upstream gradient and that cache, accumulates parameter gradients
into ``Param.grad`` and returns the gradient w.r.t. the input.

Parameters default to float64 (finite-difference checks need it). A module
cast with :meth:`Module.astype` computes in the parameter dtype: layers
convert their inputs and incoming gradients on entry.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse


class Param:
    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def astype(self, dtype) -> None:
        self.value = self.value.astype(dtype)
        self.grad = np.zeros_like(self.value)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.value.shape})"


class Module:
    """Anything owning :class:`Param` objects, possibly via child modules."""

    def parameters(self) -> list[Param]:
        out: list[Param] = []
        for v in vars(self).values():
            if isinstance(v, Param):
                out.append(v)
            elif isinstance(v, Module):
                out.extend(v.parameters())
            elif isinstance(v, (list, tuple)):
                for item in v:
                    if isinstance(item, Module):
                        out.extend(item.parameters())
                    elif isinstance(item, Param):
                        out.append(item)
        return out

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in state:
                raise KeyError(f"missing tensor {p.name}")
            if state[p.name].shape != p.value.shape:
                raise ValueError(f"{p.name}: shape {state[p.name].shape} != {p.value.shape}")
            p.value[...] = state[p.name]


# ----------------------------------------------------------------------------
# elementwise pieces

def relu(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


# ----------------------------------------------------------------------------
# layers

class Dense(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str, init: str = "he"):
        self.n_in, self.n_out = n_in, n_out
        if init == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
        elif init == "xavier":
            w = rng.normal(0.0, np.sqrt(1.0 / n_in), (n_in, n_out))
        elif init == "zeros":
            w = np.zeros((n_in, n_out))
        elif init == "identity":
            if n_in != n_out:
                raise ValueError("identity init needs a square layer")
            w = np.eye(n_in)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.W = Param(f"{name}.W", w)
        self.b = Param(f"{name}.b", np.zeros(n_out))

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected last dim {self.n_in}, got {x.shape[-1]}")
        x = x.astype(self.W.value.dtype, copy=False)
        y = x.reshape(-1, self.n_in) @ self.W.value + self.b.value
        return y.reshape(x.shape[:-1] + (self.n_out,)), x

    def backward(self, dy, x):
        if dy.shape[-1] != self.n_out:
            raise ValueError(f"expected gradient width {self.n_out}, got {dy.shape[-1]}")
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.astype(x.dtype, copy=False).reshape(-1, self.n_out)
        self.W.grad += x2.T @ dy2
        self.b.grad += dy2.sum(axis=0)
        return (dy2 @ self.W.value.T).reshape(x.shape)


class Mlp(Module):
    """Dense layers with ReLU in between (and after the last if ``final_relu``)."""

    def __init__(self, widths: Sequence[int], rng, name: str, final_relu: bool = True):
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        self.widths = list(widths)
        self.final_relu = final_relu
        self.layers = [Dense(a, b, rng, f"{name}.{i}") for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]

    def forward(self, x):
        caches = []
        for i, layer in enumerate(self.layers):
            x, c = layer.forward(x)
            mask = None
            if i < len(self.layers) - 1 or self.final_relu:
                x, mask = relu(x)
            caches.append((c, mask))
        return x, caches

    def backward(self, dy, caches):
        for layer, (c, mask) in zip(reversed(self.layers), reversed(caches)):
            if mask is not None:
                dy = relu_backward(dy, mask)
            dy = layer.backward(dy, c)
        return dy


class Dropout:
    """Inverted dropout; a no-op unless ``train`` and ``p > 0``."""

    def __init__(self, p: float):
        self.p = p

    def forward(self, x, train: bool, rng: np.random.Generator | None):
        if not train or self.p <= 0:
            return x, None
        keep = ((rng.random(x.shape) >= self.p) / (1.0 - self.p)).astype(x.dtype, copy=False)
        return x * keep, keep

    def backward(self, dy, keep):
        return dy if keep is None else dy * keep


def maxpool_set(rows):
    """Max over the set axis (-2). Returns ``(pooled, argmax)``."""
    rows = np.asarray(rows)
    arg = rows.argmax(axis=-2)
    pooled = np.take_along_axis(rows, arg[..., None, :], axis=-2)[..., 0, :]
    return pooled, arg


def maxpool_set_backward(dpooled, arg, n_rows: int):
    shape = arg.shape[:-1] + (n_rows, arg.shape[-1])
    dx = np.zeros(shape, dtype=dpooled.dtype)
    np.put_along_axis(dx, arg[..., None, :], dpooled[..., None, :], axis=-2)
    return dx


def scatter_rows(idx, values, n_rows: int) -> np.ndarray:
    """``out[idx[...]] += values[...]`` summed over repeats, as an (n_rows, D) array.

    A sparse incidence product; much faster than ``np.add.at`` for row blocks.
    """
    idx = np.asarray(idx).reshape(-1)
    vals = np.asarray(values)
    vals = vals.reshape(len(idx), -1)
    inc = sparse.csr_matrix((np.ones(len(idx), dtype=vals.dtype), (idx, np.arange(len(idx)))),
                            shape=(n_rows, len(idx)))
    return np.asarray(inc @ vals)


class Conv2d(Module):
    """3x3 (or 1x1) convolution, zero padding, stride 1 or 2, HWC layout."""

    def __init__(self, c_in: int, c_out: int, rng, name: str, kernel: int = 3, stride: int = 1):
        if kernel not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        self.c_in, self.c_out, self.k, self.stride = c_in, c_out, kernel, stride
        fan_in = c_in * kernel * kernel
        self.W = Param(f"{name}.W", rng.normal(0.0, np.sqrt(2.0 / fan_in), (kernel, kernel, c_in, c_out)))
        self.b = Param(f"{name}.b", np.zeros(c_out))

    def _out_size(self, h, w):
        return (h - 1) // self.stride + 1, (w - 1) // self.stride + 1

    def forward(self, x):
        h, w, c = x.shape
        if c != self.c_in:
            raise ValueError(f"expected {self.c_in} channels, got {c}")
        x = x.astype(self.W.value.dtype, copy=False)
        ho, wo = self._out_size(h, w)
        pad = self.k // 2
        xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
        s = self.stride
        out = np.broadcast_to(self.b.value, (ho, wo, self.c_out)).copy()
        for dy in range(self.k):
            for dx in range(self.k):
                patch = xp[dy:dy + s * (ho - 1) + 1:s, dx:dx + s * (wo - 1) + 1:s]
                out += patch @ self.W.value[dy, dx]
        return out, (xp, x.shape)

    def backward(self, dout, cache):
        xp, shape = cache
        dout = dout.astype(xp.dtype, copy=False)
        h, w, _ = shape
        ho, wo = dout.shape[:2]
        s, pad = self.stride, self.k // 2
        dxp = np.zeros_like(xp)
        d2 = dout.reshape(-1, self.c_out)
        self.b.grad += d2.sum(axis=0)
        for dy in range(self.k):
            for dx in range(self.k):
                sl = (slice(dy, dy + s * (ho - 1) + 1, s), slice(dx, dx + s * (wo - 1) + 1, s))
                patch = xp[sl]
                self.W.grad[dy, dx] += patch.reshape(-1, self.c_in).T @ d2
                dxp[sl] += dout @ self.W.value[dy, dx].T
        return dxp[pad:pad + h, pad:pad + w] if pad else dxp


def bilinear_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Interpolation weights (n_out, n_in), half-pixel centres, edge clamped."""
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def upsample(x, out_h: int, out_w: int):
    """Bilinear resize of an HWC map; linear, so the cache is the two matrices."""
    hi, wi, c = x.shape
    ah = bilinear_matrix(hi, out_h).astype(x.dtype, copy=False)
    aw = bilinear_matrix(wi, out_w).astype(x.dtype, copy=False)
    t = (ah @ x.reshape(hi, wi * c)).reshape(out_h, wi, c)
    return np.matmul(aw, t), (ah, aw)


def upsample_backward(dy, cache):
    ah, aw = cache
    dt = np.matmul(aw.T, dy.astype(aw.dtype, copy=False))
    ho, wi, c = dt.shape
    return (ah.T @ dt.reshape(ho, wi * c)).reshape(ah.shape[1], wi, c)


# ----------------------------------------------------------------------------
# losses: each returns (loss, grad w.r.t. its first argument)

def smooth_l1(pred, target, beta: float = 1.0):
    """Summed Huber-style loss: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise."""
    x = np.asarray(pred, dtype=float) - np.asarray(target, dtype=float)
    ax = np.abs(x)
    small = ax < beta
    loss = np.where(small, 0.5 * x * x / beta, ax - 0.5 * beta).sum()
    grad = np.where(small, x / beta, np.sign(x))
    return float(loss), grad


def cross_entropy(logits, labels, ignore_index: int | None = None, weights=None):
    """Mean softmax cross entropy over rows whose label is not ``ignore_index``.

    ``logits`` has shape (..., C). Ignored rows get zero gradient; if every
    row is ignored the loss is 0.
    """
    logits = np.asarray(logits, dtype=float)
    labels = np.asarray(labels)
    flat = logits.reshape(-1, logits.shape[-1])
    lab = labels.reshape(-1)
    valid = np.ones(len(lab), dtype=bool) if ignore_index is None else lab != ignore_index
    w = np.ones(len(lab)) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    w = w * valid
    denom = w.sum()
    grad = np.zeros_like(flat)
    if denom <= 0:
        return 0.0, grad.reshape(logits.shape)
    idx = np.nonzero(valid)[0]
    logp = log_softmax(flat[idx])
    tgt = lab[idx]
    loss = -(w[idx] * logp[np.arange(len(idx)), tgt]).sum() / denom
    p = np.exp(logp)
    p[np.arange(len(idx)), tgt] -= 1.0
    grad[idx] = p * (w[idx] / denom)[:, None]
    return float(loss), grad.reshape(logits.shape)


BCE_EPS = 1e-7


def bce(prob, target):
    """Mean binary cross entropy on probabilities clamped to [eps, 1 - eps]."""
    prob = np.asarray(prob, dtype=float)
    target = np.asarray(target, dtype=float)
    p = np.clip(prob, BCE_EPS, 1 - BCE_EPS)
    n = max(prob.size, 1)
    loss = -(target * np.log(p) + (1 - target) * np.log(1 - p)).sum() / n
    inside = (prob > BCE_EPS) & (prob < 1 - BCE_EPS)
    grad = np.where(inside, (p - target) / (p * (1 - p)), 0.0) / n
    return float(loss), grad


def bce_with_logits(logits, target, weights=None):
    """Mean BCE of sigmoid(logits); stable form. Gradient w.r.t. logits."""
    z = np.asarray(logits, dtype=float)
    t = np.asarray(target, dtype=float)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=float)
    denom = w.sum()
    if denom <= 0:
        return 0.0, np.zeros_like(z)
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = (w * per).sum() / denom
    return float(loss), w * (sigmoid(z) - t) / denom


# ----------------------------------------------------------------------------
# optimisation

class AdamW:
    """Adam with decoupled weight decay; one decay value per parameter group."""

    def __init__(self, groups: Iterable[tuple[Sequence[Param], float]], lr: float = 5e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [(list(ps), float(wd)) for ps, wd in groups]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {id(p): np.zeros_like(p.value) for ps, _ in self.groups for p in ps}
        self.v = {id(p): np.zeros_like(p.value) for ps, _ in self.groups for p in ps}

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for params, wd in self.groups:
            for p in params:
                m, v = self.m[id(p)], self.v[id(p)]
                m *= self.beta1
                m += (1 - self.beta1) * p.grad
                v *= self.beta2
                v += (1 - self.beta2) * p.grad * p.grad
                if wd:
                    p.value *= 1 - lr * wd
                p.value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"t": self.t}


def adamw_step(params: Sequence[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999,
               weight_decay: float = 0.0, optimizer: AdamW | None = None) -> AdamW:
    """One AdamW update; pass the returned optimizer back in to keep moments."""
    if optimizer is None:
        optimizer = AdamW([(params, weight_decay)], lr=lr, betas=(beta1, beta2))
    optimizer.step(lr)
    return optimizer


def global_grad_norm(params: Iterable[Param]) -> float:
    return float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))


def clip_grad_norm(params: Sequence[Param], max_norm: float = 10.0) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the scale factor applied (1.0 when no clipping happened).
    """
    norm = global_grad_norm(params)
    if norm <= max_norm or norm == 0:
        return 1.0
    scale = max_norm / norm
    for p in params:
        p.grad *= scale
    return scale


def numeric_gradient(f: Callable[[], float], array: np.ndarray, h: float = 1e-5, index=None):
    """Central differences of ``f`` w.r.t. entries of ``array`` (edited in place)."""
    flat = array.reshape(-1)
    idx = range(flat.size) if index is None else index
    out = {}
    for i in idx:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def relative_error(analytic, numeric, floor: float = 1e-6):
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)


def gradcheck(f: Callable[[], float], analytic: dict[str, np.ndarray], arrays: dict[str, np.ndarray],
              h: float = 1e-5, max_entries: int | None = 40, rng=None) -> float:
    """Max relative error between analytic gradients and central differences.

    ``arrays`` maps names to the (mutable) arrays ``f`` reads; ``analytic``
    holds the gradients computed by the backward pass under the same names.
    At most ``max_entries`` randomly chosen entries per array are probed.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, arr in arrays.items():
        n = arr.size
        if max_entries is None or n <= max_entries:
            idx = range(n)
        else:
            idx = rng.choice(n, size=max_entries, replace=False)
        num = numeric_gradient(f, arr, h, idx)
        a = analytic[name].reshape(-1)
        keys = list(num)
        err = relative_error(a[keys], np.array([num[k] for k in keys]))
        worst = max(worst, float(err.max()) if len(err) else 0.0)
    return worst
