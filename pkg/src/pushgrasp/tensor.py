"""Small dense-array numerical core with hand-written backward passes.

Layers follow a ``forward(...) -> (out, cache)`` / ``backward(dout, cache)``
convention. Arrays are numpy; parameters default to float32, and every op keeps
the dtype of its inputs so gradient checks can run in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import as_strided

DTYPE = np.float32


class DivergenceError(FloatingPointError):
    """Raised when a forward or backward pass produces non-finite values."""


def check_finite(name: str, *arrays: np.ndarray) -> None:
    for arr in arrays:
        if not np.all(np.isfinite(arr)):
            raise DivergenceError(f"non-finite values in {name}")


# -- convolution --------------------------------------------------------


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    if pad:
        xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
        xp[:, :, pad : pad + h, pad : pad + w] = x
    else:
        xp = np.ascontiguousarray(x)
    sn, sc, sh, sw = xp.strides
    view = as_strided(xp, (n, c, k, k, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
    return view.reshape(n, c * k * k, ho * wo), ho, wo


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0):
    """Cross-correlation of a batch ``(N, C, H, W)`` with weights ``(O, C, k, k)``."""
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weights, got {x.shape} and {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"channel mismatch: input has {x.shape[1]}, weights expect {w.shape[1]}")
    if w.shape[2] != w.shape[3]:
        raise ValueError("only square kernels are supported")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} output channels")
    k = w.shape[2]
    cols, ho, wo = _im2col(x, k, stride, pad)
    w2 = w.reshape(w.shape[0], -1)
    # One gemm per sample: identical samples give bit-identical outputs.
    out = np.matmul(w2, cols) + b[:, None]
    out = out.reshape(x.shape[0], w.shape[0], ho, wo)
    return out, (x.shape, cols, w, stride, pad)


def conv2d_backward(dout: np.ndarray, cache):
    x_shape, cols, w, stride, pad = cache
    n, c, h, wd = x_shape
    o, _, k, _ = w.shape
    ho, wo = dout.shape[2:]
    d2 = dout.reshape(n, o, ho * wo)
    dw = np.tensordot(d2, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
    db = d2.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(o, -1).T, d2).reshape(n, c, k, k, ho, wo)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return dx, dw, db


def conv2d_naive(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct nested-loop convolution, used as a reference."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for s in range(n):
        for oc in range(o):
            for yy in range(ho):
                for xx in range(wo):
                    acc = float(b[oc])
                    for ic in range(c):
                        for i in range(k):
                            for j in range(k):
                                acc += float(w[oc, ic, i, j]) * float(xp[s, ic, yy * stride + i, xx * stride + j])
                    out[s, oc, yy, xx] = acc
    return out


# -- elementwise / dense ------------------------------------------------


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), x > 0


def relu_backward(dout: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dout * mask


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """``x`` is ``(N, in)``, ``w`` is ``(out, in)``."""
    return x @ w.T + b, (x, w)


def linear_backward(dout: np.ndarray, cache):
    x, w = cache
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# -- bilinear upsampling ------------------------------------------------


def upsample_matrix(n: int, factor: int, dtype=DTYPE) -> np.ndarray:
    """1-d interpolation matrix ``(n * factor, n)``, half-pixel centers (align_corners=False)."""
    m = np.zeros((n * factor, n), dtype=np.float64)
    for i in range(n * factor):
        src = max((i + 0.5) / factor - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n - 1)
        i1 = min(i0 + 1, n - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m.astype(dtype)


def bilinear_upsample_forward(x: np.ndarray, factor: int):
    if factor < 2 or int(factor) != factor:
        raise ValueError("upsample factor must be an integer >= 2")
    h, w = x.shape[-2:]
    uy = upsample_matrix(h, factor, x.dtype)
    ux = upsample_matrix(w, factor, x.dtype)
    return np.matmul(np.matmul(uy, x), ux.T), (uy, ux)


def bilinear_upsample_backward(dout: np.ndarray, cache) -> np.ndarray:
    uy, ux = cache
    return np.matmul(np.matmul(uy.T, dout), ux)


# -- losses -----------------------------------------------------------------


def huber_loss(delta):
    """Elementwise Huber loss with unit threshold."""
    a = np.abs(delta)
    return np.where(a <= 1.0, 0.5 * np.square(delta), a - 0.5)


def huber_grad(delta):
    return np.clip(delta, -1.0, 1.0)


BCE_EPS = 1e-7


def bce_loss(y, y_true):
    y = np.clip(y, BCE_EPS, 1.0 - BCE_EPS)
    return -(y_true * np.log(y) + (1.0 - y_true) * np.log(1.0 - y))


# -- parameters and optimizer --------------------------------------------------


@dataclass
class ParamStore:
    """Named parameters with matching gradients and adaptive-moment state."""

    params: dict[str, np.ndarray] = field(default_factory=dict)
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def copy(self) -> ParamStore:
        return ParamStore(
            params={k: v.copy() for k, v in self.params.items()},
            grads={k: v.copy() for k, v in self.grads.items()},
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
            t=self.t,
        )

    def astype(self, dtype) -> ParamStore:
        out = self.copy()
        for d in (out.params, out.grads, out.m, out.v):
            for k in d:
                d[k] = d[k].astype(dtype)
        return out

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    store.t += 1
    c1 = 1.0 - beta1**store.t
    c2 = 1.0 - beta2**store.t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        step = (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
        p -= step
        check_finite(f"parameter {name}", p)


# -- gradient checking ----------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_param: dict[str, float]
    n_checked: int

    def ok(self, rel_tol: float) -> bool:
        return self.max_rel_error < rel_tol


def grad_check(
    loss_fn: Callable[[], float],
    backward_fn: Callable[[], None],
    store: ParamStore,
    h: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, parameter tensor by tensor.

    ``backward_fn`` must populate ``store.grads``; ``loss_fn`` evaluates the
    scalar loss for the current parameters. The error for a tensor is
    ``|g_analytic - g_numeric| / max(|g_analytic|, |g_numeric|)`` using
    Euclidean norms over the checked entries; tensors whose gradients both
    vanish score 0. When ``max_entries`` is set, that many entries per tensor
    are drawn at random.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    store.zero_grad()
    backward_fn()
    analytic = {k: g.copy() for k, g in store.grads.items()}
    per_param: dict[str, float] = {}
    total = 0
    for name, p in store.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(len(idx), dtype=np.float64)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            num[n] = (up - down) / (2 * h)
        ana = analytic[name].reshape(-1)[idx].astype(np.float64)
        scale = max(np.linalg.norm(ana), np.linalg.norm(num))
        per_param[name] = 0.0 if scale < 1e-12 else float(np.linalg.norm(ana - num) / scale)
        total += len(idx)
    return GradCheckReport(max(per_param.values(), default=0.0), per_param, total)
