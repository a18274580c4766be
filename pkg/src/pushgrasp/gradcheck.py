"""Finite-difference checks of the hand-written backward passes, run in float64."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .coordinator import FEATURES, Coordinator
from .qnet import N_INPUT, QNet


def check_qnet(size: int = 8, seed: int = 0, max_entries: int | None = 12, n_pixels: int = 4) -> T.GradCheckReport:
    """Huber TD loss summed over a few (kind, rotation, cell) picks on a small random raster."""
    rng = np.random.default_rng(seed)
    net = QNet(params=QNet(rng).params.astype(np.float64))
    # Zero biases put zero-filled corners of rotated copies exactly on a ReLU
    # kink, where central differences are one-sided; move them off zero.
    for name, value in net.params.params.items():
        if name.endswith(".b"):
            value += 0.05 * rng.standard_normal(value.shape)
    x = rng.random((N_INPUT, size, size))
    picks = []
    while len(picks) < n_pixels:
        kind = ("push", "grasp")[len(picks) % 2]
        rot, px, py = int(rng.integers(16)), int(rng.integers(size)), int(rng.integers(size))
        if net.pixel_forward(x, kind, rot, px, py)[1] is not None:
            picks.append((kind, rot, px, py, float(rng.uniform(-1.5, 1.5))))

    def loss() -> float:
        return sum(float(T.huber_loss(net.pixel_forward(x, k, r, px, py)[0] - y)) for k, r, px, py, y in picks)

    def backward() -> None:
        for k, r, px, py, y in picks:
            q, ctx = net.pixel_forward(x, k, r, px, py)
            net.pixel_backward(ctx, float(T.huber_grad(q - y)))

    # A bias shifts a whole channel, so a coarse step easily carries some
    # pre-activation across zero; keep the step well below that spacing.
    return T.grad_check(loss, backward, net.params, h=1e-6, max_entries=max_entries, rng=rng)


def check_coordinator(seed: int = 0, batch: int = 8) -> T.GradCheckReport:
    rng = np.random.default_rng(seed)
    coord = Coordinator(params=Coordinator(rng).params.astype(np.float64))
    x = rng.standard_normal((batch, len(FEATURES)))
    y = (rng.random(batch) < 0.5).astype(np.float64)
    return T.grad_check(lambda: coord.loss(x, y), lambda: coord.backward(x, y), coord.params, h=1e-5)


def check_linear_layers(seed: int = 0) -> T.GradCheckReport:
    """A dense layer and a convolution alone under a linear readout; differences are exact up to rounding."""
    rng = np.random.default_rng(seed)
    store = T.ParamStore()
    store.add("dense.w", rng.standard_normal((5, 7)))
    store.add("dense.b", rng.standard_normal(5))
    store.add("conv.w", rng.standard_normal((3, 2, 3, 3)))
    store.add("conv.b", rng.standard_normal(3))
    xd = rng.standard_normal((4, 7))
    xc = rng.standard_normal((2, 2, 6, 6))
    rd = rng.standard_normal((4, 5))
    rc = rng.standard_normal((2, 3, 3, 3))

    def loss() -> float:
        d, _ = T.linear_forward(xd, store["dense.w"], store["dense.b"])
        c, _ = T.conv2d_forward(xc, store["conv.w"], store["conv.b"], stride=2, pad=1)
        return float(np.sum(d * rd) + np.sum(c * rc))

    def backward() -> None:
        _, cache = T.linear_forward(xd, store["dense.w"], store["dense.b"])
        _, dw, db = T.linear_backward(rd, cache)
        store.accumulate("dense.w", dw)
        store.accumulate("dense.b", db)
        _, cache = T.conv2d_forward(xc, store["conv.w"], store["conv.b"], stride=2, pad=1)
        _, dw, db = T.conv2d_backward(rc, cache)
        store.accumulate("conv.w", dw)
        store.accumulate("conv.b", db)

    return T.grad_check(loss, backward, store, h=1e-3)
