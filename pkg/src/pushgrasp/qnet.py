"""Pixel-wise push and grasp Q-maps over 16 rotated copies of the heightmap stack.

Rotated copy ``k`` turns the scene by ``-k * 22.5`` degrees, so a primitive with
rotation index ``k`` always points along ``+x`` in the network's frame. Head
outputs are turned back by ``+k * 22.5`` degrees, which puts every Q-map slice
in workspace coordinates.

Resampling is nearest-neighbor and exactly commutes with lattice (90 degree)
rotations: source coordinates are snapped to a dyadic grid, and cell-boundary
ties are broken along the rotation's tangent direction, a rule that is itself
invariant under rotation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .perception import HeightmapStack
from .sim import N_ROTATIONS, ROTATION_STEP

N_INPUT = 5
ENCODER = ((N_INPUT, 16, 2), (16, 32, 2), (32, 32, 1), (32, 64, 1))
HEAD = ((64, 32, 3), (32, 16, 3), (16, 1, 1))
UPSAMPLE = 4
KINDS = ("push", "grasp")

_SNAP = 1 << 20


@lru_cache(maxsize=None)
def _fine_rotation_index(size: int, r: int) -> np.ndarray:
    """Flat source index per output cell for a turn of ``r * 22.5`` degrees (``0 <= r < 4``); -1 outside."""
    a = r * ROTATION_STEP
    c, s = math.cos(a), math.sin(a)
    half = size / 2
    centers = np.arange(size, dtype=np.float64) + 0.5 - half
    u = centers[None, :]
    v = centers[:, None]
    # Inverse map: content at q lands on R(a) q, so sample q = R(-a) p.
    qx = np.rint((c * u + s * v) * _SNAP).astype(np.int64)
    qy = np.rint((-s * u + c * v) * _SNAP).astype(np.int64)
    qx, qy = np.broadcast_arrays(qx, qy)
    off = int(half) * _SNAP

    def cell(t: np.ndarray, tangent: np.ndarray) -> np.ndarray:
        tt = t + off
        idx = tt // _SNAP
        return idx - ((tt % _SNAP == 0) & (tangent < 0))

    # Tangent of the rotation flow at q is (-qy, qx); second-order fallback -q.
    tan_x = np.where(qy != 0, -qy, -qx)
    tan_y = np.where(qx != 0, qx, -qy)
    ix = cell(qx, tan_x)
    iy = cell(qy, tan_y)
    valid = (ix >= 0) & (ix < size) & (iy >= 0) & (iy < size)
    out = np.where(valid, iy * size + ix, -1)
    out.setflags(write=False)
    return out


@lru_cache(maxsize=None)
def rotation_index(size: int, m: int) -> np.ndarray:
    """Source index map for turning a ``size x size`` raster by ``m * 22.5`` degrees."""
    q, r = divmod(m, 4)
    idx = _fine_rotation_index(size, r)
    out = np.rot90(idx, -q).copy()
    out.setflags(write=False)
    return out


def rotate_raster(raster: np.ndarray, m: int) -> np.ndarray:
    """Turn the last two axes by ``m * 22.5`` degrees (content direction), zero fill."""
    size = raster.shape[-1]
    if raster.shape[-2] != size or size % 2:
        raise ValueError("rotation needs square rasters of even size")
    idx = rotation_index(size, m % N_ROTATIONS)
    flat = raster.reshape(raster.shape[:-2] + (-1,))
    out = np.take(flat, np.where(idx >= 0, idx, 0), axis=-1)
    return np.where(idx >= 0, out, 0).astype(raster.dtype)


def rotate_stack(state: HeightmapStack | np.ndarray) -> np.ndarray:
    """``(16, 5, H, W)`` batch; copy ``k`` is the input turned by ``-k * 22.5`` degrees."""
    x = state.as_input() if isinstance(state, HeightmapStack) else state
    return np.stack([rotate_raster(x, -k) for k in range(N_ROTATIONS)])


@dataclass(frozen=True)
class QMaps:
    push: np.ndarray  # (16, H, W)
    grasp: np.ndarray  # (16, H, W)

    def __getitem__(self, kind: str) -> np.ndarray:
        return self.push if kind == "push" else self.grasp

    def max_value(self) -> float:
        return float(max(self.push.max(), self.grasp.max()))


@dataclass(frozen=True)
class BestAction:
    kind: str
    rot_index: int
    x: int
    y: int
    q_value: float


def best_action(qmap: np.ndarray, kind: str, mask: np.ndarray | None = None) -> BestAction:
    """Global argmax; with a non-empty ``mask`` [y, x] only those cells (at every rotation) compete."""
    if mask is not None and mask.any():
        qmap = np.where(mask[None], qmap, -np.inf)
    # np.argmax returns the first maximum in C order, i.e. smallest (rot, y, x).
    flat = int(np.argmax(qmap))
    rot, y, x = np.unravel_index(flat, qmap.shape)
    return BestAction(kind, int(rot), int(x), int(y), float(qmap[rot, y, x]))


def best_actions(qmaps: QMaps, grasp_mask: np.ndarray | None = None) -> tuple[BestAction, BestAction]:
    return best_action(qmaps.push, "push"), best_action(qmaps.grasp, "grasp", grasp_mask)


class QNet:
    """Shared convolutional encoder with separate push and grasp heads."""

    def __init__(
        self,
        rng: np.random.Generator | None = None,
        params: T.ParamStore | None = None,
        out_scale: float = 1.0,
    ):
        """``out_scale`` shrinks the initial weights of each head's last layer."""
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = T.ParamStore()
        for i, (cin, cout, _) in enumerate(ENCODER):
            self._add_conv(f"enc.{i}", cin, cout, 3, rng)
        for kind in KINDS:
            for i, (cin, cout, k) in enumerate(HEAD):
                self._add_conv(f"{kind}.{i}", cin, cout, k, rng, last=i == len(HEAD) - 1, out_scale=out_scale)

    def _add_conv(self, name, cin, cout, k, rng, last=False, out_scale=1.0):
        std = math.sqrt((1.0 if last else 2.0) / (cin * k * k)) * (out_scale if last else 1.0)
        self.params.add(f"{name}.w", (rng.standard_normal((cout, cin, k, k)) * std).astype(T.DTYPE))
        self.params.add(f"{name}.b", np.zeros(cout, dtype=T.DTYPE))

    # -- raw network ----------------------------------------------------

    def encode(self, x: np.ndarray):
        p = self.params
        caches = []
        h = x
        for i, (_, _, stride) in enumerate(ENCODER):
            h, conv_cache = T.conv2d_forward(h, p[f"enc.{i}.w"], p[f"enc.{i}.b"], stride=stride, pad=1)
            h, relu_mask = T.relu_forward(h)
            caches.append((conv_cache, relu_mask))
        return h, caches

    def head(self, kind: str, feat: np.ndarray):
        p = self.params
        caches = []
        h = feat
        for i, (_, _, k) in enumerate(HEAD):
            h, conv_cache = T.conv2d_forward(h, p[f"{kind}.{i}.w"], p[f"{kind}.{i}.b"], stride=1, pad=k // 2)
            relu_mask = None
            if i < len(HEAD) - 1:
                h, relu_mask = T.relu_forward(h)
            caches.append((conv_cache, relu_mask))
        up, up_cache = T.bilinear_upsample_forward(h[:, 0], UPSAMPLE)
        return up, (caches, up_cache)

    def head_backward(self, kind: str, dup: np.ndarray, cache) -> np.ndarray:
        caches, up_cache = cache
        dh = T.bilinear_upsample_backward(dup, up_cache)[:, None]
        for i in reversed(range(len(HEAD))):
            conv_cache, relu_mask = caches[i]
            if relu_mask is not None:
                dh = T.relu_backward(dh, relu_mask)
            dh, dw, db = T.conv2d_backward(dh, conv_cache)
            self.params.accumulate(f"{kind}.{i}.w", dw)
            self.params.accumulate(f"{kind}.{i}.b", db)
        return dh

    def encode_backward(self, dfeat: np.ndarray, caches) -> np.ndarray:
        dh = dfeat
        for i in reversed(range(len(ENCODER))):
            conv_cache, relu_mask = caches[i]
            dh = T.relu_backward(dh, relu_mask)
            dh, dw, db = T.conv2d_backward(dh, conv_cache)
            self.params.accumulate(f"enc.{i}.w", dw)
            self.params.accumulate(f"enc.{i}.b", db)
        return dh

    def raw_forward(self, x: np.ndarray) -> dict[str, np.ndarray]:
        """Head outputs in the rotated frames, ``(N, H, W)`` per kind."""
        if x.shape[-1] % UPSAMPLE or x.shape[-2] % UPSAMPLE:
            raise ValueError(f"raster size must be a multiple of {UPSAMPLE}")
        feat, _ = self.encode(x)
        return {kind: self.head(kind, feat)[0] for kind in KINDS}

    # -- Q-maps ---------------------------------------------------------

    def forward_qmaps(self, state: HeightmapStack | np.ndarray) -> QMaps:
        batch = rotate_stack(state)
        raw = self.raw_forward(batch)
        maps = {}
        for kind in KINDS:
            maps[kind] = np.stack([rotate_raster(raw[kind][k], k) for k in range(N_ROTATIONS)])
            T.check_finite(f"{kind} Q-map", maps[kind])
        return QMaps(push=maps["push"], grasp=maps["grasp"])

    def pixel_forward(self, state_input: np.ndarray, kind: str, rot: int, x: int, y: int):
        """Q at one workspace cell of one slice, with what the backward pass needs."""
        size = state_input.shape[-1]
        src = int(rotation_index(size, rot % N_ROTATIONS)[y, x])
        if src < 0:
            return 0.0, None
        rotated = rotate_raster(state_input, -rot)[None]
        feat, enc_cache = self.encode(rotated)
        up, head_cache = self.head(kind, feat)
        q = float(up.reshape(-1)[src])
        T.check_finite("pixel Q", up)
        return q, (kind, src, up.shape, up.dtype, enc_cache, head_cache)

    def pixel_backward(self, ctx, dq: float) -> None:
        """Accumulate ``dq * dQ/dparams`` into the gradient buffers."""
        if ctx is None:
            return
        kind, src, shape, dtype, enc_cache, head_cache = ctx
        dup = np.zeros(shape, dtype=dtype)
        dup.reshape(-1)[src] = dq
        dfeat = self.head_backward(kind, dup, head_cache)
        self.encode_backward(dfeat, enc_cache)

    def copy(self) -> QNet:
        return QNet(params=self.params.copy())
