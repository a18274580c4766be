"""Push-or-grasp selector: a small MLP estimating the chance that grasping now succeeds.

It is trained only from executed grasps, labelled 1 when the target came out.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import tensor as T

FEATURES = ("q_p", "q_g", "o", "a_b", "a_n", "f_c")
HIDDEN = 32
BUFFER_CAP = 1000
BATCH = 16


@dataclass(frozen=True)
class CoordinatorFeatures:
    q_p: float
    q_g: float
    o: float
    a_b: float
    a_n: float
    f_c: float

    def as_array(self) -> np.ndarray:
        arr = np.array([self.q_p, self.q_g, self.o, self.a_b, self.a_n, self.f_c], dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite coordinator features: {self}")
        return arr

    @classmethod
    def from_array(cls, arr) -> CoordinatorFeatures:
        return cls(*(float(v) for v in arr))


@dataclass(frozen=True)
class LabeledDecision:
    features: CoordinatorFeatures
    label: int


def decide(probability: float, threshold: float = 0.5) -> str:
    return "grasp" if probability >= threshold else "push"


class Coordinator:
    """Three-layer perceptron 6 -> 32 -> 32 -> 1 with a sigmoid output."""

    def __init__(
        self,
        rng: np.random.Generator | None = None,
        params: T.ParamStore | None = None,
        buffer_cap: int = BUFFER_CAP,
        batch_size: int = BATCH,
    ):
        self.buffer: deque[LabeledDecision] = deque(maxlen=buffer_cap)
        self.batch_size = batch_size
        if params is not None:
            self.params = params
            return
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = T.ParamStore()
        sizes = (len(FEATURES), HIDDEN, HIDDEN, 1)
        for i in range(3):
            fan_in = sizes[i]
            w = rng.standard_normal((sizes[i + 1], fan_in)) * math.sqrt(2.0 / fan_in)
            self.params.add(f"coord.{i}.w", w.astype(T.DTYPE))
            self.params.add(f"coord.{i}.b", np.zeros(sizes[i + 1], dtype=T.DTYPE))

    def _forward(self, x: np.ndarray):
        p = self.params
        caches = []
        h = x.astype(p["coord.0.w"].dtype)
        for i in range(3):
            h, lin_cache = T.linear_forward(h, p[f"coord.{i}.w"], p[f"coord.{i}.b"])
            mask = None
            if i < 2:
                h, mask = T.relu_forward(h)
            caches.append((lin_cache, mask))
        return h[:, 0], caches

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        logits, _ = self._forward(np.atleast_2d(x))
        return T.sigmoid(logits)

    def predict(self, features: CoordinatorFeatures) -> float:
        return float(self.predict_batch(features.as_array()[None])[0])

    def loss(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(np.mean(T.bce_loss(self.predict_batch(x), y)))

    def backward(self, x: np.ndarray, y: np.ndarray) -> float:
        """Accumulate gradients of the mean cross-entropy over the batch; returns the loss."""
        logits, caches = self._forward(x)
        prob = T.sigmoid(logits)
        clipped = (prob < T.BCE_EPS) | (prob > 1.0 - T.BCE_EPS)
        dz = np.where(clipped, 0.0, prob - y) / len(y)
        dh = dz[:, None].astype(logits.dtype)
        for i in reversed(range(3)):
            lin_cache, mask = caches[i]
            if mask is not None:
                dh = T.relu_backward(dh, mask)
            dh, dw, db = T.linear_backward(dh, lin_cache)
            self.params.accumulate(f"coord.{i}.w", dw)
            self.params.accumulate(f"coord.{i}.b", db)
        return float(np.mean(T.bce_loss(prob, y)))

    def record_and_train(self, new: LabeledDecision | None, rng: np.random.Generator, lr: float) -> float | None:
        """Append ``new`` to the FIFO buffer, then take one optimizer step on a sampled batch."""
        if new is not None:
            if new.label not in (0, 1):
                raise ValueError("labels must be 0 or 1")
            self.buffer.append(new)
        if not self.buffer:
            return None
        n = len(self.buffer)
        if n <= self.batch_size:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=self.batch_size, replace=False))
        x = np.stack([self.buffer[i].features.as_array() for i in idx])
        y = np.array([self.buffer[i].label for i in idx], dtype=np.float64)
        self.params.zero_grad()
        loss = self.backward(x, y)
        T.adam_step(self.params, lr)
        return loss

    def copy(self) -> Coordinator:
        out = Coordinator(params=self.params.copy(), buffer_cap=self.buffer.maxlen, batch_size=self.batch_size)
        out.buffer.extend(self.buffer)
        return out
