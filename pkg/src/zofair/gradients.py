"""Finite-difference gradient estimation against black-box handles."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Sequence

import numpy as np

from .model import MlpModel, ModelHandle

logger = logging.getLogger(__name__)


class GradientSource(str, Enum):
    ZERO_ORDER_NAIVE = "zero_order_naive"
    ZERO_ORDER_VECTORED = "zero_order_vectored"
    BACKPROP_OUTPUT = "backprop_output"
    BACKPROP_LOSS = "backprop_loss"


@dataclass(frozen=True)
class GradientVector:
    values: np.ndarray
    source: GradientSource

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.all(np.isfinite(v)):
            raise ValueError("gradient must be a finite 1-D vector")
        object.__setattr__(self, "values", v)

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self):
        return len(self.values)


def _check_h(h: float) -> float:
    h = float(h)
    if not (h > 0 and math.isfinite(h)):
        raise ValueError(f"perturbation size must be positive and finite, got {h}")
    return h


def _calibrate(grad: np.ndarray, conf: float) -> np.ndarray:
    # gradient of the predicted class: flip when the model says 0
    return grad if conf > 0.5 else -grad


def estimate_gradient_naive(handle: ModelHandle, x, h: float) -> GradientVector:
    """One forward pass per attribute plus one for ``x``: n+1 invocations."""
    h = _check_h(h)
    x = np.asarray(x, dtype=np.float64)
    base = handle.predict(x[None, :])[0]
    grad = np.empty(len(x))
    for i in range(len(x)):
        xp = x.copy()
        xp[i] += h
        grad[i] = (handle.predict(xp[None, :])[0] - base) / h
    return GradientVector(_calibrate(grad, base), GradientSource.ZERO_ORDER_NAIVE)


def estimate_gradient_vectored(handle: ModelHandle, x, h: float) -> GradientVector:
    """All n perturbations in one batch, plus ``x`` alone: 2 invocations."""
    h = _check_h(h)
    x = np.asarray(x, dtype=np.float64)
    shifted = x[None, :] + h * np.eye(len(x))
    ys = handle.predict(shifted)
    base = handle.predict(x[None, :])[0]
    grad = (ys - base) / h
    return GradientVector(_calibrate(grad, base), GradientSource.ZERO_ORDER_VECTORED)


def backprop_output_gradient(model: MlpModel, x) -> GradientVector:
    return GradientVector(model.output_gradients(np.asarray(x)[None, :])[0],
                          GradientSource.BACKPROP_OUTPUT)


def backprop_loss_gradient(model: MlpModel, x, y: int) -> GradientVector:
    return GradientVector(model.loss_gradients(np.asarray(x)[None, :], y)[0],
                          GradientSource.BACKPROP_LOSS)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-12 or nb < 1e-12:
        logger.debug("cosine similarity of a (near) zero vector taken as 0")
        return 0.0
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def difference_quotient(f: Callable[[np.ndarray], float], x, h: float) -> np.ndarray:
    """Forward differences of a plain scalar function, no sign calibration."""
    h = _check_h(h)
    x = np.asarray(x, dtype=np.float64)
    base = f(x)
    out = np.empty(len(x))
    for i in range(len(x)):
        xp = x.copy()
        xp[i] += h
        out[i] = (f(xp) - base) / h
    return out


def error_order_probe(f: Callable[[np.ndarray], float], x, exact_grad,
                      h_values: Sequence[float]) -> list[tuple[float, float]]:
    """Max-abs error of the forward-difference estimate for each ``h``."""
    exact = np.asarray(exact_grad, dtype=np.float64)
    return [(float(h), float(np.max(np.abs(difference_quotient(f, x, h) - exact))))
            for h in h_values]


def loglog_slope(probe: Sequence[tuple[float, float]]) -> float:
    hs, errs = np.array(probe).T
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])
