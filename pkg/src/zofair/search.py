"""Two-phase discriminatory instance search.

The global phase walks clustered seeds across the decision boundary using
momentum-accumulated gradient signs. The local phase then takes small random
steps around every discriminatory seed, preferring attributes the model is
least sensitive to.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Callable, Iterable, Optional

import numpy as np

from .clustering import kmeans, round_robin_seeds
from .gradients import estimate_gradient_vectored
from .model import InProcessHandle, ModelHandle
from .schema import DatasetSchema, clip, is_discriminatory, similar_set

logger = logging.getLogger(__name__)

SALIENCY_EPS = 1e-6


class GradientMode(str, Enum):
    ZERO_ORDER = "zero_order"
    BACKPROP_OUTPUT = "backprop_output"
    BACKPROP_LOSS = "backprop_loss"


class NotDiscriminatoryError(RuntimeError):
    """No protected-attribute variant receives a different label."""


class SearchInvariantError(AssertionError):
    pass


@dataclass
class GlobalConfig:
    decay: float = 0.5
    max_iter: int = 10
    global_step: float = 1.0
    cluster_num: int = 4
    global_num: int = 1000
    perturbation_size: float = 1.0
    gradient_source: GradientMode = GradientMode.ZERO_ORDER

    def __post_init__(self):
        self.gradient_source = GradientMode(self.gradient_source)
        if not 0.0 <= self.decay <= 1.0:
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")
        for name in ("max_iter", "cluster_num", "global_num"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not (self.global_step > 0 and self.perturbation_size > 0):
            raise ValueError("global_step and perturbation_size must be positive")

    def to_dict(self):
        return {**asdict(self), "gradient_source": self.gradient_source.value}


@dataclass
class LocalConfig:
    local_num: int = 1000
    update_interval: int = 5
    local_step: float = 1.0
    perturbation_size: float = 1.0
    gradient_source: GradientMode = GradientMode.ZERO_ORDER
    rng_seed: int = 0

    def __post_init__(self):
        self.gradient_source = GradientMode(self.gradient_source)
        if self.local_num < 1 or self.update_interval < 1:
            raise ValueError("local_num and update_interval must be >= 1")
        if not (self.local_step > 0 and self.perturbation_size > 0):
            raise ValueError("local_step and perturbation_size must be positive")

    def to_dict(self):
        return {**asdict(self), "gradient_source": self.gradient_source.value}


@dataclass
class DiscriminatoryStore:
    """Deduplicated discriminatory instances, each mapped to the seed index that produced it."""

    global_ids: dict = field(default_factory=dict)
    local_ids: dict = field(default_factory=dict)
    global_seeds: int = 0
    global_successes: int = 0
    global_iterations: int = 0
    local_iterations: int = 0
    local_successes: int = 0

    def add_global(self, inst: tuple, seed_index: int) -> None:
        self.global_successes += 1
        self.global_ids.setdefault(inst, seed_index)

    def add_local(self, inst: tuple, seed_index: int) -> None:
        self.local_successes += 1
        self.local_ids.setdefault(inst, seed_index)

    def all_instances(self) -> list:
        return list(dict.fromkeys([*self.global_ids, *self.local_ids]))


def make_gradient_fn(handle: ModelHandle, mode: GradientMode, h: float) -> Callable:
    """The ComputeGrad step: every mode returns a vector that rises with the
    predicted-class confidence, so the search treats them identically."""
    mode = GradientMode(mode)
    if mode is GradientMode.ZERO_ORDER:
        return lambda x: estimate_gradient_vectored(handle, x, h).values
    if not isinstance(handle, InProcessHandle):
        raise TypeError(f"{mode.value} gradients need an in-process model")
    model = handle.model
    if mode is GradientMode.BACKPROP_OUTPUT:
        return lambda x: model.output_gradients(np.asarray(x)[None, :])[0]

    def loss_fn(x):
        x = np.asarray(x, dtype=np.float64)[None, :]
        y = int(model.forward(x)[0] > 0.5)
        # descending the loss of the predicted label raises its confidence
        return -model.loss_gradients(x, y)[0]

    return loss_fn


def _as_key(x) -> tuple:
    return tuple(int(v) for v in x)


def select_counterpart(handle: ModelHandle, x, variants) -> np.ndarray:
    """Variant whose confidence is farthest from x's; first one wins ties."""
    variants = np.asarray(variants)
    if len(variants) == 0:
        raise ValueError("no variants to choose from")
    probs = handle.predict(np.vstack([np.asarray(x)[None, :], variants]))
    return variants[int(np.argmax(np.abs(probs[1:] - probs[0])))]


def find_pair(handle: ModelHandle, x, schema: DatasetSchema) -> np.ndarray:
    """Farthest-confidence variant among those with a different label."""
    variants = similar_set(x, schema)
    probs = handle.predict(np.vstack([np.asarray(x)[None, :], variants]))
    labels = probs > 0.5
    differ = labels[1:] != labels[0]
    if not differ.any():
        raise NotDiscriminatoryError(f"{_as_key(x)} has no differing-label variant")
    dist = np.where(differ, np.abs(probs[1:] - probs[0]), -np.inf)
    return variants[int(np.argmax(dist))]


def global_direction(grad1, grad2, schema: DatasetSchema) -> np.ndarray:
    s1 = np.sign(np.asarray(grad1, dtype=np.float64)).astype(np.int64)
    s2 = np.sign(np.asarray(grad2, dtype=np.float64)).astype(np.int64)
    direction = np.where(s1 == s2, -s1, 0)
    direction[schema.protected_mask] = 0
    return direction


def attribute_probabilities(grad1, grad2, schema: DatasetSchema) -> np.ndarray:
    saliency = np.abs(np.asarray(grad1, dtype=np.float64)) + np.abs(np.asarray(grad2, dtype=np.float64))
    free = ~schema.protected_mask
    if not np.any(saliency[free]):
        w = free.astype(np.float64)
    else:
        w = np.where(free, 1.0 / (saliency + SALIENCY_EPS), 0.0)
    return w / w.sum()


def _check_protected(x, seed, schema):
    idx = list(schema.protected_indices)
    if not np.array_equal(np.asarray(x)[idx], np.asarray(seed)[idx]):
        raise SearchInvariantError("search changed a protected attribute")


def _global_one(handle, seed, schema, cfg: GlobalConfig, grad_fn):
    x = np.asarray(seed, dtype=np.int64)
    g1 = np.zeros(len(x))
    g2 = np.zeros(len(x))
    for it in range(cfg.max_iter):
        if is_discriminatory(handle, x, schema) is not None:
            return _as_key(x), it + 1
        xp = select_counterpart(handle, x, similar_set(x, schema))
        g1 = cfg.decay * g1 + grad_fn(x)
        g2 = cfg.decay * g2 + grad_fn(xp)
        x = clip(x + cfg.global_step * global_direction(g1, g2, schema), schema)
        _check_protected(x, seed, schema)
        if not schema.contains(x):
            raise SearchInvariantError("instance left the input domain")
    return None, cfg.max_iter


def _map(fn, items: Iterable, jobs: int):
    if jobs <= 1:
        return [fn(*it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda it: fn(*it), items))


def global_generation(handle: ModelHandle, data, schema: DatasetSchema, cfg: GlobalConfig,
                      rng_seed: int = 0, jobs: int = 1,
                      store: Optional[DiscriminatoryStore] = None) -> DiscriminatoryStore:
    store = store if store is not None else DiscriminatoryStore()
    clusters = kmeans(data, cfg.cluster_num, rng_seed)
    seeds = round_robin_seeds(clusters, data, cfg.global_num)
    grad_fn = make_gradient_fn(handle, cfg.gradient_source, cfg.perturbation_size)
    results = _map(lambda s: _global_one(handle, s, schema, cfg, grad_fn),
                   [(s,) for s in seeds], jobs)
    for i, (found, iters) in enumerate(results):
        store.global_seeds += 1
        store.global_iterations += iters
        if found is not None:
            store.add_global(found, i)
    return store


def _local_one(handle, seed, seed_index, schema, cfg: LocalConfig, grad_fn):
    rng = np.random.default_rng([cfg.rng_seed, seed_index])
    x = np.asarray(seed, dtype=np.int64)
    n = len(x)
    found = []
    prob = None
    suc_iter = cfg.update_interval
    for _ in range(cfg.local_num):
        if prob is None or suc_iter >= cfg.update_interval:
            xp = find_pair(handle, x, schema)
            prob = attribute_probabilities(grad_fn(x), grad_fn(xp), schema)
            suc_iter = 0
        suc_iter += 1
        a = rng.choice(n, p=prob)
        step = (-1.0, 1.0)[rng.integers(2)] * cfg.local_step
        prev = x
        cand = x.astype(np.float64)
        cand[a] += step
        x = clip(cand, schema)
        _check_protected(x, seed, schema)
        if is_discriminatory(handle, x, schema) is not None:
            found.append(_as_key(x))
        else:
            x = prev
            prob = None
            suc_iter = 0
    return found


def local_generation(handle: ModelHandle, seeds, schema: DatasetSchema, cfg: LocalConfig,
                     jobs: int = 1, store: Optional[DiscriminatoryStore] = None) -> DiscriminatoryStore:
    store = store if store is not None else DiscriminatoryStore()
    grad_fn = make_gradient_fn(handle, cfg.gradient_source, cfg.perturbation_size)
    seeds = [np.asarray(s, dtype=np.int64) for s in seeds]
    results = _map(lambda s, i: _local_one(handle, s, i, schema, cfg, grad_fn),
                   [(s, i) for i, s in enumerate(seeds)], jobs)
    for i, found in enumerate(results):
        store.local_iterations += cfg.local_num
        for inst in found:
            store.add_local(inst, i)
    return store
