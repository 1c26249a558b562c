"""Fully-connected binary classifiers and the handles used to query them.

A handle is the only thing the search ever talks to. In-process handles wrap an
:class:`MlpModel`; external handles speak a line-delimited JSON protocol to a
child process, so any scorer can be tested as a black box.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import subprocess
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "sigmoid", "identity")
LOSS_EPS = 1e-12
DEFAULT_TIMEOUT = 10.0


class ModelFormatError(ValueError):
    """Raised when a model file cannot be parsed or fails validation."""


class OracleProtocolError(RuntimeError):
    """Raised when an external scoring process violates the stdio protocol."""


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "sigmoid":
        return _sigmoid(z)
    return z


def _activation_slope(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        # subgradient 0 at the kink
        return (z > 0).astype(z.dtype)
    if kind == "sigmoid":
        return a * (1.0 - a)
    return np.ones_like(z)


@dataclass(frozen=True)
class LayerSpec:
    weights: np.ndarray  # (out_dim, in_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "relu"

    def __post_init__(self):
        # fixed memory layout keeps the summation order, and so the output
        # bits, independent of where the weights came from
        w = np.array(self.weights, dtype=np.float64, order="C")
        b = np.array(self.bias, dtype=np.float64, order="C")
        if w.ndim != 2:
            raise ModelFormatError(f"weights must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ModelFormatError(
                f"bias length {b.size} does not match weights out_dim {w.shape[0]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ModelFormatError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ModelFormatError("non-finite weight or bias")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


class MlpModel:
    """An immutable stack of dense layers ending in a single sigmoid unit."""

    def __init__(self, layers: Sequence[LayerSpec], input_dim: int):
        if not layers:
            raise ModelFormatError("model has no layers")
        expected = input_dim
        for i, layer in enumerate(layers):
            if layer.in_dim != expected:
                raise ModelFormatError(
                    f"layer {i}: expected in_dim {expected}, got {layer.in_dim}"
                )
            expected = layer.out_dim
        last = layers[-1]
        if last.out_dim != 1 or last.activation != "sigmoid":
            raise ModelFormatError(
                "final layer must have out_dim 1 and sigmoid activation, got "
                f"out_dim {last.out_dim} and {last.activation}"
            )
        self.layers = tuple(layers)
        self.input_dim = int(input_dim)
        self._cast = {}  # dtype -> [(transposed weights, bias)]

    def _check(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected rows of length {self.input_dim}, got shape {x.shape}"
            )
        return x

    def forward(self, batch, dtype=np.float64) -> np.ndarray:
        """Confidence of class 1 for every row of ``batch``.

        Rows are multiplied as a stack of independent (1, in) products, so a
        row's output bits do not depend on the batch it sits in. A single
        BLAS gemm over the whole batch does not guarantee that.
        """
        dtype = np.dtype(dtype)
        a = self._check(batch).astype(dtype)[:, None, :]
        if dtype not in self._cast:
            self._cast[dtype] = [(np.ascontiguousarray(l.weights.T, dtype=dtype),
                                  l.bias.astype(dtype)) for l in self.layers]
        for layer, (wt, b) in zip(self.layers, self._cast[dtype]):
            a = _activate(np.matmul(a, wt) + b, layer.activation)
        return a[:, 0, 0].astype(np.float64)

    def _forward_cache(self, x: np.ndarray):
        acts, pres = [x], []
        a = x
        for layer in self.layers:
            z = np.einsum("kj,oj->ko", a, layer.weights) + layer.bias
            a = _activate(z, layer.activation)
            pres.append(z)
            acts.append(a)
        return pres, acts

    def _input_gradients(self, x: np.ndarray, out_grad: np.ndarray) -> np.ndarray:
        """Backpropagate d(objective)/d(confidence) = ``out_grad`` to the inputs."""
        pres, acts = self._forward_cache(x)
        delta = out_grad[:, None]
        for layer, z, a in zip(reversed(self.layers), reversed(pres), reversed(acts[1:])):
            delta = delta * _activation_slope(z, a, layer.activation)
            delta = np.einsum("ko,oj->kj", delta, layer.weights)
        return delta

    def output_gradients(self, batch) -> np.ndarray:
        """Gradient of the predicted-class confidence for every row."""
        x = self._check(batch)
        conf = self.forward(x)
        grads = self._input_gradients(x, np.ones(len(x)))
        sign = np.where(conf > 0.5, 1.0, -1.0)
        return grads * sign[:, None]

    def loss_gradients(self, batch, labels) -> np.ndarray:
        """Gradient of binary cross-entropy against ``labels`` for every row."""
        x = self._check(batch)
        y = np.broadcast_to(np.asarray(labels, dtype=np.float64), (len(x),))
        p = np.clip(self.forward(x), LOSS_EPS, 1.0 - LOSS_EPS)
        dloss = -y / p + (1.0 - y) / (1.0 - p)
        return self._input_gradients(x, dloss)

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "layers": [
                {
                    "weights": layer.weights.tolist(),
                    "bias": layer.bias.tolist(),
                    "activation": layer.activation,
                }
                for layer in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MlpModel":
        try:
            input_dim = int(data["input_dim"])
            raw_layers = data["layers"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ModelFormatError(f"malformed model document: {exc}") from exc
        layers = []
        for i, raw in enumerate(raw_layers):
            try:
                w = np.asarray(raw["weights"], dtype=np.float64)
                b = np.asarray(raw["bias"], dtype=np.float64)
                act = raw.get("activation", "relu")
            except (KeyError, TypeError, ValueError) as exc:
                raise ModelFormatError(f"layer {i}: {exc}") from exc
            try:
                layers.append(LayerSpec(w, b, act))
            except ModelFormatError as exc:
                raise ModelFormatError(f"layer {i}: {exc}") from exc
        return cls(layers, input_dim)


def load_model(path) -> MlpModel:
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
    return MlpModel.from_dict(data)


def dumps_model(model: MlpModel) -> str:
    return json.dumps(model.to_dict(), separators=(",", ":")) + "\n"


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(dumps_model(model))


def random_mlp(input_dim: int, hidden: Sequence[int] = (16, 8), seed: int = 0,
               scale: float = 1.0) -> MlpModel:
    """He-initialised ReLU network with a sigmoid head, for tests and benchmarks."""
    rng = np.random.default_rng(seed)
    dims = [input_dim, *hidden, 1]
    layers = []
    for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.normal(0.0, scale * math.sqrt(2.0 / d_in), size=(d_out, d_in))
        b = rng.normal(0.0, 0.1, size=d_out)
        act = "sigmoid" if i == len(dims) - 2 else "relu"
        layers.append(LayerSpec(w, b, act))
    return MlpModel(layers, input_dim)


class ModelHandle(ABC):
    """Black-box access to a binary classifier.

    Every call to :meth:`predict` is one model invocation, whatever the batch
    size.
    """

    input_dim: int

    def __init__(self):
        self._count = 0
        self._count_lock = threading.Lock()

    @property
    def invocations(self) -> int:
        return self._count

    def predict(self, batch) -> np.ndarray:
        x = np.asarray(batch, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(
                f"expected rows of length {self.input_dim}, got shape {x.shape}"
            )
        with self._count_lock:
            self._count += 1
        return self._predict(x)

    @abstractmethod
    def _predict(self, x: np.ndarray) -> np.ndarray:
        ...

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessHandle(ModelHandle):
    """Handle over an in-memory :class:`MlpModel`.

    ``precision`` selects the arithmetic the model is served in; float32 mirrors
    how trained networks are usually deployed.
    """

    def __init__(self, model: MlpModel, precision: str = "float64"):
        super().__init__()
        if precision not in ("float64", "float32"):
            raise ValueError(f"unsupported precision {precision!r}")
        self.model = model
        self.input_dim = model.input_dim
        self.precision = precision
        self._dtype = np.float32 if precision == "float32" else np.float64

    def _predict(self, x):
        return self.model.forward(x, dtype=self._dtype)


class FunctionHandle(ModelHandle):
    """Wrap a vectorised callable ``f(batch) -> values`` as a handle."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], input_dim: int):
        super().__init__()
        self.fn = fn
        self.input_dim = input_dim

    def _predict(self, x):
        return np.asarray(self.fn(x), dtype=np.float64).reshape(len(x))


class ExternalHandle(ModelHandle):
    """Scoring oracle living in a child process.

    Requests and responses are single JSON lines; one batch is in flight at a
    time.
    """

    def __init__(self, command: Sequence[str], input_dim: int,
                 timeout: float = DEFAULT_TIMEOUT, cwd=None):
        super().__init__()
        self.input_dim = input_dim
        self.timeout = timeout
        self.command = list(command)
        try:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                text=True, bufsize=1, cwd=cwd,
            )
        except OSError as exc:
            raise OracleProtocolError(f"cannot spawn {self.command}: {exc}") from exc
        self._lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._pump, daemon=True)
        self._reader.start()
        self._io_lock = threading.Lock()
        self._next_id = 0

    def _pump(self):
        for line in self._proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _predict(self, x):
        with self._io_lock:
            req_id = self._next_id
            self._next_id += 1
            msg = json.dumps({"id": req_id, "inputs": x.tolist()})
            try:
                self._proc.stdin.write(msg + "\n")
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise OracleProtocolError(f"oracle stdin closed: {exc}") from exc
            try:
                line = self._lines.get(timeout=self.timeout)
            except queue.Empty:
                raise OracleProtocolError(
                    f"no response to request {req_id} within {self.timeout}s"
                ) from None
        if line is None:
            raise OracleProtocolError("oracle exited before responding")
        try:
            resp = json.loads(line)
            resp_id, probs = resp["id"], resp["probs"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise OracleProtocolError(f"malformed response line {line!r}") from exc
        if resp_id != req_id:
            raise OracleProtocolError(f"response id {resp_id} for request {req_id}")
        if not isinstance(probs, list) or len(probs) != len(x):
            n = len(probs) if isinstance(probs, list) else "non-list"
            raise OracleProtocolError(f"expected {len(x)} probabilities, got {n}")
        try:
            out = np.asarray(probs, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise OracleProtocolError(f"non-numeric probabilities: {exc}") from exc
        if not np.all((out >= 0.0) & (out <= 1.0)):
            raise OracleProtocolError("probability outside [0, 1]")
        return out

    def close(self):
        if self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=2)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
                self._proc.wait()


def connect_external(command: Sequence[str], input_dim: int,
                     timeout: float = DEFAULT_TIMEOUT, cwd=None) -> ExternalHandle:
    return ExternalHandle(command, input_dim, timeout=timeout, cwd=cwd)


def forward(handle: ModelHandle, batch) -> np.ndarray:
    return handle.predict(batch)


def predict_label(handle: ModelHandle, x) -> int:
    # 0.5 exactly maps to 0
    return int(handle.predict(x)[0] > 0.5)


def output_gradient(model: MlpModel, x) -> np.ndarray:
    """Exact gradient of the predicted-class confidence at ``x``."""
    return model.output_gradients(np.asarray(x, dtype=np.float64)[None, :])[0]


def loss_gradient(model: MlpModel, x, y: int) -> np.ndarray:
    """Exact gradient of binary cross-entropy against label ``y`` at ``x``."""
    return model.loss_gradients(np.asarray(x, dtype=np.float64)[None, :], y)[0]
