"""Classifiers with exact input gradients.

Attacks and metrics only ever talk to a model through two calls:
``model.logits(image)`` and ``model.input_gradient(image, label)``.  The
in-process reference is a small ReLU MLP (:class:`Mlp`); external models can
be plugged in through :class:`SubprocessModel`, which speaks a JSON-lines
protocol with a child process.
"""

from __future__ import annotations

import json
import shlex
import struct
import subprocess
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np

from .errors import (
    ChildError,
    DataError,
    DimensionMismatch,
    EmptyDataset,
    LabelOutOfRange,
    ProcessSpawnFailure,
    ProtocolViolation,
)
from .imageio import Image

__all__ = [
    "ClassifierModel",
    "Prediction",
    "TrainConfig",
    "Mlp",
    "ConstantModel",
    "SubprocessModel",
    "train_mlp",
    "init_mlp",
    "predict",
    "input_gradient",
    "finite_diff_gradient",
    "cross_entropy",
    "save_mlp",
    "load_mlp",
    "serve",
    "subprocess_model",
]

MLP_MAGIC = b"PDMLP1"


class ClassifierModel(Protocol):
    def logits(self, image: Image) -> np.ndarray: ...

    def input_gradient(self, image: Image, label: int) -> np.ndarray: ...


@dataclass(frozen=True)
class Prediction:
    logits: np.ndarray
    predicted_class: int


@dataclass(frozen=True)
class TrainConfig:
    """SGD settings. The defaults leave the reference MLP above 0.9 held-out
    accuracy on the synthetic gratings while keeping a visible tail of
    images that PGD at epsilon 0.01 can still flip."""

    learning_rate: float = 0.005
    epochs: int = 30
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


def cross_entropy(logits: np.ndarray, label: int) -> float:
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    return float(m + np.log(np.sum(np.exp(z - m))) - z[label])


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True, eq=False)
class Mlp:
    """Fully connected ReLU network on the flattened image.

    ``weights[k]`` has shape ``(layer_dims[k+1], layer_dims[k])``.
    """

    layer_dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    name: str = field(default="mlp", compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2 or min(dims) < 1:
            raise DimensionMismatch(f"bad layer_dims {dims}")
        ws, bs = [], []
        for k, (w, b) in enumerate(zip(self.weights, self.biases, strict=True)):
            w = np.array(w, dtype=np.float64)
            b = np.array(b, dtype=np.float64)
            if w.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                raise DimensionMismatch(f"layer {k}: weight {w.shape}, bias {b.shape} do not fit {dims}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise DataError(f"layer {k} has non-finite parameters")
            w.flags.writeable = False
            b.flags.writeable = False
            ws.append(w)
            bs.append(b)
        if len(ws) != len(dims) - 1:
            raise DimensionMismatch(f"{len(ws)} weight matrices for {len(dims)} layer dims")
        object.__setattr__(self, "layer_dims", dims)
        object.__setattr__(self, "weights", tuple(ws))
        object.__setattr__(self, "biases", tuple(bs))

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def _flat(self, image: Image) -> np.ndarray:
        if image.size != self.input_dim:
            raise DimensionMismatch(f"image has {image.size} values, model expects {self.input_dim}")
        return image.flat()

    def _forward(self, x: np.ndarray) -> list[np.ndarray]:
        """Activations of every layer for a batch ``x`` (rows are samples)."""
        acts = [x]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = acts[-1] @ w.T + b
            acts.append(z if k == last else np.maximum(z, 0.0))
        return acts

    def _backward(self, acts: list[np.ndarray], dz: np.ndarray, want_params: bool):
        """Backpropagate ``dz`` (gradient w.r.t. logits) through the network."""
        grads_w, grads_b = [], []
        for k in range(len(self.weights) - 1, -1, -1):
            if want_params:
                grads_w.append(dz.T @ acts[k])
                grads_b.append(dz.sum(axis=0))
            dz = dz @ self.weights[k]
            if k > 0:
                dz = dz * (acts[k] > 0)
        return dz, grads_w[::-1], grads_b[::-1]

    def logits_batch(self, x: np.ndarray) -> np.ndarray:
        return self._forward(np.asarray(x, dtype=np.float64))[-1]

    def logits(self, image: Image) -> np.ndarray:
        return self._forward(self._flat(image)[None, :])[-1][0]

    def input_gradient(self, image: Image, label: int) -> np.ndarray:
        if not 0 <= label < self.num_classes:
            raise LabelOutOfRange(f"label {label} outside [0, {self.num_classes})")
        acts = self._forward(self._flat(image)[None, :])
        dz = _softmax_rows(acts[-1])
        dz[0, label] -= 1.0
        dx, _, _ = self._backward(acts, dz, want_params=False)
        return dx[0].reshape(image.shape)


@dataclass(frozen=True)
class ConstantModel:
    """Logits that ignore the input; the degenerate model used in sanity checks."""

    constant_logits: tuple[float, ...]

    @property
    def num_classes(self) -> int:
        return len(self.constant_logits)

    def logits(self, image: Image) -> np.ndarray:
        return np.array(self.constant_logits, dtype=np.float64)

    def input_gradient(self, image: Image, label: int) -> np.ndarray:
        if not 0 <= label < self.num_classes:
            raise LabelOutOfRange(f"label {label} outside [0, {self.num_classes})")
        return np.zeros(image.shape)


def predict(model: ClassifierModel, image: Image) -> Prediction:
    z = np.asarray(model.logits(image), dtype=np.float64)
    # np.argmax returns the first maximum, so ties go to the lowest index
    return Prediction(logits=z, predicted_class=int(np.argmax(z)))


def input_gradient(model: ClassifierModel, image: Image, label: int) -> np.ndarray:
    """Gradient of the per-image cross-entropy w.r.t. the pixels."""
    return np.asarray(model.input_gradient(image, label), dtype=np.float64).reshape(image.shape)


def finite_diff_gradient(model: ClassifierModel, image: Image, label: int, h: float = 1e-3) -> np.ndarray:
    """Central-difference estimate of :func:`input_gradient`.

    Perturbed points may leave ``[0, 1]``, so the raw array is fed through a
    bypass that skips :class:`Image` validation.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    num_classes = len(predict(model, image).logits)
    if not 0 <= label < num_classes:
        raise LabelOutOfRange(f"label {label} outside [0, {num_classes})")
    base = image.pixels.reshape(-1).copy()
    grad = np.empty_like(base)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + h
        up = cross_entropy(model.logits(_unchecked_image(base, image.shape)), label)
        base[i] = orig - h
        down = cross_entropy(model.logits(_unchecked_image(base, image.shape)), label)
        base[i] = orig
        grad[i] = (up - down) / (2.0 * h)
    return grad.reshape(image.shape)


def _unchecked_image(flat: np.ndarray, shape) -> Image:
    img = object.__new__(Image)
    arr = flat.reshape(shape).copy()
    arr.flags.writeable = False
    object.__setattr__(img, "pixels", arr)
    return img


def init_mlp(layer_dims: Sequence[int], seed: int) -> Mlp:
    """Glorot-uniform weights, zero biases, drawn from ``default_rng(seed)``."""
    rng = np.random.default_rng(seed)
    return _init_with(rng, layer_dims)


def _init_with(rng: np.random.Generator, layer_dims: Sequence[int]) -> Mlp:
    dims = tuple(int(d) for d in layer_dims)
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return Mlp(dims, tuple(ws), tuple(bs))


def _as_training_arrays(dataset, input_dim: int, num_classes: int):
    items = list(dataset)
    if not items:
        raise EmptyDataset("training set is empty")
    x = np.empty((len(items), input_dim))
    y = np.empty(len(items), dtype=np.int64)
    for n, (image, label) in enumerate(items):
        if image.size != input_dim:
            raise DimensionMismatch(f"sample {n} has {image.size} values, expected {input_dim}")
        if not 0 <= int(label) < num_classes:
            raise LabelOutOfRange(f"sample {n} has label {label}, expected < {num_classes}")
        x[n] = image.flat()
        y[n] = int(label)
    return x, y


def train_mlp(
    dataset: Iterable[tuple[Image, int]],
    dims: Sequence[int],
    config: TrainConfig = TrainConfig(),
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> Mlp:
    """Mini-batch SGD on mean softmax cross-entropy.

    A single generator seeded with ``config.seed`` draws the initial weights
    and then every epoch's shuffle, so a given (data, dims, config) always
    produces bit-identical parameters. ``on_epoch(epoch, loss)`` receives the
    full-dataset mean loss after each epoch.
    """
    dims = tuple(int(d) for d in dims)
    x, y = _as_training_arrays(dataset, dims[0], dims[-1])
    rng = np.random.default_rng(config.seed)
    model = _init_with(rng, dims)
    ws = [w.copy() for w in model.weights]
    bs = [b.copy() for b in model.biases]
    n = len(y)
    rows = np.arange(n)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            net = Mlp(dims, tuple(ws), tuple(bs))
            acts = net._forward(x[idx])
            dz = _softmax_rows(acts[-1])
            dz[np.arange(len(idx)), y[idx]] -= 1.0
            dz /= len(idx)
            _, gw, gb = net._backward(acts, dz, want_params=True)
            for k in range(len(ws)):
                ws[k] = ws[k] - config.learning_rate * gw[k]
                bs[k] = bs[k] - config.learning_rate * gb[k]
        if on_epoch is not None:
            z = Mlp(dims, tuple(ws), tuple(bs)).logits_batch(x)
            m = z.max(axis=1)
            loss = np.mean(m + np.log(np.exp(z - m[:, None]).sum(axis=1)) - z[rows, y])
            on_epoch(epoch, float(loss))
    return Mlp(dims, tuple(ws), tuple(bs))


def save_mlp(model: Mlp, path=None) -> bytes:
    """Serialize to the ``PDMLP1`` layout; also writes ``path`` if given.

    Layout: magic, uint32 count of layer dims, the dims as uint32, then per
    layer the weights (row-major) followed by the biases, all little-endian
    float64.
    """
    parts = [MLP_MAGIC, struct.pack("<I", len(model.layer_dims))]
    parts.append(struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims))
    for w, b in zip(model.weights, model.biases):
        parts.append(w.astype("<f8").tobytes())
        parts.append(b.astype("<f8").tobytes())
    blob = b"".join(parts)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_mlp(source) -> Mlp:
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if blob[:6] != MLP_MAGIC:
        raise DataError("not a PDMLP1 model file")
    try:
        (count,) = struct.unpack_from("<I", blob, 6)
        dims = struct.unpack_from(f"<{count}I", blob, 10)
        pos = 10 + 4 * count
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            ws.append(np.frombuffer(blob, "<f8", fan_in * fan_out, pos).reshape(fan_out, fan_in))
            pos += 8 * fan_in * fan_out
            bs.append(np.frombuffer(blob, "<f8", fan_out, pos))
            pos += 8 * fan_out
    except (struct.error, ValueError) as exc:
        raise DataError(f"truncated PDMLP1 model file: {exc}") from exc
    if pos != len(blob):
        raise DataError(f"PDMLP1 model file has {len(blob) - pos} trailing bytes")
    return Mlp(dims, tuple(ws), tuple(bs))


class SubprocessModel:
    """A classifier served by a child process over JSON lines.

    Requests carry strictly increasing ids and every response must echo the
    id it answers. One lock serializes traffic to the child, so a single
    instance is safe to share between threads. Pickling drops the live
    process; each unpickled copy spawns its own child on first use, which is
    how process pools end up with one child per worker.
    """

    def __init__(self, command: str, name: Optional[str] = None):
        self.command = command
        self.name = name or command
        self._proc = None
        self._next_id = 0
        self._num_classes: Optional[int] = None
        self._lock = threading.Lock()

    def __getstate__(self):
        return {"command": self.command, "name": self.name, "num_classes": self._num_classes}

    def __setstate__(self, state):
        self.__init__(state["command"], state["name"])
        self._num_classes = state["num_classes"]

    @property
    def num_classes(self) -> Optional[int]:
        return self._num_classes

    def _ensure_started(self):
        if self._proc is not None and self._proc.poll() is None:
            return
        try:
            self._proc = subprocess.Popen(
                shlex.split(self.command),
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise ProcessSpawnFailure(f"cannot start {self.command!r}: {exc}") from exc

    def _request(self, payload: dict) -> dict:
        with self._lock:
            self._ensure_started()
            self._next_id += 1
            rid = self._next_id
            line = json.dumps({"op": payload["op"], "id": rid, **{k: v for k, v in payload.items() if k != "op"}})
            try:
                self._proc.stdin.write(line + "\n")
                self._proc.stdin.flush()
                reply = self._proc.stdout.readline()
            except (BrokenPipeError, OSError) as exc:
                raise ProtocolViolation(f"child {self.command!r} closed its pipes: {exc}") from exc
        if not reply:
            raise ProtocolViolation(f"child {self.command!r} exited without answering request {rid}")
        try:
            msg = json.loads(reply)
        except json.JSONDecodeError as exc:
            raise ProtocolViolation(f"malformed response line {reply[:80]!r}") from exc
        if not isinstance(msg, dict) or msg.get("id") != rid:
            got = msg.get("id") if isinstance(msg, dict) else None
            raise ProtocolViolation(f"expected response id {rid}, got {got!r}")
        if "error" in msg:
            raise ChildError(str(msg["error"]))
        return msg

    @staticmethod
    def _vector(msg: dict, key: str, length: Optional[int]) -> np.ndarray:
        values = msg.get(key)
        if not isinstance(values, list):
            raise ProtocolViolation(f"response {msg.get('id')} lacks a {key!r} list")
        try:
            vec = np.array(values, dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ProtocolViolation(f"non-numeric {key!r} in response {msg.get('id')}") from exc
        if vec.ndim != 1 or (length is not None and vec.size != length):
            raise ProtocolViolation(f"{key!r} has length {vec.size}, expected {length}")
        return vec

    def _image_fields(self, image: Image) -> dict:
        return {"shape": list(image.shape), "pixels": image.flat().tolist()}

    def logits(self, image: Image) -> np.ndarray:
        msg = self._request({"op": "predict", **self._image_fields(image)})
        z = self._vector(msg, "logits", self._num_classes)
        if z.size == 0:
            raise ProtocolViolation("empty logits vector")
        self._num_classes = z.size
        return z

    def input_gradient(self, image: Image, label: int) -> np.ndarray:
        if self._num_classes is not None and not 0 <= label < self._num_classes:
            raise LabelOutOfRange(f"label {label} outside [0, {self._num_classes})")
        msg = self._request({"op": "grad", "label": int(label), **self._image_fields(image)})
        return self._vector(msg, "grad", image.size).reshape(image.shape)

    def close(self):
        if self._proc is not None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                self._proc.kill()
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def subprocess_model(command: str) -> SubprocessModel:
    return SubprocessModel(command)


def serve(model: ClassifierModel, stdin, stdout) -> None:
    """Answer JSON-lines requests for ``model`` until ``stdin`` closes."""
    for line in stdin:
        if not line.strip():
            continue
        rid = None
        try:
            req = json.loads(line)
            rid = req.get("id")
            shape = tuple(req["shape"])
            image = Image(np.array(req["pixels"], dtype=np.float64).reshape(shape))
            if req["op"] == "predict":
                reply = {"id": rid, "logits": predict(model, image).logits.tolist()}
            elif req["op"] == "grad":
                grad = input_gradient(model, image, int(req["label"]))
                reply = {"id": rid, "grad": grad.reshape(-1).tolist()}
            else:
                reply = {"id": rid, "error": f"unknown op {req['op']!r}"}
        except Exception as exc:  # every failure goes back over the wire
            reply = {"id": rid, "error": f"{type(exc).__name__}: {exc}"}
        stdout.write(json.dumps(reply) + "\n")
        stdout.flush()
