"""Cheap robustness predictor: logistic regression on GLCM texture features.

Class 1 is "robust", and is treated as the positive class in every metric.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit

from .attacks import AttackConfig, run_attack
from .errors import DataError, EmptyDataset, LengthMismatch, SingleClassTrainingSet
from .imageio import Image
from .models import ClassifierModel, predict
from .texture import GlcmConfig, feature_vector

__all__ = [
    "LogRegModel",
    "EvalMetrics",
    "train_logreg",
    "predict_logreg",
    "evaluate",
    "proxy_predictions",
    "attacked_images",
    "evaluate_under_attack",
    "save_logreg",
    "load_logreg",
]

LOGREG_MAGIC = b"PDLR1"


@dataclass(frozen=True, eq=False)
class LogRegModel:
    weights: np.ndarray
    bias: float
    feature_means: np.ndarray
    feature_stds: np.ndarray

    def standardize(self, features) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.feature_means) / self.feature_stds

    def decision(self, features) -> np.ndarray:
        return self.standardize(features) @ self.weights + self.bias


@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    tn: int

    def to_dict(self) -> dict:
        return asdict(self)


def _logistic_loss(z, y, w, l2):
    # log(1 + e^z) - y z, computed without overflow
    return float(np.mean(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * np.dot(w, w))


def train_logreg(
    features,
    labels,
    lr: float = 0.1,
    epochs: int = 500,
    l2: float = 1e-4,
    seed: int = 0,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> LogRegModel:
    """Full-batch gradient descent from zero weights on standardized features.

    The problem is convex and the start is fixed, so ``seed`` never changes
    the result; it is accepted for report provenance only. The bias is not
    regularized. ``on_epoch(epoch, loss)`` sees the loss after each update.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyDataset("no training features")
    if y.shape != (x.shape[0],):
        raise LengthMismatch(f"{x.shape[0]} feature rows but {y.size} labels")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    if y.min() == y.max():
        raise SingleClassTrainingSet("training labels contain a single class")
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    stds = np.where(stds > 0, stds, 1.0)
    xs = (x - means) / stds
    n, d = xs.shape
    w = np.zeros(d)
    b = 0.0
    for epoch in range(epochs):
        residual = expit(xs @ w + b) - y
        w = w - lr * (xs.T @ residual / n + l2 * w)
        b = b - lr * float(np.mean(residual))
        if on_epoch is not None:
            on_epoch(epoch, _logistic_loss(xs @ w + b, y, w, l2))
    return LogRegModel(w, b, means, stds)


def predict_logreg(model: LogRegModel, features) -> tuple[float, int]:
    p = float(expit(model.decision(features)))
    return p, int(p >= 0.5)


def evaluate(predictions: Sequence[int], truth: Sequence[int]) -> EvalMetrics:
    pred = np.asarray(predictions, dtype=np.int64)
    true = np.asarray(truth, dtype=np.int64)
    if pred.shape != true.shape:
        raise LengthMismatch(f"{pred.size} predictions vs {true.size} labels")
    if pred.size == 0:
        raise EmptyDataset("nothing to evaluate")
    tp = int(np.sum((pred == 1) & (true == 1)))
    fp = int(np.sum((pred == 1) & (true == 0)))
    fn = int(np.sum((pred == 0) & (true == 1)))
    tn = int(np.sum((pred == 0) & (true == 0)))
    return EvalMetrics(
        accuracy=(tp + tn) / pred.size,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        tp=tp,
        fp=fp,
        fn=fn,
        tn=tn,
    )


def _attack_one(victim, attack, image: Image) -> Image:
    label = predict(victim, image).predicted_class
    return run_attack(victim, image, label, attack).adversarial


def attacked_images(images: Sequence[Image], attack: AttackConfig, victim: ClassifierModel, mapper: Callable = map) -> list[Image]:
    """Attack each image against ``victim``, starting from its predicted class."""
    return list(mapper(partial(_attack_one, victim, attack), images))


def proxy_predictions(proxy, images: Sequence[Image], glcm_config: GlcmConfig = GlcmConfig(), mapper: Callable = map) -> list[int]:
    """Robust/non-robust calls of either a GLCM :class:`LogRegModel` or a
    pixel-input classifier (anything with ``logits``)."""
    if isinstance(proxy, LogRegModel):
        feats = np.array(list(mapper(partial(feature_vector, config=glcm_config), images)))
        return [int(c) for c in (expit(proxy.decision(feats)) >= 0.5)]
    return [predict(proxy, img).predicted_class for img in images]


def evaluate_under_attack(
    model_proxy,
    images: Sequence[Image],
    robust_labels: Sequence[int],
    attack: AttackConfig,
    victim: ClassifierModel,
    glcm_config: GlcmConfig = GlcmConfig(),
    mapper: Callable = map,
) -> EvalMetrics:
    """Score the proxy on attacked copies of ``images`` against their clean labels."""
    adversarial = attacked_images(images, attack, victim, mapper)
    return evaluate(proxy_predictions(model_proxy, adversarial, glcm_config, mapper), robust_labels)


def save_logreg(model: LogRegModel, path=None) -> bytes:
    """``PDLR1`` magic, then weights, bias, means, stds as little-endian float64."""
    values = np.concatenate([model.weights, [model.bias], model.feature_means, model.feature_stds])
    blob = LOGREG_MAGIC + values.astype("<f8").tobytes()
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def load_logreg(source) -> LogRegModel:
    blob = source if isinstance(source, (bytes, bytearray)) else Path(source).read_bytes()
    if blob[:5] != LOGREG_MAGIC:
        raise DataError("not a PDLR1 proxy file")
    body = blob[5:]
    if len(body) % 8:
        raise DataError("PDLR1 payload is not a whole number of float64 values")
    values = np.frombuffer(body, "<f8")
    if (values.size - 1) % 3:
        raise DataError(f"PDLR1 payload has {values.size} values; expected 3n + 1")
    d = (values.size - 1) // 3
    return LogRegModel(
        weights=values[:d].copy(),
        bias=float(values[d]),
        feature_means=values[d + 1:2 * d + 1].copy(),
        feature_stds=values[2 * d + 1:].copy(),
    )
