"""Dataset robustness scores: ARD, AMP, ADF, and the logit-gap histogram.

Every per-image evaluation is a pure function of (model, image, config,
index), so callers may pass any ``map``-compatible ``mapper`` (for example a
process pool's ``map``) without changing a single bit of the result.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from functools import partial
from typing import Callable, Optional, Sequence

import numpy as np

from .attacks import AttackConfig, run_attack
from .defenses import DefenseConfig, apply_defense
from .errors import EmptyDataset, MaxEpsilonExceeded, SingleClassModel
from .imageio import Image
from .models import ClassifierModel, predict

__all__ = [
    "ScoreReport",
    "Histogram",
    "robust_flags",
    "defense_friendly_flags",
    "ard_score",
    "amp_score",
    "adf_score",
    "logit_gap",
    "logit_gap_histogram",
    "gap_histograms_overlap",
    "AMP_DEFAULT_ALPHA_STEP",
]

AMP_DEFAULT_ALPHA_STEP = 0.005

Mapper = Callable


@dataclass
class ScoreReport:
    metric: str
    score: float
    attack: dict
    defense: Optional[dict] = None
    epsilon: Optional[float] = None
    threshold_P: Optional[float] = None
    alpha_step: Optional[float] = None
    n_images: int = 0
    model: str = ""
    dataset: str = ""
    seed: int = 0
    denominator: Optional[str] = None
    per_image: Optional[list] = None
    extra: dict = field(default_factory=dict)

    def to_dict(self, deterministic: bool = True) -> dict:
        d = {
            "metric": self.metric,
            "score": self.score,
            "attack": self.attack,
            "defense": self.defense,
            "epsilon": self.epsilon,
            "threshold_P": self.threshold_P,
            "alpha_step": self.alpha_step,
            "n_images": self.n_images,
            "model": self.model,
            "dataset": self.dataset,
            "seed": self.seed,
        }
        if self.denominator is not None:
            d["denominator"] = self.denominator
        d.update(self.extra)
        if self.per_image is not None:
            d["per_image"] = self.per_image
        if not deterministic:
            d["timestamp"] = datetime.now(timezone.utc).isoformat()
        return d

    def to_json(self, deterministic: bool = True) -> str:
        return json.dumps(self.to_dict(deterministic), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        known = {
            "metric", "score", "attack", "defense", "epsilon", "threshold_P", "alpha_step",
            "n_images", "model", "dataset", "seed", "denominator", "per_image",
        }
        extra = {k: v for k, v in d.items() if k not in known and k != "timestamp"}
        return cls(**{k: d[k] for k in known if k in d}, extra=extra)


def _check_dataset(images: Sequence[Image]) -> list[Image]:
    images = list(images)
    if not images:
        raise EmptyDataset("dataset is empty")
    return images


def _robust_one(model, attack: AttackConfig, image: Image) -> bool:
    """True when the prediction survives the attack."""
    label = predict(model, image).predicted_class
    outcome = run_attack(model, image, label, attack)
    return outcome.adversarial_class == label


def _recovered_one(model, attack: AttackConfig, defense: DefenseConfig, item) -> bool:
    index, image = item
    label = predict(model, image).predicted_class
    adversarial = run_attack(model, image, label, attack).adversarial
    defended = apply_defense(adversarial, defense.for_image(index))
    return predict(model, defended).predicted_class == label


def robust_flags(model: ClassifierModel, images: Sequence[Image], attack: AttackConfig, mapper: Mapper = map) -> list[bool]:
    return [bool(f) for f in mapper(partial(_robust_one, model, attack), images)]


def defense_friendly_flags(
    model: ClassifierModel,
    images: Sequence[Image],
    attack: AttackConfig,
    defense: DefenseConfig,
    mapper: Mapper = map,
) -> list[bool]:
    items = list(enumerate(images))
    return [bool(f) for f in mapper(partial(_recovered_one, model, attack, defense), items)]


def ard_score(
    attack: AttackConfig,
    epsilon: float,
    images: Sequence[Image],
    model: ClassifierModel,
    *,
    mapper: Mapper = map,
    model_id: str = "",
    dataset_id: str = "",
    seed: int = 0,
) -> ScoreReport:
    """Fraction of images whose predicted class survives ``attack`` at ``epsilon``."""
    images = _check_dataset(images)
    attack = attack.with_epsilon(epsilon)
    flags = robust_flags(model, images, attack, mapper)
    return ScoreReport(
        metric="ARD",
        score=sum(flags) / len(flags),
        attack=attack.to_dict(),
        epsilon=float(epsilon),
        n_images=len(flags),
        model=model_id,
        dataset=dataset_id,
        seed=seed,
        per_image=flags,
    )


def amp_score(
    attack: AttackConfig,
    alpha_step: float,
    images: Sequence[Image],
    model: ClassifierModel,
    threshold_P: float,
    epsilon_max: float = 1.0,
    *,
    mapper: Mapper = map,
    model_id: str = "",
    dataset_id: str = "",
    seed: int = 0,
) -> ScoreReport:
    """Smallest grid ``epsilon = k * alpha_step`` that fools at least ``threshold_P``.

    The non-robust set is recomputed from scratch at every grid point. PGD
    runs with its default step size at every epsilon so the ``alpha <= 2
    epsilon`` constraint holds along the whole scan.
    """
    images = _check_dataset(images)
    if not 0 < threshold_P <= 1:
        raise ValueError("threshold_P must lie in (0, 1]")
    if not alpha_step > 0:
        raise ValueError("alpha_step must be positive")
    if epsilon_max < alpha_step:
        raise ValueError("epsilon_max must be >= alpha_step")
    if attack.kind == "ddn":
        raise ValueError("AMP scans an L-inf budget; DDN has no epsilon to scan")
    attack = replace(attack, alpha=None)
    n = len(images)
    scan = []
    k = 0
    while True:
        eps = k * alpha_step
        if eps > epsilon_max * (1 + 1e-12):
            break
        flags = robust_flags(model, images, attack.with_epsilon(eps), mapper)
        fooled = n - sum(flags)
        fraction = fooled / n
        scan.append([eps, fraction])
        if fraction >= threshold_P:
            return ScoreReport(
                metric="AMP",
                score=eps,
                attack=attack.with_epsilon(eps).to_dict(),
                epsilon=eps,
                threshold_P=float(threshold_P),
                alpha_step=float(alpha_step),
                n_images=n,
                model=model_id,
                dataset=dataset_id,
                seed=seed,
                per_image=flags,
                extra={"epsilon_max": float(epsilon_max), "scan": scan},
            )
        k += 1
    raise MaxEpsilonExceeded(epsilon_max, threshold_P, max(f for _, f in scan))


def adf_score(
    attack: AttackConfig,
    epsilon: float,
    images: Sequence[Image],
    model: ClassifierModel,
    defense: DefenseConfig,
    *,
    mapper: Mapper = map,
    model_id: str = "",
    dataset_id: str = "",
) -> ScoreReport:
    """Fraction of the whole dataset whose prediction comes back after defending."""
    images = _check_dataset(images)
    attack = attack.with_epsilon(epsilon)
    flags = defense_friendly_flags(model, images, attack, defense, mapper)
    return ScoreReport(
        metric="ADF",
        score=sum(flags) / len(flags),
        attack=attack.to_dict(),
        defense=defense.to_dict(),
        epsilon=float(epsilon),
        n_images=len(flags),
        model=model_id,
        dataset=dataset_id,
        seed=defense.seed,
        denominator="all",
        per_image=flags,
    )


def logit_gap(model: ClassifierModel, image: Image) -> float:
    z = predict(model, image).logits
    if z.size < 2:
        raise SingleClassModel("logit gap needs at least two classes")
    top2 = np.sort(z)[-2:]
    return float(abs(top2[1] - top2[0]))


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray

    def to_csv(self) -> str:
        lines = ["bin_low,bin_high,count"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{lo:.17g},{hi:.17g},{int(c)}")
        return "\n".join(lines) + "\n"


def logit_gap_histogram(
    model: ClassifierModel,
    images: Sequence[Image],
    num_bins: int,
    range_max: float,
    *,
    mapper: Mapper = map,
) -> Histogram:
    """Equal-width bins on ``[0, range_max]``; the last bin absorbs overflow."""
    images = _check_dataset(images)
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    if not range_max > 0:
        raise ValueError("range_max must be positive")
    gaps = np.array(list(mapper(partial(logit_gap, model), images)))
    width = range_max / num_bins
    idx = np.minimum(np.floor(gaps / width).astype(np.int64), num_bins - 1)
    counts = np.bincount(idx, minlength=num_bins)
    edges = np.array([k * width for k in range(num_bins + 1)])
    return Histogram(edges, counts)


def gap_histograms_overlap(a: Histogram, b: Histogram) -> bool:
    """True when neither normalized CDF dominates the other at every bin."""
    ca = np.cumsum(a.counts) / a.counts.sum()
    cb = np.cumsum(b.counts) / b.counts.sum()
    return bool(np.any(ca > cb) and np.any(ca < cb))
