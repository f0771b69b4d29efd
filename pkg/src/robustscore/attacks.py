"""Untargeted white-box attacks: FGSM, PGD (L-inf) and DDN (L2).

All three are deterministic: PGD starts at the clean image rather than a
random point, and DDN keeps a step schedule that does not depend on the
total iteration count, so running longer can only improve its best iterate.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .imageio import Image, perturbation_distance
from .models import ClassifierModel, input_gradient, predict

__all__ = [
    "AttackConfig",
    "AttackOutcome",
    "fgsm",
    "pgd",
    "ddn",
    "run_attack",
    "DDN_INITIAL_NORM_SCALE",
]

KINDS = ("fgsm", "pgd", "ddn")

# sigma_0 = 0.1 * sqrt(pixel_count) * 0.1
DDN_INITIAL_NORM_SCALE = 0.01


@dataclass(frozen=True)
class AttackConfig:
    """Parameters of one attack.

    ``alpha=None`` means the PGD default ``2.5 * epsilon / steps``. DDN ignores
    ``epsilon`` and is controlled by ``ddn_iters`` and ``gamma``.
    """

    kind: str = "pgd"
    epsilon: float = 0.01
    alpha: Optional[float] = None
    steps: int = 40
    ddn_iters: int = 20
    gamma: float = 0.05

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if not self.epsilon >= 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1 or self.ddn_iters < 1:
            raise ValueError("steps and ddn_iters must be >= 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.alpha is not None:
            if not self.alpha > 0:
                raise ValueError("alpha must be positive")
            if kind == "pgd" and self.alpha > 2 * self.epsilon:
                raise ValueError(f"PGD alpha {self.alpha} exceeds 2*epsilon = {2 * self.epsilon}")

    @property
    def norm(self) -> str:
        return "l2" if self.kind == "ddn" else "linf"

    @property
    def step_size(self) -> float:
        if self.alpha is not None:
            return self.alpha
        return 2.5 * self.epsilon / self.steps

    def with_epsilon(self, epsilon: float) -> "AttackConfig":
        return replace(self, epsilon=float(epsilon))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm"] = self.norm
        if self.kind == "pgd":
            d["alpha"] = self.step_size
        return d


@dataclass(frozen=True, eq=False)
class AttackOutcome:
    adversarial: Image
    success: bool
    final_distance: float
    original_class: int
    adversarial_class: int


def _outcome(model, image: Image, adversarial: Image, norm: str, original_class: int) -> AttackOutcome:
    adv_class = predict(model, adversarial).predicted_class
    return AttackOutcome(
        adversarial=adversarial,
        success=adv_class != original_class,
        final_distance=perturbation_distance(image, adversarial, norm),
        original_class=original_class,
        adversarial_class=adv_class,
    )


def fgsm(model: ClassifierModel, image: Image, label: int, epsilon: float) -> AttackOutcome:
    """One signed-gradient step of size ``epsilon``, clipped to ``[0, 1]``."""
    if not epsilon >= 0:
        raise ValueError("epsilon must be >= 0")
    original_class = predict(model, image).predicted_class
    grad = input_gradient(model, image, label)
    x_adv = np.clip(image.pixels + epsilon * np.sign(grad), 0.0, 1.0)
    return _outcome(model, image, Image(x_adv), "linf", original_class)


def pgd(model: ClassifierModel, image: Image, label: int, config: AttackConfig) -> AttackOutcome:
    """Iterated signed-gradient steps projected onto the L-inf ball."""
    if config.kind != "pgd":
        raise ValueError(f"pgd() needs a PGD config, got kind={config.kind!r}")
    original_class = predict(model, image).predicted_class
    x = image.pixels
    lower = x - config.epsilon
    upper = x + config.epsilon
    alpha = config.step_size
    current = image
    for _ in range(config.steps):
        grad = input_gradient(model, current, label)
        stepped = np.clip(current.pixels + alpha * np.sign(grad), 0.0, 1.0)
        current = Image(np.clip(stepped, lower, upper))
    return _outcome(model, image, current, "linf", original_class)


def ddn(model: ClassifierModel, image: Image, label: int, config: AttackConfig) -> AttackOutcome:
    """Decoupled direction and norm L2 attack.

    The perturbation takes a step of length ``sigma_t`` along the normalized
    loss gradient, is rescaled to L2 norm ``sigma_{t+1}`` and clipped back
    into the pixel box. ``sigma`` shrinks by ``(1 - gamma)`` while the
    current iterate is adversarial and grows by ``(1 + gamma)`` otherwise.
    The adversarial iterate with the smallest norm is returned; if none was
    found the clean image comes back with ``success=False``.
    """
    if config.kind != "ddn":
        raise ValueError(f"ddn() needs a DDN config, got kind={config.kind!r}")
    original_class = predict(model, image).predicted_class
    x = image.pixels
    gamma = config.gamma
    sigma = DDN_INITIAL_NORM_SCALE * math.sqrt(image.size)
    delta = np.zeros_like(x)
    best: Optional[Image] = None
    best_norm = math.inf

    def consider(candidate_delta):
        nonlocal best, best_norm
        candidate = Image.clipped(x + candidate_delta)
        is_adv = predict(model, candidate).predicted_class != original_class
        if is_adv:
            norm = float(np.linalg.norm(candidate_delta))
            if norm < best_norm:
                best, best_norm = candidate, norm
        return candidate, is_adv

    current = image
    is_adv = False
    for _ in range(config.ddn_iters):
        grad = input_gradient(model, current, label)
        gnorm = np.linalg.norm(grad)
        if gnorm > 0:
            delta = delta + sigma * (grad / gnorm)
        sigma = sigma * (1.0 - gamma) if is_adv else sigma * (1.0 + gamma)
        dnorm = np.linalg.norm(delta)
        if dnorm > 0:
            delta = delta * (sigma / dnorm)
        delta = np.clip(x + delta, 0.0, 1.0) - x
        current, is_adv = consider(delta)

    if best is None:
        return _outcome(model, image, image, "l2", original_class)
    return _outcome(model, image, best, "l2", original_class)


def run_attack(model: ClassifierModel, image: Image, label: int, config: AttackConfig) -> AttackOutcome:
    if config.kind == "fgsm":
        return fgsm(model, image, label, config.epsilon)
    if config.kind == "pgd":
        return pgd(model, image, label, config)
    return ddn(model, image, label, config)
