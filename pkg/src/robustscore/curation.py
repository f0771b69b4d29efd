"""Dataset curation: easy / epsilon-robust / defense-friendly filtering.

Also hosts the on-disk manifest format and the seeded synthetic grating
generator used in place of a scraped photo collection.
"""

from __future__ import annotations

import csv
import math
import os
import statistics
from collections import Counter
from dataclasses import dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .attacks import AttackConfig, run_attack
from .defenses import DefenseConfig, apply_defense
from .errors import DataError, NoModels
from .imageio import Image, read_image, write_image
from .models import ClassifierModel, predict

__all__ = [
    "DatasetManifest",
    "SynthConfig",
    "CurationResult",
    "FrequencyReport",
    "load_manifest",
    "save_manifest",
    "generate_synthetic",
    "synth_image",
    "split_manifest",
    "shard_manifest",
    "filter_easy",
    "filter_robust",
    "label_defense_friendly",
    "curate",
    "frequency_report",
]

Entry = tuple[str, int]


@dataclass(frozen=True)
class DatasetManifest:
    """Image paths (relative to ``root``) with integer labels."""

    entries: tuple[Entry, ...]
    root: Path = Path(".")
    name: str = ""

    def __post_init__(self):
        entries = tuple((str(p), int(y)) for p, y in self.entries)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "root", Path(self.root))
        seen = set()
        for p, y in entries:
            if p in seen:
                raise DataError(f"duplicate manifest path {p!r}")
            if y < 0:
                raise DataError(f"negative label {y} for {p!r}")
            seen.add(p)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> list[int]:
        return [y for _, y in self.entries]

    def load(self, rel: str) -> Image:
        path = self.root / rel
        try:
            return read_image(path)
        except FileNotFoundError as exc:
            raise DataError(f"missing image file {path}") from exc
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from exc

    def images(self) -> list[Image]:
        return [self.load(p) for p, _ in self.entries]

    def labelled(self) -> list[tuple[Image, int]]:
        return [(self.load(p), y) for p, y in self.entries]

    def subset(self, entries: Sequence[Entry], name: str = "") -> "DatasetManifest":
        return DatasetManifest(tuple(entries), self.root, name or self.name)

    def paths(self) -> set[str]:
        return {p for p, _ in self.entries}


def load_manifest(path) -> DatasetManifest:
    """Read a ``path,label`` CSV; relative paths resolve against its folder."""
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError as exc:
        raise DataError(f"missing manifest {path}") from exc
    entries = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label"]:
            raise DataError(f"{path}:1: expected header 'path,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                entries.append((row[0], int(row[1])))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: bad label {row[1]!r}") from exc
    try:
        return DatasetManifest(tuple(entries), path.parent, str(path))
    except DataError as exc:
        raise DataError(f"{path}: {exc}") from exc


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write ``path,label`` rows, re-rooting paths at the CSV's own folder."""
    path = Path(path)
    here = os.path.abspath(path.parent)
    there = os.path.abspath(manifest.root)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label"])
        for p, y in manifest.entries:
            if here != there and not os.path.isabs(p):
                p = Path(os.path.relpath(os.path.join(there, p), here)).as_posix()
            writer.writerow([p, y])


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 3
    per_class: int = 300
    size: int = 32
    noise_sigma: float = 0.08
    seed: int = 7

    def __post_init__(self):
        if self.num_classes < 2 or self.per_class < 1 or self.size < 1 or self.noise_sigma < 0:
            raise ValueError(f"invalid synthetic config {self}")


def synth_image(label: int, config: SynthConfig, rng: np.random.Generator) -> Image:
    """One noisy sinusoidal grating oriented at ``label * pi / num_classes``."""
    theta = label * math.pi / config.num_classes
    freq = rng.uniform(2.0, 6.0)
    phase = rng.uniform(0.0, 2.0 * math.pi)
    rows, cols = np.mgrid[0:config.size, 0:config.size] / config.size
    along = cols * math.cos(theta) + rows * math.sin(theta)
    grating = 0.5 + 0.5 * np.sin(2.0 * math.pi * freq * along + phase)
    noise = rng.normal(0.0, config.noise_sigma, size=grating.shape)
    return Image.clipped(grating + noise)


def generate_synthetic(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write ``num_classes * per_class`` PGM gratings plus ``manifest.csv``.

    Files are produced in manifest order from a single seeded generator, so
    the same config always yields byte-identical output.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(config.seed)
    entries = []
    try:
        for label in range(config.num_classes):
            (out_dir / f"class{label}").mkdir(parents=True, exist_ok=True)
            for i in range(config.per_class):
                rel = f"class{label}/img{i:05d}.pgm"
                write_image(out_dir / rel, synth_image(label, config, rng))
                entries.append((rel, label))
        manifest = DatasetManifest(tuple(entries), out_dir, str(out_dir / "manifest.csv"))
        save_manifest(manifest, out_dir / "manifest.csv")
    except OSError as exc:
        raise DataError(f"cannot write synthetic dataset under {out_dir}: {exc}") from exc
    return manifest


def split_manifest(manifest: DatasetManifest, test_fraction: float, seed: int):
    """Stratified train/test split; returns ``(train, test)`` in manifest order."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    by_label: dict[int, list[int]] = {}
    for n, (_, y) in enumerate(manifest.entries):
        by_label.setdefault(y, []).append(n)
    test_idx = set()
    for y in sorted(by_label):
        idx = by_label[y]
        k = int(round(test_fraction * len(idx)))
        test_idx.update(idx[j] for j in rng.permutation(len(idx))[:k])
    train = [e for n, e in enumerate(manifest.entries) if n not in test_idx]
    test = [e for n, e in enumerate(manifest.entries) if n in test_idx]
    return manifest.subset(train), manifest.subset(test)


def shard_manifest(manifest: DatasetManifest, num_shards: int, index: int, seed: int) -> DatasetManifest:
    """One of ``num_shards`` disjoint random shards (used for the agreement models)."""
    if not 0 <= index < num_shards:
        raise ValueError("shard index out of range")
    order = np.random.default_rng(seed).permutation(len(manifest))
    picked = sorted(int(n) for n in order[index::num_shards])
    return manifest.subset([manifest.entries[n] for n in picked])


def _check_models(models) -> list:
    models = list(models)
    if not models:
        raise NoModels("at least one model is required")
    return models


def _easy_one(models, item) -> bool:
    image, label = item
    return all(predict(m, image).predicted_class == label for m in models)


def _robust_one(models, attack, item) -> bool:
    image, label = item
    return all(run_attack(m, image, label, attack).adversarial_class == label for m in models)


def _friendly_one(model, attack, defense, item) -> bool:
    index, image, label = item
    adversarial = run_attack(model, image, label, attack).adversarial
    defended = apply_defense(adversarial, defense.for_image(index))
    return predict(model, defended).predicted_class == label


def _keep(manifest: DatasetManifest, flags) -> DatasetManifest:
    return manifest.subset([e for e, keep in zip(manifest.entries, flags) if keep])


def filter_easy(dataset: DatasetManifest, models: Sequence[ClassifierModel], mapper: Callable = map) -> DatasetManifest:
    """Entries on which every model predicts the ground-truth label."""
    models = _check_models(models)
    flags = list(mapper(partial(_easy_one, models), dataset.labelled()))
    return _keep(dataset, flags)


def filter_robust(
    easy: DatasetManifest,
    models: Sequence[ClassifierModel],
    attack: AttackConfig,
    epsilon: float,
    mapper: Callable = map,
) -> DatasetManifest:
    """Entries whose label survives a white-box attack on each model in turn."""
    models = _check_models(models)
    attack = attack.with_epsilon(epsilon)
    flags = list(mapper(partial(_robust_one, models, attack), easy.labelled()))
    return _keep(easy, flags)


def label_defense_friendly(
    subset: DatasetManifest,
    model: ClassifierModel,
    attack: AttackConfig,
    epsilon: float,
    defense: DefenseConfig,
    mapper: Callable = map,
) -> DatasetManifest:
    """Entries whose label is recovered by ``defense`` after the attack."""
    attack = attack.with_epsilon(epsilon)
    items = [(n, img, y) for n, (img, y) in enumerate(subset.labelled())]
    flags = list(mapper(partial(_friendly_one, model, attack, defense), items))
    return _keep(subset, flags)


@dataclass
class CurationResult:
    easy: DatasetManifest
    robust: dict[float, DatasetManifest] = field(default_factory=dict)
    defense_friendly: dict[tuple[float, str], DatasetManifest] = field(default_factory=dict)
    per_class_counts: dict[int, int] = field(default_factory=dict)


def curate(
    dataset: DatasetManifest,
    models: Sequence[ClassifierModel],
    attack: AttackConfig,
    epsilons: Sequence[float],
    defenses: Sequence[DefenseConfig] = (),
    mapper: Callable = map,
) -> CurationResult:
    """Easy filter, then an epsilon-robust set per epsilon, then defense labels.

    Defense-friendliness is judged against the first model only.
    """
    models = _check_models(models)
    easy = filter_easy(dataset, models, mapper)
    result = CurationResult(easy=easy)
    for eps in epsilons:
        result.robust[float(eps)] = filter_robust(easy, models, attack, eps, mapper)
        for d in defenses:
            key = (float(eps), _defense_id(d))
            result.defense_friendly[key] = label_defense_friendly(easy, models[0], attack, eps, d, mapper)
    smallest = min(epsilons) if epsilons else None
    final = result.robust[float(smallest)] if smallest is not None else easy
    result.per_class_counts = dict(Counter(final.labels))
    return result


def _defense_id(config: DefenseConfig) -> str:
    if config.kind == "barrage":
        return f"barrage-s{config.seed}-k{config.max_transforms}"
    if config.kind == "ymedian":
        return f"ymedian-w{config.window}"
    return "identity"


@dataclass
class FrequencyReport:
    rows: list[tuple[int, int]]
    mean: Optional[float]
    median: Optional[float]

    def to_csv(self) -> str:
        lines = ["label,count"] + [f"{y},{c}" for y, c in self.rows]
        return "\n".join(lines) + "\n"

    def summary(self) -> dict:
        out = {"classes": len(self.rows)}
        if self.mean is not None:
            out["mean"] = self.mean
            out["median"] = self.median
        return out


def frequency_report(subset, min_count: int = 0) -> FrequencyReport:
    """Per-class counts, most frequent first.

    Mean and median cover every class with at least one entry; ``min_count``
    only trims the listed rows.
    """
    labels = subset.labels if isinstance(subset, DatasetManifest) else [y for _, y in subset]
    counts = Counter(labels)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if not ordered:
        return FrequencyReport([], None, None)
    values = [c for _, c in ordered]
    rows = [(y, c) for y, c in ordered if c >= min_count]
    return FrequencyReport(rows, statistics.fmean(values), float(statistics.median(values)))
