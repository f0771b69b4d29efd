"""Robust images recover, non-robust ones do not.

Builds the synthetic grating benchmark, trains the reference MLP, splits the
held-out images by whether they survive a small PGD attack, then scores both
halves at a larger budget with and without the barrage defense. Finishes by
checking whether the logit-gap histograms of the two halves overlap, which
is what a confidence-based shortcut would need to avoid.

    python3 demos/robust_vs_nonrobust.py [workdir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from robustscore.attacks import AttackConfig
from robustscore.curation import SynthConfig, generate_synthetic, split_manifest
from robustscore.defenses import DefenseConfig
from robustscore.metrics import adf_score, amp_score, ard_score, gap_histograms_overlap, logit_gap_histogram, robust_flags
from robustscore.models import TrainConfig, predict, train_mlp


def main(workdir: Path):
    manifest = generate_synthetic(SynthConfig(seed=7), workdir / "data")
    train, test = split_manifest(manifest, 0.3, seed=7)
    model = train_mlp(train.labelled(), (1024, 64, 3), TrainConfig(seed=7))
    acc = np.mean([predict(model, x).predicted_class == y for x, y in test.labelled()])
    print(f"held-out accuracy: {acc:.3f} on {len(test)} images")

    pgd = AttackConfig(kind="pgd")
    images = test.images()
    survived = robust_flags(model, images, pgd.with_epsilon(0.01))
    split = {
        "robust": [x for x, s in zip(images, survived) if s],
        "non-robust": [x for x, s in zip(images, survived) if not s],
    }
    print(f"split at eps=0.01: {len(split['robust'])} robust, {len(split['non-robust'])} non-robust\n")

    barrage = DefenseConfig(seed=7)
    print(f"{'subset':<12}{'ARD@0.02':>10}{'ADF@0.02':>10}{'AMP@P=0.5':>11}")
    for name, subset in split.items():
        ard = ard_score(pgd, 0.02, subset, model).score
        adf = adf_score(pgd, 0.02, subset, model, barrage).score
        amp = amp_score(pgd, 0.005, subset, model, 0.5).score
        print(f"{name:<12}{ard:>10.3f}{adf:>10.3f}{amp:>11.3f}")

    hists = {name: logit_gap_histogram(model, subset, 20, 10.0) for name, subset in split.items()}
    overlap = gap_histograms_overlap(hists["robust"], hists["non-robust"])
    print(f"\nlogit-gap histograms of the two subsets overlap: {overlap}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
