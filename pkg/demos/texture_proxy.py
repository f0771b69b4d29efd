"""Predicting robustness from texture.

Labels a fresh pool of gratings as robust or not against a trained victim,
then fits two proxies to that label: logistic regression on GLCM texture
features and a small pixel MLP. Attacking the inputs hurts the pixel proxy
while the texture proxy barely moves.

    python3 demos/texture_proxy.py
"""

import tempfile
from pathlib import Path

import numpy as np

from robustscore.attacks import AttackConfig
from robustscore.curation import SynthConfig, generate_synthetic, split_manifest
from robustscore.metrics import robust_flags
from robustscore.models import TrainConfig, train_mlp
from robustscore.proxy import evaluate, evaluate_under_attack, proxy_predictions, train_logreg
from robustscore.texture import feature_vector


def main(workdir: Path):
    bench = generate_synthetic(SynthConfig(seed=7), workdir / "bench")
    train, _ = split_manifest(bench, 0.3, seed=7)
    victim = train_mlp(train.labelled(), (1024, 64, 3), TrainConfig(seed=7))

    pgd = AttackConfig(kind="pgd", epsilon=0.01)
    pool = generate_synthetic(SynthConfig(per_class=600, seed=8), workdir / "pool").images()
    flags = robust_flags(victim, pool, pgd)
    robust = [i for i, s in enumerate(flags) if s]
    fragile = [i for i, s in enumerate(flags) if not s]
    print(f"pool of {len(pool)}: {len(robust)} robust, {len(fragile)} non-robust; balancing to {len(fragile)} each")

    rng = np.random.default_rng(0)
    keep = rng.permutation(sorted(rng.choice(robust, len(fragile), replace=False).tolist()) + fragile)
    images, labels = [pool[i] for i in keep], [int(flags[i]) for i in keep]
    half = len(keep) // 2
    tr_x, tr_y, te_x, te_y = images[:half], labels[:half], images[half:], labels[half:]

    glcm = train_logreg(np.array([feature_vector(x) for x in tr_x]), tr_y)
    pixel = train_mlp(list(zip(tr_x, tr_y)), (1024, 64, 2), TrainConfig(seed=3))

    print(f"\n{'proxy':<10}{'clean':>8}{'attacked':>10}")
    for name, proxy in (("GLCM", glcm), ("pixel MLP", pixel)):
        clean = evaluate(proxy_predictions(proxy, te_x), te_y).accuracy
        attacked = evaluate_under_attack(proxy, te_x, te_y, pgd, victim=pixel).accuracy
        print(f"{name:<10}{clean:>8.3f}{attacked:>10.3f}")


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        main(Path(tmp))
