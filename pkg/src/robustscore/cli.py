"""``robustscore`` command line.

Each subcommand wraps one library operation and writes JSON / CSV outputs
only to the paths named by its flags. Exit codes: 0 ok, 1 usage error,
2 data error, 3 model or protocol error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict
from functools import partial
from pathlib import Path

import numpy as np

from . import __version__
from .attacks import AttackConfig, run_attack
from .curation import (
    DatasetManifest,
    SynthConfig,
    filter_easy,
    filter_robust,
    frequency_report,
    generate_synthetic,
    label_defense_friendly,
    load_manifest,
    save_manifest,
    shard_manifest,
    split_manifest,
)
from .defenses import DefenseConfig, apply_defense
from .errors import DataError, MaxEpsilonExceeded, ModelError
from .imageio import write_image
from .metrics import AMP_DEFAULT_ALPHA_STEP, ScoreReport, adf_score, amp_score, ard_score, logit_gap_histogram
from .models import SubprocessModel, TrainConfig, load_mlp, predict, save_mlp, train_mlp
from .proxy import evaluate, evaluate_under_attack, load_logreg, proxy_predictions, save_logreg, train_logreg
from .texture import GlcmConfig, feature_vector, write_feature_csv

EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message} (try --help)")


# ---------------------------------------------------------------- helpers


def _write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _emit(args, payload: dict) -> None:
    if not args.deterministic and "timestamp" not in payload:
        from datetime import datetime, timezone

        payload["timestamp"] = datetime.now(timezone.utc).isoformat()
    text = json.dumps(payload, indent=2) + "\n"
    if args.report:
        Path(args.report).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _emit_report(args, report: ScoreReport) -> None:
    _emit(args, report.to_dict(deterministic=True))


def _load_model(spec: str):
    if spec.startswith("cmd:"):
        return SubprocessModel(spec[4:], name=spec)
    return load_mlp(spec)


@contextmanager
def _mapper(jobs: int):
    if jobs <= 1:
        yield map
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        yield partial(pool.map, chunksize=8)


def _attack_from(args) -> AttackConfig:
    epsilon = args.epsilon
    if epsilon is None:
        epsilon = max(getattr(args, "epsilons", None) or [0.0])
    return AttackConfig(
        kind=args.attack,
        epsilon=epsilon,
        alpha=args.alpha,
        steps=args.steps,
        ddn_iters=args.ddn_iters,
        gamma=args.gamma,
    )


def _defense_from(args) -> DefenseConfig:
    return DefenseConfig(
        kind=args.defense,
        seed=args.defense_seed if args.defense_seed is not None else args.seed,
        max_transforms=args.max_transforms,
        window=args.window,
    )


def _inside(out_dir: Path, rel: str) -> tuple[str, Path]:
    """Map a manifest path to a location under ``out_dir`` (drops ``..`` and roots)."""
    parts = [p for p in Path(rel).parts if p not in ("..", ".") and p != Path(rel).anchor]
    safe = Path(*parts).as_posix()
    return safe, out_dir / safe


def _fmt_eps(eps: float) -> str:
    return format(eps, "g")


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args):
    cfg = SynthConfig(args.num_classes, args.per_class, args.size, args.noise_sigma, args.seed)
    manifest = generate_synthetic(cfg, args.out)
    train, test = split_manifest(manifest, args.test_fraction, args.seed)
    save_manifest(train, Path(args.out) / "train.csv")
    save_manifest(test, Path(args.out) / "test.csv")
    _emit(args, {
        "command": "gen-synth",
        "config": asdict(cfg),
        "test_fraction": args.test_fraction,
        "n_images": len(manifest),
        "n_train": len(train),
        "n_test": len(test),
        "seed": args.seed,
    })


def cmd_train(args):
    manifest = load_manifest(args.manifest)
    if args.num_shards > 1:
        manifest = shard_manifest(manifest, args.num_shards, args.shard, args.seed)
    data = manifest.labelled()
    if not data:
        raise DataError(f"{args.manifest}: no training entries")
    input_dim = data[0][0].size
    num_classes = args.num_classes or (max(y for _, y in data) + 1)
    dims = (input_dim, *args.hidden, num_classes)
    cfg = TrainConfig(args.lr, args.epochs, args.batch_size, args.seed)
    model = train_mlp(data, dims, cfg)
    save_mlp(model, args.out)
    acc = float(np.mean([predict(model, img).predicted_class == y for img, y in data]))
    _emit(args, {
        "command": "train",
        "manifest": args.manifest,
        "layer_dims": list(dims),
        "learning_rate": cfg.learning_rate,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "shard": args.shard,
        "num_shards": args.num_shards,
        "train_accuracy": acc,
        "model": args.out,
        "seed": args.seed,
    })


def _attack_task(model, attack, item):
    image, label = item
    out = run_attack(model, image, label, attack)
    return out.adversarial, out.success, out.final_distance


def cmd_attack(args):
    manifest = load_manifest(args.manifest)
    model = _load_model(args.model)
    attack = _attack_from(args)
    out_dir = Path(args.out)
    with _mapper(args.jobs) as mapper:
        results = list(mapper(partial(_attack_task, model, attack), manifest.labelled()))
    entries, per_image = [], []
    for (rel, label), (adv, success, dist) in zip(manifest.entries, results):
        safe, target = _inside(out_dir, rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        write_image(target, adv)
        entries.append((safe, label))
        per_image.append({"path": safe, "success": success, "distance": dist})
    save_manifest(DatasetManifest(tuple(entries), out_dir), out_dir / "manifest.csv")
    _emit(args, {
        "command": "attack",
        "attack": attack.to_dict(),
        "model": args.model,
        "dataset": args.manifest,
        "n_images": len(results),
        "success_rate": sum(r[1] for r in results) / max(len(results), 1),
        "seed": args.seed,
        "per_image": per_image,
    })


def _defend_task(defense, item):
    index, image = item
    return apply_defense(image, defense.for_image(index))


def cmd_defend(args):
    manifest = load_manifest(args.manifest)
    defense = _defense_from(args)
    out_dir = Path(args.out)
    with _mapper(args.jobs) as mapper:
        outs = list(mapper(partial(_defend_task, defense), list(enumerate(manifest.images()))))
    entries = []
    for (rel, label), img in zip(manifest.entries, outs):
        safe, target = _inside(out_dir, rel)
        target.parent.mkdir(parents=True, exist_ok=True)
        write_image(target, img)
        entries.append((safe, label))
    save_manifest(DatasetManifest(tuple(entries), out_dir), out_dir / "manifest.csv")
    _emit(args, {"command": "defend", "defense": defense.to_dict(), "dataset": args.manifest,
                 "n_images": len(outs), "seed": defense.seed})


def cmd_glcm(args):
    manifest = load_manifest(args.manifest)
    cfg = GlcmConfig(args.levels, tuple(args.distances), tuple(args.angles))
    with _mapper(args.jobs) as mapper:
        feats = list(mapper(partial(feature_vector, config=cfg), manifest.images()))
    write_feature_csv(args.out, [(p, y, f) for (p, y), f in zip(manifest.entries, feats)], cfg.n_features)
    _emit(args, {"command": "glcm", "dataset": args.manifest, "levels": cfg.levels,
                 "distances": list(cfg.distances), "angles": list(cfg.angles_degrees),
                 "n_images": len(feats), "n_features": cfg.n_features, "out": args.out, "seed": args.seed})


def _score_common(args):
    manifest = load_manifest(args.manifest)
    return manifest, manifest.images(), _load_model(args.model)


def cmd_score_ard(args):
    _, images, model = _score_common(args)
    with _mapper(args.jobs) as mapper:
        report = ard_score(_attack_from(args), args.epsilon or 0.0, images, model, mapper=mapper,
                           model_id=args.model, dataset_id=args.manifest, seed=args.seed)
    _emit_report(args, report)


def cmd_score_amp(args):
    _, images, model = _score_common(args)
    with _mapper(args.jobs) as mapper:
        report = amp_score(_attack_from(args), args.alpha_step, images, model, args.threshold,
                           args.epsilon_max, mapper=mapper, model_id=args.model,
                           dataset_id=args.manifest, seed=args.seed)
    _emit_report(args, report)


def cmd_score_adf(args):
    _, images, model = _score_common(args)
    with _mapper(args.jobs) as mapper:
        report = adf_score(_attack_from(args), args.epsilon or 0.0, images, model, _defense_from(args),
                           mapper=mapper, model_id=args.model, dataset_id=args.manifest)
    _emit_report(args, report)


def cmd_logit_gap(args):
    _, images, model = _score_common(args)
    with _mapper(args.jobs) as mapper:
        hist = logit_gap_histogram(model, images, args.bins, args.range_max, mapper=mapper)
    Path(args.out).write_text(hist.to_csv(), encoding="utf-8")
    _emit(args, {"command": "logit-gap", "model": args.model, "dataset": args.manifest,
                 "bins": args.bins, "range_max": args.range_max, "n_images": len(images),
                 "counts": [int(c) for c in hist.counts], "out": args.out, "seed": args.seed})


def cmd_curate(args):
    manifest = load_manifest(args.manifest)
    models = [_load_model(m) for m in args.model]
    attack = _attack_from(args)
    defense = _defense_from(args) if args.defense else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"command": "curate", "dataset": args.manifest, "models": args.model,
               "attack": attack.to_dict(), "defense": defense.to_dict() if defense else None,
               "epsilons": args.epsilons, "seed": args.seed}
    with _mapper(args.jobs) as mapper:
        easy = filter_easy(manifest, models, mapper)
        save_manifest(easy, out_dir / "easy.csv")
        summary["n_input"] = len(manifest)
        summary["n_easy"] = len(easy)
        robust_counts = {}
        for eps in args.epsilons:
            tag = _fmt_eps(eps)
            robust = filter_robust(easy, models, attack, eps, mapper)
            keep = robust.paths()
            nonrobust = easy.subset([e for e in easy.entries if e[0] not in keep])
            save_manifest(robust, out_dir / f"robust_eps{tag}.csv")
            save_manifest(nonrobust, out_dir / f"nonrobust_eps{tag}.csv")
            robust_counts[tag] = {"robust": len(robust), "nonrobust": len(nonrobust)}
            if defense is not None:
                friendly = label_defense_friendly(easy, models[0], attack, eps, defense, mapper)
                save_manifest(friendly, out_dir / f"friendly_{defense.kind}_eps{tag}.csv")
                robust_counts[tag]["defense_friendly"] = len(friendly)
        summary["counts"] = robust_counts
    smallest = _fmt_eps(min(args.epsilons))
    freq = frequency_report(load_manifest(out_dir / f"robust_eps{smallest}.csv"), args.min_count)
    (out_dir / "frequency.csv").write_text(freq.to_csv(), encoding="utf-8")
    summary["frequency"] = freq.summary()
    _emit(args, summary)


def _balanced(robust, nonrobust, seed):
    rng = np.random.default_rng(seed)
    n = min(len(robust), len(nonrobust))
    if n == 0:
        raise DataError("proxy training needs at least one robust and one non-robust image")
    r = sorted(rng.choice(len(robust), n, replace=False))
    nr = sorted(rng.choice(len(nonrobust), n, replace=False))
    return [robust[i] for i in r], [nonrobust[i] for i in nr]


def _proxy_data(args):
    robust = load_manifest(args.robust).images()
    nonrobust = load_manifest(args.nonrobust).images()
    if args.balance:
        robust, nonrobust = _balanced(robust, nonrobust, args.seed)
    return robust + nonrobust, [1] * len(robust) + [0] * len(nonrobust)


def cmd_proxy_train(args):
    images, labels = _proxy_data(args)
    with _mapper(args.jobs) as mapper:
        feats = np.array(list(mapper(feature_vector, images)))
    model = train_logreg(feats, labels, args.lr, args.epochs, args.l2, args.seed)
    save_logreg(model, args.out)
    metrics = evaluate(proxy_predictions(model, images), labels)
    _emit(args, {"command": "proxy-train", "robust": args.robust, "nonrobust": args.nonrobust,
                 "balance": args.balance, "lr": args.lr, "epochs": args.epochs, "l2": args.l2,
                 "n_images": len(images), "train_metrics": metrics.to_dict(), "out": args.out,
                 "seed": args.seed})


def cmd_proxy_eval(args):
    images, labels = _proxy_data(args)
    proxy = load_logreg(args.proxy)
    with _mapper(args.jobs) as mapper:
        if args.victim:
            metrics = evaluate_under_attack(proxy, images, labels, _attack_from(args),
                                            _load_model(args.victim), mapper=mapper)
        else:
            metrics = evaluate(proxy_predictions(proxy, images, mapper=mapper), labels)
    _emit(args, {"command": "proxy-eval", "proxy": args.proxy, "robust": args.robust,
                 "nonrobust": args.nonrobust, "victim": args.victim,
                 "attack": _attack_from(args).to_dict() if args.victim else None,
                 **metrics.to_dict(), "seed": args.seed})


def _report_column(r: dict) -> str:
    metric = r["metric"]
    if metric == "AMP":
        return f"AMP@P={format(r['threshold_P'], 'g')}"
    if metric == "ADF":
        return f"ADF[{r['defense']['kind']}]@{_fmt_eps(r['epsilon'])}"
    return f"{metric}@{_fmt_eps(r['epsilon'])}"


def _column_key(col: str):
    order = {"ARD": 0, "AMP": 1, "ADF": 2}
    head, _, tail = col.partition("@")
    value = float(tail.split("=")[-1])
    return order.get(head.split("[")[0], 9), head, value


def cmd_report(args):
    rows: dict[tuple[str, str], dict[str, float]] = {}
    for path in args.inputs:
        try:
            r = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"{path}: cannot read score report: {exc}") from exc
        if "metric" not in r:
            raise DataError(f"{path}: not a score report")
        rows.setdefault((r["dataset"], r["model"]), {})[_report_column(r)] = r["score"]
    columns = sorted({c for cells in rows.values() for c in cells}, key=_column_key)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["dataset", "model"] + columns)
        for (dataset, model) in sorted(rows):
            cells = rows[(dataset, model)]
            writer.writerow([dataset, model] + [
                format(cells[c], ".17g") if c in cells else "" for c in columns
            ])
    _emit(args, {"command": "report", "inputs": args.inputs, "out": args.out,
                 "rows": len(rows), "columns": columns, "seed": args.seed})


# ---------------------------------------------------------------- parser


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=0, help="seed recorded in every report")
    p.add_argument("--report", help="write the JSON report here instead of stdout")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--deterministic", action="store_true", help="omit timestamps from reports")
    return p


def _attack_flags(p, default_eps=None, required_model=True):
    if required_model:
        p.add_argument("--model", required=True, help="PDMLP1 file, or cmd:<command> for a subprocess model")
    p.add_argument("--attack", choices=["fgsm", "pgd", "ddn"], default="pgd")
    p.add_argument("--epsilon", type=float, default=default_eps)
    p.add_argument("--alpha", type=float, default=None, help="PGD step (default 2.5*eps/steps)")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--ddn-iters", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.05)


def _defense_flags(p, default=None):
    p.add_argument("--defense", choices=["barrage", "ymedian", "identity"], default=default)
    p.add_argument("--defense-seed", type=int, default=None, help="defaults to --seed")
    p.add_argument("--max-transforms", type=int, default=5)
    p.add_argument("--window", type=int, choices=[3, 5], default=3)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    p = sub.add_parser("gen-synth", parents=[common], help="write the synthetic grating dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-classes", type=int, default=3)
    p.add_argument("--per-class", type=int, default=300)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--noise-sigma", type=float, default=0.08)
    p.add_argument("--test-fraction", type=float, default=0.3)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", parents=[common], help="train the reference MLP")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--hidden", type=int, nargs="*", default=[64])
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--shard", type=int, default=0)
    p.add_argument("--num-shards", type=int, default=1)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", parents=[common], help="write adversarial copies of a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _attack_flags(p, default_eps=0.01)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", parents=[common], help="apply a defense to every image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    _defense_flags(p, default="barrage")
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("glcm", parents=[common], help="extract GLCM feature CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, default=32)
    p.add_argument("--distances", type=int, nargs="+", default=[1, 2, 3])
    p.add_argument("--angles", type=int, nargs="+", default=[0, 45, 90, 135])
    p.set_defaults(func=cmd_glcm)

    p = sub.add_parser("score-ard", parents=[common], help="ARD score")
    p.add_argument("--manifest", required=True)
    _attack_flags(p, default_eps=0.01)
    p.set_defaults(func=cmd_score_ard)

    p = sub.add_parser("score-amp", parents=[common], help="AMP score")
    p.add_argument("--manifest", required=True)
    _attack_flags(p)
    p.add_argument("--alpha-step", type=float, default=AMP_DEFAULT_ALPHA_STEP)
    p.add_argument("--threshold", type=float, required=True, help="fraction in (0, 1]")
    p.add_argument("--epsilon-max", type=float, default=1.0)
    p.set_defaults(func=cmd_score_amp)

    p = sub.add_parser("score-adf", parents=[common], help="ADF score")
    p.add_argument("--manifest", required=True)
    _attack_flags(p, default_eps=0.01)
    _defense_flags(p, default="barrage")
    p.set_defaults(func=cmd_score_adf)

    p = sub.add_parser("logit-gap", parents=[common], help="histogram of top-1/top-2 logit gaps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--bins", type=int, default=20)
    p.add_argument("--range-max", type=float, default=10.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_logit_gap)

    p = sub.add_parser("curate", parents=[common], help="easy / robust / defense-friendly subsets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", required=True, action="append", help="repeat for each agreeing model")
    p.add_argument("--attack", choices=["fgsm", "pgd", "ddn"], default="pgd")
    p.add_argument("--epsilons", type=float, nargs="+", default=[0.01])
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--ddn-iters", type=int, default=20)
    p.add_argument("--gamma", type=float, default=0.05)
    _defense_flags(p)
    p.add_argument("--min-count", type=int, default=0, help="frequency report cutoff")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_curate, epsilon=None)

    for name, func, help_ in (("proxy-train", cmd_proxy_train, "train the GLCM logistic proxy"),
                              ("proxy-eval", cmd_proxy_eval, "evaluate the GLCM proxy")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--robust", required=True, help="manifest of robust images (label 1)")
        p.add_argument("--nonrobust", required=True, help="manifest of non-robust images (label 0)")
        p.add_argument("--balance", action="store_true", help="subsample the larger class")
        if name == "proxy-train":
            p.add_argument("--out", required=True)
            p.add_argument("--lr", type=float, default=0.1)
            p.add_argument("--epochs", type=int, default=500)
            p.add_argument("--l2", type=float, default=1e-4)
        else:
            p.add_argument("--proxy", required=True)
            p.add_argument("--victim", default=None, help="attack images against this model first")
            _attack_flags(p, default_eps=0.01, required_model=False)
        p.set_defaults(func=func)

    p = sub.add_parser("report", parents=[common], help="merge score reports into one table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (DataError, MaxEpsilonExceeded, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return EXIT_MODEL
    except ValueError as exc:
        print(f"robustscore: {exc} (try --help)", file=sys.stderr)
        return EXIT_USAGE
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
