"""Command-line entry point: ``robustlens <command> [options]``.

Every command accepts ``--config FILE`` (a JSON object whose keys are the
long option names with dashes replaced by underscores) and ``--seed``.
Explicit flags win over the config file, which wins over built-in defaults.
Commands that write artifacts put them, plus a ``manifest.json``, in the
directory given by ``--out``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .attacks import AttackConfig, pgd_attack
from .attributions import expected_gradients, integrated_gradients, render_attribution
from .checkpoint import RunDirectory, load_checkpoint, save_checkpoint
from .data import Dataset, generate_synthetic, write_ppm, write_rgb_ppm
from .exceptions import ConfigError
from .featureviz import (VizSettings, class_mvn_sources, class_specific_generation, direct_feature_vis,
                         random_noise_sources, representation_inversion, top_activating_images)
from .metrics import FeatureExtractor, fid_from_features, load_feature_source
from .models import NetworkSpec, build
from .training import TrainConfig, evaluate, train, write_history

logger = logging.getLogger("robustlens")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

DEFAULTS: Dict[str, dict] = {
    "dataset synth": {"classes": 4, "per_class": 500, "test_per_class": 100, "size": 16, "seed": 0},
    "dataset inspect": {},
    "train": {"mode": "standard", "lr": 0.1, "epochs": 10, "batch_size": 32, "seed": 0,
              "block": "basic", "widths": [16, 32, 64], "blocks": [2, 2, 2],
              "norm": "l2", "epsilon": 0.5, "step_size": 0.1, "iterations": 7, "clean_epochs": 3.0,
              "warmup_epochs": 2.0},
    "eval": {"norm": "l2", "epsilon": 0.5, "step_size": 0.1, "iterations": 7, "seed": 0,
             "no_attack": False},
    "attack": {"norm": "l2", "epsilon": 0.5, "step_size": 0.1, "iterations": 7, "seed": 0,
               "count": 16},
    "explain ig": {"index": [0], "m": 50, "baseline": "zeros", "target": "predicted",
                   "score": "softmax", "normalization": "interval", "seed": 0},
    "explain eg": {"index": [0], "samples": 200, "background": 100, "target": "predicted",
                   "score": "softmax", "seed": 0},
    "viz feature": {"unit": 0, "count": 4, "epsilon": 1000.0, "step_size": 1.0, "iterations": 400,
                    "source": "dataset_image", "seed": 0},
    "viz invert": {"count": 4, "epsilon": 1000.0, "step_size": 1.0, "iterations": 2000,
                   "source": "dataset_image", "seed": 0},
    "viz classgen": {"target_class": 0, "count": 8, "epsilon": 30.0, "step_size": 0.5,
                     "iterations": 60, "source": "mvn_sample", "seed": 0},
    "fid": {"ridge": 1e-6},
    "featdist": {},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser, out: bool = True) -> None:
    p.add_argument("--config", help="JSON file with option values")
    p.add_argument("--seed", type=int)
    if out:
        p.add_argument("--out", help="run directory for outputs and manifest")


def _attack_flags(p):
    p.add_argument("--norm", choices=("l2", "linf"))
    p.add_argument("--epsilon", type=float)
    p.add_argument("--step-size", type=float)
    p.add_argument("--iterations", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="robustlens", description="Adversarial training and interpretability toolkit.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    ds = sub.add_parser("dataset", help="create or inspect datasets")
    ds_sub = ds.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = ds_sub.add_parser("synth", help="generate the synthetic shapes dataset")
    _common(p)
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int)
    p.add_argument("--test-per-class", type=int)
    p.add_argument("--size", type=int)
    p = ds_sub.add_parser("inspect", help="print a dataset summary")
    _common(p, out=False)
    p.add_argument("--data", required=True)

    p = sub.add_parser("train", help="standard or adversarial training")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--eval-data")
    p.add_argument("--mode", choices=("standard", "adversarial"))
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--block", choices=("basic", "bottleneck"))
    p.add_argument("--widths", type=int, nargs="+")
    p.add_argument("--blocks", type=int, nargs="+")
    p.add_argument("--clean-epochs", type=float, help="adversarial mode: clean epochs before attacks start")
    p.add_argument("--warmup-epochs", type=float, help="epochs over which the attack radius ramps up")
    _attack_flags(p)

    p = sub.add_parser("eval", help="standard and robust accuracy")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--no-attack", action="store_true", default=None)
    _attack_flags(p)

    p = sub.add_parser("attack", help="write PGD adversarial examples")
    _common(p)
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--count", type=int)
    _attack_flags(p)

    ex = sub.add_parser("explain", help="attribution maps")
    ex_sub = ex.add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name in ("ig", "eg"):
        p = ex_sub.add_parser(name)
        _common(p)
        p.add_argument("--model")
        p.add_argument("--data")
        p.add_argument("--index", type=int, nargs="+")
        p.add_argument("--target", help="'predicted', 'label' or a class index")
        p.add_argument("--score", choices=("softmax", "logit"))
        if name == "ig":
            p.add_argument("--m", type=int, help="number of integration intervals")
            p.add_argument("--baseline", choices=("zeros", "uniform_noise"))
            p.add_argument("--normalization", choices=("interval", "m_plus_one"))
        else:
            p.add_argument("--samples", type=int)
            p.add_argument("--background", type=int, help="number of dataset images used as baselines")

    vz = sub.add_parser("viz", help="optimisation-based visualisation")
    vz_sub = vz.add_subparsers(dest="action", required=True, parser_class=_Parser)
    for name in ("feature", "invert", "classgen"):
        p = vz_sub.add_parser(name)
        _common(p)
        p.add_argument("--model")
        p.add_argument("--data")
        p.add_argument("--count", type=int)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--step-size", type=float)
        p.add_argument("--iterations", type=int)
        p.add_argument("--source", choices=("dataset_image", "random_noise", "mvn_sample"))
        if name == "feature":
            p.add_argument("--unit", type=int)
        if name == "classgen":
            p.add_argument("--target-class", type=int)

    p = sub.add_parser("fid", help="Frechet distance between two image or feature sets")
    _common(p)
    p.add_argument("--real")
    p.add_argument("--gen")
    p.add_argument("--extractor", help="checkpoint of the feature extractor")
    p.add_argument("--ridge", type=float)

    p = sub.add_parser("featdist", help="mean extractor-space L2 between paired image sets")
    _common(p)
    p.add_argument("--a")
    p.add_argument("--b")
    p.add_argument("--extractor")
    return parser


def _resolve(command: str, args: argparse.Namespace) -> dict:
    cfg = dict(DEFAULTS.get(command, {}))
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a JSON object")
        known = set(vars(args)) - {"command", "action", "config", "verbose"}
        unknown = set(loaded) - known
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in ("command", "action", "config", "verbose") or value is None:
            continue
        cfg[key] = value
    return cfg


def _need(cfg: dict, *keys) -> None:
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _run_dir(cfg: dict, command: str) -> RunDirectory:
    _need(cfg, "out")
    return RunDirectory(cfg["out"], command, cfg, cfg.get("seed"))


def _attack(cfg: dict) -> AttackConfig:
    return AttackConfig(norm=cfg["norm"], epsilon=cfg["epsilon"], step_size=cfg["step_size"],
                        iterations=cfg["iterations"], seed=int(cfg.get("seed") or 0))


def _load_model(cfg: dict, run: Optional[RunDirectory], key: str = "model"):
    _need(cfg, key)
    if run is not None:
        run.add_input(cfg[key])
    params, _ = load_checkpoint(cfg[key])
    return params


def _load_data(cfg: dict, run: Optional[RunDirectory], key: str = "data") -> Dataset:
    _need(cfg, key)
    if run is not None:
        run.add_input(cfg[key])
    return Dataset.load(cfg[key])


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# -- commands ---------------------------------------------------------------------------
def cmd_dataset_synth(cfg):
    run = _run_dir(cfg, "dataset synth")
    seed = int(cfg["seed"])
    train_ds = generate_synthetic(cfg["classes"], cfg["per_class"], cfg["size"], seed, "train")
    test_ds = generate_synthetic(cfg["classes"], cfg["test_per_class"], cfg["size"], seed + 7919, "test")
    train_ds.save(run.path("train.npz"))
    test_ds.save(run.path("test.npz"))
    summary = {"train_digest": train_ds.digest(), "test_digest": test_ds.digest(),
               "train_count": len(train_ds), "test_count": len(test_ds)}
    run.finish(summary)
    _print(summary)


def cmd_dataset_inspect(cfg):
    ds = _load_data(cfg, None)
    counts = np.bincount(ds.labels, minlength=ds.num_classes)
    _print({"count": len(ds), "image_shape": list(ds.image_shape), "split": ds.split,
            "classes": {name: int(c) for name, c in zip(ds.class_names, counts)},
            "min": float(ds.images.min()) if len(ds) else None,
            "max": float(ds.images.max()) if len(ds) else None, "digest": ds.digest()})


def cmd_train(cfg):
    run = _run_dir(cfg, "train")
    data = _load_data(cfg, run)
    eval_data = _load_data(cfg, run, "eval_data") if cfg.get("eval_data") else None
    seed = int(cfg["seed"])
    spec = NetworkSpec(input_shape=data.image_shape, num_classes=data.num_classes, block=cfg["block"],
                       widths=tuple(cfg["widths"]), blocks=tuple(cfg["blocks"]))
    attack = _attack({**cfg, "seed": seed + 2})
    tcfg = TrainConfig(lr=cfg["lr"], epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=seed + 1,
                       mode=cfg["mode"], attack=attack, clean_epochs=cfg["clean_epochs"],
                       warmup_epochs=cfg["warmup_epochs"])
    result = train(build(spec, seed), data, tcfg, eval_data=eval_data)
    best = result.history[result.best_epoch - 1]
    meta = {"config": tcfg.to_dict(), "epoch": result.best_epoch, "metrics": best,
            "input_space": "raw [0, 1] pixels, no per-channel normalisation"}
    save_checkpoint(run.path("model.rlck"), result.best, meta)
    save_checkpoint(run.path("final.rlck"), result.params,
                    {**meta, "epoch": len(result.history), "metrics": result.history[-1]})
    write_history(result.history, run.path("history.jsonl"))
    run.finish({"best_epoch": result.best_epoch, "best": best})
    _print({"best_epoch": result.best_epoch, **best})


def cmd_eval(cfg):
    run = _run_dir(cfg, "eval")
    params = _load_model(cfg, run)
    data = _load_data(cfg, run)
    report = evaluate(params, data, None if cfg.get("no_attack") else _attack(cfg))
    run.path("report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    run.finish()
    _print(report.to_dict())


def cmd_attack(cfg):
    run = _run_dir(cfg, "attack")
    params = _load_model(cfg, run)
    data = _load_data(cfg, run)
    n = min(int(cfg["count"]), len(data))
    x, y = data.images[:n].astype(params.dtype), data.labels[:n]
    x_adv, delta = pgd_attack(params.frozen(), x, y, _attack(cfg))
    for i in range(n):
        write_ppm(x_adv[i], run.path(f"adv/{i:05d}.ppm"))
    with open(run.path("adversarial.npz"), "wb") as fh:
        np.savez(fh, images=x_adv, delta=delta, labels=y)
    report = evaluate(params, Dataset(x_adv, y, data.class_names, "adversarial"))
    summary = {"count": n, "accuracy_on_adversarial": report.standard_accuracy}
    run.finish(summary)
    _print(summary)


def _target(cfg, label):
    t = cfg["target"]
    if t == "label":
        return int(label)
    if t == "predicted":
        return "predicted"
    try:
        return int(t)
    except (TypeError, ValueError):
        raise ConfigError(f"target must be 'predicted', 'label' or an integer, got {t!r}") from None


def cmd_explain(cfg, method: str):
    run = _run_dir(cfg, f"explain {method}")
    params = _load_model(cfg, run)
    data = _load_data(cfg, run)
    results = []
    for i in cfg["index"]:
        if not 0 <= i < len(data):
            raise ConfigError(f"index {i} outside dataset of {len(data)} images")
        x = data.images[i].astype(params.dtype)
        target = _target(cfg, data.labels[i])
        if method == "ig":
            if cfg["baseline"] == "zeros":
                baseline = np.zeros_like(x)
            else:
                baseline = np.random.default_rng([int(cfg["seed"]), i]).uniform(size=x.shape).astype(x.dtype)
            amap = integrated_gradients(params, x, baseline, target, cfg["m"], cfg["score"], cfg["normalization"])
        else:
            k = min(int(cfg["background"]), len(data))
            bg = data.images[np.random.default_rng(int(cfg["seed"])).choice(len(data), k, replace=False)]
            amap = expected_gradients(params, x, bg.astype(params.dtype), cfg["samples"], target,
                                      seed=int(cfg["seed"]) + i, score=cfg["score"])
        amap.save(run.path(f"map_{i:05d}.rlam"))
        run.outputs.append(f"map_{i:05d}.rlam.json")
        write_rgb_ppm(render_attribution(amap, x), run.path(f"heatmap_{i:05d}.ppm"))
        results.append({"index": i, "target": amap.target, "sum": amap.total,
                        "score_input": amap.score_input, "score_baseline": amap.score_baseline})
    run.finish({"maps": results})
    _print(results)


def _viz_settings(cfg) -> VizSettings:
    return VizSettings(epsilon=cfg["epsilon"], step_size=cfg["step_size"], iterations=cfg["iterations"],
                       seed=int(cfg["seed"]))


def _viz_sources(cfg, data: Dataset, count: int, label: Optional[int] = None) -> np.ndarray:
    seed = int(cfg["seed"])
    if cfg["source"] == "random_noise":
        return random_noise_sources(data.image_shape, count, seed)
    if cfg["source"] == "mvn_sample":
        lab = 0 if label is None else label
        return class_mvn_sources(data.images, data.labels, lab, count, seed)
    pool = data.images if label is None else data.of_class(label)
    idx = np.random.default_rng(seed).choice(len(pool), count, replace=len(pool) < count)
    return pool[idx]


def _write_viz(run: RunDirectory, vrun, extra: dict) -> dict:
    for i, img in enumerate(vrun.images):
        write_ppm(np.clip(img, 0.0, 1.0), run.path(f"images/{i:05d}.ppm"))
    with open(run.path("viz.npz"), "wb") as fh:
        np.savez(fh, images=vrun.images, trace=vrun.trace, objective=vrun.objective_values)
    summary = {"objective": vrun.objective.describe(), "initial": vrun.initial.tolist(),
               "final": vrun.objective_values.tolist(), "stagnant": vrun.stagnant.tolist(), **extra}
    run.finish(summary)
    return summary


def cmd_viz(cfg, action: str):
    run = _run_dir(cfg, f"viz {action}")
    params = _load_model(cfg, run)
    data = _load_data(cfg, run)
    count = int(cfg["count"])
    settings = _viz_settings(cfg)
    extra: dict = {}
    if action == "feature":
        src = _viz_sources(cfg, data, count)
        vrun = direct_feature_vis(params, src, unit=cfg["unit"], settings=settings, source_policy=cfg["source"])
        top, bottom = top_activating_images(params, data.images, cfg["unit"], count=8)
        extra = {"top_ids": top.tolist(), "bottom_ids": bottom.tolist()}
    elif action == "invert":
        rng = np.random.default_rng(int(cfg["seed"]) + 1)
        targets = data.images[rng.choice(len(data), count, replace=False)]
        src = _viz_sources(cfg, data, count)
        vrun = representation_inversion(params, src, targets, settings, cfg["source"])
    else:
        src = _viz_sources(cfg, data, count, label=cfg["target_class"])
        vrun = class_specific_generation(params, cfg["target_class"], src, settings, cfg["source"])
    summary = _write_viz(run, vrun, extra)
    _print({k: v for k, v in summary.items() if k != "stagnant"})


def _features(path, extractor: Optional[FeatureExtractor]) -> np.ndarray:
    p = Path(path)
    if p.suffix == ".npz":
        if extractor is None:
            raise ConfigError("--extractor is required for image inputs")
        return extractor(Dataset.load(p).images)
    if p.is_dir() and extractor is None:
        raise ConfigError("--extractor is required for image inputs")
    return load_feature_source(p, extractor)


def _extractor(cfg, run) -> Optional[FeatureExtractor]:
    if not cfg.get("extractor"):
        return None
    run.add_input(cfg["extractor"])
    params, meta = load_checkpoint(cfg["extractor"])
    return FeatureExtractor(params, version=str(meta.get("version", Path(cfg["extractor"]).name)))


def cmd_fid(cfg):
    run = _run_dir(cfg, "fid")
    _need(cfg, "real", "gen")
    run.add_input(cfg["real"])
    run.add_input(cfg["gen"])
    extractor = _extractor(cfg, run)
    score = fid_from_features(_features(cfg["real"], extractor), _features(cfg["gen"], extractor), cfg["ridge"])
    result = {"fid": score, "extractor": extractor.version if extractor else None}
    run.path("fid.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    run.finish(result)
    _print(result)


def cmd_featdist(cfg):
    run = _run_dir(cfg, "featdist")
    _need(cfg, "a", "b")
    run.add_input(cfg["a"])
    run.add_input(cfg["b"])
    extractor = _extractor(cfg, run)
    fa, fb = _features(cfg["a"], extractor), _features(cfg["b"], extractor)
    if fa.shape != fb.shape:
        raise ConfigError(f"paired sets differ in shape: {fa.shape} vs {fb.shape}")
    dist = np.sqrt(((fa - fb) ** 2).sum(axis=1))
    result = {"mean_l2": float(dist.mean()), "count": int(len(dist)), "per_pair": dist.tolist()}
    run.path("featdist.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    run.finish({"mean_l2": result["mean_l2"], "count": result["count"]})
    _print({"mean_l2": result["mean_l2"], "count": result["count"]})


def _dispatch(args, cfg):
    cmd = args.command
    if cmd == "dataset":
        return cmd_dataset_synth(cfg) if args.action == "synth" else cmd_dataset_inspect(cfg)
    if cmd == "explain":
        return cmd_explain(cfg, args.action)
    if cmd == "viz":
        return cmd_viz(cfg, args.action)
    return {"train": cmd_train, "eval": cmd_eval, "attack": cmd_attack, "fid": cmd_fid,
            "featdist": cmd_featdist}[cmd](cfg)


def _thread_limit():
    value = os.environ.get("RL_THREADS")
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"RL_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise ConfigError(f"RL_THREADS must be a positive integer, got {value!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    command = args.command + (f" {args.action}" if getattr(args, "action", None) else "")
    try:
        cfg = _resolve(command, args)
        with _thread_limit():
            _dispatch(args, cfg)
    except (ConfigError, FileExistsError) as exc:
        print(f"robustlens: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # reported, not re-raised: the exit code carries the outcome
        print(f"robustlens: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
