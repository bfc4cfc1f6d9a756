"""Command-line workflow: fixture, split, features, train, eval, predict.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 model or file error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import config as config_mod
from .dataset import (CLASS_NAMES, N_CLASSES, SPLITS, PreprocessConfig, SplitManifest, channel_stats,
                      generate_fixture_dataset, load_planes, normalize, preprocess_image, scan_dataset,
                      stratified_split)
from .errors import (CytoclassError, DataError, DimensionMismatch, InvalidConfig, ManifestError,
                     ModelFileError)
from .hog import FeatureMatrix, HogConfig, extract_hog_batch, hog_feature_len
from .imaging import read_image
from .metrics import EvaluationReport
from .store import load_feature_cache, load_model, metrics_dict, save_feature_cache, save_model, write_report

MODELS = ("knn", "rf", "gbm", "svm", "resnet")
LOG_NAME = "run.log"
log = logging.getLogger("cytoclass")

_D = config_mod.RunConfig()


class UsageError(CytoclassError):
    pass


# -- parser ---------------------------------------------------------------

def _flag(p, name, help_text, default=None, **kw):
    """Flags default to None so we can tell when they override the config;
    the effective default is spelled out in the help text instead."""
    shown = "required" if kw.get("required") else f"default: {default}"
    p.add_argument(name, default=None, help=f"{help_text} ({shown})", **kw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _flag(common, "--config", "JSON run configuration; flags override its values", "none", metavar="JSON")
    _flag(common, "--threads", "worker cap for forests and SVMs; falls back to $CYTOCLASS_THREADS",
          1, type=int, metavar="N")
    _flag(common, "--data", "dataset root that manifest paths are relative to",
          "config 'data', else the manifest's directory", metavar="DIR")

    parser = argparse.ArgumentParser(prog="cytoclass", description="Cervical cell classification from HOG "
                                     "features (kNN, random forest, gradient boosting, SVM) and a residual CNN.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("fixture", parents=[common], help="write a synthetic five-class dataset")
    _flag(p, "--out", "output directory", required=True, metavar="DIR")
    _flag(p, "--per-class", "images per class", 60, type=int, metavar="N")
    _flag(p, "--seed", "generator seed", 42, type=int)

    p = sub.add_parser("split", parents=[common], help="scan a dataset and write a stratified 8:1:1 split")
    _flag(p, "--seed", "split seed", _D.seed, type=int)
    _flag(p, "--out", "manifest CSV to write", required=True, metavar="CSV")

    p = sub.add_parser("features", parents=[common], help="extract HOG features for every manifest record")
    _flag(p, "--manifest", "split manifest CSV", required=True, metavar="CSV")
    _flag(p, "--out", "feature cache to write", required=True, metavar="HOGF")

    p = sub.add_parser("train", parents=[common], help="train one model family on the train split")
    _flag(p, "--model", "model family", required=True, choices=MODELS)
    _flag(p, "--manifest", "split manifest CSV", required=True, metavar="CSV")
    _flag(p, "--cache", "feature cache from 'features'; computed from images when absent", "none",
          metavar="HOGF")
    _flag(p, "--out", "model envelope to write (blob goes to <out>.mdlb)", required=True, metavar="FILE")
    _flag(p, "--report-dir", "where run.log goes", "directory of --out", metavar="DIR")
    _flag(p, "--seed", "training seed", _D.seed, type=int)
    _flag(p, "--k", "kNN neighbours", "chosen on the val split from 1,3,...,15", type=int)
    _flag(p, "--weighting", "kNN vote weighting", _D.knn.weighting, choices=("majority", "inverse_distance"))
    _flag(p, "--trees", "random forest size", _D.rf.n_trees, type=int)
    _flag(p, "--max-features", "features tried per forest split", "floor(sqrt(p))", type=int)
    _flag(p, "--rounds", "boosting rounds", _D.gbm.n_rounds, type=int)
    _flag(p, "--lr", "boosting learning rate", _D.gbm.learning_rate, type=float)
    _flag(p, "--depth", "boosting tree depth", _D.gbm.max_depth, type=int)
    _flag(p, "--C", "SVM box constraint", _D.svm.C, type=float, dest="C")
    _flag(p, "--kernel", "SVM kernel", _D.svm.kernel, choices=("rbf", "linear"))
    _flag(p, "--gamma", "RBF width", "1/p", type=float)
    _flag(p, "--tol", "SMO KKT tolerance", _D.svm.tol, type=float)
    _flag(p, "--epochs", "ResNet epochs", _D.resnet.epochs, type=int)
    _flag(p, "--batch-size", "ResNet mini-batch size", _D.resnet.batch_size, type=int)
    _flag(p, "--adam-lr", "Adam learning rate", _D.resnet.lr, type=float)
    _flag(p, "--stop-at", "stop ResNet training once val accuracy reaches this", "never", type=float)

    p = sub.add_parser("eval", parents=[common], help="evaluate a model and write the report")
    _flag(p, "--model", "model envelope", required=True, metavar="FILE")
    _flag(p, "--manifest", "split manifest CSV", required=True, metavar="CSV")
    _flag(p, "--split", "split to evaluate", "test", choices=SPLITS)
    _flag(p, "--cache", "feature cache for classical models", "none", metavar="HOGF")
    _flag(p, "--out", "report directory", required=True, metavar="DIR")

    p = sub.add_parser("predict", parents=[common], help="classify one image")
    _flag(p, "--model", "model envelope", required=True, metavar="FILE")
    _flag(p, "--image", "BMP or PNG image", required=True, metavar="FILE")
    return parser


# -- helpers --------------------------------------------------------------

def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("CYTOCLASS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"CYTOCLASS_THREADS={raw!r} is not an integer") from None
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    return n


def _run_config(args) -> config_mod.RunConfig:
    cfg = config_mod.load_config(args.config) if args.config else config_mod.RunConfig()
    if args.data is not None:
        cfg.data = args.data
    seed = getattr(args, "seed", None)
    if seed is not None:
        cfg.seed = seed
    if getattr(args, "command", None) != "train":
        return cfg
    over = {
        "knn": {"k": args.k, "weighting": args.weighting},
        "rf": {"n_trees": args.trees, "max_features": args.max_features},
        "gbm": {"n_rounds": args.rounds, "learning_rate": args.lr, "max_depth": args.depth},
        "svm": {"C": args.C, "kernel": args.kernel, "gamma": args.gamma, "tol": args.tol},
        "resnet": {"epochs": args.epochs, "batch_size": args.batch_size, "lr": args.adam_lr,
                   "stop_at_val_accuracy": args.stop_at},
    }
    for section, values in over.items():
        values = {k: v for k, v in values.items() if v is not None}
        setattr(cfg, section, dataclasses.replace(getattr(cfg, section), **values))
    return cfg


def _start_log(report_dir, command, cfg, threads) -> None:
    report_dir = Path(report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    for h in list(log.handlers):
        log.removeHandler(h)
        h.close()
    handler = logging.FileHandler(report_dir / LOG_NAME, encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    log.addHandler(handler)
    log.setLevel(logging.INFO)
    log.propagate = False
    log.info("command=%s seed=%d threads=%d", command, cfg.seed, threads)
    log.info("effective config %s", json.dumps(config_mod.config_to_dict(cfg), sort_keys=True))


def _need_file(flag, path) -> None:
    if not Path(path).is_file():
        raise ModelFileError(f"{flag}: {path} does not exist")


def _read_manifest(path, cfg) -> SplitManifest:
    if not Path(path).is_file():
        raise ManifestError(f"--manifest: {path} does not exist")
    return SplitManifest.read_csv(path, root=cfg.data)


def _features(split: SplitManifest, pre: PreprocessConfig, hog: HogConfig) -> FeatureMatrix:
    planes = load_planes(split, pre)
    return FeatureMatrix(extract_hog_batch(planes, hog), split.labels)


def _cached_features(path, split: SplitManifest, n_cols: int) -> FeatureMatrix:
    F = load_feature_cache(path, expected_cols=n_cols)
    if F.rows != len(split.records) or not np.array_equal(F.labels, split.labels):
        raise DimensionMismatch(f"--cache: {path} does not match the manifest's records")
    return F


def _pipeline(cfg, n_features=None) -> dict:
    out = {"preprocess": config_mod.config_to_dict(cfg.preprocess), "hog": config_mod.config_to_dict(cfg.hog)}
    if n_features is not None:
        out["n_features"] = n_features
    return out


def _pipeline_from_envelope(env):
    pipe = env["config"]["pipeline"]
    pre = PreprocessConfig(**pipe["preprocess"])
    hog = HogConfig(**pipe["hog"]) if "hog" in pipe else None
    return pre, hog


# -- subcommands ----------------------------------------------------------

def cmd_fixture(args, cfg, threads) -> int:
    out = Path(args.out)
    _start_log(out, "fixture", cfg, threads)
    m = generate_fixture_dataset(out, args.per_class if args.per_class is not None else 60, cfg.seed)
    log.info("wrote %d images under %s", len(m.records), out)
    print(f"wrote {len(m.records)} images under {out}")
    return 0


def cmd_split(args, cfg, threads) -> int:
    if cfg.data is None:
        raise UsageError("split needs --data (or 'data' in --config)")
    _start_log(Path(args.out).parent, "split", cfg, threads)
    m = scan_dataset(cfg.data, cfg.class_dirs)
    split = stratified_split(m, cfg.seed)
    # paths relative to the manifest's own directory, so later commands need no --data
    here = Path(args.out).resolve().parent
    records = [(Path(os.path.relpath(Path(cfg.data).resolve() / rel, here)).as_posix(), c, s)
               for rel, c, s in split.records]
    split = SplitManifest(here, records, split.seed, split.ratios)
    split.write_csv(args.out)
    counts = {s: len(split.subset(s)) for s in SPLITS}
    log.info("split %d records: %s", len(split.records), counts)
    print(f"{len(split.records)} records: " + ", ".join(f"{s}={n}" for s, n in counts.items()))
    return 0


def cmd_features(args, cfg, threads) -> int:
    _start_log(Path(args.out).parent, "features", cfg, threads)
    split = _read_manifest(args.manifest, cfg)
    F = _features(split, cfg.preprocess, cfg.hog)
    save_feature_cache(args.out, F)
    log.info("cached %dx%d features to %s", F.rows, F.cols, args.out)
    print(f"cached {F.rows}x{F.cols} features to {args.out}")
    return 0


def _train_classical(kind, F, split, cfg, threads):
    from .knn import KnnModel, select_k
    from .svm import ovr_fit
    from .trees import BoostConfig, ForestConfig, gbm_fit, rf_fit, rf_oob_accuracy

    train = F.take(split.indices("train"))
    if kind == "knn":
        k = cfg.knn.k
        if k is None:
            k = select_k(train, F.take(split.indices("val")), weighting=cfg.knn.weighting)
            log.info("selected k=%d on the val split", k)
        return KnnModel(train, k, cfg.knn.weighting, N_CLASSES)
    if kind == "rf":
        r = cfg.rf
        forest = rf_fit(train, ForestConfig(r.n_trees, r.max_features, r.min_leaf, r.max_depth),
                        seed=cfg.seed, n_jobs=threads)
        oob = rf_oob_accuracy(forest, train)
        log.info("out-of-bag accuracy %.6f over %d rows", oob.accuracy, oob.n_evaluated)
        return forest
    if kind == "gbm":
        g = cfg.gbm
        return gbm_fit(train, BoostConfig(g.n_rounds, g.max_depth, g.learning_rate, g.min_leaf))
    s = cfg.svm
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        model = ovr_fit(train, s.kernel, s.C, s.gamma, s.tol, s.max_passes, seed=cfg.seed, n_jobs=threads)
    for w in caught:
        log.warning("%s", w.message)
    return model


def _train_resnet(split, cfg):
    from .resnet import build_network, train

    rc = cfg.resnet
    pre = dataclasses.replace(cfg.preprocess, side=rc.net.input_side)
    planes = load_planes(split, pre)
    net = build_network(rc.net, seed=cfg.seed)
    net.normalization = channel_stats(planes[split.indices("train")])

    def epoch_log(m):
        log.info("epoch %d loss %.6f train_acc %.4f val_acc %s", m.epoch, m.train_loss,
                 m.train_accuracy, "n/a" if m.val_accuracy is None else f"{m.val_accuracy:.4f}")

    tr, va = split.indices("train"), split.indices("val")
    result = train(net, planes[tr], split.labels[tr], planes[va], split.labels[va], rc.augment, rc.epochs,
                   rc.batch_size, cfg.seed, rc.lr, record_ids=tr, stop_at_val_accuracy=rc.stop_at_val_accuracy,
                   log=epoch_log)
    log.info("kept parameters from epoch %s", result.best_epoch)
    return result.net, pre


def cmd_train(args, cfg, threads) -> int:
    report_dir = args.report_dir or Path(args.out).parent
    _start_log(report_dir, "train", cfg, threads)
    split = _read_manifest(args.manifest, cfg)
    if args.model == "resnet":
        model, pre = _train_resnet(split, cfg)
        pipeline = {"preprocess": config_mod.config_to_dict(pre)}
    else:
        n_cols = hog_feature_len(cfg.hog, cfg.preprocess.side, cfg.preprocess.side)
        F = _cached_features(args.cache, split, n_cols) if args.cache else _features(split, cfg.preprocess, cfg.hog)
        model = _train_classical(args.model, F, split, cfg, threads)
        pipeline = _pipeline(cfg, F.cols)
    pipeline["hyperparameters"] = config_mod.config_to_dict(getattr(cfg, args.model))
    save_model(args.out, model, pipeline, cfg.seed)
    log.info("saved %s model to %s", args.model, args.out)
    print(f"saved {args.model} model to {args.out}")
    return 0


def _scores(model, env, split: SplitManifest, cache=None) -> np.ndarray:
    pre, hog = _pipeline_from_envelope(env)
    if env["model_type"] == "resnet":
        planes = normalize(load_planes(split, pre), model.normalization)
        return model.predict_scores(planes)
    if cache:
        F = _cached_features(cache, split, env["config"]["pipeline"]["n_features"])
    else:
        F = _features(split, pre, hog)
    return model.predict_scores(F.values)


def cmd_eval(args, cfg, threads) -> int:
    _start_log(args.out, "eval", cfg, threads)
    _need_file("--model", args.model)
    model, env = load_model(args.model)
    split = _read_manifest(args.manifest, cfg)
    which = args.split or "test"
    sub = SplitManifest(split.root, split.subset(which), split.seed)
    if not sub.records:
        raise DataError(f"--split: manifest has no {which!r} records")
    if args.cache:
        # cache rows follow the full manifest; score everything, keep the split
        scores = _scores(model, env, split, args.cache)[split.indices(which)]
    else:
        scores = _scores(model, env, sub)
    report = EvaluationReport.from_scores(sub.labels, scores, CLASS_NAMES)
    write_report(report, args.out)
    m = metrics_dict(report)
    log.info("evaluated %s on %d %s records: accuracy %r", env["model_type"], len(sub.records), which,
             m["accuracy"])
    print(f"accuracy: {m['accuracy']!r}")
    for name, r in zip(CLASS_NAMES, m["per_class_recall"]):
        print(f"recall {name}: {'undefined' if r is None else repr(r)}")
    return 0


def cmd_predict(args, cfg, threads) -> int:
    _need_file("--model", args.model)
    _need_file("--image", args.image)
    model, env = load_model(args.model)
    pre, hog = _pipeline_from_envelope(env)
    plane = preprocess_image(read_image(args.image), pre)
    if env["model_type"] == "resnet":
        scores = model.predict_scores(normalize(plane, model.normalization)[None])[0]
    else:
        scores = model.predict_scores(extract_hog_batch(plane[None], hog))[0]
    c = int(np.argmax(scores))
    print(CLASS_NAMES[c])
    print("scores: " + " ".join(f"{n}={s!r}" for n, s in zip(CLASS_NAMES, scores.tolist())))
    return 0


COMMANDS = {"fixture": cmd_fixture, "split": cmd_split, "features": cmd_features,
            "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        threads = _threads(args)
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg, threads)
    except (UsageError, InvalidConfig) as exc:
        print(f"cytoclass {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"cytoclass {args.command}: data error: {exc}", file=sys.stderr)
        return 3
    except (ModelFileError, OSError) as exc:
        print(f"cytoclass {args.command}: file error: {exc}", file=sys.stderr)
        return 4
    except CytoclassError as exc:
        print(f"cytoclass {args.command}: error: {exc}", file=sys.stderr)
        return 3
    finally:
        for h in list(log.handlers):
            log.removeHandler(h)
            h.close()


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
