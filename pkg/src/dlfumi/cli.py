"""Command-line interface: ``dlfumi <subcommand> [options]``.

Exit status is 0 on success, 1 for invalid input (config, data or model
files) and 2 for runtime or numerical failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import linear_sum_assignment
from sklearn.model_selection import train_test_split

from . import __version__, core
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import (DataFormatError, load_csv_bags, load_instances_csv, load_usps,
                   make_bags, save_csv_bags, save_ground_truth, synth_generate,
                   synth_test_set)
from .estimator import DLFUMI, DLFUMIClassifier
from .inference import MulticlassModel, classify_batch, confidences
from .io import (ModelFormatError, ensure_dir, export_atoms, load_any, save_model,
                 save_multiclass, write_trace_csv)
from .metrics import average_runs, multiclass_accuracy, roc, tpr_at_fpr

log = logging.getLogger("dlfumi")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

# flag name -> config key
FLAG_KEYS = {
    "usps": "usps.path", "target_class": "usps.target_class",
    "instances_csv": "csv.instances", "bags_csv": "csv.bags",
    "T": "model.t", "M": "model.m", "lam": "model.lam", "Gamma": "model.gamma",
    "beta": "model.beta", "psi": "model.psi", "inner_iters": "model.inner_iters",
    "max_em_iters": "model.max_em_iters", "rel_tol": "model.rel_tol",
    "test_lam": "model.test_lam", "repetitions": "experiment.repetitions",
    "out": "output.out",
}


class UsageError(ValueError):
    pass


# --------------------------------------------------------------------------
# helpers


def build_config(args) -> RunConfig:
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "synth_source", False):
        overrides.setdefault("synth.seed", "0")
    if args.seed is not None:
        overrides["experiment.base_seed"] = str(args.seed)
        overrides["model.seed"] = str(args.seed)
        if getattr(args, "synth_source", False) or _config_has_synth(args.config):
            overrides["synth.seed"] = str(args.seed)
    if args.config:
        return load_config(args.config, overrides)
    return parse_config("", "<command line>", overrides)


def _config_has_synth(path):
    if not path:
        return False
    try:
        return any(ln.strip().lower() == "[synth]" for ln in Path(path).read_text().splitlines())
    except OSError:
        return False


def write_manifest(out: Path, cfg: RunConfig | None, command: str, seed, extra=None):
    manifest = {"command": command, "toolkit_version": __version__, "seed": seed,
                "config_hash": cfg.config_hash if cfg is not None else None}
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _dump_json(path: Path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_labels(path) -> np.ndarray:
    """Labels one per line; a non-numeric first line is taken as a header.
    A CSV with several columns uses its last column."""
    rows = [ln.strip() for ln in Path(path).read_text().splitlines() if ln.strip()]
    if rows:
        try:
            float(rows[0].split(",")[-1])
        except ValueError:
            rows = rows[1:]
    return np.array([float(r.split(",")[-1]) for r in rows])


def detector_for(cfg: RunConfig, seed: int) -> DLFUMI:
    hp = core.Hyperparams(**{**cfg.hp.__dict__, "seed": seed})
    return DLFUMI.from_hyperparams(hp, cfg.test_lam, cfg.test_iters)


def match_atoms(true_atoms, learned):
    """|cosine| between true atoms and learned atoms under optimal one-to-one matching."""
    A = true_atoms / np.linalg.norm(true_atoms, axis=0)
    B = learned / np.linalg.norm(learned, axis=0)
    C = np.abs(A.T @ B)
    rows, cols = linear_sum_assignment(-C)
    return C[rows, cols]


def _train_detector(ds, cfg, seed):
    det = detector_for(cfg, seed)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", core.DegenerateAtomWarning)
        det.fit(ds)
    for w in caught:
        log.warning("%s", w.message)
    return det


def _save_detector(out: Path, det: DLFUMI, name="model"):
    save_model(out / f"{name}.npz", det.dictionary_, det.hyperparams(), det.trace_,
               test_lam=det.test_lambda_)
    write_trace_csv(out / f"trace{'' if name == 'model' else '_' + name}.csv", det.trace_)
    export_atoms(out / f"atoms{'' if name == 'model' else '_' + name}.pgm", det.dictionary_)


# --------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = build_config(args)
    out = ensure_dir(args.out or cfg.out)
    seed = cfg.hp.seed
    extra = {}
    if cfg.source == "usps":
        d = cfg.data
        X, y = load_usps(d.path, d.digits)
        if d.target_class == "all":
            clf = DLFUMIClassifier(detector_for(cfg, seed), d.pos_bags, d.neg_bags,
                                   d.bag_size, d.neg_bag_size, d.targets_per_pos_bag,
                                   random_state=seed, n_jobs=cfg.workers)
            clf.fit(X, y)
            save_multiclass(out / "model.npz", clf.to_model(),
                            [e.hyperparams() for e in clf.estimators_])
            for c, est in zip(clf.classes_, clf.estimators_):
                write_trace_csv(out / f"trace_{c}.csv", est.trace_)
                export_atoms(out / f"atoms_{c}.pgm", est.dictionary_)
        else:
            ds = make_bags(X, y, int(d.target_class), d.pos_bags, d.neg_bags, d.bag_size,
                           d.targets_per_pos_bag, d.neg_bag_size, seed=seed)
            _save_detector(out, _train_detector(ds, cfg, seed))
    elif cfg.source == "csv":
        ds = load_csv_bags(cfg.data.instances, cfg.data.bags)
        _save_detector(out, _train_detector(ds, cfg, seed))
    else:
        prob = synth_generate(cfg.data.spec)
        det = _train_detector(prob.dataset, cfg, seed)
        _save_detector(out, det)
        cos = match_atoms(prob.target_atoms, det.target_atoms_)
        X, z = synth_test_set(prob, cfg.data.test_size, cfg.data.target_fraction)
        report = {"target_atom_cosines": [float(c) for c in cos],
                  "min_target_cosine": float(cos.min()),
                  "test_auc": roc(det.decision_function(X), z).auc,
                  "em_iterations": det.n_iter_}
        _dump_json(out / "recovery.json", report)
        extra["min_target_cosine"] = report["min_target_cosine"]
    write_manifest(out, cfg, "train", seed, extra)
    print(f"model written to {out / 'model.npz'}")
    return EXIT_OK


def _load_instances(path, n_features):
    X = load_instances_csv(path)
    if X.size == 0:
        return np.empty((0, n_features))
    if X.shape[1] != n_features:
        raise UsageError(f"{path}: instances have {X.shape[1]} features, "
                         f"model expects {n_features}")
    return X


def cmd_score(args) -> int:
    loaded = load_any(args.model)
    if isinstance(loaded, MulticlassModel):
        raise UsageError(f"{args.model} holds a multi-class model; use 'classify'")
    D, hp, _, test_lam = loaded
    lam = test_lam if args.test_lam is None else float(args.test_lam)
    X = _load_instances(args.instances, D.n_features)
    out = Path(args.output) if args.output else ensure_dir(args.out or ".") / "scores.csv"
    if X.shape[0]:
        c, r_b, r_f, flagged = confidences(X, D, lam, args.test_iters)
    else:
        c = r_b = r_f = flagged = np.empty(0)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "confidence", "background_residual", "full_residual", "flagged"])
        for i in range(X.shape[0]):
            w.writerow([i, repr(float(c[i])), repr(float(r_b[i])), repr(float(r_f[i])),
                        int(flagged[i])])
    print(f"{X.shape[0]} scores written to {out}")
    return EXIT_OK


def cmd_classify(args) -> int:
    if len(args.model) == 1:
        loaded = load_any(args.model[0])
        if isinstance(loaded, MulticlassModel):
            model = loaded
        else:
            model = MulticlassModel([0], [loaded[0]], [loaded[3]])
    else:
        parts = [load_any(p) for p in args.model]
        if any(isinstance(p, MulticlassModel) for p in parts):
            raise UsageError("pass either one multi-class model or several detector models")
        model = MulticlassModel(list(range(len(parts))), [p[0] for p in parts],
                                [p[3] for p in parts])
    X = _load_instances(args.instances, model.n_features)
    out = Path(args.output) if args.output else ensure_dir(args.out or ".") / "predictions.csv"
    if X.shape[0]:
        labels, C = classify_batch(X, model, args.test_iters)
    else:
        labels, C = np.empty(0), np.empty((0, len(model.classes)))
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "predicted"] + [f"confidence_{c}" for c in model.classes])
        for i in range(X.shape[0]):
            w.writerow([i, labels[i]] + [repr(float(v)) for v in C[i]])
    print(f"{X.shape[0]} predictions written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    out = ensure_dir(args.out or ".")
    truth = read_labels(args.labels)
    if args.scores:
        with open(args.scores, newline="") as fh:
            scores = np.array([float(r["confidence"]) for r in csv.DictReader(fh)])
        if scores.size != truth.size:
            raise UsageError(f"{scores.size} scores but {truth.size} labels")
        curve = roc(scores, truth.astype(int))
        with open(out / "roc.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fpr", "tpr"])
            for f, t in zip(curve.fpr, curve.tpr):
                w.writerow([repr(float(f)), repr(float(t))])
        metrics = {"auc": curve.auc}
        for f in args.fpr or [0.01, 0.05, 0.1]:
            metrics[f"tpr@fpr={f:g}"] = tpr_at_fpr(curve, f)
    elif args.predictions:
        with open(args.predictions, newline="") as fh:
            pred = np.array([float(r["predicted"]) for r in csv.DictReader(fh)])
        acc, conf = multiclass_accuracy(pred, truth, np.unique(np.r_[truth, pred]))
        np.savetxt(out / "confusion.csv", conf, fmt="%d", delimiter=",")
        metrics = {"accuracy": acc}
    else:
        raise UsageError("eval needs --scores or --predictions")
    _dump_json(out / "metrics.json", metrics)
    for k, v in metrics.items():
        print(f"{k}\t{v:.6f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = build_config(args)
    if cfg.source != "synth":
        raise UsageError("synth needs a [synth] config section or --synth")
    out = ensure_dir(args.out or cfg.out)
    prob = synth_generate(cfg.data.spec)
    save_csv_bags(prob.dataset, out / "instances.csv", out / "bags.csv")
    save_ground_truth(prob, out / "truth_atoms.npz", out / "truth_z.txt")
    X, z = synth_test_set(prob, cfg.data.test_size, cfg.data.target_fraction)
    np.savetxt(out / "test_instances.csv", X, delimiter=",", fmt="%.17g")
    np.savetxt(out / "test_z.txt", z.astype(int), fmt="%d")
    write_manifest(out, cfg, "synth", cfg.data.spec.seed)
    print(f"synthetic problem written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# experiment


def _detection_metrics(scores, z, fprs):
    curve = roc(scores, z)
    m = {"auc": curve.auc}
    for f in fprs:
        m[f"tpr@fpr={f:g}"] = tpr_at_fpr(curve, f)
    return m


def _usps_run(cfg: RunConfig, X, y, seed):
    d = cfg.data
    Xtr, Xte, ytr, yte = train_test_split(X, y, test_size=d.test_size, random_state=seed,
                                          stratify=y)
    if d.target_class == "all":
        clf = DLFUMIClassifier(detector_for(cfg, seed), d.pos_bags, d.neg_bags, d.bag_size,
                               d.neg_bag_size, d.targets_per_pos_bag, random_state=seed,
                               n_jobs=cfg.workers)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", core.DegenerateAtomWarning)
            clf.fit(Xtr, ytr)
        C = clf.decision_function(Xte)
        pred = clf.classes_[np.argmax(C, axis=1)]
        acc, _ = multiclass_accuracy(pred, yte, clf.classes_)
        m = {"accuracy": acc}
        per_class = [_detection_metrics(C[:, j], (yte == c).astype(int), cfg.fpr_grid)
                     for j, c in enumerate(clf.classes_)]
        for k in per_class[0]:
            m[f"mean_class_{k}"] = float(np.mean([p[k] for p in per_class]))
        return m
    c = int(d.target_class)
    ds = make_bags(Xtr, ytr, c, d.pos_bags, d.neg_bags, d.bag_size, d.targets_per_pos_bag,
                   d.neg_bag_size, seed=seed)
    det = _train_detector(ds, cfg, seed)
    return _detection_metrics(det.decision_function(Xte), (yte == c).astype(int), cfg.fpr_grid)


def _synth_run(cfg: RunConfig, seed, noise):
    import dataclasses
    spec = dataclasses.replace(cfg.data.spec, seed=seed, noise_sigma=noise)
    prob = synth_generate(spec)
    det = _train_detector(prob.dataset, cfg, seed)
    X, z = synth_test_set(prob, cfg.data.test_size, cfg.data.target_fraction)
    m = _detection_metrics(det.decision_function(X), z.astype(int), cfg.fpr_grid)
    m["min_target_cosine"] = float(match_atoms(prob.target_atoms, det.target_atoms_).min())
    return m


def _csv_run(cfg: RunConfig, seed):
    d = cfg.data
    if not (d.test_instances and d.test_labels):
        raise UsageError("csv experiments need test_instances and test_labels")
    ds = load_csv_bags(d.instances, d.bags)
    det = _train_detector(ds, cfg, seed)
    X = _load_instances(d.test_instances, ds.feature_dim)
    return _detection_metrics(det.decision_function(X), read_labels(d.test_labels).astype(int),
                              cfg.fpr_grid)


def _map(cfg, fn, arglists):
    """Run repetitions, in a process pool when ``workers > 1``."""
    if cfg.workers > 1 and len(arglists) > 1:
        return Parallel(n_jobs=cfg.workers)(delayed(fn)(*a) for a in arglists)
    return [fn(*a) for a in arglists]


def format_report(title, table):
    width = max(len(k) for k in table)
    lines = [title]
    for k, (mean, std) in table.items():
        lines.append(f"  {k:<{width}}  {mean:.4f} +/- {std:.4f}")
    return "\n".join(lines)


def cmd_experiment(args) -> int:
    cfg = build_config(args)
    out = ensure_dir(args.out or cfg.out)
    seeds = [cfg.base_seed + r for r in range(cfg.repetitions)]
    results, sections = {}, []
    if cfg.source == "usps":
        X, y = load_usps(cfg.data.path, cfg.data.digits)
        runs = _map(cfg, _usps_run, [(cfg, X, y, s) for s in seeds])
        results["usps"] = {"runs": runs, "summary": average_runs(runs)}
        sections.append(("USPS one-vs-rest", results["usps"]["summary"]))
    elif cfg.source == "synth":
        levels = cfg.data.noise_levels or [cfg.data.spec.noise_sigma]
        for noise in levels:
            runs = _map(cfg, _synth_run, [(cfg, s, noise) for s in seeds])
            key = f"noise_sigma={noise:g}"
            results[key] = {"runs": runs, "summary": average_runs(runs)}
            sections.append((f"synthetic, {key}", results[key]["summary"]))
    else:
        runs = _map(cfg, _csv_run, [(cfg, s) for s in seeds])
        results["csv"] = {"runs": runs, "summary": average_runs(runs)}
        sections.append(("csv detection", results["csv"]["summary"]))

    serializable = {k: {"runs": v["runs"],
                        "summary": {m: {"mean": a, "std": b} for m, (a, b) in v["summary"].items()}}
                    for k, v in results.items()}
    _dump_json(out / "metrics.json", serializable)
    report = "\n\n".join(format_report(f"{t} ({cfg.repetitions} runs, mean +/- std)", s)
                         for t, s in sections) + "\n"
    (out / "report.txt").write_text(report)
    write_manifest(out, cfg, "experiment", cfg.base_seed, {"seeds": seeds})
    print(report, end="")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def _common(p, config_flags=True):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="base random seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    if config_flags:
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override a config entry (repeatable)")
        g = p.add_argument_group("data source")
        g.add_argument("--usps", metavar="PATH")
        g.add_argument("--target-class", dest="target_class")
        g.add_argument("--instances-csv", dest="instances_csv", metavar="PATH")
        g.add_argument("--bags-csv", dest="bags_csv", metavar="PATH")
        g.add_argument("--synth", dest="synth_source", action="store_true",
                       help="use a synthetic problem")
        h = p.add_argument_group("model")
        for flag in ("T", "M", "lam", "Gamma", "beta", "psi", "inner-iters",
                     "max-em-iters", "rel-tol", "test-lam"):
            h.add_argument(f"--{flag}", dest=flag.replace("-", "_"))
        p.add_argument("--repetitions")


def make_parser():
    parser = argparse.ArgumentParser(prog="dlfumi", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="learn a dictionary and write a model file")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="target confidence for every instance of a CSV")
    _common(p, config_flags=False)
    p.add_argument("--model", required=True)
    p.add_argument("--instances", required=True)
    p.add_argument("--output", help="CSV path (default OUT/scores.csv)")
    p.add_argument("--test-lam", dest="test_lam")
    p.add_argument("--test-iters", dest="test_iters", type=int, default=100)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("classify", help="multi-class labels from per-class dictionaries")
    _common(p, config_flags=False)
    p.add_argument("--model", required=True, action="append")
    p.add_argument("--instances", required=True)
    p.add_argument("--output")
    p.add_argument("--test-iters", dest="test_iters", type=int, default=100)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="ROC / TPR-at-FPR or accuracy from written outputs")
    _common(p, config_flags=False)
    p.add_argument("--labels", required=True)
    p.add_argument("--scores")
    p.add_argument("--predictions")
    p.add_argument("--fpr", type=float, action="append")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="write a synthetic MIL problem with ground truth")
    _common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experiment", help="repeated train/test runs with summary metrics")
    _common(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors count as invalid input
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataFormatError, ModelFormatError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc.filename}: no such file", file=sys.stderr)
        return EXIT_INVALID
    except core.NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
