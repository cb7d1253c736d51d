"""Command-line entry point: ``eegadv <subcommand> [options]``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import attacks as A
from . import detectors as D
from . import model as M
from .data import Dataset, load_dataset, save_dataset, standardize, synth_generate
from .errors import ConfigError, EegAdvError
from .harness.config import ARCHITECTURES, ExperimentConfig, build_layers, load_config
from .harness.experiment import FoldRunner, fold_subjects, load_experiment_data, run_experiment
from .harness.report import FORMATS, emit_report, load_report, write_timing
from .metrics import auc

logger = logging.getLogger("eegadv")

ATTACKS = ("fgsm", "pgd", "cw", "blackbox")
DETECTOR_FLAGS = {"bu": "BU", "lid": "LID", "md": "MD_max"}
RUN_PARTS = {"run-whitebox": "whitebox", "run-blackbox": "blackbox", "run-generalization": "generalization"}


def resolve_config(args):
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "out", None) is not None and not args.command.startswith(("gen", "train", "attack")):
        changes["out_dir"] = args.out
    attack = {}
    for flag, name in (("epsilon", "epsilon"), ("alpha", "alpha"), ("iters", "n_iter")):
        value = getattr(args, flag, None)
        if value is not None:
            attack[name] = value
    if attack:
        changes["attack"] = dataclasses.replace(cfg.attack, **attack)
    if getattr(args, "folds", None):
        changes["folds"] = tuple(args.folds)
    return cfg.replace(**changes) if changes else cfg


# -- subcommands -----------------------------------------------------------


def cmd_gen_data(args):
    cfg = resolve_config(args)
    synth = cfg.synth if args.seed is None else dataclasses.replace(cfg.synth, seed=args.seed)
    data = synth_generate(synth)
    save_dataset(data, args.out)
    print(f"wrote {len(data)} epochs from {len(data.subject_ids)} subjects to {args.out}")


def cmd_train(args):
    cfg = resolve_config(args)
    data = standardize(load_dataset(args.data), args.standardize)
    if args.exclude_subject is not None:
        data = data.for_subjects([s for s in data.subject_ids if s != args.exclude_subject])
    layers = build_layers(args.arch, (data.channels, data.samples), data.num_classes)
    train_cfg = cfg.train if args.seed is None else dataclasses.replace(cfg.train, seed=args.seed)
    model = M.train(layers, data.x, data.labels, train_cfg)
    M.save_model(model, args.out)
    acc = float(np.mean(model.predict(data.x) == data.labels))
    print(f"trained {args.arch} on {len(data)} epochs, training accuracy {acc:.4f}; wrote {args.out}")


def cmd_attack(args):
    cfg = resolve_config(args)
    target = M.load_model(args.model)
    data = standardize(load_dataset(args.data), args.standardize)
    attack = cfg.attack
    if args.attack == "fgsm":
        adv = A.fgsm(target, data.x, data.labels, attack, data.ids)
    elif args.attack == "pgd":
        adv = A.pgd(target, data.x, data.labels, attack, data.ids, np.random.default_rng(attack.seed))
    elif args.attack == "cw":
        adv = A.cw(target, data.x, data.labels, attack, data.ids)
    else:
        if not args.substitute:
            raise ConfigError("--attack blackbox needs --substitute")
        adv = A.blackbox_fgsm(target, M.load_model(args.substitute), data.x, data.labels, attack, data.ids)
    os.makedirs(args.out, exist_ok=True)
    stem = os.path.join(args.out, args.attack)
    save_dataset(Dataset(adv.x_adv, data.labels, data.subjects, data.num_classes, data.ids), stem + ".epochs")
    adv.save_sidecar(stem + ".json")
    ok = adv.success
    print(f"{args.attack}: RCA {np.mean(adv.y_adv == adv.y):.4f}, success {ok.mean():.4f}, "
          f"mean l2 {adv.l2_norm[ok].mean() if ok.any() else float('nan'):.4f}")


def cmd_detect(args):
    """Raw detection statistic for every epoch of --data, plus an AUC when
    --adversarial is given (higher statistic = more adversarial)."""
    cfg = resolve_config(args).detectors
    target = M.load_model(args.model)
    ref = standardize(load_dataset(args.reference), args.standardize)
    kind = DETECTOR_FLAGS[args.detector]

    def statistic(d):
        if kind == "BU":
            return D.bu_score(target, d.x, cfg.n_passes, args.seed or 0)
        feats = D.extract_features(target, d.x, cfg.feature_layer)
        ref_feats = D.extract_features(target, ref.x, cfg.feature_layer)
        if kind == "LID":
            state = D.lid_fit(ref_feats, args.k, min(cfg.lid_batch_size, len(ref)), args.seed or 0, ref.ids)
            return D.lid_score(feats, state)
        state = D.mahalanobis_fit(ref_feats, ref.labels, ref.num_classes, ridge=cfg.ridge)
        return -D.md_scores(target, d.x, state, args.eps_cal, cfg.feature_layer)

    benign = load_dataset(args.data)
    scores = statistic(standardize(benign, args.standardize))
    ids, flags = benign.ids, np.zeros(len(benign), dtype=bool)
    if args.adversarial:
        adv = load_dataset(args.adversarial)
        adv_scores = statistic(adv)
        print(f"{kind} AUC {auc(adv_scores, scores):.4f}")
        scores = np.concatenate([scores, adv_scores])
        ids = np.concatenate([ids, adv.ids])
        flags = np.r_[flags, np.ones(len(adv), dtype=bool)]
    if args.out:
        D.export_scores_csv(args.out, ids, kind, scores, flags, args.attack_name)
        print(f"wrote {len(scores)} scores to {args.out}")
    else:
        print(f"{kind}: median {np.median(scores):.6g} over {len(scores)} epochs")


def cmd_tune(args):
    cfg = resolve_config(args)
    data = load_experiment_data(cfg)
    kind = DETECTOR_FLAGS[args.detector]
    if kind == "BU":
        raise ConfigError("BU has no tuned hyperparameter")
    attack = args.attack or "fgsm"
    out = {}
    for fold, subject in fold_subjects(cfg, data):
        runner = FoldRunner(cfg, data, fold, subject)
        fitted = runner.fitted(attack)
        if fitted is None:
            out[fold] = None
            continue
        out[fold] = fitted[kind].param
    print(json.dumps({"detector": kind, "attack": attack, "chosen": out}, indent=2))


def cmd_run(args):
    cfg = resolve_config(args)
    report = run_experiment(cfg, (RUN_PARTS[args.command],))
    write_outputs(report, args.format or ["json", "md"], cfg.out_dir, args.command.replace("run-", ""))


def write_outputs(report, formats, out_dir, stem):
    for fmt in formats:
        print(emit_report(report, fmt, out_dir, stem))
    if report.folds and report.folds[0].runtime is not None:
        write_timing(report, out_dir, stem)


def cmd_report(args):
    report = load_report(args.input)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    for fmt in args.format or ["md"]:
        print(emit_report(report, fmt, args.out or os.path.dirname(args.input) or ".", stem))


# -- parser ----------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="eegadv", description="Adversarial attacks and detectors for EEG classifiers.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help="output path"):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=out_help)

    def attack_flags(sp):
        sp.add_argument("--epsilon", type=float)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--iters", type=int)

    sp = sub.add_parser("gen-data", help="write a synthetic dataset")
    common(sp, "dataset file")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a classifier")
    common(sp, "model file")
    sp.add_argument("--data", required=True)
    sp.add_argument("--arch", choices=sorted(ARCHITECTURES), default="conv")
    sp.add_argument("--exclude-subject", type=int)
    sp.add_argument("--standardize", choices=("zscore", "ema", "none"), default="zscore")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("attack", help="craft adversarial epochs")
    common(sp, "output directory")
    attack_flags(sp)
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--attack", choices=ATTACKS, default="fgsm")
    sp.add_argument("--substitute", help="substitute model for --attack blackbox")
    sp.add_argument("--standardize", choices=("zscore", "ema", "none"), default="zscore")
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("detect", help="score epochs with one detection statistic")
    common(sp, "scores CSV")
    sp.add_argument("--model", required=True)
    sp.add_argument("--reference", required=True, help="benign training epochs")
    sp.add_argument("--data", required=True, help="epochs to score")
    sp.add_argument("--adversarial", help="adversarial epochs (already standardized)")
    sp.add_argument("--detector", choices=sorted(DETECTOR_FLAGS), default="lid")
    sp.add_argument("--k", type=int, default=20)
    sp.add_argument("--eps-cal", type=float, default=0.0)
    sp.add_argument("--attack-name", default="", help="attack label written to the scores CSV")
    sp.add_argument("--standardize", choices=("zscore", "ema", "none"), default="zscore")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("tune", help="nested-CV choice of LID k or MD eps_cal per fold")
    common(sp, "unused")
    attack_flags(sp)
    sp.add_argument("--detector", choices=("lid", "md"), default="lid")
    sp.add_argument("--attack", choices=ATTACKS)
    sp.add_argument("--folds", type=int, nargs="+")
    sp.set_defaults(func=cmd_tune)

    for name in RUN_PARTS:
        sp = sub.add_parser(name, help=f"{RUN_PARTS[name]} experiment over LOSO folds")
        common(sp, "output directory")
        attack_flags(sp)
        sp.add_argument("--folds", type=int, nargs="+")
        sp.add_argument("--format", choices=FORMATS, action="append")
        sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("report", help="re-render a saved JSON report")
    sp.add_argument("--input", required=True)
    sp.add_argument("--out", help="output directory")
    sp.add_argument("--format", choices=FORMATS, action="append")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except EegAdvError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
