"""Leave-one-subject-out experiment pipeline.

Every fold trains a target model, crafts white-box and black-box adversarial
examples, fits one detector per (statistic, training attack) pair on
target-training data only, and scores the held-out subject. Each fold draws
its random streams from ``(seed, fold, stream)``, so a fold's output does not
depend on which other folds or experiment parts run.
"""

import logging
import time
from dataclasses import dataclass

import numpy as np

from .. import attacks as A
from .. import detectors as D
from .. import model as M
from ..data import load_dataset, loso_split, standardize, synth_generate
from ..errors import DataError
from ..metrics import bca, rca
from .config import build_layers
from .report import ExperimentReport, FoldReport
from .tuning import tune_hyperparams

logger = logging.getLogger(__name__)

WHITEBOX_ATTACKS = ("fgsm", "pgd", "cw")
DETECTORS = ("BU", "LID", "MD_max")
GENERALIZATION_TARGETS = ("fgsm", "pgd", "cw", "blackbox")
PARTS = ("whitebox", "blackbox", "generalization")

_STREAMS = {
    "target": 0, "pool": 1, "pgd": 2, "sub_adversary": 3, "sub_defender": 4,
    "lid": 5, "bu": 6, "tune": 7, "detector": 8, "cw": 9,
}

# stages in which no test-subject epoch may appear
TRAINING_STAGES = (
    "target_train", "substitute_adversary", "substitute_defender",
    "md_fit", "lid_reference", "tuning", "detector_fit",
)


def stream_seed(seed, fold, stream):
    return int(np.random.SeedSequence([seed, fold, _STREAMS[stream]]).generate_state(1)[0])


class ProvenanceTracer:
    """Records which epoch ids reach each pipeline stage."""

    def __init__(self, subject_of):
        self.subject_of = subject_of
        self.stages = {}

    def add(self, stage, ids):
        self.stages.setdefault(stage, set()).update(int(i) for i in np.asarray(ids).ravel())

    def subjects(self):
        return {
            stage: sorted({int(self.subject_of[i]) for i in ids})
            for stage, ids in sorted(self.stages.items())
        }


def load_experiment_data(config):
    if config.dataset_path is not None:
        data = load_dataset(config.dataset_path)
    else:
        data = synth_generate(config.synth)
    return standardize(data, config.standardize)


def fold_subjects(config, dataset):
    subjects = [int(s) for s in dataset.subject_ids]
    folds = range(len(subjects)) if config.folds is None else config.folds
    out = []
    for f in folds:
        if not 0 <= f < len(subjects):
            raise DataError(f"fold {f} out of range for {len(subjects)} subjects")
        out.append((f, subjects[f]))
    return out


@dataclass
class FittedDetector:
    kind: str
    score: object
    model: D.DetectorModel
    param: object = None

    def auc(self, adv):
        benign = self.score(adv.x, adv.ids)
        hostile = self.score(adv.x_adv, adv.ids)
        return D.detector_auc(self.model, benign, hostile)


def attack_stats(adv):
    ok = adv.success
    stats = {
        "n": len(adv),
        "rca": rca(adv.y_adv, adv.y),
        "bca": bca(adv.y_adv, adv.y),
        "success_rate": float(ok.mean()),
        "l2_mean": float(adv.l2_norm[ok].mean()) if ok.any() else None,
        "linf_mean": float(adv.linf_norm[ok].mean()) if ok.any() else None,
        "linf_max": float(adv.linf_norm.max()),
    }
    return stats


class FoldRunner:
    """Lazily computes and caches everything one fold needs."""

    def __init__(self, config, dataset, fold, subject):
        self.config = config
        self.dataset = dataset
        self.fold = fold
        self.subject = subject
        self.split = loso_split(dataset, subject)
        self.trace = ProvenanceTracer(dict(zip(dataset.ids.tolist(), dataset.subjects.tolist())))
        self.num_classes = dataset.num_classes
        self.input_shape = (dataset.channels, dataset.samples)
        self._adv = {}
        self._fitted = {}
        self._train_features = None
        self._target = None
        self._pool = None
        self._target_set = None
        self.notes = {}

    def seed(self, stream):
        return stream_seed(self.config.seed, self.fold, stream)

    def train_config(self, stream):
        c = self.config.train
        return M.TrainConfig(c.epochs, c.batch_size, c.learning_rate, self.seed(stream),
                             c.weight_decay, c.momentum)

    # -- models --------------------------------------------------------

    @property
    def target(self):
        if self._target is None:
            train = self.target_set
            layers = build_layers(self.config.target, self.input_shape, self.num_classes)
            if self.config.untrained_target:
                self._target = M.init_classifier(layers, self.input_shape, seed=self.seed("target"))
            else:
                self._target = M.train(layers, train.x, train.labels, self.train_config("target"))
            self.trace.add("target_train", train.ids)
        return self._target

    def substitute(self, role, arch):
        key = ("substitute", role, arch)
        if key not in self._adv:
            probe = self.split.probes[0 if role == "adversary" else 1]
            stream = "sub_adversary" if role == "adversary" else "sub_defender"
            layers = build_layers(arch, self.input_shape, self.num_classes)
            sub, agreement = A.train_substitute(
                self.target, layers, probe.x, self.train_config(stream), seed=self.seed(stream))
            self.trace.add(f"substitute_{role}", probe.ids)
            self.notes[f"substitute_{role}_{arch}_agreement"] = agreement
            self._adv[key] = sub
        return self._adv[key]

    # -- data ----------------------------------------------------------

    def _holdout(self):
        """Split the training subjects' epochs into the target's training set
        and a held-out pool the defender attacks to fit detectors."""
        train = self.split.train
        n = min(self.config.max_train_attack, int(round(self.config.detector_holdout * len(train))))
        if n < 1 or n >= len(train):
            raise DataError(f"detector holdout of {n} epochs leaves no usable split of {len(train)}")
        pick = np.random.default_rng(self.seed("pool")).permutation(len(train))
        self._pool = train.subset(np.sort(pick[:n]))
        self._target_set = train.subset(np.sort(pick[n:]))

    @property
    def pool(self):
        if self._pool is None:
            self._holdout()
        return self._pool

    @property
    def target_set(self):
        if self._pool is None:
            self._holdout()
        return self._target_set

    @property
    def train_features(self):
        if self._train_features is None:
            self._train_features = D.extract_features(
                self.target, self.target_set.x, self.config.detectors.feature_layer)
        return self._train_features

    # -- attacks -------------------------------------------------------

    def craft(self, attack, where):
        """Raw adversarial set for ``attack`` on the test subject or the training pool."""
        key = (attack, where)
        if key in self._adv:
            return self._adv[key]
        data = self.split.test if where == "test" else self.pool
        cfg = self.config.attack
        x, y, ids = data.x, data.labels, data.ids
        if attack == "fgsm":
            adv = A.fgsm(self.target, x, y, cfg, ids)
        elif attack == "pgd":
            rng = np.random.default_rng([self.seed("pgd"), 0 if where == "test" else 1])
            adv = A.pgd(self.target, x, y, cfg, ids, rng)
        elif attack == "cw":
            adv = A.cw(self.target, x, y, cfg, ids)
        elif attack == "blackbox":
            role = "adversary" if where == "test" else "defender"
            sub = self.substitute(role, self.config.substitutes[0])
            adv = A.blackbox_fgsm(self.target, sub, x, y, cfg, ids)
        elif attack.startswith("blackbox-"):
            sub = self.substitute("adversary", attack.split("-", 1)[1])
            adv = A.blackbox_fgsm(self.target, sub, x, y, cfg, ids)
        else:
            raise DataError(f"unknown attack {attack!r}")
        self._adv[key] = adv
        return adv

    def effective(self, attack, where):
        adv = self.craft(attack, where)
        if where == "pool":
            return A.filter_effective(adv, "train")
        phase = "test-blackbox" if attack.startswith("blackbox") else "test-whitebox"
        return A.filter_effective(adv, phase)

    # -- detectors -----------------------------------------------------

    def fitted(self, attack):
        """Detectors fitted on the effective training-pool examples of ``attack``."""
        if attack in self._fitted:
            return self._fitted[attack]
        train_adv = self.effective(attack, "pool")
        if len(train_adv) < self.config.min_effective:
            self._fitted[attack] = None
            return None
        self._fitted[attack] = {kind: self._fit_one(kind, train_adv) for kind in DETECTORS}
        return self._fitted[attack]

    def _fit_one(self, kind, train_adv):
        cfg = self.config.detectors
        target = self.target
        layer = cfg.feature_layer
        labels = np.r_[np.zeros(len(train_adv)), np.ones(len(train_adv))]
        groups = np.r_[train_adv.ids, train_adv.ids]
        x_all = np.concatenate([train_adv.x, train_adv.x_adv])
        ids_all = groups
        self.trace.add("detector_fit", train_adv.ids)
        param = None

        if kind == "BU":
            bu_seed = self.seed("bu")

            def score(x, ids):
                return D.bu_score(target, x, cfg.n_passes, bu_seed)

        elif kind == "LID":
            lid_ids = self.target_set.ids
            base = D.lid_fit(self.train_features, cfg.lid_k_grid[0], cfg.lid_batch_size,
                             seed=self.seed("lid"), ids=lid_ids)
            self.trace.add("lid_reference", base.reference_ids)
            feats = D.extract_features(target, x_all, layer)
            self.trace.add("tuning", train_adv.ids)
            param, _ = tune_hyperparams(
                lambda k: D.lid_score(feats, base.with_k(k), ids_all),
                cfg.lid_k_grid, labels, groups, cfg.inner_folds, self.seed("tune"))
            state = base.with_k(param)

            def score(x, ids):
                return D.lid_score(D.extract_features(target, x, layer), state, ids)

        else:
            state0 = D.mahalanobis_fit(self.train_features, self.target_set.labels,
                                       self.num_classes, ridge=cfg.ridge)
            self.trace.add("md_fit", self.target_set.ids)
            if cfg.md_calibrate:
                self.trace.add("tuning", train_adv.ids)
                param, _ = tune_hyperparams(
                    lambda e: D.md_scores(target, x_all, state0, e, layer),
                    cfg.md_eps_grid, labels, groups, cfg.inner_folds, self.seed("tune"))
            else:
                param = 0.0
            eps = param

            def score(x, ids):
                return D.md_scores(target, x, state0, eps, layer)

        s = score(x_all, ids_all)
        det = D.fit_detector(s[labels == 0], s[labels == 1], kind, seed=self.seed("detector"))
        return FittedDetector(kind, score, det, param)

    def evaluate(self, train_attack, test_attack):
        """AUC per detector, or a skip reason."""
        fitted = self.fitted(train_attack)
        if fitted is None:
            n = len(self.effective(train_attack, "pool"))
            return None, f"{n} effective training examples < {self.config.min_effective}"
        test_adv = self.effective(test_attack, "test")
        if len(test_adv) < self.config.min_effective:
            return None, f"{len(test_adv)} effective test examples < {self.config.min_effective}"
        self.trace.add("test", test_adv.ids)
        aucs = {kind: fitted[kind].auc(test_adv) for kind in DETECTORS}
        return aucs, None


def _scenarios(config, parts):
    out = []
    if "whitebox" in parts:
        out += [(a, a, a) for a in WHITEBOX_ATTACKS]
    if "blackbox" in parts:
        out.append(("blackbox", "blackbox", "blackbox"))
    if "generalization" in parts:
        out += [(f"fgsm->{t}", "fgsm", t) for t in GENERALIZATION_TARGETS]
    return out


def run_fold(config, dataset, fold, subject, parts=PARTS):
    start = time.perf_counter()
    runner = FoldRunner(config, dataset, fold, subject)
    test = runner.split.test
    target = runner.target
    pred = target.predict(test.x)
    clean = {"rca": rca(pred, test.labels), "bca": bca(pred, test.labels)}

    attacks = set()
    if "whitebox" in parts or "generalization" in parts:
        attacks.update(WHITEBOX_ATTACKS)
    if "blackbox" in parts or "generalization" in parts:
        attacks.add("blackbox")
    if "blackbox" in parts:
        attacks.update(f"blackbox-{arch}" for arch in config.substitutes)
    attack_report = {}
    for name in sorted(attacks):
        adv = runner.craft(name, "test")
        stats = attack_stats(adv)
        stats["n_effective_test"] = len(runner.effective(name, "test"))
        if not name.startswith("blackbox-"):
            stats["n_effective_train"] = len(runner.effective(name, "pool"))
        attack_report[name] = stats

    auc_report, tuned, skipped = {}, {}, {}
    for scenario, train_attack, test_attack in _scenarios(config, parts):
        aucs, reason = runner.evaluate(train_attack, test_attack)
        if aucs is None:
            logger.info("fold %d scenario %s skipped: %s", fold, scenario, reason)
            skipped[scenario] = reason
            continue
        auc_report[scenario] = aucs
        fitted = runner.fitted(train_attack)
        tuned[scenario] = {"LID_k": int(fitted["LID"].param), "MD_eps": float(fitted["MD_max"].param)}

    return FoldReport(
        fold=fold,
        test_subject=subject,
        probe_subjects=list(runner.split.probe_subjects),
        train_subjects=list(runner.split.train_subjects),
        clean=clean,
        attacks=attack_report,
        auc=auc_report,
        tuned=tuned,
        skipped=skipped,
        notes=dict(sorted(runner.notes.items())),
        provenance=runner.trace.subjects(),
        runtime=time.perf_counter() - start,
    )


def run_experiment(config, parts=PARTS, dataset=None):
    dataset = load_experiment_data(config) if dataset is None else dataset
    folds = []
    for fold, subject in fold_subjects(config, dataset):
        logger.info("fold %d (test subject %d)", fold, subject)
        folds.append(run_fold(config, dataset, fold, subject, parts))
    return ExperimentReport.from_folds(config.to_dict(), list(parts), folds)


def run_whitebox(config, dataset=None):
    return run_experiment(config, ("whitebox",), dataset)


def run_blackbox(config, dataset=None):
    return run_experiment(config, ("blackbox",), dataset)


def run_generalization(config, dataset=None):
    return run_experiment(config, ("generalization",), dataset)
