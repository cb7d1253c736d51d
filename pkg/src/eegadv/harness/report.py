"""Experiment reports and their JSON, CSV and markdown serializations.

Fold runtimes are kept in memory and written to a separate timing file so
that report bytes depend only on the configuration.
"""

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import EegAdvError

FORMATS = ("json", "csv", "md")
DETECTOR_ORDER = ("BU", "LID", "MD_max")


class ReportIOError(EegAdvError):
    exit_code = 3


@dataclass
class FoldReport:
    fold: int
    test_subject: int
    probe_subjects: list
    train_subjects: list
    clean: dict
    attacks: dict
    auc: dict
    tuned: dict
    skipped: dict
    notes: dict
    provenance: dict
    runtime: float | None = field(default=None, compare=False)

    def to_dict(self):
        d = asdict(self)
        d.pop("runtime")
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _mean_std(values):
    v = [x for x in values if x is not None]
    if not v:
        return {"mean": None, "std": None, "n": 0}
    return {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}


def aggregate(folds):
    """Mean and population std over folds; skipped scenarios are left out."""
    out = {
        "clean": {m: _mean_std([f.clean[m] for f in folds]) for m in ("rca", "bca")},
        "attacks": {},
        "auc": {},
    }
    for name in sorted({a for f in folds for a in f.attacks}):
        metrics = sorted({m for f in folds if name in f.attacks for m in f.attacks[name]})
        out["attacks"][name] = {
            m: _mean_std([f.attacks[name].get(m) for f in folds if name in f.attacks]) for m in metrics
        }
    scenarios = sorted({s for f in folds for s in (*f.auc, *f.skipped)})
    for s in scenarios:
        out["auc"][s] = {
            d: _mean_std([f.auc[s][d] for f in folds if s in f.auc]) for d in DETECTOR_ORDER
        }
        out["auc"][s]["skipped_folds"] = sorted(f.fold for f in folds if s in f.skipped)
    return out


@dataclass
class ExperimentReport:
    config: dict
    parts: list
    folds: list
    aggregate: dict

    @classmethod
    def from_folds(cls, config, parts, folds):
        folds = sorted(folds, key=lambda f: f.fold)
        return cls(config, list(parts), folds, aggregate(folds))

    def to_dict(self):
        return {
            "config": self.config,
            "parts": self.parts,
            "folds": [f.to_dict() for f in self.folds],
            "aggregate": self.aggregate,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["config"], d["parts"], [FoldReport.from_dict(f) for f in d["folds"]], d["aggregate"])

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @property
    def scenarios(self):
        return sorted({s for f in self.folds for s in (*f.auc, *f.skipped)})

    def auc_mean(self, scenario, detector):
        entry = self.aggregate["auc"].get(scenario, {}).get(detector)
        return None if entry is None else entry["mean"]

    def runtimes(self):
        return {f.fold: f.runtime for f in self.folds}


def load_report(path):
    try:
        with open(path) as fh:
            return ExperimentReport.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ReportIOError(f"cannot read report {path}: {exc}") from None


# -- csv -------------------------------------------------------------------

CSV_FIELDS = ("row", "fold", "test_subject", "scenario", "detector", "auc", "auc_std", "n_folds")


def report_csv(report):
    """One row per fold x scenario x detector, then one aggregate row per scenario x detector."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    scenarios = report.scenarios
    for f in report.folds:
        for s in scenarios:
            for d in DETECTOR_ORDER:
                value = f.auc[s][d] if s in f.auc else ""
                w.writerow(("fold", f.fold, f.test_subject, s, d, _num(value), "", ""))
    for s in scenarios:
        for d in DETECTOR_ORDER:
            agg = report.aggregate["auc"][s][d]
            w.writerow(("aggregate", "", "", s, d, _num(agg["mean"]), _num(agg["std"]), agg["n"]))
    return buf.getvalue()


def _num(v):
    return "" if v is None or v == "" else repr(float(v))


# -- markdown --------------------------------------------------------------


def _pct(entry):
    if entry is None or entry.get("mean") is None:
        return "n/a"
    return f"{100 * entry['mean']:.2f} ± {100 * entry['std']:.2f}"


def _acc(v):
    return "n/a" if v is None else f"{v:.4f}"


def _accuracy_table(report, attacks, title):
    lines = [f"### {title}", ""]
    head = ["Test subject", "Clean RCA", "Clean BCA"]
    for a in attacks:
        head += [f"{a} RCA", f"{a} BCA"]
    lines.append("| " + " | ".join(head) + " |")
    lines.append("|" + "---|" * len(head))
    for f in report.folds:
        row = [str(f.test_subject), _acc(f.clean["rca"]), _acc(f.clean["bca"])]
        for a in attacks:
            stats = f.attacks.get(a)
            row += [_acc(stats and stats["rca"]), _acc(stats and stats["bca"])]
        lines.append("| " + " | ".join(row) + " |")
    agg = report.aggregate
    row = ["Mean", _acc(agg["clean"]["rca"]["mean"]), _acc(agg["clean"]["bca"]["mean"])]
    for a in attacks:
        stats = agg["attacks"].get(a)
        row += [_acc(stats and stats["rca"]["mean"]), _acc(stats and stats["bca"]["mean"])]
    lines.append("| " + " | ".join(row) + " |")
    return lines


def _auc_table(report, scenarios, title):
    lines = [f"### {title}", ""]
    head = ["Detector"] + list(scenarios)
    lines.append("| " + " | ".join(head) + " |")
    lines.append("|" + "---|" * len(head))
    for d in DETECTOR_ORDER:
        row = [d] + [_pct(report.aggregate["auc"].get(s, {}).get(d)) for s in scenarios]
        lines.append("| " + " | ".join(row) + " |")
    return lines


def report_markdown(report):
    """Four tables: white-box and black-box accuracies, white-box AUC, and
    black-box plus FGSM-generalization AUC (percent, mean ± std over folds)."""
    blackbox = sorted(a for a in report.aggregate["attacks"] if a.startswith("blackbox-"))
    if not blackbox:
        blackbox = ["blackbox"]
    parts = [
        ["## Adversarial detection report", ""],
        _accuracy_table(report, ["fgsm", "pgd", "cw"], "Table 1. RCA/BCA under white-box attacks"),
        _accuracy_table(report, blackbox, "Table 2. RCA/BCA under black-box attacks"),
        _auc_table(report, ["fgsm", "pgd", "cw"], "Table 3. Detection AUC (%) under white-box attacks"),
        _auc_table(report, ["blackbox", "fgsm->pgd", "fgsm->cw", "fgsm->blackbox"],
                   "Table 4. Detection AUC (%) under black-box attacks and for FGSM-trained detectors"),
    ]
    return "\n\n".join("\n".join(p) for p in parts) + "\n"


def render(report, fmt):
    if fmt == "json":
        return report.to_json()
    if fmt == "csv":
        return report_csv(report)
    if fmt == "md":
        return report_markdown(report)
    raise ValueError(f"format must be one of {FORMATS}")


def emit_report(report, fmt, out_dir, stem="report"):
    """Write ``<out_dir>/<stem>.<fmt>`` and return its path."""
    text = render(report, fmt)
    path = os.path.join(out_dir, f"{stem}.{fmt}")
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from None
    return path


def write_timing(report, out_dir, stem="report"):
    path = os.path.join(out_dir, f"{stem}.timing.json")
    try:
        with open(path, "w") as fh:
            json.dump({str(k): v for k, v in report.runtimes().items()}, fh, indent=2)
    except OSError as exc:
        raise ReportIOError(f"cannot write {path}: {exc}") from None
    return path
