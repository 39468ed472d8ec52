"""Attack metrics, timing, transfer matrices and CSV reporting."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .attacks import AdversarialSet
from .classifier import CnnClassifier, predict
from .detector import DetectorModel, detect, protected_classify

REPORT_COLUMNS = ("attack", "beta", "variant", "adv_acc", "det_auc", "protected_adv_acc",
                  "l2_per_pixel", "seconds_per_100")


def adv_acc(model: CnnClassifier, advset: AdversarialSet) -> float:
    """Accuracy on the adversarial images; lower means a stronger attack."""
    if len(advset) == 0:
        raise ValueError("adv_acc of an empty adversarial set")
    return float(np.mean(predict(model, advset.adversarials) == advset.labels))


def roc_auc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via midranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc needs both positive and negative examples")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def protected_adv_acc(outcomes) -> float:
    """(#A + #B) / N over all submitted images."""
    outcomes = list(outcomes)
    if not outcomes:
        raise ValueError("no outcomes")
    c = Counter(outcomes)
    return (c["A"] + c["B"]) / len(outcomes)


class OutcomeCounter:
    """Streaming tally of protected-classifier outcomes."""

    def __init__(self):
        self.counts = Counter()

    def update(self, outcomes) -> None:
        self.counts.update(outcomes)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def rate(self) -> float:
        return (self.counts["A"] + self.counts["B"]) / self.total


def l2_per_perturbed_pixel(x, x_adv) -> float:
    """Mean over images of ||x_adv - x||_2 / #perturbed coordinates.

    A coordinate (i, j) counts once if any channel differs; images with no
    perturbed coordinate contribute 0.
    """
    d = np.asarray(x_adv, dtype=np.float64) - np.asarray(x, dtype=np.float64)
    n = d.shape[0]
    if n == 0:
        return 0.0
    norms = np.sqrt((d.reshape(n, -1) ** 2).sum(axis=1))
    counts = (d != 0).any(axis=1).reshape(n, -1).sum(axis=1)
    per = np.where(counts > 0, norms / np.maximum(counts, 1), 0.0)
    return float(per.mean())


def timing_harness(attack_fn, images, repeats: int = 1) -> float:
    """Wall-clock seconds for ``attack_fn(images)``; the median of ``repeats`` runs."""
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        attack_fn(images)
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@dataclass
class DetectionResult:
    det_auc: float
    protected_adv_acc: float
    outcomes: np.ndarray = field(repr=False)


def evaluate_detection(detector: DetectorModel, model: CnnClassifier, naturals, adversarials,
                       labels) -> DetectionResult:
    """DetAUC and Protected-AdvAcc on naturals mixed with their adversarials."""
    s_nat = detect(detector, model, naturals)
    s_adv = detect(detector, model, adversarials)
    auc = roc_auc(np.concatenate([s_nat, s_adv]),
                  np.concatenate([np.zeros(len(s_nat)), np.ones(len(s_adv))]))
    out = np.concatenate([protected_classify(detector, model, naturals, labels, False),
                          protected_classify(detector, model, adversarials, labels, True)])
    return DetectionResult(auc, protected_adv_acc(out), out)


def transfer_matrix(detectors: dict, attacks: dict, model: CnnClassifier) -> dict:
    """Cross evaluation of every detector on every attack.

    ``attacks`` maps a name to ``(naturals, adversarials, labels)`` from the
    evaluation half. Returns ``{(detector, attack): DetectionResult}``.
    """
    out = {}
    for dname, det in detectors.items():
        for aname, (nat, adv, lab) in attacks.items():
            out[(dname, aname)] = evaluate_detection(det, model, nat, adv, lab)
    return out


def write_transfer_csv(matrix: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector", "attack", "det_auc", "protected_adv_acc"])
        for (d, a), r in sorted(matrix.items()):
            w.writerow([d, a, _fmt(r.det_auc), _fmt(r.protected_adv_acc)])


@dataclass
class MetricsReport:
    attack: str
    beta: float | None = None
    variant: str = ""
    adv_acc: float | None = None
    det_auc: float | None = None
    protected_adv_acc: float | None = None
    l2_per_pixel: float | None = None
    seconds_per_100: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("adv_acc", "det_auc", "protected_adv_acc"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.l2_per_pixel is not None and self.l2_per_pixel < 0:
            raise ValueError("l2_per_pixel must be >= 0")

    def row(self) -> list:
        return [self.attack, _fmt(self.beta), self.variant, _fmt(self.adv_acc),
                _fmt(self.det_auc), _fmt(self.protected_adv_acc), _fmt(self.l2_per_pixel),
                _fmt(self.seconds_per_100)]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(round(v, 10))
    return str(v)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_provenance(artifact, inputs: dict | None = None, config: dict | None = None) -> Path:
    """JSON sidecar ``<artifact>.provenance.json`` naming input hashes and config."""
    artifact = Path(artifact)
    doc = {"artifact": artifact.name,
           "inputs": {k: {"path": Path(v).name, "sha256": file_sha256(v)}
                      for k, v in sorted((inputs or {}).items())},
           "config": config or {}}
    side = artifact.with_name(artifact.name + ".provenance.json")
    side.write_text(json.dumps(doc, sort_keys=True, indent=2, default=_json_default) + "\n")
    return side


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_report(reports, path, inputs: dict | None = None, config: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow(r.row())
    prov = dict(config or {})
    prov["rows"] = [{k: v for k, v in asdict(r).items() if k == "provenance" or k == "attack"}
                    for r in reports]
    write_provenance(path, inputs, prov)
