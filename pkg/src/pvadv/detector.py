"""Logistic-regression adversarial detector on three logit-derived features.

Features per image:

* confidence - the largest softmax probability;
* K-density - mean Gaussian kernel between the image's logits and the clean
  training logits of its predicted class;
* non-ME - entropy of the softmax with its maximum removed and the rest
  renormalized.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from . import checkpoint
from .classifier import CnnClassifier, predict_logits, softmax_np

PROB_FLOOR = 1e-12
THRESHOLD = 0.5
OUTCOMES = ("A", "B", "FAIL")


@dataclass
class ReferenceBank:
    logits: dict  # class -> (n_c, K) clean training logits
    sigma: dict  # class -> kernel bandwidth

    def arrays(self) -> dict[str, np.ndarray]:
        classes = sorted(self.logits)
        return {
            "bank.logits": np.concatenate([self.logits[c] for c in classes]),
            "bank.labels": np.concatenate([np.full(len(self.logits[c]), c, np.int64)
                                           for c in classes]),
            "bank.sigma": np.array([self.sigma[c] for c in classes], np.float64),
            "bank.classes": np.array(classes, np.int64),
        }

    @classmethod
    def from_arrays(cls, t: dict) -> "ReferenceBank":
        logits = {int(c): t["bank.logits"][t["bank.labels"] == c] for c in t["bank.classes"]}
        sigma = {int(c): float(s) for c, s in zip(t["bank.classes"], t["bank.sigma"])}
        return cls(logits, sigma)


def median_bandwidth(z: np.ndarray) -> float:
    if len(z) < 2:
        return 1.0
    d = float(np.median(pdist(z)))
    return d if d > 0 else 1.0


def build_bank(model: CnnClassifier, images, labels, max_per_class: int = 1000,
               seed: int = 0) -> ReferenceBank:
    """Per-class clean logits (by true label), subsampled to ``max_per_class``."""
    z = predict_logits(model, images).astype(np.float64)
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 23])
    logits, sigma = {}, {}
    for c in range(model.num_classes):
        zc = z[labels == c]
        if len(zc) > max_per_class:
            zc = zc[np.sort(rng.choice(len(zc), max_per_class, replace=False))]
        if len(zc):
            logits[c] = zc
            sigma[c] = median_bandwidth(zc)
    return ReferenceBank(logits, sigma)


def non_max_entropy(probs: np.ndarray) -> np.ndarray:
    p = np.maximum(np.asarray(probs, dtype=np.float64), PROB_FLOOR)
    top = p.argmax(axis=1)
    rest = p.copy()
    rest[np.arange(len(p)), top] = 0.0
    rest /= rest.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(rest > 0, rest * np.log(rest), 0.0).sum(axis=1)
    return ent


def k_density(logits: np.ndarray, pred: np.ndarray, bank: ReferenceBank) -> np.ndarray:
    out = np.zeros(len(logits))
    for c in np.unique(pred):
        if int(c) not in bank.logits or len(bank.logits[int(c)]) == 0:
            raise ValueError(f"reference bank has no entries for class {int(c)}")
        rows = pred == c
        d2 = cdist(logits[rows], bank.logits[int(c)], "sqeuclidean")
        s = bank.sigma[int(c)]
        out[rows] = np.exp(-d2 / (2 * s * s)).mean(axis=1)
    return out


@dataclass
class Features:
    confidence: np.ndarray
    k_density: np.ndarray
    non_me: np.ndarray

    def matrix(self) -> np.ndarray:
        return np.stack([self.confidence, self.k_density, self.non_me], axis=1)


def features_from_logits(logits: np.ndarray, bank: ReferenceBank) -> Features:
    logits = np.asarray(logits, dtype=np.float64)
    probs = softmax_np(logits)
    pred = probs.argmax(axis=1)
    return Features(probs.max(axis=1), k_density(logits, pred, bank), non_max_entropy(probs))


def compute_features(model: CnnClassifier, bank: ReferenceBank, images) -> Features:
    return features_from_logits(predict_logits(model, images), bank)


def _sigmoid(s):
    return 0.5 * (1.0 + np.tanh(0.5 * s))


@dataclass
class LogisticFit:
    weights: np.ndarray
    bias: float
    mean: np.ndarray
    std: np.ndarray
    steps: int

    def score(self, feats: np.ndarray) -> np.ndarray:
        return ((feats - self.mean) / self.std) @ self.weights + self.bias

    def predict_proba(self, feats: np.ndarray) -> np.ndarray:
        return _sigmoid(self.score(feats))


def fit_logistic(feats: np.ndarray, y: np.ndarray, seed: int = 0, lr: float = 0.5,
                 max_steps: int = 5000, tol: float = 1e-7) -> LogisticFit:
    """Full-batch gradient descent on z-scored features.

    Stops when the mean log-loss changes by less than ``tol`` or after
    ``max_steps`` steps.
    """
    feats = np.asarray(feats, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(y)) < 2:
        raise ValueError("detector training needs both natural and adversarial examples")
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    xs = (feats - mu) / sd
    rng = np.random.default_rng([seed, 29])
    w = rng.normal(0.0, 0.01, size=xs.shape[1])
    b = 0.0
    prev = np.inf
    step = 0
    for step in range(1, max_steps + 1):
        s = xs @ w + b
        p = _sigmoid(s)
        # log(1 + e^s) - y s, computed stably
        loss = float(np.mean(np.logaddexp(0.0, s) - y * s))
        r = p - y
        w -= lr * (xs.T @ r) / len(y)
        b -= lr * float(r.mean())
        if abs(prev - loss) < tol:
            break
        prev = loss
    return LogisticFit(w, b, mu, sd, step)


@dataclass
class DetectorModel:
    fit: LogisticFit
    bank: ReferenceBank

    @property
    def weights(self):
        return self.fit.weights

    @property
    def bias(self):
        return self.fit.bias

    def save(self, path, extra_meta=None) -> None:
        t = {"weights": self.fit.weights, "bias": np.array([self.fit.bias]),
             "mean": self.fit.mean, "std": self.fit.std, **self.bank.arrays()}
        meta = {"kind": "detector", "steps": self.fit.steps}
        meta.update(extra_meta or {})
        checkpoint.save(path, t, meta)

    @classmethod
    def load(cls, path) -> "DetectorModel":
        t, meta = checkpoint.load(path)
        if meta.get("kind") != "detector":
            raise checkpoint.CheckpointError(f"{path} is not a detector checkpoint")
        fit = LogisticFit(t["weights"], float(t["bias"][0]), t["mean"], t["std"],
                          int(meta.get("steps", 0)))
        return cls(fit, ReferenceBank.from_arrays(t))


def train_detector(model: CnnClassifier, bank: ReferenceBank, natural_images, adv_images,
                   seed: int = 0, **fit_kw) -> DetectorModel:
    """Fit on naturals (label 0) and their adversarial counterparts (label 1)."""
    fn = compute_features(model, bank, natural_images).matrix() if len(natural_images) else \
        np.zeros((0, 3))
    fa = compute_features(model, bank, adv_images).matrix() if len(adv_images) else \
        np.zeros((0, 3))
    feats = np.concatenate([fn, fa])
    y = np.concatenate([np.zeros(len(fn)), np.ones(len(fa))])
    return DetectorModel(fit_logistic(feats, y, seed=seed, **fit_kw), bank)


def detect(detector: DetectorModel, model: CnnClassifier, images) -> np.ndarray:
    """Probability that each image is adversarial."""
    return detector.fit.predict_proba(compute_features(model, detector.bank, images).matrix())


def outcome(p_adv: float, predicted: int, true_label: int, is_adversarial: bool,
            threshold: float = THRESHOLD) -> str:
    if p_adv >= threshold:
        return "A" if is_adversarial else "FAIL"
    return "B" if predicted == true_label else "FAIL"


def protected_classify(detector: DetectorModel, model: CnnClassifier, images, true_labels,
                       is_adversarial, threshold: float = THRESHOLD) -> np.ndarray:
    """Outcome per image: 'A' rejected adversarial, 'B' accepted and correct, else 'FAIL'."""
    logits = predict_logits(model, images)
    p = detector.fit.predict_proba(features_from_logits(logits, detector.bank).matrix())
    pred = logits.argmax(axis=1)
    adv = np.broadcast_to(np.asarray(is_adversarial, dtype=bool), (len(pred),))
    return np.array([outcome(pi, int(yi), int(ti), bool(ai), threshold)
                     for pi, yi, ti, ai in zip(p, pred, np.asarray(true_labels), adv)])
