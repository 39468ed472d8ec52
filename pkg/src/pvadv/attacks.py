"""L-infinity source attacks: FGSM, PGD and a greedy single-pixel JSMA.

Every attack returns an :class:`AdversarialSet` whose adversarial images lie
in [0, 1] and within ``epsilon`` of the originals in L-infinity.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .classifier import CnnClassifier, input_grad, loss_and_input_grad, predict_logits

DEFAULT_EPSILON = {"mnist": 0.3, "cifar10": 0.03}


@dataclass
class AttackConfig:
    epsilon: float = 0.3
    steps: int = 20
    step_size: float | None = None
    random_init: bool = True
    seed: int = 0
    batch: int = 250

    def __post_init__(self):
        if self.step_size is None:
            self.step_size = self.epsilon / 10.0
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")


@dataclass
class AdversarialSet:
    originals: np.ndarray
    adversarials: np.ndarray
    labels: np.ndarray
    attack: str
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def save(self, path, extra_meta=None) -> None:
        meta = {"kind": "advset", "attack": self.attack, "config": self.config}
        meta.update(extra_meta or {})
        checkpoint.save(path, {"originals": self.originals, "adversarials": self.adversarials,
                               "labels": self.labels}, meta)

    @classmethod
    def load(cls, path) -> "AdversarialSet":
        t, meta = checkpoint.load(path)
        if meta.get("kind") != "advset":
            raise checkpoint.CheckpointError(f"{path} is not an adversarial-set checkpoint")
        return cls(t["originals"], t["adversarials"], t["labels"], meta["attack"],
                   meta.get("config", {}))


def project(x_adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Clip to [0, 1], then into the eps-ball around ``x``.

    Because ``x`` is itself in [0, 1], the ball clip cannot leave the unit
    box, so both constraints hold on the result.
    """
    x_adv = np.clip(x_adv, 0.0, 1.0)
    return np.clip(x_adv, x - eps, x + eps).astype(x.dtype, copy=False)


def _chunks(n, size):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def fgsm(model: CnnClassifier, images, labels, cfg: AttackConfig) -> AdversarialSet:
    x = np.asarray(images, dtype=model.dtype)
    out = np.empty_like(x)
    for sl in _chunks(len(x), cfg.batch):
        _, g = loss_and_input_grad(model, x[sl], labels[sl])
        out[sl] = project(x[sl] + cfg.epsilon * np.sign(g), x[sl], cfg.epsilon)
    return AdversarialSet(x.copy(), out, np.asarray(labels).copy(), "fgsm", asdict(cfg))


def random_start(x: np.ndarray, eps: float, seed: int, offset: int = 0) -> np.ndarray:
    """Uniform point in the eps-ball, one RNG stream per image index."""
    noise = np.empty(x.shape, dtype=np.float64)
    for i in range(len(x)):
        rng = np.random.default_rng([seed, offset + i])
        noise[i] = rng.uniform(-eps, eps, size=x.shape[1:])
    return project(x + noise.astype(x.dtype), x, eps)


def pgd(model: CnnClassifier, images, labels, cfg: AttackConfig) -> AdversarialSet:
    x = np.asarray(images, dtype=model.dtype)
    out = np.empty_like(x)
    eps, a = cfg.epsilon, cfg.step_size
    for sl in _chunks(len(x), cfg.batch):
        x0 = x[sl]
        xa = random_start(x0, eps, cfg.seed, sl.start) if cfg.random_init else x0.copy()
        for _ in range(cfg.steps):
            _, g = loss_and_input_grad(model, xa, labels[sl])
            xa = project(xa + a * np.sign(g), x0, eps)
        out[sl] = xa
    return AdversarialSet(x.copy(), out, np.asarray(labels).copy(), "pgd", asdict(cfg))


def random_targets(labels, k: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7])
    shift = rng.integers(1, k, size=len(labels))
    return (np.asarray(labels) + shift) % k


def jsma(model: CnnClassifier, images, labels, budget: int, cfg: AttackConfig,
         targets=None) -> AdversarialSet:
    """Greedy targeted saliency attack with an L0 budget on pixel coordinates.

    Each round takes the gradient of ``z_t - sum_{o != t} z_o`` (target
    logit minus the other logits) summed over channels, and raises the
    unperturbed coordinate with the largest positive saliency to the ball
    boundary ``min(1, x + eps)`` on every channel. An image stops once it is
    classified as its target, runs out of budget, or has no positive
    saliency left.
    """
    x = np.asarray(images, dtype=model.dtype)
    labels = np.asarray(labels)
    n, c, h, w = x.shape
    if budget > h * w:
        raise ValueError(f"budget {budget} exceeds {h * w} pixel coordinates")
    adv = x.copy()
    if budget <= 0 or n == 0:
        return AdversarialSet(x.copy(), adv, labels.copy(), "jsma",
                              {**asdict(cfg), "budget": int(budget)})
    k = model.num_classes
    if targets is None:
        targets = random_targets(labels, k, cfg.seed)
    ceiling = np.minimum(1.0, x + cfg.epsilon).astype(x.dtype)
    # coordinates that can still move up on some channel
    free = (ceiling > x).any(axis=1).reshape(n, -1)
    used = np.zeros(n, dtype=np.int64)
    active = predict_logits(model, adv).argmax(1) != targets

    while True:
        idx = np.flatnonzero(active & (used < budget))
        if idx.size == 0:
            break
        sign_t = np.full((idx.size, k), -1.0, dtype=model.dtype)
        sign_t[np.arange(idx.size), targets[idx]] = 1.0
        g = input_grad(model, adv[idx], lambda z: z * sign_t)
        sal = g.sum(axis=1).reshape(idx.size, -1)
        sal = np.where(free[idx], sal, -np.inf)
        best = sal.argmax(axis=1)
        ok = sal[np.arange(idx.size), best] > 0
        stalled = idx[~ok]
        active[stalled] = False
        idx, best = idx[ok], best[ok]
        if idx.size == 0:
            continue
        r, col = np.divmod(best, w)
        adv[idx, :, r, col] = ceiling[idx, :, r, col]
        free[idx, best] = False
        used[idx] += 1
        pred = predict_logits(model, adv[idx]).argmax(1)
        active[idx[pred == targets[idx]]] = False
    adv = project(adv, x, cfg.epsilon)
    return AdversarialSet(x.copy(), adv, labels.copy(), "jsma",
                          {**asdict(cfg), "budget": int(budget)})


def run_attack(name: str, model, images, labels, cfg: AttackConfig, budget: int | None = None):
    if name == "fgsm":
        return fgsm(model, images, labels, cfg)
    if name == "pgd":
        return pgd(model, images, labels, cfg)
    if name == "jsma":
        if budget is None:
            raise ValueError("jsma needs a pixel budget")
        return jsma(model, images, labels, budget, cfg)
    raise ValueError(f"unknown attack {name!r}")


def source_attack(name: str, cfg: AttackConfig, budget: int | None = None):
    """A callable ``s(model, images, labels, seed) -> adversarial images``."""

    def s(model, images, labels, seed):
        c = AttackConfig(**{**asdict(cfg), "seed": int(seed)})
        return run_attack(name, model, images, labels, c, budget).adversarials

    s.name = name
    s.config = asdict(cfg)
    return s
