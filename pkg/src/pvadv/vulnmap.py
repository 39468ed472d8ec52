"""Pixel-vulnerability maps and sparse masked adversarial composition.

A :class:`VulnNet` maps an image to raw per-pixel scores. Softmax over all
H*W scores gives a categorical distribution over pixel coordinates; drawing
it M times and taking the union selects at most M coordinates, and only
those receive the source attack's perturbation. Training uses the Concrete
(Gumbel-softmax) relaxation of the draws so gradients reach the network.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .attacks import AdversarialSet
from .classifier import CnnClassifier, FrozenModelError, NumericError, predict_probs
from .optim import AdamState, adam_step, zero_grads
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
VARIANTS = ("sampled", "topk", "random", "reverse")


def budget_from_beta(beta: float, h: int, w: int) -> int:
    """M = round(beta * H * W) with halves rounded up."""
    return int(math.floor(beta * h * w + 0.5))


class VulnNet:
    """Conv encoder to a latent vector, deconv decoder back to an H x W map.

    Encoder: two 4x4 stride-2 convs (32, 64 channels) and a dense layer to
    ``latent`` units. Decoder mirrors it with a dense layer and two 4x4
    stride-2 transposed convs ending in a single channel. H and W must be
    divisible by 4.
    """

    def __init__(self, image_shape, latent: int = 128, seed: int = 0, dtype=np.float32,
                 width: int = 32):
        c, h, w = (int(s) for s in image_shape)
        if h % 4 or w % 4:
            raise ValueError(f"VulnNet needs H and W divisible by 4, got {h}x{w}")
        self.image_shape = (c, h, w)
        self.latent = int(latent)
        self.width = int(width)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        c1, c2 = self.width, 2 * self.width
        hq, wq = h // 4, w // 4
        flat = c2 * hq * wq
        shapes = {
            "enc1.w": ((c1, c, 4, 4), c * 16),
            "enc2.w": ((c2, c1, 4, 4), c1 * 16),
            "enc3.w": ((flat, self.latent), flat),
            "dec1.w": ((self.latent, flat), self.latent),
            "dec2.w": ((c2, c1, 4, 4), c2 * 16 // 4),
            "dec3.w": ((c1, 1, 4, 4), c1 * 16 // 4),
        }
        self.params: dict[str, Tensor] = {}
        for name, (shape, fan_in) in shapes.items():
            lim = np.sqrt(6.0 / fan_in)
            if name == "dec3.w":
                lim *= 0.1  # start close to a uniform map
            self.params[name] = Tensor(rng.uniform(-lim, lim, size=shape).astype(self.dtype),
                                       requires_grad=True)
        bias = {"enc1.b": c1, "enc2.b": c2, "enc3.b": self.latent, "dec1.b": flat,
                "dec2.b": c1, "dec3.b": 1}
        for name, n in bias.items():
            self.params[name] = Tensor(np.zeros(n, self.dtype), requires_grad=True)

    def zero_output(self) -> "VulnNet":
        self.params["dec3.w"].data[...] = 0
        self.params["dec3.b"].data[...] = 0
        return self

    def forward(self, x) -> Tensor:
        """Raw scores, shape (N, H, W)."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.image_shape:
            raise T.ShapeError("vulnnet", x.shape, (None,) + self.image_shape)
        p = self.params
        n = x.shape[0]
        _, h, w = self.image_shape
        z = T.relu(T.conv2d(x, p["enc1.w"], p["enc1.b"], stride=2, padding=1))
        z = T.relu(T.conv2d(z, p["enc2.w"], p["enc2.b"], stride=2, padding=1))
        z = T.matmul(T.reshape(z, (n, -1)), p["enc3.w"]) + p["enc3.b"]
        z = T.relu(T.matmul(z, p["dec1.w"]) + p["dec1.b"])
        z = T.reshape(z, (n, 2 * self.width, h // 4, w // 4))
        z = T.relu(T.conv_transpose2d(z, p["dec2.w"], p["dec2.b"], stride=2, padding=1))
        z = T.conv_transpose2d(z, p["dec3.w"], p["dec3.b"], stride=2, padding=1)
        return T.reshape(z, (n, h, w))

    __call__ = forward

    def meta(self) -> dict:
        return {"kind": "vulnnet", "image_shape": list(self.image_shape),
                "latent": self.latent, "width": self.width, "dtype": self.dtype.str}

    def save(self, path, extra_meta=None) -> None:
        meta = self.meta()
        meta.update(extra_meta or {})
        checkpoint.save(path, {k: v.data for k, v in self.params.items()}, meta)

    @classmethod
    def load(cls, path) -> "VulnNet":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "vulnnet":
            raise checkpoint.CheckpointError(f"{path} is not a vulnerability-net checkpoint")
        net = cls(meta["image_shape"], meta["latent"], dtype=np.dtype(meta["dtype"]),
                  width=meta.get("width", 32))
        for k, v in tensors.items():
            net.params[k].data = v
        return net


@dataclass
class VulnMap:
    theta_raw: np.ndarray  # (N, H, W)
    probs: np.ndarray  # (N, H, W), each image sums to 1

    @property
    def shape(self):
        return self.theta_raw.shape[1:]


def _flat_softmax(theta: np.ndarray) -> np.ndarray:
    n = theta.shape[0]
    z = theta.reshape(n, -1).astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return (e / e.sum(axis=1, keepdims=True)).reshape(theta.shape)


def vuln_map(net: VulnNet, images, batch: int = 250) -> VulnMap:
    images = np.asarray(images)
    theta = np.concatenate([net.forward(images[s:s + batch]).data
                            for s in range(0, len(images), batch)])
    return VulnMap(theta, _flat_softmax(theta))


@dataclass
class SelectionMask:
    z: np.ndarray | Tensor  # (N, H, W)
    m: int
    relaxed: bool = False
    draws: np.ndarray | None = field(default=None, repr=False)  # (N, M, H*W) when relaxed


def _check_m(m, hw):
    if not 1 <= m <= hw:
        raise ValueError(f"M must be in [1, {hw}], got {m}")


def sample_hard_mask(vmap: VulnMap, m: int, rng: np.random.Generator) -> SelectionMask:
    """Union of ``m`` independent categorical draws over pixel coordinates.

    Each draw is an inverse-CDF lookup: the chosen index is the number of
    CDF entries at or below a uniform variate.
    """
    probs = vmap.probs.reshape(len(vmap.probs), -1)
    n, hw = probs.shape
    _check_m(m, hw)
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]
    u = rng.random((n, m))
    picks = np.empty((n, m), dtype=np.intp)
    for i in range(n):
        picks[i] = np.searchsorted(cdf[i], u[i], side="right")
    z = np.zeros((n, hw), dtype=np.float32)
    np.put_along_axis(z, np.minimum(picks, hw - 1), 1.0, axis=1)
    return SelectionMask(z.reshape(vmap.probs.shape), m)


def gumbel(rng: np.random.Generator, shape, dtype=np.float64) -> np.ndarray:
    dtype = np.dtype(dtype)
    work = np.float32 if dtype == np.float32 else np.float64
    nu = rng.random(shape, dtype=work)
    np.clip(nu, np.finfo(work).tiny, None, out=nu)
    np.log(nu, out=nu)
    np.negative(nu, out=nu)
    np.log(nu, out=nu)
    np.negative(nu, out=nu)
    return nu.astype(dtype, copy=False)


def concrete_draws(theta_raw: Tensor, m: int, tau: float, rng: np.random.Generator) -> Tensor:
    """``m`` Concrete samples per image, shape (N, m, H*W), each on the simplex.

    With probabilities p = softmax(theta), a sample is
    softmax((log p + g) / tau) for Gumbel noise g. The log-normalizer of p is
    constant across coordinates and cancels inside the outer softmax, so the
    raw scores are used directly.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not isinstance(theta_raw, Tensor):
        theta_raw = Tensor(theta_raw)
    n = theta_raw.shape[0]
    hw = int(np.prod(theta_raw.shape[1:]))
    _check_m(m, hw)
    flat = T.reshape(theta_raw, (n, 1, hw))
    g = gumbel(rng, (n, m, hw), dtype=theta_raw.dtype)
    return T.softmax((flat + g) * (1.0 / tau), axis=-1)


def sample_relaxed_mask(theta_raw: Tensor, m: int, tau: float,
                        rng: np.random.Generator) -> SelectionMask:
    """Elementwise max over ``m`` Concrete draws; differentiable in ``theta_raw``.

    Numerically the same as taking ``amax`` of :func:`concrete_draws` over the
    draw axis with the same noise, but without keeping the per-draw graph.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    if not isinstance(theta_raw, Tensor):
        theta_raw = Tensor(theta_raw)
    n = theta_raw.shape[0]
    hw = int(np.prod(theta_raw.shape[1:]))
    _check_m(m, hw)
    g = gumbel(rng, (n, m, hw), dtype=theta_raw.dtype)
    z, draws = T.max_of_softmaxes(T.reshape(theta_raw, (n, hw)), g, tau)
    return SelectionMask(T.reshape(z, theta_raw.shape), m, relaxed=True, draws=draws)


def compose_adversarial(x, x_s, z):
    """``x + z * (x_s - x)`` with one mask value per coordinate over all channels."""
    zd = z.data if isinstance(z, Tensor) else np.asarray(z)
    x = np.asarray(x)
    x_s = np.asarray(x_s)
    if x.shape != x_s.shape or x.ndim != 4 or zd.shape != (x.shape[0],) + x.shape[2:]:
        raise T.ShapeError("compose_adversarial", x.shape, x_s.shape, zd.shape)
    # convex form so z = 1 reproduces x_s and z = 0 reproduces x bit for bit
    if isinstance(z, Tensor):
        zz = T.reshape(z, (x.shape[0], 1) + x.shape[2:])
        return Tensor(x) * (1.0 - zz) + zz * Tensor(x_s.astype(x.dtype))
    zb = zd[:, None].astype(x.dtype)
    return ((1 - zb) * x + zb * x_s).astype(x.dtype)


def mi_loss(probs_source, probs_adv) -> Tensor:
    """Negated mutual-information surrogate: mean cross-entropy H(p_s, p_adv).

    ``probs_source`` is treated as a constant. ``probs_adv`` is floored at
    1e-12 before the log.
    """
    ps = probs_source.data if isinstance(probs_source, Tensor) else np.asarray(probs_source)
    pa = probs_adv if isinstance(probs_adv, Tensor) else Tensor(probs_adv)
    if ps.shape != pa.shape:
        raise T.ShapeError("mi_loss", ps.shape, pa.shape)
    logp = T.log(T.clip(pa, LOG_FLOOR, 1.0))
    n = ps.shape[0]
    return T.tsum(logp * ps.astype(pa.dtype)) * (-1.0 / n)


def select_mask_variant(vmap: VulnMap, m: int, variant: str,
                        rng: np.random.Generator) -> SelectionMask:
    """Hard mask by ``variant``: sampled, topk (M most vulnerable), reverse
    (M least vulnerable) or random (uniform M-subset)."""
    probs = vmap.probs.reshape(len(vmap.probs), -1)
    n, hw = probs.shape
    _check_m(m, hw)
    if variant == "sampled":
        return sample_hard_mask(vmap, m, rng)
    z = np.zeros((n, hw), dtype=np.float32)
    if variant == "topk":
        order = np.argsort(-probs, axis=1, kind="stable")[:, :m]
    elif variant == "reverse":
        order = np.argsort(probs, axis=1, kind="stable")[:, :m]
    elif variant == "random":
        order = np.stack([rng.choice(hw, size=m, replace=False) for _ in range(n)]) if n else \
            np.zeros((0, m), dtype=np.int64)
    else:
        raise ValueError(f"unknown mask variant {variant!r}; expected one of {VARIANTS}")
    np.put_along_axis(z, order, 1.0, axis=1)
    return SelectionMask(z.reshape(vmap.probs.shape), m)


@dataclass
class VulnTrainConfig:
    lr: float = 1e-4
    batch: int = 100
    max_iters: int = 500
    patience: int = 10
    tau: float = 0.5
    seed: int = 0


@dataclass
class TrainTrace:
    losses: list
    best_loss: float
    iterations: int
    stop_reason: str


def _stream_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def train_vulnmap(net: VulnNet, model: CnnClassifier, source, dataset, m: int,
                  cfg: VulnTrainConfig | None = None):
    """Fit the vulnerability network against a frozen classifier.

    ``source`` is either a callable ``source(model, x, y, seed)`` run on every
    batch with a fresh seed, or an array of source adversarials aligned with
    ``dataset`` (computed once, which is much cheaper for iterative attacks).
    Per iteration: draw a batch, fetch its source adversarials, compose with a relaxed mask and take an Adam step on the
    mean cross-entropy between source and composed predictions. Stops after
    ``max_iters`` or when the loss has not improved on its best value for
    ``patience`` consecutive iterations. Returns ``(net, TrainTrace)``.
    """
    cfg = cfg or VulnTrainConfig()
    if not model.frozen:
        raise FrozenModelError("train_vulnmap needs a frozen classifier")
    images, labels = dataset.images, dataset.labels
    n = len(labels)
    bank = None if callable(source) else np.asarray(source)
    if bank is not None and bank.shape != images.shape:
        raise ValueError(f"source bank shape {bank.shape} does not match images {images.shape}")
    state = AdamState.for_params(net.params, lr=cfg.lr)
    order_rng = np.random.default_rng([cfg.seed, 11])
    order, pos, epoch = order_rng.permutation(n), 0, 0
    losses: list[float] = []
    best, since_best = np.inf, 0
    last_good = {k: v.data.copy() for k, v in net.params.items()}
    reason = "max_iters"
    it = 0
    for it in range(cfg.max_iters):
        if pos >= n:
            order, pos, epoch = order_rng.permutation(n), 0, epoch + 1
        idx = order[pos:pos + cfg.batch]
        pos += cfg.batch
        x, y = images[idx].astype(net.dtype, copy=False), labels[idx]
        if bank is None:
            x_s = source(model, x, y, _stream_seed(cfg.seed, epoch, it))
        else:
            x_s = bank[idx].astype(net.dtype, copy=False)
        p_s = predict_probs(model, x_s)

        theta = net.forward(x)
        mask = sample_relaxed_mask(theta, m, cfg.tau, np.random.default_rng([cfg.seed, 13, it]))
        x_adv = compose_adversarial(x, x_s, mask.z)
        p_adv = T.softmax(model.forward(x_adv), axis=1)
        loss = mi_loss(p_s, p_adv)
        val = loss.item()
        if not np.isfinite(val):
            for k, v in last_good.items():
                net.params[k].data = v
            err = NumericError(f"vulnerability-net loss became {val} at iteration {it}")
            err.last_good = last_good
            raise err
        zero_grads(net.params)
        T.backward(loss)
        last_good = {k: v.data.copy() for k, v in net.params.items()}
        adam_step(net.params, state)
        losses.append(val)
        if val < best:
            best, since_best = val, 0
        else:
            since_best += 1
        if it % 25 == 0:
            log.info("vulnmap iter %d loss %.5f", it, val)
        if since_best >= cfg.patience:
            reason = "plateau"
            break
    return net, TrainTrace(losses, float(best), len(losses), reason)


def pvadv_attack(net: VulnNet, x, x_s, m: int, variant: str = "sampled", seed: int = 0,
                 labels=None, source_name: str = "") -> AdversarialSet:
    """Compose sparse adversarials from precomputed source adversarials."""
    vmap = vuln_map(net, x)
    mask = select_mask_variant(vmap, m, variant, np.random.default_rng([seed, 17]))
    adv = compose_adversarial(x, x_s, mask.z)
    lab = np.zeros(len(x), np.int64) if labels is None else np.asarray(labels)
    return AdversarialSet(np.asarray(x).copy(), adv, lab.copy(), f"pvadv_{source_name}".rstrip("_"),
                          {"m": int(m), "variant": variant, "seed": int(seed)})
