"""The CNN classifier under attack."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import checkpoint
from . import tensor as T
from .data import Dataset
from .optim import AdamState, adam_step, zero_grads
from .tensor import Tensor

log = logging.getLogger(__name__)

# layer specs: ("conv", out_ch, kernel, padding) | ("pool", size) | ("dense", units)
ARCHITECTURES = {
    "mnist": [("conv", 32, 5, 0), ("pool", 2), ("conv", 64, 5, 0), ("pool", 2),
              ("dense", 1024)],
    "cifar": [("conv", 32, 3, 1), ("conv", 32, 3, 1), ("pool", 2),
              ("conv", 64, 3, 1), ("conv", 64, 3, 1), ("pool", 2), ("dense", 256)],
    "tiny": [("conv", 8, 5, 0), ("pool", 2), ("conv", 16, 3, 0), ("pool", 2)],
}


class NumericError(FloatingPointError):
    pass


class FrozenModelError(RuntimeError):
    pass


class CnnClassifier:
    """conv/pool/dense stack ending in a K-way linear layer.

    Hidden layers use ReLU. Parameters live in ``self.params`` keyed by name
    (``conv0.w``, ``dense2.b`` ...).
    """

    def __init__(self, image_shape, num_classes: int, arch="mnist", seed: int = 0,
                 dtype=np.float32):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.num_classes = int(num_classes)
        self.arch_name = arch if isinstance(arch, str) else "custom"
        self.layers = [tuple(l) for l in (ARCHITECTURES[arch] if isinstance(arch, str) else arch)]
        self.dtype = np.dtype(dtype)
        self.frozen = False
        self.params: dict[str, Tensor] = {}
        self._build(np.random.default_rng(seed))

    def _build(self, rng):
        c, h, w = self.image_shape
        flat = None
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "conv":
                _, out, k, pad = layer
                fan_in = c * k * k
                self._param(f"conv{i}.w", rng, (out, c, k, k), fan_in)
                self.params[f"conv{i}.b"] = Tensor(np.zeros(out, self.dtype), requires_grad=True)
                c, h, w = out, h + 2 * pad - k + 1, w + 2 * pad - k + 1
                if h < 1 or w < 1:
                    raise ValueError(f"architecture collapses spatial size at layer {i}")
            elif kind == "pool":
                h, w = h // layer[1], w // layer[1]
            elif kind == "dense":
                fan_in = flat if flat is not None else c * h * w
                self._param(f"dense{i}.w", rng, (fan_in, layer[1]), fan_in)
                self.params[f"dense{i}.b"] = Tensor(np.zeros(layer[1], self.dtype), requires_grad=True)
                flat = layer[1]
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
        fan_in = flat if flat is not None else c * h * w
        self._param("out.w", rng, (fan_in, self.num_classes), fan_in)
        self.params["out.b"] = Tensor(np.zeros(self.num_classes, self.dtype), requires_grad=True)

    def _param(self, name, rng, shape, fan_in):
        # He-uniform
        lim = np.sqrt(6.0 / fan_in)
        self.params[name] = Tensor(rng.uniform(-lim, lim, size=shape).astype(self.dtype),
                                   requires_grad=True)

    def freeze(self) -> "CnnClassifier":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def unfreeze(self) -> "CnnClassifier":
        for p in self.params.values():
            p.requires_grad = True
        self.frozen = False
        return self

    def forward(self, x) -> Tensor:
        """Logits for a batch; ``x`` may be an array or a Tensor."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.dtype))
        if tuple(x.shape[1:]) != self.image_shape:
            raise T.ShapeError("classifier", x.shape, (None,) + self.image_shape)
        p = self.params
        flat = False
        for i, layer in enumerate(self.layers):
            kind = layer[0]
            if kind == "conv":
                x = T.relu(T.conv2d(x, p[f"conv{i}.w"], p[f"conv{i}.b"], padding=layer[3]))
            elif kind == "pool":
                x = T.maxpool2d(x, layer[1])
            else:
                if not flat:
                    x = T.reshape(x, (x.shape[0], -1))
                    flat = True
                x = T.relu(T.matmul(x, p[f"dense{i}.w"]) + p[f"dense{i}.b"])
        if not flat:
            x = T.reshape(x, (x.shape[0], -1))
        return T.matmul(x, p["out.w"]) + p["out.b"]

    __call__ = forward

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def meta(self) -> dict:
        return {"kind": "classifier", "image_shape": list(self.image_shape),
                "num_classes": self.num_classes, "arch": [list(l) for l in self.layers],
                "arch_name": self.arch_name, "dtype": self.dtype.str}

    def save(self, path, extra_meta=None) -> None:
        meta = self.meta()
        meta.update(extra_meta or {})
        checkpoint.save(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path) -> "CnnClassifier":
        tensors, meta = checkpoint.load(path)
        if meta.get("kind") != "classifier":
            raise checkpoint.CheckpointError(f"{path} is not a classifier checkpoint")
        model = cls(meta["image_shape"], meta["num_classes"],
                    arch=[tuple(l) for l in meta["arch"]], dtype=np.dtype(meta["dtype"]))
        model.arch_name = meta.get("arch_name", "custom")
        for k, v in tensors.items():
            model.params[k].data = v
        return model.freeze()


def _batches(n, size):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def predict_logits(model: CnnClassifier, images, batch: int = 500) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim != 4 or tuple(images.shape[1:]) != model.image_shape:
        raise T.ShapeError("predict", images.shape, (None,) + model.image_shape)
    out = [model.forward(images[sl]).data for sl in _batches(len(images), batch)]
    if not out:
        return np.zeros((0, model.num_classes), model.dtype)
    return np.concatenate(out)


def softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict_probs(model: CnnClassifier, images, batch: int = 500) -> np.ndarray:
    return softmax_np(predict_logits(model, images, batch).astype(np.float64))


def predict(model: CnnClassifier, images, batch: int = 500) -> np.ndarray:
    return predict_logits(model, images, batch).argmax(axis=1)


def cross_entropy(logits: Tensor, labels: np.ndarray, weights=None) -> Tensor:
    """Per-image cross-entropy as a (N,) tensor."""
    onehot = np.eye(logits.shape[1], dtype=logits.dtype)[labels]
    if weights is not None:
        onehot = onehot * np.asarray(weights, dtype=logits.dtype)[:, None]
    return -T.tsum(T.log_softmax(logits, axis=1) * onehot, axis=1)


def loss_and_input_grad(model: CnnClassifier, images, labels, weights=None):
    """Cross-entropy per image and its gradient with respect to the input.

    The model must be frozen so that no parameter gradients accumulate.
    ``weights`` optionally scales each image's loss term.
    """
    if not model.frozen:
        raise FrozenModelError("loss_and_input_grad needs a frozen model; call model.freeze()")
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= model.num_classes:
        raise ValueError("labels out of range")
    x = Tensor(np.array(images, dtype=model.dtype), requires_grad=True)
    losses = cross_entropy(model.forward(x), labels, weights)
    T.backward(T.tsum(losses))
    return losses.data.copy(), x.grad


def input_grad(model: CnnClassifier, images, objective) -> np.ndarray:
    """Gradient of ``sum(objective(logits))`` w.r.t. the input images."""
    if not model.frozen:
        raise FrozenModelError("input_grad needs a frozen model")
    x = Tensor(np.array(images, dtype=model.dtype), requires_grad=True)
    T.backward(T.tsum(objective(model.forward(x))))
    return x.grad


def accuracy(model: CnnClassifier, dataset: Dataset) -> float:
    if len(dataset) == 0:
        return float("nan")
    return float(np.mean(predict(model, dataset.images) == dataset.labels))


@dataclass
class TrainReport:
    steps: int
    final_loss: float
    train_acc: float
    test_acc: float | None
    losses: list


def train_classifier(dataset: Dataset, epochs: int = 2, batch: int = 64, lr: float = 1e-3,
                     seed: int = 0, arch="mnist", test: Dataset | None = None,
                     steps: int | None = None, dtype=np.float32):
    """Plain cross-entropy training with Adam.

    Runs ``epochs`` passes over seeded shuffles, or exactly ``steps`` minibatch
    updates when ``steps`` is given. Returns ``(frozen model, TrainReport)``.
    """
    model = CnnClassifier(dataset.image_shape, dataset.num_classes, arch=arch, seed=seed,
                          dtype=dtype)
    state = AdamState.for_params(model.params, lr=lr)
    rng = np.random.default_rng([seed, 1])
    n = len(dataset)
    total = steps if steps is not None else epochs * -(-n // batch)
    losses = []
    order = np.empty(0, dtype=np.int64)
    pos = 0
    for step in range(total):
        if pos >= len(order):
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch]
        pos += batch
        x = dataset.images[idx].astype(model.dtype, copy=False)
        loss = T.mean(cross_entropy(model.forward(x), dataset.labels[idx]))
        val = loss.item()
        if not np.isfinite(val):
            raise NumericError(f"classifier training diverged at step {step} (loss={val})")
        zero_grads(model.params)
        T.backward(loss)
        adam_step(model.params, state)
        losses.append(val)
        if step % 100 == 0:
            log.debug("classifier step %d loss %.4f", step, val)
    model.freeze()
    report = TrainReport(total, losses[-1] if losses else float("nan"),
                         accuracy(model, dataset),
                         accuracy(model, test) if test is not None else None, losses)
    return model, report
