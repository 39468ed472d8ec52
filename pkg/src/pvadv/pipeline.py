"""Stage functions that turn a :class:`RunConfig` into artifacts on disk.

Each stage reads its inputs from checkpoint files, writes exactly one
artifact (plus a ``.provenance.json`` sidecar) and returns the in-memory
object. :func:`run_pipeline` chains them. Every stage draws its randomness
from :func:`stage_seed`, so reruns with the same config are bitwise
identical.
"""
from __future__ import annotations

import contextlib
import csv
import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attacks import DEFAULT_EPSILON, AdversarialSet, AttackConfig, run_attack
from .checkpoint import CheckpointError
from .classifier import CnnClassifier, NumericError, train_classifier
from .data import DataError, Dataset, half_indices, load_dataset, stratified_split
from .detector import DetectorModel, build_bank, train_detector
from .evaluation import (MetricsReport, adv_acc, evaluate_detection, l2_per_perturbed_pixel,
                         transfer_matrix, write_provenance, write_report, write_transfer_csv)
from .vulnmap import (VARIANTS, VulnNet, VulnTrainConfig, budget_from_beta, pvadv_attack,
                      train_vulnmap, vuln_map)

log = logging.getLogger(__name__)

ATTACKS = ("fgsm", "pgd", "jsma")
DATASETS = ("synthetic", "mnist-sample", "mnist", "cifar10")
RANDOM_REPEATS = 5

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class ConfigError(ValueError):
    """Invalid run configuration; maps to the usage exit code."""


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and an exit code."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        if isinstance(cause, (NumericError, FloatingPointError)):
            self.exit_code = EXIT_NUMERIC
        elif isinstance(cause, ConfigError):
            self.exit_code = EXIT_USAGE
        else:
            self.exit_code = EXIT_DATA
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


@contextlib.contextmanager
def stage(name: str):
    try:
        yield
    except StageError:
        raise
    except (DataError, CheckpointError, FileNotFoundError, NumericError, FloatingPointError,
            ConfigError, ValueError, OSError) as e:
        raise StageError(name, e) from e


def stage_seed(seed: int, name: str) -> int:
    """Stable 32-bit seed for one stage, from sha256 of ``"<seed>:<name>"``."""
    digest = hashlib.sha256(f"{int(seed)}:{name}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    data_dir: str | None = None
    n: int | None = None
    test_size: int | None = None
    seed: int = 0
    out_dir: str = "run"
    # classifier
    arch: str | None = None
    clf_epochs: int = 2
    clf_lr: float = 1e-3
    clf_batch: int = 64
    # attacks
    attack: str = "pgd"
    epsilon: float | None = None
    pgd_steps: int = 20
    # vulnerability net
    beta: float = 0.3
    tau: float = 0.5
    lr: float = 1e-4
    batch: int = 100
    max_iters: int = 500
    patience: int = 10
    variant: str = "sampled"
    variants: list = field(default_factory=lambda: list(VARIANTS))
    # evaluation
    timing: bool = False
    n_maps: int = 16
    cache_source: bool = True

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if not 0.0 < float(self.beta) < 1.0:
            raise ConfigError(f"beta must lie in (0, 1), got {self.beta}")
        if not float(self.tau) > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.attack not in ATTACKS:
            raise ConfigError(f"attack must be one of {ATTACKS}, got {self.attack!r}")
        for v in [self.variant, *self.variants]:
            if v not in VARIANTS:
                raise ConfigError(f"variant must be one of {VARIANTS}, got {v!r}")
        if self.epsilon is not None and not float(self.epsilon) > 0:
            raise ConfigError("epsilon must be > 0")
        for name in ("lr", "clf_lr"):
            if not float(getattr(self, name)) > 0:
                raise ConfigError(f"{name} must be > 0")
        for name in ("batch", "clf_batch", "max_iters", "patience", "pgd_steps"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")

    @classmethod
    def field_names(cls) -> tuple:
        return tuple(f.name for f in fields(cls))

    @property
    def eps(self) -> float:
        if self.epsilon is not None:
            return float(self.epsilon)
        return DEFAULT_EPSILON["cifar10" if self.dataset == "cifar10" else "mnist"]

    def budget(self, image_shape) -> int:
        """Pixel budget M for ``beta`` on images of ``image_shape`` (C, H, W)."""
        return budget_from_beta(self.beta, image_shape[-2], image_shape[-1])

    def attack_config(self, seed_name: str) -> AttackConfig:
        return AttackConfig(epsilon=self.eps, steps=self.pgd_steps,
                            seed=stage_seed(self.seed, seed_name))

    def provenance(self) -> dict:
        """Config as recorded next to artifacts; host paths reduced to names."""
        d = asdict(self)
        d["out_dir"] = Path(self.out_dir).name
        d["data_dir"] = Path(self.data_dir).name if self.data_dir else None
        d["epsilon"] = self.eps
        return d


def default_arch(image_shape) -> str:
    c, h, w = image_shape
    if (h, w) == (28, 28):
        return "mnist"
    if (h, w) == (32, 32):
        return "cifar"
    return "tiny"


def load_splits(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    """Deterministic (train, test) split for the configured dataset."""
    ds = load_dataset(cfg.dataset, cfg.data_dir, seed=stage_seed(cfg.seed, "data"), n=cfg.n)
    n_test = cfg.test_size
    if n_test is None:
        n_test = min(1000, len(ds) // 5)
    if not 0 < n_test < len(ds):
        raise ConfigError(f"test_size {n_test} incompatible with {len(ds)} images")
    return stratified_split(ds, n_test, stage_seed(cfg.seed, "split"))


def _prov(artifact, cfg: RunConfig, stage_name: str, inputs: dict | None = None, **extra):
    conf = {"stage": stage_name, "run": cfg.provenance(), **extra}
    write_provenance(artifact, inputs, conf)


# ----------------------------------------------------------------- stages


def train_classifier_stage(cfg: RunConfig, out) -> CnnClassifier:
    with stage("train-classifier"):
        train, test = load_splits(cfg)
        arch = cfg.arch or default_arch(train.image_shape)
        model, rep = train_classifier(train, epochs=cfg.clf_epochs, batch=cfg.clf_batch,
                                      lr=cfg.clf_lr, seed=stage_seed(cfg.seed, "train-classifier"),
                                      arch=arch, test=test)
        log.info("classifier train acc %.4f test acc %.4f", rep.train_acc, rep.test_acc)
        meta = {"train_acc": rep.train_acc, "test_acc": rep.test_acc, "steps": rep.steps}
        model.save(out, extra_meta=meta)
        _prov(out, cfg, "train-classifier", **meta)
        return model


def attack_stage(cfg: RunConfig, model_path, out, attack: str | None = None) -> AdversarialSet:
    attack = attack or cfg.attack
    with stage("attack"):
        model = CnnClassifier.load(model_path)
        _, test = load_splits(cfg)
        budget = cfg.budget(test.image_shape) if attack == "jsma" else None
        adv = run_attack(attack, model, test.images, test.labels,
                         cfg.attack_config(f"attack:{attack}"), budget)
        adv.save(out)
        _prov(out, cfg, "attack", {"model": model_path}, attack=attack)
        return adv


def train_vulnmap_stage(cfg: RunConfig, model_path, out, source: str | None = None) -> VulnNet:
    source = source or cfg.attack
    with stage("train-vulnmap"):
        model = CnnClassifier.load(model_path)
        train, _ = load_splits(cfg)
        m = cfg.budget(train.image_shape)
        src = _source_fn(cfg, source, m)
        if cfg.cache_source:
            src = _batched(src, model, train, stage_seed(cfg.seed, f"source-bank:{source}"))
        net = VulnNet(train.image_shape, seed=stage_seed(cfg.seed, "vulnmap-init"),
                      dtype=model.dtype)
        tcfg = VulnTrainConfig(lr=cfg.lr, batch=cfg.batch, max_iters=cfg.max_iters,
                               patience=cfg.patience, tau=cfg.tau,
                               seed=stage_seed(cfg.seed, "train-vulnmap"))
        meta = {"source": source, "beta": cfg.beta, "m": m, "tau": cfg.tau}
        try:
            net, trace = train_vulnmap(net, model, src, train, m, tcfg)
        except NumericError:
            net.save(out, extra_meta={**meta, "aborted": True})
            raise
        meta.update(iterations=trace.iterations, stop_reason=trace.stop_reason,
                    best_loss=trace.best_loss)
        net.save(out, extra_meta=meta)
        _prov(out, cfg, "train-vulnmap", {"model": model_path}, **meta)
        return net


def _source_fn(cfg: RunConfig, source: str, m: int):
    acfg = cfg.attack_config(f"source:{source}")

    def s(model, images, labels, seed):
        c = AttackConfig(**{**asdict(acfg), "seed": int(seed)})
        return run_attack(source, model, images, labels, c, m if source == "jsma" else None
                          ).adversarials

    return s


def _batched(src, model, ds: Dataset, seed: int, chunk: int = 500) -> np.ndarray:
    out = np.empty_like(ds.images)
    for i in range(0, len(ds), chunk):
        out[i:i + chunk] = src(model, ds.images[i:i + chunk], ds.labels[i:i + chunk], seed + i)
    return out


def gen_adv_stage(cfg: RunConfig, vuln_path, advset_path, out, variant: str | None = None,
                  repeat: int = 0) -> AdversarialSet:
    variant = variant or cfg.variant
    with stage("gen-adv"):
        net = VulnNet.load(vuln_path)
        src = AdversarialSet.load(advset_path)
        m = cfg.budget(src.originals.shape[1:])
        adv = pvadv_attack(net, src.originals, src.adversarials, m, variant,
                           seed=stage_seed(cfg.seed, f"gen-adv:{variant}:{repeat}"),
                           labels=src.labels, source_name=src.attack)
        adv.config.update(beta=cfg.beta)
        adv.save(out)
        _prov(out, cfg, "gen-adv", {"vuln": vuln_path, "advset": advset_path}, variant=variant)
        return adv


def _halves(cfg: RunConfig, n: int):
    return half_indices(n, stage_seed(cfg.seed, "halves"))


def train_detector_stage(cfg: RunConfig, model_path, advset_path, out) -> DetectorModel:
    with stage("train-detector"):
        model = CnnClassifier.load(model_path)
        train, _ = load_splits(cfg)
        adv = AdversarialSet.load(advset_path)
        bank = build_bank(model, train.images, train.labels,
                          seed=stage_seed(cfg.seed, "bank"))
        first, _ = _halves(cfg, len(adv))
        det = train_detector(model, bank, adv.originals[first], adv.adversarials[first],
                             seed=stage_seed(cfg.seed, "train-detector"))
        det.save(out, extra_meta={"attack": adv.attack})
        _prov(out, cfg, "train-detector", {"model": model_path, "advset": advset_path},
              attack=adv.attack)
        return det


def _detector_attack(path) -> str:
    from .checkpoint import load
    return str(load(path)[1].get("attack", Path(path).stem))


def _advset_rows(cfg, model, adv_sets, detectors, eval_idx):
    rows = []
    for label, sets in adv_sets.items():
        accs, aucs, prots, l2s = [], [], [], []
        det = detectors.get(sets[0].attack) or next(iter(detectors.values()), None)
        for a in sets:
            accs.append(adv_acc(model, a))
            l2s.append(l2_per_perturbed_pixel(a.originals, a.adversarials))
            if det is not None:
                r = evaluate_detection(det, model, a.originals[eval_idx],
                                       a.adversarials[eval_idx], a.labels[eval_idx])
                aucs.append(r.det_auc)
                prots.append(r.protected_adv_acc)
        variant = sets[0].config.get("variant", "")
        rows.append(MetricsReport(
            attack=label, beta=cfg.beta if variant else None, variant=variant,
            adv_acc=float(np.mean(accs)), det_auc=float(np.mean(aucs)) if aucs else None,
            protected_adv_acc=float(np.mean(prots)) if prots else None,
            l2_per_pixel=float(np.mean(l2s))))
    return rows


def evaluate_stage(cfg: RunConfig, model_path, advset_paths, detector_paths, out,
                   vuln_path=None) -> list[MetricsReport]:
    """Report rows for every adversarial set, plus PVAdv variants when a
    vulnerability net is given (composed from the first set's source
    perturbations). The random variant is averaged over five seeds.
    """
    with stage("evaluate"):
        model = CnnClassifier.load(model_path)
        detectors = {}
        for p in detector_paths:
            detectors[_detector_attack(p)] = DetectorModel.load(p)
        adv_sets: dict[str, list[AdversarialSet]] = {}
        for p in advset_paths:
            a = AdversarialSet.load(p)
            v = a.config.get("variant")
            adv_sets[f"{a.attack}:{v}" if v else a.attack] = [a]
        if vuln_path is not None:
            net = VulnNet.load(vuln_path)
            src = AdversarialSet.load(advset_paths[0])
            m = cfg.budget(src.originals.shape[1:])
            for v in cfg.variants:
                reps = RANDOM_REPEATS if v == "random" else 1
                adv_sets[f"pvadv_{src.attack}:{v}"] = [
                    pvadv_attack(net, src.originals, src.adversarials, m, v,
                                 seed=stage_seed(cfg.seed, f"gen-adv:{v}:{r}"),
                                 labels=src.labels, source_name=src.attack)
                    for r in range(reps)]
        if not adv_sets:
            raise ConfigError("evaluate needs at least one adversarial set")
        n = len(next(iter(adv_sets.values()))[0])
        _, eval_idx = _halves(cfg, n)
        rows = _advset_rows(cfg, model, adv_sets, detectors, eval_idx)
        if cfg.timing:
            _add_timing(cfg, model, rows, adv_sets, vuln_path)
        inputs = {"model": model_path}
        inputs.update({f"advset{i}": p for i, p in enumerate(advset_paths)})
        inputs.update({f"detector{i}": p for i, p in enumerate(detector_paths)})
        if vuln_path is not None:
            inputs["vuln"] = vuln_path
        write_report(rows, out, inputs, {"stage": "evaluate", "run": cfg.provenance()})
        if detectors:
            matrix = transfer_matrix(
                detectors, {k: (s[0].originals[eval_idx], s[0].adversarials[eval_idx],
                                s[0].labels[eval_idx]) for k, s in adv_sets.items()}, model)
            tpath = Path(out).with_name(Path(out).stem + "_transfer.csv")
            write_transfer_csv(matrix, tpath)
            _prov(tpath, cfg, "evaluate", inputs)
        return rows


def _add_timing(cfg, model, rows, adv_sets, vuln_path):
    """Seconds per 100 images, re-running each attack from scratch.

    Wall-clock numbers are not reproducible, so they are only written when
    ``timing`` is on.
    """
    net = VulnNet.load(vuln_path) if vuln_path is not None else None
    for row in rows:
        a = adv_sets[row.attack][0]
        k = min(100, len(a))
        x, y = a.originals[:k], a.labels[:k]
        name = a.attack.removeprefix("pvadv_")
        m = cfg.budget(x.shape[1:])
        t0 = time.perf_counter()
        xs = run_attack(name, model, x, y, cfg.attack_config(f"attack:{name}"),
                        m if name == "jsma" else None).adversarials
        if a.attack.startswith("pvadv_") and net is not None:
            pvadv_attack(net, x, xs, m, row.variant, seed=0, labels=y)
        row.seconds_per_100 = (time.perf_counter() - t0) * 100.0 / k


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM of ``image`` min-max scaled to 0..255."""
    a = np.asarray(image, dtype=np.float64)
    lo, hi = a.min(), a.max()
    scaled = np.zeros(a.shape) if hi <= lo else (a - lo) / (hi - lo)
    data = np.rint(scaled * 255.0).astype(np.uint8)
    h, w = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    parts = blob.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError("bad_magic", f"{path} is not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise DataError("bad_shape", f"{path}: maxval {maxval} != 255")
    return np.frombuffer(parts[4], dtype=np.uint8).reshape(h, w)


def export_maps_stage(cfg: RunConfig, vuln_path, out_dir, n_maps: int | None = None) -> Path:
    """PGM per test image plus ``probs.csv`` with one row of H*W probabilities each."""
    with stage("export-maps"):
        net = VulnNet.load(vuln_path)
        _, test = load_splits(cfg)
        k = min(n_maps or cfg.n_maps, len(test))
        vm = vuln_map(net, test.images[:k].astype(net.dtype))
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for i in range(k):
            p = out_dir / f"map_{i:04d}.pgm"
            write_pgm(p, vm.probs[i])
            _prov(p, cfg, "export-maps", {"vuln": vuln_path}, index=i)
        csv_path = out_dir / "probs.csv"
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            h, wd = vm.probs.shape[1:]
            w.writerow(["index", "label"] + [f"p_{r}_{c}" for r in range(h) for c in range(wd)])
            for i in range(k):
                w.writerow([i, int(test.labels[i])] + [repr(float(v)) for v in vm.probs[i].ravel()])
        _prov(csv_path, cfg, "export-maps", {"vuln": vuln_path})
        return csv_path


def run_pipeline(cfg: RunConfig) -> dict:
    """All stages in order under ``cfg.out_dir``; returns artifact paths."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = {
        "model": out / "model.ckpt",
        "source": out / f"advset_{cfg.attack}.ckpt",
        "vuln": out / f"vuln_{cfg.attack}.ckpt",
        "pvadv": out / f"advset_pvadv_{cfg.attack}_{cfg.variant}.ckpt",
        "det_source": out / f"det_{cfg.attack}.ckpt",
        "det_pvadv": out / f"det_pvadv_{cfg.attack}.ckpt",
        "report": out / "report.csv",
        "maps": out / "maps",
    }
    train_classifier_stage(cfg, p["model"])
    attack_stage(cfg, p["model"], p["source"])
    train_vulnmap_stage(cfg, p["model"], p["vuln"])
    gen_adv_stage(cfg, p["vuln"], p["source"], p["pvadv"])
    train_detector_stage(cfg, p["model"], p["source"], p["det_source"])
    train_detector_stage(cfg, p["model"], p["pvadv"], p["det_pvadv"])
    evaluate_stage(cfg, p["model"], [p["source"]], [p["det_source"], p["det_pvadv"]],
                   p["report"], vuln_path=p["vuln"])
    export_maps_stage(cfg, p["vuln"], p["maps"])
    p["transfer"] = out / "report_transfer.csv"
    return p
