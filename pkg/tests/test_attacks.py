import numpy as np
import pytest

from pvadv.attacks import (AdversarialSet, AttackConfig, fgsm, jsma, pgd, project, random_start,
                           run_attack, source_attack)
from pvadv.classifier import CnnClassifier, predict, train_classifier
from pvadv.data import synthetic_dataset

SMALL_ARCH = [("conv", 4, 3, 0), ("pool", 2)]


@pytest.fixture(scope="module")
def small_model():
    return CnnClassifier((1, 12, 12), 3, arch=SMALL_ARCH, seed=0, dtype=np.float64).freeze()


@pytest.fixture(scope="module")
def synth_model():
    ds = synthetic_dataset(1, 400, 16, 16, 4)
    model, _ = train_classifier(ds, batch=50, lr=3e-3, seed=0, arch="tiny", steps=200)
    return model, ds


def ball_violations(adv: AdversarialSet, eps: float) -> int:
    d = np.abs(adv.adversarials.astype(np.float64) - adv.originals)
    bad = (d.reshape(len(d), -1).max(axis=1) > eps + 1e-7)
    bad |= (adv.adversarials < 0).reshape(len(d), -1).any(axis=1)
    bad |= (adv.adversarials > 1).reshape(len(d), -1).any(axis=1)
    return int(bad.sum())


def changed_coords(adv: AdversarialSet) -> np.ndarray:
    d = adv.adversarials != adv.originals
    return d.any(axis=1).reshape(len(d), -1).sum(axis=1)


def test_ball_invariant_on_1000_random_runs(small_model):
    rng = np.random.default_rng(2024)
    violations = 0
    for run in range(1000):
        kind = ("fgsm", "pgd", "jsma")[run % 3]
        n = int(rng.integers(1, 4))
        eps = float(rng.uniform(0.01, 0.6))
        x = rng.random((n, 1, 12, 12))
        # push some pixels onto the box boundary
        x[rng.random(x.shape) < 0.2] = rng.integers(0, 2)
        y = rng.integers(0, 3, size=n)
        cfg = AttackConfig(epsilon=eps, steps=int(rng.integers(1, 4)),
                           step_size=float(rng.uniform(0.1, 2.0)) * eps,
                           random_init=bool(rng.integers(2)), seed=run)
        before = x.copy()
        if kind == "jsma":
            budget = int(rng.integers(0, 8))
            adv = jsma(small_model, x, y, budget, cfg)
            assert np.all(changed_coords(adv) <= budget)
        else:
            adv = run_attack(kind, small_model, x, y, cfg)
        np.testing.assert_array_equal(x, before)
        violations += ball_violations(adv, eps)
    assert violations == 0


def test_project_keeps_both_constraints():
    rng = np.random.default_rng(0)
    x = rng.random((50, 1, 4, 4))
    out = project(x + rng.normal(scale=2.0, size=x.shape), x, 0.3)
    assert out.min() >= 0 and out.max() <= 1
    assert np.abs(out - x).max() <= 0.3 + 1e-12


def test_fgsm_flat_model_is_identity():
    model = CnnClassifier((1, 12, 12), 3, arch=SMALL_ARCH, seed=0)
    model.params["out.w"].data[:] = 0
    model.freeze()
    x = np.random.default_rng(1).random((4, 1, 12, 12)).astype(np.float32)
    adv = fgsm(model, x, np.array([0, 1, 2, 0]), AttackConfig(epsilon=0.3))
    np.testing.assert_array_equal(adv.adversarials, x)


def test_fgsm_magnitudes_are_zero_or_eps(small_model):
    # interior pixels so clipping never acts
    x = 0.4 + 0.2 * np.random.default_rng(3).random((5, 1, 12, 12))
    adv = fgsm(small_model, x, np.arange(5) % 3, AttackConfig(epsilon=0.25))
    d = np.abs(adv.adversarials - x)
    assert np.all(np.isclose(d, 0) | np.isclose(d, 0.25))


def test_pgd_single_step_equals_fgsm(synth_model):
    model, ds = synth_model
    x, y = ds.images[:20], ds.labels[:20]
    cfg = AttackConfig(epsilon=0.2, steps=1, step_size=0.2, random_init=False)
    np.testing.assert_array_equal(pgd(model, x, y, cfg).adversarials,
                                  fgsm(model, x, y, cfg).adversarials)


def test_pgd_deterministic_and_batch_invariant(synth_model):
    model, ds = synth_model
    x, y = ds.images[:30], ds.labels[:30]
    a = pgd(model, x, y, AttackConfig(epsilon=0.2, steps=3, seed=5, batch=30)).adversarials
    b = pgd(model, x, y, AttackConfig(epsilon=0.2, steps=3, seed=5, batch=7)).adversarials
    np.testing.assert_array_equal(a, b)


def test_random_start_inside_ball():
    x = np.random.default_rng(0).random((10, 1, 5, 5))
    r = random_start(x, 0.1, seed=3)
    assert np.abs(r - x).max() <= 0.1 and r.min() >= 0 and r.max() <= 1
    assert not np.array_equal(r, x)


def test_attacks_lower_accuracy(synth_model):
    model, ds = synth_model
    x, y = ds.images[:200], ds.labels[:200]
    clean = np.mean(predict(model, x) == y)
    cfg = AttackConfig(epsilon=0.3, steps=10)
    assert np.mean(predict(model, fgsm(model, x, y, cfg).adversarials) == y) < clean
    assert np.mean(predict(model, pgd(model, x, y, cfg).adversarials) == y) < 0.1


def test_jsma_budget_zero_returns_originals(synth_model):
    model, ds = synth_model
    adv = jsma(model, ds.images[:5], ds.labels[:5], 0, AttackConfig(epsilon=0.3))
    np.testing.assert_array_equal(adv.adversarials, ds.images[:5])


@pytest.mark.parametrize("budget", [1, 5, 20])
def test_jsma_respects_budget(synth_model, budget):
    model, ds = synth_model
    adv = jsma(model, ds.images[:20], ds.labels[:20], budget, AttackConfig(epsilon=0.5))
    assert np.all(changed_coords(adv) <= budget)
    assert ball_violations(adv, 0.5) == 0


def test_jsma_rejects_oversized_budget(synth_model):
    model, ds = synth_model
    with pytest.raises(ValueError):
        jsma(model, ds.images[:1], ds.labels[:1], 16 * 16 + 1, AttackConfig())


def test_attack_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=0)
    with pytest.raises(ValueError):
        AttackConfig(steps=0)
    assert AttackConfig(epsilon=0.3).step_size == pytest.approx(0.03)


def test_advset_round_trip(synth_model, tmp_path):
    model, ds = synth_model
    adv = fgsm(model, ds.images[:4], ds.labels[:4], AttackConfig(epsilon=0.1))
    adv.save(tmp_path / "a.ckpt")
    back = AdversarialSet.load(tmp_path / "a.ckpt")
    assert back.attack == "fgsm"
    np.testing.assert_array_equal(back.adversarials, adv.adversarials)
    np.testing.assert_array_equal(back.labels, adv.labels)


def test_source_attack_seed_controls_pgd(synth_model):
    model, ds = synth_model
    s = source_attack("pgd", AttackConfig(epsilon=0.3, steps=2))
    a = s(model, ds.images[:4], ds.labels[:4], 1)
    b = s(model, ds.images[:4], ds.labels[:4], 1)
    c = s(model, ds.images[:4], ds.labels[:4], 2)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
