import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from pvadv import tensor as T
from pvadv.classifier import CnnClassifier, predict, train_classifier
from pvadv.attacks import AttackConfig, pgd, source_attack
from pvadv.data import synthetic_dataset
from pvadv.tensor import Tensor
from pvadv.vulnmap import (VulnMap, VulnNet, VulnTrainConfig, _flat_softmax, budget_from_beta,
                           compose_adversarial, concrete_draws, mi_loss, pvadv_attack,
                           sample_hard_mask, sample_relaxed_mask, select_mask_variant,
                           train_vulnmap, vuln_map)

from helpers import check_grad


def make_map(theta) -> VulnMap:
    theta = np.asarray(theta, dtype=np.float64)
    return VulnMap(theta, _flat_softmax(theta))


@pytest.mark.parametrize("beta,hw,m", [(0.3, 28, 235), (0.5, 28, 392), (0.7, 28, 549),
                                       (0.5, 2, 2), (0.125, 4, 2)])
def test_budget_rounding(beta, hw, m):
    assert budget_from_beta(beta, hw, hw) == m


def test_vulnnet_output_shape_any_channels():
    for c in (1, 3):
        net = VulnNet((c, 16, 12), seed=0, width=4, latent=8)
        assert net.forward(np.zeros((2, c, 16, 12), np.float32)).shape == (2, 16, 12)


def test_vulnnet_rejects_bad_input():
    net = VulnNet((1, 16, 16), width=4, latent=8)
    with pytest.raises(ValueError):
        net.forward(np.zeros((1, 1, 12, 12), np.float32))
    with pytest.raises(ValueError):
        VulnNet((1, 14, 14))


def test_zeroed_net_gives_uniform_map():
    net = VulnNet((1, 16, 16), width=4, latent=8).zero_output()
    vm = vuln_map(net, np.random.default_rng(0).random((3, 1, 16, 16)))
    np.testing.assert_allclose(vm.probs, 1 / 256, rtol=1e-12)


def test_map_is_deterministic_distribution():
    net = VulnNet((1, 16, 16), width=4, latent=8, seed=1)
    x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
    a, b = vuln_map(net, x), vuln_map(net, x)
    np.testing.assert_array_equal(a.probs, b.probs)
    assert np.all(a.probs > 0)
    np.testing.assert_allclose(a.probs.reshape(2, -1).sum(axis=1), 1.0, atol=1e-6)


def test_vulnnet_checkpoint_round_trip(tmp_path):
    net = VulnNet((1, 16, 16), width=4, latent=8, seed=3)
    net.save(tmp_path / "v.ckpt")
    back = VulnNet.load(tmp_path / "v.ckpt")
    x = np.random.default_rng(0).random((2, 1, 16, 16)).astype(np.float32)
    assert vuln_map(back, x).probs.tobytes() == vuln_map(net, x).probs.tobytes()


# ---------------------------------------------------------------- hard masks


def test_hard_mask_single_draw_selects_one_pixel():
    vm = make_map(np.random.default_rng(0).normal(size=(50, 5, 5)))
    z = sample_hard_mask(vm, 1, np.random.default_rng(1)).z
    assert np.all(z.reshape(50, -1).sum(axis=1) == 1)


def test_hard_mask_degenerate_distribution():
    theta = np.full((1, 6, 6), -1e4)
    theta[0, 3, 4] = 0.0
    for m in (1, 7, 36):
        z = sample_hard_mask(make_map(theta), m, np.random.default_rng(m)).z
        assert z.sum() == 1 and z[0, 3, 4] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**31 - 1))
def test_hard_mask_popcount_bounds(m, seed):
    rng = np.random.default_rng(seed)
    vm = make_map(rng.normal(scale=3, size=(4, 6, 5)))
    z = sample_hard_mask(vm, m, rng).z
    pop = z.reshape(4, -1).sum(axis=1)
    assert np.all((pop >= 1) & (pop <= m))
    assert set(np.unique(z)) <= {0.0, 1.0}


def test_hard_mask_coverage_grows_with_m():
    vm = make_map(np.tile(np.random.default_rng(0).normal(size=(1, 6, 6)), (4000, 1, 1)))
    means = [sample_hard_mask(vm, m, np.random.default_rng(m)).z.sum() / 4000
             for m in (1, 3, 6, 12, 24)]
    assert all(b >= a for a, b in zip(means, means[1:]))


def test_hard_mask_rejects_bad_m():
    vm = make_map(np.zeros((1, 3, 3)))
    for m in (0, 10):
        with pytest.raises(ValueError):
            sample_hard_mask(vm, m, np.random.default_rng(0))


# ---------------------------------------------------------------- relaxed masks


def test_concrete_draws_lie_on_simplex():
    rng = np.random.default_rng(0)
    theta = Tensor(rng.normal(size=(3, 5, 5)))
    d = concrete_draws(theta, 7, 0.5, np.random.default_rng(1)).data
    assert d.shape == (3, 7, 25)
    np.testing.assert_allclose(d.sum(axis=2), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 25), st.floats(0.05, 5.0), st.integers(0, 2**31 - 1))
def test_relaxed_mask_bounds(m, tau, seed):
    rng = np.random.default_rng(seed)
    mask = sample_relaxed_mask(Tensor(rng.normal(size=(2, 5, 5))), m, tau, rng)
    z = mask.z.data.reshape(2, -1)
    assert np.all(z > 0) and np.all(z <= 1)
    s = z.sum(axis=1)
    assert np.all(s >= 1 - 1e-9) and np.all(s <= m + 1e-9)
    np.testing.assert_allclose(mask.draws.sum(axis=2), 1.0, atol=1e-6)


def test_relaxed_mask_equals_max_of_draws():
    theta = Tensor(np.random.default_rng(0).normal(size=(2, 4, 4)))
    a = sample_relaxed_mask(theta, 5, 0.7, np.random.default_rng(9)).z.data
    b = T.amax(concrete_draws(theta, 5, 0.7, np.random.default_rng(9)), axis=1).data
    np.testing.assert_allclose(a.reshape(2, -1), b, rtol=1e-12)


def _gap_exceeds(p: np.ndarray, delta: float) -> float:
    """P(top Gumbel-perturbed log-prob beats the runner-up by more than delta).

    Conditioned on coordinate i winning, its lead over the best rival is
    logistic with location logit(p_i), so the event has probability
    sum_i p_i / (p_i + (1 - p_i) e^delta).
    """
    return float(np.sum(p / (p + (1 - p) * np.exp(delta))))


def test_low_temperature_single_draw_is_nearly_one_hot():
    # the largest entry exceeds 0.99 iff the runner-up terms sum below 1/99;
    # bracket that by the top-two gap event with and without the other rivals
    n, tau = 20000, 0.01
    theta = np.random.default_rng(0).normal(size=(1, 4, 4))
    p = _flat_softmax(theta).ravel()
    z = sample_relaxed_mask(Tensor(np.repeat(theta, n, axis=0)), 1, tau,
                            np.random.default_rng(1)).z.data
    rate = np.mean(z.reshape(n, -1).max(axis=1) > 0.99)
    upper = _gap_exceeds(p, tau * np.log(99))
    lower = _gap_exceeds(p, tau * np.log(99 * 15))
    se = np.sqrt(upper * (1 - upper) / n)
    assert lower - 4 * se <= rate <= upper + 4 * se
    assert rate > 0.9


def test_low_temperature_argmax_follows_categorical():
    n = 50000
    theta = np.random.default_rng(3).normal(size=(1, 3, 3))
    p = _flat_softmax(theta).ravel()
    d = concrete_draws(Tensor(np.repeat(theta, n // 5, axis=0)), 5, 0.05,
                       np.random.default_rng(4)).data
    freq = np.bincount(d.argmax(axis=2).ravel(), minlength=9) / n
    assert np.all(np.abs(freq - p) <= 4 * np.sqrt(p * (1 - p) / n))


def test_relaxed_mask_gradient_matches_finite_differences():
    theta = np.random.default_rng(0).normal(size=(2, 3, 3))
    g = np.random.default_rng(1)

    def build(t):
        return T.tsum(sample_relaxed_mask(t, 4, 0.5, np.random.default_rng(5)).z)

    assert check_grad(build, theta) < 1e-3
    weights = g.normal(size=(2, 3, 3))

    def weighted(t):
        return T.tsum(sample_relaxed_mask(t, 4, 0.5, np.random.default_rng(5)).z * weights)

    assert check_grad(weighted, theta) < 1e-3


# ---------------------------------------------------------------- composition


def test_compose_extremes_and_midpoint():
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 4, 4))
    xs = np.clip(x + rng.uniform(-0.3, 0.3, x.shape), 0, 1)
    np.testing.assert_array_equal(compose_adversarial(x, xs, np.ones((2, 4, 4))), xs)
    np.testing.assert_array_equal(compose_adversarial(x, xs, np.zeros((2, 4, 4))), x)
    np.testing.assert_allclose(compose_adversarial(x, xs, np.full((2, 4, 4), 0.5)), (x + xs) / 2)


def test_compose_broadcasts_mask_over_channels():
    x = np.zeros((1, 3, 2, 2))
    xs = np.ones((1, 3, 2, 2))
    z = np.array([[[1.0, 0.0], [0.0, 0.0]]])
    out = compose_adversarial(x, xs, z)
    assert np.all(out[0, :, 0, 0] == 1) and out.sum() == 3


def test_compose_tensor_path_matches_numpy():
    rng = np.random.default_rng(1)
    x, xs, z = rng.random((2, 1, 3, 3)), rng.random((2, 1, 3, 3)), rng.random((2, 3, 3))
    np.testing.assert_allclose(compose_adversarial(x, xs, Tensor(z)).data,
                               compose_adversarial(x, xs, z))


def test_compose_shape_mismatch():
    with pytest.raises(ValueError):
        compose_adversarial(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 3, 3)), np.zeros((1, 2, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.5))
def test_composition_stays_in_ball(seed, eps):
    rng = np.random.default_rng(seed)
    x = rng.random((3, 2, 4, 4))
    xs = np.clip(np.clip(x + rng.uniform(-1, 1, x.shape), 0, 1), x - eps, x + eps)
    z = rng.random((3, 4, 4))
    z[rng.random(z.shape) < 0.3] = 1.0
    out = compose_adversarial(x, xs, z)
    assert np.abs(out - x).max() <= np.abs(xs - x).max() + 1e-12 <= eps + 1e-9
    assert out.min() >= 0 and out.max() <= 1


# ---------------------------------------------------------------- objective


def test_mi_loss_examples():
    ps = np.zeros((1, 10))
    ps[0, 2] = 1.0
    assert mi_loss(ps, np.full((1, 10), 0.1)).item() == pytest.approx(np.log(10))
    p = np.random.default_rng(0).dirichlet(np.ones(5), size=4)
    ent = -(p * np.log(p)).sum() / 4
    assert mi_loss(p, p).item() == pytest.approx(ent)


def test_mi_loss_minimized_at_source():
    rng = np.random.default_rng(1)
    for _ in range(200):
        ps = rng.dirichlet(np.ones(6), size=3)
        other = rng.dirichlet(np.ones(6), size=3)
        assert mi_loss(ps, other).item() > mi_loss(ps, ps).item()


def test_mi_loss_floor_handles_zero_probability():
    ps = np.array([[0.5, 0.5]])
    val = mi_loss(ps, np.array([[1.0, 0.0]])).item()
    assert np.isfinite(val) and val == pytest.approx(0.5 * -np.log(1e-12))


def test_mi_loss_does_not_backprop_into_source():
    ps = Tensor(np.array([[0.3, 0.7]]), requires_grad=True)
    pa = Tensor(np.array([[0.4, 0.6]]), requires_grad=True)
    T.backward(mi_loss(ps, pa), inputs=[ps])
    assert np.all(ps.grad == 0)
    np.testing.assert_allclose(pa.grad, [[-0.3 / 0.4, -0.7 / 0.6]])


# ---------------------------------------------------------------- variants


def test_variants_select_expected_coordinates():
    theta = np.random.default_rng(0).normal(size=(3, 6, 6))
    vm = make_map(theta)
    rng = np.random.default_rng(1)
    top = select_mask_variant(vm, 10, "topk", rng).z.reshape(3, -1)
    rev = select_mask_variant(vm, 10, "reverse", rng).z.reshape(3, -1)
    ran = select_mask_variant(vm, 10, "random", rng).z.reshape(3, -1)
    assert np.all(top.sum(1) == 10) and np.all(rev.sum(1) == 10) and np.all(ran.sum(1) == 10)
    assert not np.any(top * rev)
    flat = theta.reshape(3, -1)
    for i in range(3):
        assert flat[i][top[i] == 1].min() > flat[i][top[i] == 0].max()
        assert flat[i][rev[i] == 1].max() < flat[i][rev[i] == 0].min()


def test_full_budget_selects_everything():
    vm = make_map(np.random.default_rng(0).normal(size=(2, 3, 3)))
    for v in ("topk", "reverse", "random"):
        assert select_mask_variant(vm, 9, v, np.random.default_rng(0)).z.sum() == 18
    with pytest.raises(ValueError):
        select_mask_variant(vm, 3, "best", np.random.default_rng(0))


# ---------------------------------------------------------------- training


@pytest.fixture(scope="module")
def synth_setup():
    ds = synthetic_dataset(2, 300, 16, 16, 4)
    model, _ = train_classifier(ds, batch=50, lr=3e-3, seed=0, arch="tiny", steps=200)
    return model, ds


def test_training_makes_progress_and_leaves_classifier_alone(synth_setup):
    model, ds = synth_setup
    before = {k: v.data.tobytes() for k, v in model.params.items()}
    net = VulnNet((1, 16, 16), seed=0, width=8, latent=32)
    src = source_attack("pgd", AttackConfig(epsilon=0.3, steps=5))
    net, trace = train_vulnmap(net, model, src, ds, 40,
                               VulnTrainConfig(lr=3e-3, batch=50, max_iters=51, patience=1000))
    assert trace.iterations == 51
    assert np.mean(trace.losses[-5:]) < trace.losses[0]
    assert all(model.params[k].data.tobytes() == b for k, b in before.items())


def test_training_is_deterministic(synth_setup):
    model, ds = synth_setup
    src = source_attack("fgsm", AttackConfig(epsilon=0.3))

    def run():
        net = VulnNet((1, 16, 16), seed=0, width=4, latent=8)
        net, tr = train_vulnmap(net, model, src, ds, 20,
                                VulnTrainConfig(lr=1e-3, batch=20, max_iters=4, seed=7))
        return tr.losses, net.params["dec3.w"].data.tobytes()

    assert run() == run()


def test_early_stop_on_constant_loss():
    class Stub(CnnClassifier):
        def forward(self, x):
            return super().forward(x) * 0.0

    model = Stub((1, 16, 16), 4, arch="tiny").freeze()
    ds = synthetic_dataset(0, 40, 16, 16, 4)
    src = source_attack("fgsm", AttackConfig(epsilon=0.3))
    net = VulnNet((1, 16, 16), width=4, latent=8)
    net, trace = train_vulnmap(net, model, src, ds, 10,
                               VulnTrainConfig(batch=20, max_iters=500, patience=10))
    assert trace.stop_reason == "plateau"
    assert trace.iterations == 11


def test_nan_loss_restores_last_good(synth_setup):
    model, ds = synth_setup
    src = source_attack("fgsm", AttackConfig(epsilon=0.3))
    net = VulnNet((1, 16, 16), width=4, latent=8)
    good = {k: v.data.copy() for k, v in net.params.items()}
    net.params["enc1.b"].data[:] = np.nan
    with pytest.raises(FloatingPointError):
        train_vulnmap(net, model, src, ds, 10, VulnTrainConfig(batch=20, max_iters=3))
    assert np.isnan(net.params["enc1.b"].data).all()
    assert np.array_equal(net.params["dec3.w"].data, good["dec3.w"])


def test_full_budget_matches_source(synth_setup):
    model, ds = synth_setup
    x, y = ds.images[:50], ds.labels[:50]
    xs = pgd(model, x, y, AttackConfig(epsilon=0.3, steps=5)).adversarials
    net = VulnNet((1, 16, 16), width=4, latent=8)
    for v in ("topk", "reverse", "random"):
        adv = pvadv_attack(net, x, xs, 256, v, labels=y)
        np.testing.assert_array_equal(adv.adversarials, xs)
        assert np.array_equal(predict(model, adv.adversarials), predict(model, xs))


def test_hard_mask_frequencies_family_wise():
    # every cell of 20 random maps against 1 - (1 - p)^M, Sidak-corrected at 1%
    rng = np.random.default_rng(77)
    draws, scores = 100_000, []
    for case in range(20):
        h, w = (int(v) for v in rng.integers(2, 5, size=2))
        theta = rng.normal(scale=1.5, size=(h, w))
        m = int(rng.integers(1, h * w + 1))
        p = np.exp(theta - theta.max())
        p /= p.sum()
        vm = VulnMap(np.broadcast_to(theta, (draws, h, w)), np.broadcast_to(p, (draws, h, w)))
        freq = sample_hard_mask(vm, m, np.random.default_rng([case, 5])).z.mean(
            axis=0, dtype=np.float64)
        want = 1.0 - (1.0 - p) ** m
        se = np.sqrt(np.maximum(want * (1 - want), 1e-300) / draws)
        scores.append((np.abs(freq - want) / se).ravel())
    scores = np.concatenate(scores)
    limit = norm.isf((1 - 0.99 ** (1 / len(scores))) / 2)
    assert scores.max() <= limit
