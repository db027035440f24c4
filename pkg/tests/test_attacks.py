import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bpfa.attacks import (
    AttackConfig,
    bank_bytes,
    box_bounds,
    craft,
    dfanet_dropout,
    di_transform,
    _di_backward,
    _di_draw,
    _di_apply,
    dropout_sites,
    embedding_distance,
    loss_at_second_iteration,
    loss_dodging,
    loss_impersonation,
    preset,
    run_attack,
    run_attack_batch,
)
from bpfa.data import DatasetParams, FacePair, generate, sample_pairs
from bpfa.nn import forward_plain
from conftest import central_diff, rel_err, small_conv_net, small_mlp


def _images(n, seed=0):
    return np.random.default_rng(seed).uniform(20, 235, size=(n, 1, 8, 8))


def _setup(n=4, seed=0, net=None):
    net = net or small_conv_net(seed)
    x = _images(n, seed)
    ref = forward_plain(net, _images(n, seed + 100))
    return net, x, ref


# --- losses ----------------------------------------------------------------


def test_impersonation_loss_examples():
    e = np.array([3.0, 4.0])
    assert loss_impersonation(e, e)[0] == pytest.approx(0.0)
    assert loss_impersonation(np.array([1.0, 0.0]), np.array([0.0, 2.0]))[0] == pytest.approx(2.0)
    assert loss_impersonation(np.array([1.0, 0.0]), np.array([-5.0, 0.0]))[0] == pytest.approx(4.0)


def test_dodging_is_negated_impersonation(rng):
    a, b = rng.standard_normal((2, 6, 5))
    li, gi = loss_impersonation(a, b)
    ld, gd = loss_dodging(a, b)
    assert np.allclose(ld, -li) and np.allclose(gd, -gi)


def test_loss_gradient_matches_finite_differences(rng):
    a, b = rng.standard_normal((2, 5))
    _, g = loss_impersonation(a, b)
    fd = central_diff(lambda v: loss_impersonation(v, b)[0], a, range(5))
    assert np.all(rel_err(g, fd) < 1e-6)


def test_loss_shape_mismatch_errors():
    with pytest.raises(ValueError):
        loss_impersonation(np.ones(4), np.ones(5))


@settings(max_examples=30, deadline=None)
@given(s=st.floats(0.1, 100), seed=st.integers(0, 1000))
def test_embedding_distance_scale_invariant_and_bounded(s, seed):
    a, b = np.random.default_rng(seed).standard_normal((2, 3, 7))
    d = embedding_distance(a, b)
    assert np.allclose(d, embedding_distance(s * a, b))
    assert np.all((d >= 0) & (d <= 4 + 1e-12))


# --- augmentations -----------------------------------------------------------


def test_di_probability_zero_is_identity(rng):
    x = _images(1)[0]
    assert np.array_equal(di_transform(x, 0.0, rng), x)


def test_di_always_transforms_at_probability_one(rng):
    x = _images(1)[0] + 1.0
    for _ in range(20):
        y = di_transform(x, 1.0, rng)
        assert y.shape == x.shape
        # every output pixel is either padding or a copy of some input pixel
        assert np.all(np.isin(y[y != 0], x))


def test_di_application_rate_matches_probability():
    rng = np.random.default_rng(0)
    hits = sum(_di_draw((1, 16, 16), 0.5, rng, 0.8) is not None for _ in range(4000))
    assert abs(hits / 4000 - 0.5) < 0.03


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_di_backward_is_adjoint(seed):
    rng = np.random.default_rng(seed)
    draw = _di_draw((2, 9, 7), 1.0, rng, 0.5)
    x, g = rng.standard_normal((2, 2, 9, 7))
    assert np.dot(_di_apply(x, draw).ravel(), g.ravel()) == pytest.approx(np.dot(x.ravel(), _di_backward(g, draw).ravel()))


def test_dropout_rate_zero_is_identity(rng):
    a = rng.standard_normal((3, 4, 4))
    assert np.array_equal(dfanet_dropout(a, 0.0, rng), a)


def test_dropout_is_unbiased_and_drops_at_rate():
    rng = np.random.default_rng(0)
    a = np.full((50_000,), 2.0)
    out = dfanet_dropout(a, 0.1, rng)
    assert abs(np.mean(out == 0) - 0.1) < 0.01
    assert abs(out.mean() - 2.0) < 0.02
    assert np.allclose(out[out != 0], 2.0 / 0.9)


def test_dropout_rate_one_rejected(rng):
    with pytest.raises(ValueError):
        dfanet_dropout(np.ones(3), 1.0, rng)


def test_dropout_sites():
    assert dropout_sites(small_conv_net()) == small_conv_net().indices_of_kind("conv2d")
    assert dropout_sites(small_mlp()) == [2]


# --- configs -----------------------------------------------------------------


@pytest.mark.parametrize("kw", [{"epsilon": -1}, {"beta": 0}, {"n_max": 0}, {"mode": "x"}, {"drop_rate": 1.0}, {"di_prob": 2}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        AttackConfig(**kw)


def test_presets():
    assert preset("FMDN").mi and preset("FMDN").di and preset("FMDN").dfanet
    assert preset("FIM", eta=0.5).eta == 0
    assert preset("FIM+BPFA", eta=0.5).eta == 0.5
    assert preset("FIM+APFA", eta=0.5).eta == -0.5
    with pytest.raises(KeyError):
        preset("PGD")


# --- engine ------------------------------------------------------------------


@pytest.mark.parametrize("base", ["FIM", "MI", "DI", "DFANet", "FMD", "FMDN"])
def test_zero_step_degenerates_to_baseline_bitwise(base):
    net, x, ref = _setup()
    a = craft(net, x, ref, preset(base, n_max=8))
    b = craft(net, x, ref, preset(base + "+BPFA", eta=0.0, n_max=8))
    assert a.x_adv.tobytes() == b.x_adv.tobytes()


def test_single_iteration_bpfa_equals_baseline():
    net, x, ref = _setup()
    a = craft(net, x, ref, preset("FMDN", n_max=1))
    b = craft(net, x, ref, preset("FMDN+BPFA", eta=1.0, n_max=1))
    assert np.array_equal(a.x_adv, b.x_adv)
    assert b.used_bank_tags == []


def test_one_iteration_moves_each_pixel_by_at_most_beta():
    net, x, ref = _setup()
    res = craft(net, x, ref, preset("FIM+BPFA", eta=0.3, n_max=1, beta=0.5))
    assert np.max(np.abs(res.x_adv - x)) <= 0.5 and res.losses.shape == (1, len(x))


def test_each_bank_feeds_exactly_the_next_forward():
    net, x, ref = _setup()
    res = craft(net, x, ref, preset("FIM+BPFA", eta=0.3, n_max=6))
    assert res.used_bank_tags == [1, 2, 3, 4, 5]


def test_nonzero_step_changes_the_result():
    net, x, ref = _setup()
    a = craft(net, x, ref, preset("FIM", n_max=6))
    b = craft(net, x, ref, preset("FIM+BPFA", eta=0.5, n_max=6))
    assert not np.array_equal(a.x_adv, b.x_adv)


@settings(max_examples=15, deadline=None)
@given(
    eps=st.floats(0, 20),
    beta=st.floats(0.1, 5),
    n=st.integers(1, 6),
    eta=st.floats(-1, 1),
    base=st.sampled_from(["FIM", "FMDN"]),
    seed=st.integers(0, 100),
)
def test_output_stays_in_box_and_pixel_range(eps, beta, n, eta, base, seed):
    net, _, ref = _setup(3, 0)
    x = np.random.default_rng(seed).choice([0.0, 3.0, 128.0, 252.0, 255.0], size=(3, 1, 8, 8))
    res = craft(net, x, ref, preset(base + "+BPFA", eta=eta, epsilon=eps, beta=beta, n_max=n))
    assert np.max(np.abs(res.x_adv - x)) <= eps
    assert res.x_adv.min() >= 0 and res.x_adv.max() <= 255


@settings(max_examples=200, deadline=None)
@given(
    x=st.lists(st.floats(0, 255, allow_nan=False), min_size=1, max_size=50),
    eps=st.floats(0, 64, allow_nan=False),
)
def test_box_bounds_hold_exactly_in_floating_point(x, eps):
    x = np.array(x)
    lo, hi = box_bounds(x, eps)
    assert np.all(lo <= hi)
    assert np.all(x - lo <= eps) and np.all(hi - x <= eps)
    assert np.all(lo >= 0) and np.all(hi <= 255)


def test_epsilon_zero_leaves_input_unchanged():
    net, x, ref = _setup()
    assert np.array_equal(craft(net, x, ref, preset("FMDN+BPFA", eta=0.2, epsilon=0, n_max=5)).x_adv, x)


def test_batch_results_match_individual_runs():
    net, x, ref = _setup(3)
    cfg = preset("FMDN+BPFA", eta=0.2, n_max=5)
    seeds = [[7, i] for i in range(3)]
    batch = craft(net, x, ref, cfg, seeds=seeds).x_adv
    for i in range(3):
        single = craft(net, x[i:i + 1], ref[i:i + 1], cfg, seeds=[seeds[i]]).x_adv
        assert np.allclose(single[0], batch[i], atol=1e-9)


def test_impersonation_lowers_distance():
    net, x, ref = _setup(6)
    res = craft(net, x, ref, preset("FIM", n_max=20, epsilon=40))
    assert np.all(res.losses[-1] < res.losses[0])


def test_feature_step_raises_injected_loss_over_plain():
    net, x, ref = _setup(6)
    res = craft(net, x, ref, preset("FIM+BPFA", eta=0.2, n_max=10), record_plain=True)
    assert np.isnan(res.plain_losses[0]).sum() == 0
    later = res.losses[1:] > res.plain_losses[1:]
    assert later.mean() >= 0.9
    # no bank at t=1, so the first injected loss equals the plain loss
    assert np.allclose(res.losses[0], res.plain_losses[0])


def test_second_iteration_loss_monotone_in_step():
    net, x, ref = _setup(4)
    etas = [0.0, 0.05, 0.1, 0.2, 0.4]
    losses = loss_at_second_iteration(net, x, ref, preset("FIM+BPFA", eta=0.1), etas).mean(axis=1)
    assert np.all(np.diff(losses) > 0)


def test_negative_step_lowers_second_iteration_loss():
    net, x, ref = _setup(4)
    l0, lneg = loss_at_second_iteration(net, x, ref, preset("FIM+BPFA"), [0.0, -0.02]).mean(axis=1)
    assert lneg < l0


def test_bank_bytes_examples():
    net = small_conv_net(bn=True)
    # conv1 (3x8x8) and conv2 (4x4x4), float64
    assert bank_bytes(preset("FIM+BPFA", eta=0.1), net) == (3 * 64 + 4 * 16) * 8
    assert bank_bytes(preset("FIM+BPFA", hooks="batchnorm"), net) == 3 * 64 * 8
    assert bank_bytes(preset("FIM+BPFA", hooks=[3]), net) == 3 * 64 * 8


def test_recorded_bank_size_matches_accounting():
    net, x, ref = _setup(1)
    cfg = preset("FIM+BPFA", eta=0.1, n_max=3)
    res = craft(net, x, ref, cfg)
    assert res.bank_bytes == [bank_bytes(cfg, net)] * 3


def test_unhookable_layer_rejected():
    net, x, ref = _setup(1)
    with pytest.raises(ValueError):
        craft(net, x, ref, preset("FIM+BPFA", eta=0.1, hooks="dense", n_max=2))


def test_run_attack_rejects_positive_pair_for_impersonation():
    ds = generate(DatasetParams(num_identities=3, images_per_identity=3, image_shape=(1, 8, 8)))
    net = small_conv_net()
    pos = sample_pairs(ds, 1, "positive", 0)[0]
    with pytest.raises(ValueError):
        run_attack(net, pos, preset("FIM", n_max=1), ds)
    with pytest.raises(ValueError):
        run_attack_batch(net, ds, [pos], preset("FIM", n_max=1))
    x, rows = run_attack(net, pos, preset("FIM", mode="dodging", n_max=2), ds)
    assert x.shape == (1, 8, 8) and [r["t"] for r in rows] == [1, 2]


def test_single_pair_matches_batch():
    ds = generate(DatasetParams(num_identities=3, images_per_identity=3, image_shape=(1, 8, 8)))
    net = small_conv_net()
    pair = FacePair(0, 4, 0, 1, "negative")
    cfg = preset("FIM+BPFA", eta=0.2, n_max=4)
    single, _ = run_attack(net, pair, cfg, ds)
    batch = run_attack_batch(net, ds, [pair], cfg).x_adv[0]
    assert np.allclose(single, batch)


def test_mlp_surrogate_runs_with_default_hooks():
    net, x, ref = _setup(2, net=small_mlp())
    res = craft(net, x, ref, preset("FMDN+BPFA", eta=0.2, n_max=3))
    assert res.used_bank_tags == [1, 2]
    assert res.bank_bytes[0] == 2 * 12 * 8  # one entry per sample
