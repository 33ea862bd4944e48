import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import trapezoid
from scipy.stats import multivariate_normal

from hipnav import datakit, imitative
from hipnav.config import ModelConfig, TrainConfig
from hipnav.imitative import LOG2PI

TINY = ModelConfig(patch_cells=2, enc_hidden=(8, 8), step_hidden=8, map_channels=2)


def tiny_inputs(rng, cfg=TINY, n=None):
    lead = () if n is None else (n,)
    patch = rng.uniform(0, 1, lead + (cfg.patch_cells, cfg.patch_cells, cfg.channels))
    past = np.cumsum(rng.normal(0.1, 0.1, lead + (cfg.past, 2)), axis=-2)
    past -= past[..., -1:, :]
    tau = np.cumsum(rng.normal(0.2, 0.2, lead + (cfg.horizon, 2)), axis=-2)
    return patch, past, tau


def constant_velocity_model(cfg=TINY):
    """Residual 0 and S = sigma_floor * I for every input."""
    m = imitative.init_model(cfg, 0)
    for k in m.params:
        if k.startswith("step."):
            m.params[k][...] = 0.0
    m.params["step.b1"][2:4] = -1e3
    return m


# ---------------------------------------------------------------- constants


def test_sigma_floor_matches_eta():
    cfg = ModelConfig()
    assert cfg.sigma_floor == pytest.approx(0.016262, abs=1e-5)
    assert cfg.horizon * (-LOG2PI - 2 * math.log(cfg.sigma_floor)) == pytest.approx(64.0, abs=1e-12)


# ---------------------------------------------------------------- encode


def test_encode_deterministic(rng):
    m = imitative.init_model(TINY, 1)
    patch, past, _ = tiny_inputs(rng)
    assert np.array_equal(imitative.encode(m, patch=patch, past=past), imitative.encode(m, patch=patch, past=past))


def test_encode_zero_weights_zero_context(rng):
    m = imitative.init_model(TINY, 1)
    for k in m.params:
        if k.startswith(("enc.", "map.")):
            m.params[k][...] = 0.0
    patch, past, _ = tiny_inputs(rng)
    ctx = imitative.encode(m, patch=patch, past=past)
    assert ctx.shape == (m.context_dim,) and np.all(ctx == 0.0)


def test_encode_sees_appearance(rng):
    m = imitative.init_model(TINY, 1)
    patch, past, _ = tiny_inputs(rng)
    other = patch.copy()
    other[..., :3] = 1.0 - other[..., :3]
    assert not np.allclose(imitative.encode(m, patch=patch, past=past), imitative.encode(m, patch=other, past=past))


def test_encode_channel_mask_hides_appearance(rng):
    m = imitative.init_model(TINY, 1, channel_mask=(0, 0, 0, 1))
    patch, past, _ = tiny_inputs(rng)
    other = patch.copy()
    other[..., :3] = rng.uniform(0, 1, other[..., :3].shape)
    assert np.array_equal(imitative.encode(m, patch=patch, past=past), imitative.encode(m, patch=other, past=past))


def test_encode_downsamples_full_patch(rng):
    m = imitative.init_model(TINY, 1)
    full = rng.uniform(0, 1, (20, 20, 4))
    past = np.zeros((10, 2))
    small = imitative.downsample_patch(full, 2)
    np.testing.assert_allclose(small[0, 0], full[:10, :10].mean(axis=(0, 1)))
    np.testing.assert_allclose(imitative.encode(m, patch=full, past=past), imitative.encode(m, patch=small, past=past))


def test_encode_shape_errors(rng):
    m = imitative.init_model(TINY, 1)
    patch, past, _ = tiny_inputs(rng)
    with pytest.raises(ValueError):
        imitative.encode(m, patch=patch[..., :3], past=past)
    with pytest.raises(ValueError):
        imitative.encode(m, patch=patch, past=past[:5])
    with pytest.raises(ValueError):
        imitative.encode(m, patch=rng.uniform(0, 1, (3, 3, 4)), past=past)


# ---------------------------------------------------------------- log_prob


def test_log_prob_mode_equals_eta(rng):
    m = constant_velocity_model()
    patch, past, _ = tiny_inputs(rng)
    v = past[-1] - past[-2]
    tau = past[-1] + v * np.arange(1, 11)[:, None]
    ctx = imitative.encode(m, patch=patch, past=past)
    assert imitative.log_prob(m, ctx, tau, past) == pytest.approx(m.eta, abs=1e-9)


def test_single_standard_gaussian_step():
    lp, _ = imitative._gauss_terms(np.zeros(2), np.zeros(2), (1.0, 0.0, 1.0))
    assert lp == pytest.approx(-1.8378770664093453, abs=1e-12)


def test_log_prob_matches_closed_form(rng):
    # rebuild every step's mean and covariance and score it with scipy
    m, (patch, past, tau) = imitative.random_check_case(3, TINY)
    ctx = imitative.encode(m, patch=patch, past=past)
    pts = np.concatenate([past, tau])
    P, total = m.cfg.step_points, 0.0
    for i in range(10):
        k = len(past) + i
        prev = np.stack([pts[k - 1 - j] for j in range(P)])[None, None]
        mean, (s11, s21, s22), _ = imitative._step_params(m, ctx[None], prev)
        S = np.array([[s11[0, 0], 0.0], [s21[0, 0], s22[0, 0]]])
        total += multivariate_normal(mean[0, 0], S @ S.T).logpdf(tau[i])
    assert imitative.log_prob(m, ctx, tau, past) == pytest.approx(total, abs=1e-9)


def test_log_prob_batches_like_singles(rng):
    m = imitative.init_model(TINY, 2)
    patch, past, tau = tiny_inputs(rng, n=5)
    ctx = imitative.encode(m, patch=patch, past=past)
    batch = imitative.log_prob(m, ctx, tau, past)
    singles = [imitative.log_prob(m, ctx[i], tau[i], past[i]) for i in range(5)]
    np.testing.assert_allclose(batch, singles, rtol=1e-12)


def test_log_prob_rejects_bad_input(rng):
    m = imitative.init_model(TINY, 2)
    patch, past, tau = tiny_inputs(rng)
    ctx = imitative.encode(m, patch=patch, past=past)
    with pytest.raises(ValueError):
        imitative.log_prob(m, ctx, tau[:5], past)
    bad = tau.copy()
    bad[3, 0] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        imitative.log_prob(m, ctx, bad, past)


def test_one_step_normalization():
    mean, S = np.array([0.3, -0.2]), (0.5, 0.2, 0.3)
    # cover +-6 scales of both axes (the second axis also gets s21 * z1)
    xs = np.linspace(mean[0] - 6 * 0.5, mean[0] + 6 * 0.5, 801)
    ys = np.linspace(mean[1] - 6 * 0.6, mean[1] + 6 * 0.6, 801)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    lp, _ = imitative._gauss_terms(np.stack([X, Y], -1), mean, S)
    mass = trapezoid(trapezoid(np.exp(lp), ys, axis=1), xs)
    assert mass == pytest.approx(1.0, abs=1e-3)


@settings(max_examples=60)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 10.0))
def test_log_prob_bounded_by_eta(seed, spread):
    rng = np.random.default_rng(seed)
    m = imitative.init_model(TINY, seed)
    for k in m.params:
        m.params[k] = m.params[k] * spread + rng.normal(0, spread, m.params[k].shape)
    patch, past, tau = tiny_inputs(rng, n=64)
    tau = tau * spread
    ctx = imitative.encode(m, patch=patch, past=past)
    lp = imitative.log_prob(m, ctx, tau, past)
    assert np.all(lp <= m.eta)


# ---------------------------------------------------------------- sample


def test_sample_zero_noise_is_mean_rollout(rng):
    m, (patch, past, _) = imitative.random_check_case(5, TINY)
    ctx = imitative.encode(m, patch=patch, past=past)
    tau, _ = imitative.sample(m, ctx, past, z=np.zeros((10, 2)))
    # each point is the mean given the previous ones
    pts = np.concatenate([past, tau])
    for i in range(10):
        k = len(past) + i
        prev = np.stack([pts[k - 1 - j] for j in range(m.cfg.step_points)])[None, None]
        mean, _, _ = imitative._step_params(m, ctx[None], prev)
        np.testing.assert_allclose(tau[i], mean[0, 0], atol=1e-12)
    np.testing.assert_array_equal(tau, imitative.mean_rollout(m, ctx, past))


def test_sample_seeded(rng):
    m, (patch, past, _) = imitative.random_check_case(5, TINY)
    ctx = imitative.encode(m, patch=patch, past=past)
    a, _ = imitative.sample(m, ctx, past, np.random.default_rng(4))
    b, _ = imitative.sample(m, ctx, past, np.random.default_rng(4))
    assert np.array_equal(a, b)


def test_flow_consistency(rng):
    m, (patch, past, _) = imitative.random_check_case(6, TINY)
    ctx = imitative.encode(m, patch=patch, past=past)
    z = rng.standard_normal((200, 10, 2))
    tau, logq = imitative.sample(m, ctx, past, z=z)
    dens = imitative.log_prob(m, ctx, tau, past)
    assert np.max(np.abs(dens - logq)) < 1e-9


def test_sample_monte_carlo_mean():
    # a model whose mean does not depend on tau beyond the linear prior,
    # so the sample mean of every step equals the mean rollout
    m = constant_velocity_model()
    m.params["step.b1"][:] = [0.05, -0.02, math.log(math.expm1(0.1)), math.log(math.expm1(0.05)), 0.02]
    past = np.column_stack([0.1 * np.arange(-9, 1), np.zeros(10)])
    ctx = imitative.encode(m, patch=np.full((2, 2, 4), 0.5), past=past)
    z = np.random.default_rng(8).standard_normal((10_000, 10, 2))
    tau, _ = imitative.sample(m, ctx, past, z=z)
    ref = imitative.mean_rollout(m, ctx, past)
    se = tau.std(axis=0) / math.sqrt(len(tau))
    assert np.all(np.abs(tau.mean(axis=0) - ref) < 3 * se + 1e-12)


# ---------------------------------------------------------------- gradients


def test_grad_check_small_model():
    m, ex = imitative.random_check_case(0)
    t = time.perf_counter()
    assert imitative.grad_check(m, ex) < 1e-4
    assert time.perf_counter() - t < 1.0


def test_grad_check_unused_weight_is_zero():
    # a fully masked channel never reaches the encoder, so its weights get no gradient
    cfg = imitative.GRADCHECK_CONFIG
    m, ex = imitative.random_check_case(1, cfg)
    m.channel_mask = (1.0, 1.0, 1.0, 0.0)
    err, ga, gn = imitative.grad_check(m, ex, return_grads=True)
    rows = np.arange(cfg.patch_cells * cfg.patch_cells) * cfg.channels + 3
    assert err < 1e-4
    assert np.all(ga["enc.W0"][rows] == 0.0) and np.all(np.abs(gn["enc.W0"][rows]) < 1e-8)


def test_grad_check_step_sizes_agree():
    m, ex = imitative.random_check_case(2)
    _, ga, g4 = imitative.grad_check(m, ex, h=1e-4, return_grads=True)
    _, _, g6 = imitative.grad_check(m, ex, h=1e-6, return_grads=True)
    for k in ga:
        np.testing.assert_allclose(g4[k], g6[k], rtol=1e-4, atol=1e-6)


def test_grad_check_detects_wrong_gradient(monkeypatch):
    m, ex = imitative.random_check_case(3)
    real = imitative.loss_and_grad

    def broken(*a):
        loss, g = real(*a)
        g["step.b1"] = g["step.b1"] * 1.01
        return loss, g

    monkeypatch.setattr(imitative, "loss_and_grad", broken)
    assert imitative.grad_check(m, ex) > 1e-3


# ---------------------------------------------------------------- training


def test_train_deterministic_and_decreasing(small_dataset, small_cfg):
    tc = TrainConfig(epochs=3, seed=4, mirror=False)
    a, la = imitative.train(small_dataset, tc, small_cfg.model)
    b, lb = imitative.train(small_dataset, tc, small_cfg.model)
    assert la == lb
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert la[-1] <= la[0]
    fresh = imitative.init_model(small_cfg.model, 0)
    assert imitative.dataset_nll(a, small_dataset) < imitative.dataset_nll(fresh, small_dataset)


def test_train_single_example_reaches_eta():
    past = np.column_stack([0.2 * np.arange(-9, 1), np.zeros(10)])
    fut = np.column_stack([0.2 * np.arange(1, 11), 0.01 * np.arange(1, 11) ** 2])
    patch = np.random.default_rng(0).uniform(0, 1, (1, 2, 2, 4)).astype(np.float32)
    ds = datakit.Dataset(past[None], fut[None], patch)
    cfg = ModelConfig(patch_cells=2, enc_hidden=(8, 8), step_hidden=16, map_channels=2)
    tc = TrainConfig(batch_size=1, learning_rate=3e-3, perturbation_sigma=0.0, epochs=4000, seed=0, mirror=False)
    m, _ = imitative.train(ds, tc, cfg)
    ctx = imitative.encode(m, patch=patch[0], past=past)
    gap = m.eta - imitative.log_prob(m, ctx, fut, past)
    assert 0.0 <= gap <= 0.5


def test_train_empty_dataset():
    ds = datakit.Dataset(np.zeros((0, 10, 2)), np.zeros((0, 10, 2)), np.zeros((0, 2, 2, 4), np.float32))
    with pytest.raises(ValueError):
        imitative.train(ds, TrainConfig(epochs=1), TINY)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_raises(small_dataset, small_cfg):
    ds = datakit.Dataset(small_dataset.past[:4], small_dataset.future[:4] * np.inf, small_dataset.patches[:4])
    with pytest.raises(imitative.TrainingDiverged):
        imitative.train(ds, TrainConfig(epochs=1, mirror=False), small_cfg.model)


def test_mirror_examples():
    patches = np.arange(2 * 3 * 3, dtype=float).reshape(2, 3, 3, 1)
    past = np.ones((2, 10, 2))
    fut = np.ones((2, 10, 2))
    p, a, f = imitative.mirror_examples(patches, past, fut)
    assert len(p) == 4
    np.testing.assert_array_equal(p[2], patches[0][:, ::-1])
    np.testing.assert_array_equal(a[3, :, 1], -1.0)
    np.testing.assert_array_equal(f[3, :, 0], 1.0)


def test_bilinear_taps_mirror(rng):
    # a y -> -y flip of the points matches a column flip of the patch
    cfg = TINY
    pts = rng.uniform(0, 5, (7, 2)) - np.array([0, 2.5])
    idx, w = imitative.bilinear_taps(cfg, pts)
    idx2, w2 = imitative.bilinear_taps(cfg, pts * np.array([1, -1]))
    c = cfg.patch_cells
    vals = rng.normal(size=c * c)
    flipped = vals.reshape(c, c)[:, ::-1].reshape(-1)
    np.testing.assert_allclose((vals[idx] * w).sum(-1), (flipped[idx2] * w2).sum(-1), atol=1e-12)


# ---------------------------------------------------------------- persistence


def test_model_roundtrip(tmp_path, rng):
    m = imitative.init_model(TINY, 3, channel_mask=(1, 1, 1, 0))
    m.train_seed = 9
    p = tmp_path / "m.bin"
    imitative.save_model(p, m, {"note": 1})
    back = imitative.load_model(p)
    assert back.cfg == m.cfg and back.channel_mask == m.channel_mask and back.train_seed == 9
    patch, past, tau = tiny_inputs(rng)
    ctx = imitative.encode(m, patch=patch, past=past)
    assert imitative.log_prob(back, ctx, tau, past) == imitative.log_prob(m, ctx, tau, past)
