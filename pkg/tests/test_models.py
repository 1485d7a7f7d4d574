import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from ranp import autodiff as ad
from ranp.autodiff import Tape
from ranp.config import ConfigError
from ranp.layers import attention_weights, mlp_forward
from ranp.models import (
    HALF_LOG_2PI,
    CheckpointError,
    ContextTargetBatch,
    Gaussian,
    ModelConfig,
    NeuralProcess,
    Prediction,
    build_model,
    checkpoint_bytes,
    gaussian_nll,
    kl_diag_gaussians,
    load_checkpoint,
    read_checkpoint,
    sample_z,
    save_checkpoint,
    small_config,
)
from ranp.synthetic import make_windows, sample_batch
from ranp.training import Adam

VARIANTS = [("NP", "uniform"), ("ANP", "multihead"), ("ANP", "laplace"), ("ANP", "dotproduct"),
            ("ANP_RNN", "multihead"), ("ANP_RNN", "laplace")]


def toy_batch(cfg, rng, b=2, n_c=4, n_t=8):
    """Sequence-style batch: targets are a grid, contexts a prefix of it."""
    x = np.sort(rng.uniform(-2, 2, size=(b, n_t)), axis=1)
    y = np.sin(2 * x) + 0.1 * rng.normal(size=x.shape)
    if cfg.sequential:
        inputs = np.stack([make_windows(row, cfg.window) for row in x])
    else:
        inputs = x[..., None]
    return ContextTargetBatch(inputs[:, :n_c], y[:, :n_c, None], inputs, y[..., None])


def model_for(kind, attention, seed=0, **kw):
    return NeuralProcess(small_config(kind, attention, **kw), seed=seed)


# --- closed-form pieces -----------------------------------------------------


def test_kl_of_identical_gaussians_is_zero():
    g = Gaussian(np.array([0.3, -1.0]), np.array([0.5, 2.0]))
    assert kl_diag_gaussians(g, g) == 0.0


def test_kl_unit_shift_against_numeric_integration():
    q, p = Gaussian(np.array([1.0]), np.array([1.0])), Gaussian(np.array([0.0]), np.array([1.0]))
    logq = lambda z: -0.5 * (z - 1.0) ** 2 - HALF_LOG_2PI
    logp = lambda z: -0.5 * z**2 - HALF_LOG_2PI
    oracle, _ = integrate.quad(lambda z: math.exp(logq(z)) * (logq(z) - logp(z)), -np.inf, np.inf, epsabs=1e-13)
    assert abs(oracle - 0.5) < 1e-9
    assert abs(kl_diag_gaussians(q, p) - oracle) < 1e-9


def test_kl_is_non_negative_on_random_pairs():
    rng = np.random.default_rng(0)
    shape = (10_000, 3)
    q = Gaussian(rng.normal(scale=3, size=shape), rng.uniform(0.01, 5, size=shape))
    p = Gaussian(rng.normal(scale=3, size=shape), rng.uniform(0.01, 5, size=shape))
    assert np.all(kl_diag_gaussians(q, p) >= 0)


def test_kl_tape_and_numpy_paths_agree():
    rng = np.random.default_rng(1)
    q = Gaussian(rng.normal(size=4), rng.uniform(0.1, 2, size=4))
    p = Gaussian(rng.normal(size=4), rng.uniform(0.1, 2, size=4))
    tape = Tape()
    on_tape = kl_diag_gaussians(Gaussian(*map(tape.leaf, q)), Gaussian(*map(tape.leaf, p))).value
    assert on_tape == pytest.approx(kl_diag_gaussians(q, p), abs=1e-14)


def test_gaussian_nll_constants():
    per, mean = gaussian_nll(Gaussian(np.zeros(3), np.ones(3)), np.zeros(3))
    np.testing.assert_allclose(per, 0.91894, atol=5e-6)
    sigma = 2.5
    per, _ = gaussian_nll(Gaussian(np.zeros(1), np.full(1, sigma)), np.full(1, sigma))
    assert per[0] == pytest.approx(HALF_LOG_2PI + math.log(sigma) + 0.5, abs=1e-14)


@given(st.integers(0, 10_000))
def test_gaussian_nll_mean_is_mean_of_points(seed):
    rng = np.random.default_rng(seed)
    pred = Gaussian(rng.normal(size=(2, 5, 1)), rng.uniform(0.05, 3, size=(2, 5, 1)))
    per, mean = gaussian_nll(pred, rng.normal(size=(2, 5, 1)))
    assert abs(mean - per.mean()) <= 1e-12


def test_sample_z_limits_and_monte_carlo_mean():
    mu, sigma = np.array([0.5, -2.0]), np.array([0.3, 1.7])
    np.testing.assert_array_equal(sample_z(Gaussian(mu, sigma), np.zeros(2)), mu)
    noise = np.random.default_rng(2).standard_normal((100_000, 2))
    floor = 0.01
    z = sample_z(Gaussian(mu, np.full(2, floor)), noise)
    assert np.all(np.abs(z - mu) <= floor * np.abs(noise) + 1e-15)
    draws = sample_z(Gaussian(mu, sigma), noise)
    assert np.all(np.abs(draws.mean(0) - mu) <= 4 * sigma / math.sqrt(100_000))


# --- configs and batches ----------------------------------------------------


@pytest.mark.parametrize(
    "kw, key",
    [({"kind": "GP"}, "kind"), ({"attention": "cosine"}, "attention"), ({"r_dim": 12}, "heads"), ({"sigma_floor": 0}, "sigma_floor")],
)
def test_model_config_rejects_invalid_fields(kw, key):
    with pytest.raises(ConfigError) as exc:
        ModelConfig(**kw)
    assert key in exc.value.keys


def test_batch_validation():
    with pytest.raises(ad.ContractError):
        ContextTargetBatch(np.zeros((1, 0, 1)), np.zeros((1, 0, 1)), np.zeros((1, 3, 1)))
    with pytest.raises(ad.ShapeError):
        ContextTargetBatch(np.zeros((1, 2, 1)), np.zeros((1, 3, 1)), np.zeros((1, 3, 1)))


def test_np_uses_uniform_aggregation_whatever_attention_says():
    assert ModelConfig(kind="NP", attention="multihead").cross_attention == "uniform"


# --- components -------------------------------------------------------------


def test_transform_inputs_only_for_recurrent_variant():
    model = model_for("ANP", "laplace")
    tape = Tape()
    with pytest.raises(ad.ContractError):
        model.transform_inputs(model.params.bind(tape), tape.const(np.zeros((1, 2, 3, 1))))


def test_transform_inputs_duplicates_and_zero_params():
    model = model_for("ANP_RNN", "laplace", window=1)
    tape = Tape()
    x = np.array([[[[0.3]], [[0.3]], [[-1.2]]]])
    h = model.transform_inputs(model.params.bind(tape), tape.const(x)).value
    assert np.array_equal(h[0, 0], h[0, 1])
    for k in ("lstm.W", "lstm.b"):
        model.params[k] = np.zeros_like(model.params[k])
    tape = Tape()
    np.testing.assert_array_equal(model.transform_inputs(model.params.bind(tape), tape.const(x)).value, 0.0)


def test_transform_inputs_is_order_sensitive():
    model = model_for("ANP_RNN", "laplace")
    tape = Tape()
    seq = np.array([0.1, 0.9, -0.4])[:, None]
    x = np.stack([seq, seq[::-1]])[None]
    h = model.transform_inputs(model.params.bind(tape), tape.const(x)).value
    assert np.max(np.abs(h[0, 0] - h[0, 1])) > 1e-6


def latent(model, x, y):
    tape = Tape()
    q = model.encode_latent(model.params.bind(tape), tape.const(x), y)
    return q.mu.value, q.sigma.value


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_latent_encoder_permutation_and_duplication_invariant(seed):
    rng = np.random.default_rng(seed)
    model = model_for("ANP", "multihead", seed=seed)
    x, y = rng.normal(size=(1, 6, 1)), rng.normal(size=(1, 6, 1))
    perm = rng.permutation(6)
    mu, sigma = latent(model, x, y)
    mu_p, sigma_p = latent(model, x[:, perm], y[:, perm])
    np.testing.assert_allclose(mu_p, mu, atol=1e-9)
    np.testing.assert_allclose(sigma_p, sigma, atol=1e-9)
    mu_d, _ = latent(model, np.concatenate([x, x], 1), np.concatenate([y, y], 1))
    np.testing.assert_allclose(mu_d, mu, atol=1e-9)
    floor = model.config.sigma_floor
    assert np.all((sigma > floor) & (sigma < 1))


def test_latent_encoder_rejects_empty_set():
    model = model_for("NP", "uniform")
    tape = Tape()
    with pytest.raises(ad.ContractError):
        model.encode_latent(model.params.bind(tape), tape.const(np.zeros((1, 0, 1))), np.zeros((1, 0, 1)))


def deterministic(model, xc, yc, xt):
    tape = Tape()
    pv = model.params.bind(tape)
    return model.encode_deterministic(pv, tape.const(xc), yc, tape.const(xt)).value


def test_np_deterministic_rows_identical():
    rng = np.random.default_rng(3)
    r = deterministic(model_for("NP", "uniform"), rng.normal(size=(1, 4, 1)), rng.normal(size=(1, 4, 1)), rng.normal(size=(1, 7, 1)))
    np.testing.assert_array_equal(r, np.broadcast_to(r[:, :1], r.shape))


def test_dotproduct_single_context_returns_its_embedding():
    model = model_for("ANP", "dotproduct")
    xc, yc = np.array([[[0.4]]]), np.array([[[1.5]]])
    tape = Tape()
    pv = model.params.bind(tape)
    cfg = model.config
    r_i = ad.concat([tape.const(xc), tape.const(yc)], axis=-1)
    emb = mlp_forward(pv, "det.enc", cfg.mlp(2, cfg.r_dim), r_i).value
    r = deterministic(model, xc, yc, np.array([[[-3.0], [0.0], [2.0]]]))
    np.testing.assert_array_equal(r, np.repeat(emb, 3, axis=1))


def test_laplace_query_on_context_dominates():
    model = model_for("ANP", "laplace", laplace_scale=10.0)
    tape = Tape()
    w = attention_weights("laplace", tape.const([[[1.0]]]), tape.const([[[0.0], [1.0], [2.0]]]), 10.0).value
    assert w[0, 0, 1] > 0.99
    r = deterministic(model, np.array([[[0.0], [1.0], [2.0]]]), np.array([[[0.0], [1.0], [0.0]]]), np.array([[[1.0]]]))
    assert r.shape == (1, 1, model.config.r_dim)


def test_decode_sigma_floor_and_determinism():
    model = model_for("ANP", "multihead")
    cfg = model.config
    tape = Tape()
    pv = model.params.bind(tape)
    h = tape.const(np.array([[[0.5], [0.5], [3.0]]]))
    r = tape.const(np.tile(np.linspace(-1, 1, cfg.r_dim), (1, 3, 1)))
    pred = model.decode(pv, h, r, tape.const(np.full((1, cfg.z_dim), 30.0)))
    assert np.array_equal(pred.mu.value[0, 0], pred.mu.value[0, 1])
    assert np.all(pred.sigma.value >= cfg.sigma_floor)
    with pytest.raises(ad.ShapeError):
        model.decode(pv, h, r[:, :2], tape.const(np.zeros((1, cfg.z_dim))))


def test_decoder_nll_gradient_check():
    model = model_for("ANP", "laplace")
    batch = toy_batch(model.config, np.random.default_rng(4))
    noise = model.noise(2, 0)

    def fn(tape, pv):
        h_c, h_t = model._encode_inputs(pv, tape, batch.x_context, batch.x_target)
        r = model.encode_deterministic(pv, h_c, batch.y_context, h_t)
        pred = model.decode(pv, h_t, r, tape.const(noise))
        return gaussian_nll(pred, batch.y_target)[1]

    names = [n for n in model.params.names() if n.startswith("dec.")]
    assert ad.gradient_check(fn, model.params, names=names, fd_dtype=np.longdouble).max_rel_error < 1e-4


# --- ELBO and prediction ----------------------------------------------------


@pytest.mark.parametrize("kind, attention", VARIANTS)
def test_kl_vanishes_when_targets_equal_contexts(kind, attention):
    model = model_for(kind, attention)
    b = toy_batch(model.config, np.random.default_rng(5))
    same = ContextTargetBatch(b.x_target, b.y_target, b.x_target, b.y_target)
    _, _, kl = model.elbo(same, seed=1)
    assert abs(kl) <= 1e-9


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(VARIANTS))
def test_kl_term_non_negative(seed, variant):
    model = model_for(*variant, seed=seed)
    elbo, nll, kl = model.elbo(toy_batch(model.config, np.random.default_rng(seed)), seed=seed)
    assert kl >= 0
    assert elbo == pytest.approx(-(nll + kl), abs=1e-12)


def test_elbo_requires_targets():
    model = model_for("NP", "uniform")
    b = toy_batch(model.config, np.random.default_rng(0))
    with pytest.raises(ad.ContractError):
        model.elbo(ContextTargetBatch(b.x_context, b.y_context, b.x_target), seed=0)


@pytest.mark.parametrize("kind, attention", VARIANTS)
def test_overfit_single_synthetic_batch(kind, attention):
    cfg = ModelConfig(kind=kind, attention=attention)
    model = build_model(cfg, seed=0)
    batch = sample_batch(np.random.default_rng(2024), 4, (20, 20)).to_batch(cfg.window if cfg.sequential else None)
    opt = Adam(1e-3)
    noise_rng = np.random.default_rng(0)
    losses = []
    for _ in range(200):
        tape = Tape()
        pv = model.params.bind(tape)
        loss = model.loss_terms(pv, tape, batch, model.noise(4, noise_rng))["loss"]
        losses.append(float(loss.value))
        g = ad.backward(tape, loss)
        opt.step(model.params, {k: g[v] for k, v in pv.items()})
    final, _, _ = model.elbo(batch, seed=123)
    assert -final <= 0.9 * losses[0]


def test_prediction_moments():
    rng = np.random.default_rng(7)
    pred = Prediction(rng.normal(size=(6, 2, 5, 1)), rng.uniform(0.1, 1, size=(6, 2, 5, 1)))
    np.testing.assert_allclose(pred.mean, pred.mu_samples.mean(0), atol=1e-12)
    assert np.all(pred.variance >= (pred.sigma_samples**2).mean(0) - 1e-12)


@pytest.mark.parametrize("kind, attention", VARIANTS)
def test_mean_z_prediction_ignores_seed(kind, attention):
    model = model_for(kind, attention)
    b = toy_batch(model.config, np.random.default_rng(8))
    a = model.predict(b, 1, "mean-z", seed=1)
    c = model.predict(b, 1, "mean-z", seed=99)
    assert np.array_equal(a.mu_samples, c.mu_samples)


def test_predict_argument_checks():
    model = model_for("NP", "uniform")
    b = toy_batch(model.config, np.random.default_rng(0))
    with pytest.raises(ad.ContractError):
        model.predict(b, 0)
    with pytest.raises(ad.ContractError):
        model.predict(b, 1, "posterior")


def test_mean_z_targets_factorize():
    model = model_for("ANP", "multihead")
    b = toy_batch(model.config, np.random.default_rng(9))
    before = model.predict(b, 1, "mean-z").mean
    y_t = b.y_target.copy()
    y_t[:, 5:] += 10.0  # targets outside the context prefix
    after = model.predict(ContextTargetBatch(b.x_context, b.y_context, b.x_target, y_t), 1, "mean-z").mean
    np.testing.assert_array_equal(before, after)


@pytest.mark.parametrize("kind, attention", VARIANTS[:4])
def test_context_permutation_invariance(kind, attention):
    model = model_for(kind, attention)
    b = toy_batch(model.config, np.random.default_rng(10))
    noise = np.random.default_rng(0).standard_normal((3, 2, model.config.z_dim))
    perm = np.array([2, 0, 3, 1])
    permuted = ContextTargetBatch(b.x_context[:, perm], b.y_context[:, perm], b.x_target, b.y_target)
    a = model.predict(b, 3, noise=noise)
    c = model.predict(permuted, 3, noise=noise)
    assert np.max(np.abs(a.mu_samples - c.mu_samples)) <= 1e-9
    assert np.max(np.abs(a.sigma_samples - c.sigma_samples)) <= 1e-9


@pytest.mark.parametrize("attention", ["multihead", "laplace"])
def test_recurrent_variant_is_window_order_sensitive(attention):
    model = model_for("ANP_RNN", attention)
    b = toy_batch(model.config, np.random.default_rng(11))
    noise = np.zeros((1, 2, model.config.z_dim))
    x_t = b.x_target.copy()
    x_t[:, 6] = x_t[:, 6, ::-1]
    shuffled = ContextTargetBatch(b.x_context, b.y_context, x_t, b.y_target)
    a = model.predict(b, 1, noise=noise).mean
    c = model.predict(shuffled, 1, noise=noise).mean
    assert np.max(np.abs(a - c)) > 1e-6


# --- checkpoints ------------------------------------------------------------


@pytest.mark.parametrize("kind, attention", VARIANTS + [("LSTM", "multihead")])
def test_checkpoint_roundtrip(tmp_path, kind, attention):
    model = build_model(small_config(kind, attention), seed=3)
    path = save_checkpoint(tmp_path / "m.ckpt", model, {"iteration": 7})
    config, meta, params = read_checkpoint(path)
    assert config == model.config and meta == {"iteration": "7"}
    for name in model.params.names():
        assert params[name].tobytes() == model.params[name].tobytes()
    b = toy_batch(model.config, np.random.default_rng(12))
    a = model.predict(b, 2, seed=4)
    c = load_checkpoint(path).predict(b, 2, seed=4)
    assert np.max(np.abs(a.mu_samples - c.mu_samples)) <= 1e-12
    assert load_checkpoint(checkpoint_bytes(model)).config == model.config


def test_checkpoint_header_mismatch(tmp_path):
    model = build_model(small_config("ANP", "multihead"))
    blob = checkpoint_bytes(model).replace(b"hidden = 8", b"hidden = 16")
    (tmp_path / "bad.ckpt").write_bytes(blob)
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "junk.ckpt")
