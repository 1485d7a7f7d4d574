import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ranp.config import ConfigError
from ranp.synthetic import (
    ContextPolicy,
    GpKernelParams,
    NumericError,
    SequenceSpec,
    SyntheticRanges,
    gp_sample,
    make_realization,
    make_windows,
    read_realizations_csv,
    sample_batch,
    sample_kernel_hyperparams,
    split_context_target,
    write_realizations_csv,
)

GRID = SequenceSpec().grid(-2.0)


def test_degenerate_ranges_always_return_the_value():
    ranges = SyntheticRanges(lengthscale=(1.3, 1.3), signal_var=(0.7, 0.7), amplitude=(0.0, 0.0), omega=(2.0, 2.0), phase=(1.0, 1.0))
    kernel, sine = sample_kernel_hyperparams(np.random.default_rng(0), ranges)
    assert (kernel.lengthscale, kernel.signal_var, kernel.noise_var) == (1.3, 0.7, 0.02)
    assert (sine.amplitude, sine.omega, sine.phase) == (0.0, 2.0, 1.0)


def test_hyperparameter_draws_stay_in_range():
    r = SyntheticRanges()
    rng = np.random.default_rng(1)
    for _ in range(10_000):
        k, s = sample_kernel_hyperparams(rng, r)
        assert r.lengthscale[0] <= k.lengthscale <= r.lengthscale[1]
        assert r.signal_var[0] <= k.signal_var <= r.signal_var[1]
        assert r.amplitude[0] <= s.amplitude <= r.amplitude[1]
        assert r.omega[0] <= s.omega <= r.omega[1]
        assert r.phase[0] <= s.phase < r.phase[1]


def test_hyperparameter_draws_are_seeded():
    a = sample_kernel_hyperparams(np.random.default_rng(5))
    b = sample_kernel_hyperparams(np.random.default_rng(5))
    assert a == b


@pytest.mark.parametrize("field, bounds", [("lengthscale", (2.0, 1.0)), ("omega", (0.0, 1.0)), ("signal_var", (-1.0, 1.0))])
def test_invalid_ranges_raise_config_error(field, bounds):
    with pytest.raises(ConfigError):
        sample_kernel_hyperparams(np.random.default_rng(0), SyntheticRanges(**{field: bounds}))


def test_zero_signal_is_pure_noise():
    ys = gp_sample(GpKernelParams(1.0, 0.0, 0.02), GRID, np.random.default_rng(2), n_samples=10_000)
    assert abs(ys.var(axis=0).mean() / 0.02 - 1) < 0.05
    assert abs(np.corrcoef(ys[:, 10], ys[:, 11])[0, 1]) < 0.05


@pytest.mark.parametrize("lengthscale, signal_var", [(1.0, 1.0), (0.5, 2.0), (2.0, 0.5)])
def test_monte_carlo_moments_match_kernel(lengthscale, signal_var):
    kernel = GpKernelParams(lengthscale, signal_var, 0.02)
    ys = gp_sample(kernel, GRID, np.random.default_rng(3), n_samples=10_000)
    total = signal_var + kernel.noise_var
    assert np.all(np.abs(ys.var(axis=0) / total - 1) < 0.05)
    lag1 = signal_var * math.exp(-(0.1**2) / (2 * lengthscale**2)) / total
    emp = np.mean([np.corrcoef(ys[:, i], ys[:, i + 1])[0, 1] for i in range(0, 49, 7)])
    assert abs(emp / lag1 - 1) < 0.05


def test_unit_lengthscale_correlation_at_distance_one():
    ys = gp_sample(GpKernelParams(1.0, 1.0, 0.02), GRID, np.random.default_rng(4), n_samples=10_000)
    emp = np.corrcoef(ys[:, 0], ys[:, 10])[0, 1]
    assert abs(emp / math.exp(-0.5) - 1) < 0.05


def test_cholesky_failure_names_lengthscale():
    bad = GpKernelParams(1.0, 1.0, -5.0)
    with pytest.raises(NumericError, match="lengthscale=1.0"):
        gp_sample(bad, GRID, np.random.default_rng(0))


def test_jitter_rescues_near_singular_kernel():
    ys = gp_sample(GpKernelParams(50.0, 1.0, 0.0), GRID, np.random.default_rng(0))
    assert np.all(np.isfinite(ys))


def test_grid_from_leftmost_start():
    spec = SequenceSpec()
    xs = spec.grid(-4.0)
    assert xs[-1] == pytest.approx(0.9, abs=1e-12)
    assert spec.check(xs)


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1))
def test_realization_grids_are_exact(seed):
    r = make_realization(np.random.default_rng(seed))
    assert r.x.size == 50
    assert np.all(np.abs(np.diff(r.x) - 0.1) < 1e-12)
    assert -4.0 <= r.x[0] <= -0.9 and r.x[-1] <= 4.0
    assert np.all(np.diff(r.x) > 0)


def test_zero_amplitude_reduces_to_gp():
    r = make_realization(np.random.default_rng(6), SyntheticRanges(amplitude=(0.0, 0.0)))
    np.testing.assert_array_equal(r.y, r.gp)


def test_deterministic_limit_is_the_sine():
    ranges = SyntheticRanges(signal_var=(0.0, 0.0), noise_var=(0.0, 0.0))
    r = make_realization(np.random.default_rng(7), ranges)
    np.testing.assert_array_equal(r.y - r.gp, r.sine.amplitude * np.sin(r.sine.omega * r.x + r.sine.phase))
    np.testing.assert_array_equal(r.gp, 0.0)


def test_prefix_split():
    c, t = split_context_target(50, np.random.default_rng(0), ContextPolicy("prefix", 10))
    np.testing.assert_array_equal(c, np.arange(10))
    np.testing.assert_array_equal(t, np.arange(50))
    c, _ = split_context_target(50, np.random.default_rng(0), ContextPolicy("prefix", 49))
    assert set(range(50)) - set(c) == {49}


@settings(max_examples=1000)
@given(st.integers(1, 49), st.sampled_from(["prefix", "random"]), st.integers(0, 10_000))
def test_contexts_are_subset_of_targets(m, kind, seed):
    c, t = split_context_target(50, np.random.default_rng(seed), ContextPolicy(kind, m))
    assert len(c) == m and set(c) <= set(t)
    assert np.all(np.diff(c) > 0)


@pytest.mark.parametrize("m", [0, 50])
def test_context_size_out_of_range(m):
    with pytest.raises(ConfigError):
        split_context_target(50, np.random.default_rng(0), ContextPolicy("prefix", m))


def test_windows_pad_by_repeating_first_value():
    w = make_windows(np.array([1.0, 2.0, 3.0, 4.0]), 3)
    np.testing.assert_array_equal(w[..., 0], [[1, 1, 1], [1, 1, 2], [1, 2, 3], [2, 3, 4]])


def test_batches_are_bit_identical_per_seed():
    a = sample_batch(np.random.default_rng(9), 4).to_batch(5)
    b = sample_batch(np.random.default_rng(9), 4).to_batch(5)
    for f in ("x_context", "y_context", "x_target", "y_target"):
        assert getattr(a, f).tobytes() == getattr(b, f).tobytes()


def test_batch_shapes_and_shared_context_size():
    rb = sample_batch(np.random.default_rng(10), 3, (5, 45))
    batch = rb.to_batch()
    assert batch.x_target.shape == (3, 50, 1)
    assert 5 <= batch.n_context <= 45
    np.testing.assert_array_equal(batch.x_context, batch.x_target[:, : batch.n_context])
    seq = rb.to_batch(4)
    assert seq.x_target.shape == (3, 50, 4, 1)
    np.testing.assert_array_equal(seq.x_target[:, :, -1], batch.x_target)


def test_csv_roundtrip(tmp_path):
    rb = sample_batch(np.random.default_rng(11), 3, (7, 7))
    path = tmp_path / "r.csv"
    write_realizations_csv(path, rb)
    back = read_realizations_csv(path)
    np.testing.assert_array_equal(back.context_idx, rb.context_idx)
    for a, b in zip(back.realizations, rb.realizations):
        assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
        assert SequenceSpec().check(a.x)


def test_csv_header_only(tmp_path):
    path = tmp_path / "e.csv"
    write_realizations_csv(path, None)
    assert path.read_text() == "realization_id,index,x,y,is_context\n"


def test_csv_malformed_row_names_line(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("realization_id,index,x,y,is_context\n0,0,0.1,0.2,1\n0,1,oops,0.3,0\n")
    with pytest.raises(ValueError, match="line 3"):
        read_realizations_csv(path)
