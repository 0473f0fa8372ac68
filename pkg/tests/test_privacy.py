import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from splitguard.errors import ConfigError, NumericError
from splitguard.privacy import (
    PrivacyConfig,
    analytic_log_ratio,
    clip_global_max,
    clip_per_sample,
    dp_ratio_test,
    laplace_like,
    laplace_noise,
    scalar_mechanism,
)

# subnormals are excluded: rescaling them can underflow to zero, which no clip can avoid
finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False, allow_subnormal=False)
vectors = arrays(np.float64, st.integers(1, 40), elements=finite)
thresholds = st.floats(1e-3, 1e3)


def test_config_scale_is_exact():
    cfg = PrivacyConfig(epsilon=0.5, threshold=20.0)
    assert cfg.scale == 80.0
    assert PrivacyConfig(1.0, 20.0).scale == 40.0


@pytest.mark.parametrize("eps,T", [(0, 1), (-1, 1), (1, 0), (1, -2), (math.inf, 1), (1, math.nan)])
def test_config_rejects_bad_values(eps, T):
    with pytest.raises(ConfigError):
        PrivacyConfig(eps, T)


def test_clip_hand_case():
    out = clip_global_max([30.0, -10.0, 5.0], 20.0)
    np.testing.assert_allclose(out, [20.0, -20.0 / 3, 10.0 / 3], atol=1e-12)


def test_clip_inside_ball_is_identity():
    np.testing.assert_array_equal(clip_global_max([1.0, -2.0], 20.0), [1.0, -2.0])


def test_clip_rejects_nonfinite():
    with pytest.raises(NumericError):
        clip_global_max([1.0, np.nan], 1.0)
    with pytest.raises(NumericError):
        clip_global_max([np.inf], 1.0)
    with pytest.raises(ConfigError):
        clip_global_max([1.0], 0.0)


@settings(max_examples=300, deadline=None)
@given(vectors, thresholds)
def test_clip_norm_is_min_of_norm_and_threshold(x, T):
    out = clip_global_max(x, T)
    expect = min(np.abs(x).max(), T)
    assert np.abs(out).max() == pytest.approx(expect, rel=1e-12, abs=1e-300)


@settings(max_examples=200, deadline=None)
@given(vectors, thresholds)
def test_clip_preserves_direction_and_argmax(x, T):
    out = clip_global_max(x, T)
    assert np.all(np.sign(out) == np.sign(x))
    assert np.argmax(out) == np.argmax(x)


@settings(max_examples=200, deadline=None)
@given(vectors, thresholds)
def test_clip_idempotent(x, T):
    once = clip_global_max(x, T)
    np.testing.assert_allclose(clip_global_max(once, T), once, rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vectors, st.floats(0.0, 1.0))
def test_clip_homogeneous_below_threshold(x, c):
    T = float(np.abs(x).max()) + 1.0
    np.testing.assert_allclose(clip_global_max(c * x, T), c * clip_global_max(x, T), rtol=1e-12)


def test_clip_per_sample_matches_numpy_per_row():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(16, 3, 5, 5, generator=g, dtype=torch.float64) * 30
    out = clip_per_sample(x, 20.0)
    for i in range(16):
        np.testing.assert_allclose(out[i].numpy(), clip_global_max(x[i].numpy(), 20.0), rtol=1e-12)
    # samples are clipped independently
    out0 = clip_per_sample(x[:1], 20.0)
    assert torch.equal(out0[0], out[0])


def test_clip_invariant_bulk():
    """10^4 random tensors at four thresholds: zero violations of the L-inf bound."""
    rng = np.random.default_rng(1)
    violations = 0
    for T in (0.5, 1.0, 20.0, 100.0):
        x = torch.from_numpy(rng.standard_cauchy((10_000, 32)) * rng.uniform(0.01, 100, (10_000, 1)))
        out = clip_per_sample(x, T)
        violations += int((out.abs().amax(dim=1) > T * (1 + 1e-12)).sum())
    assert violations == 0


def test_laplace_mean_abs_scale():
    """Mean |noise| equals the scale b = 2T/eps = 40 (T=20, eps=1) within 2%."""
    b = PrivacyConfig(1.0, 20.0).scale
    noise = laplace_noise(1_000_000, b, np.random.default_rng(2))
    assert np.abs(noise).mean() == pytest.approx(40.0, rel=0.02)


def test_laplace_variance():
    noise = laplace_noise(1_000_000, 20.0, np.random.default_rng(3))
    assert noise.var() == pytest.approx(800.0, rel=0.05)


def test_laplace_deterministic_and_validated():
    a = laplace_noise((3, 4), 1.0, np.random.default_rng(7))
    b = laplace_noise((3, 4), 1.0, np.random.default_rng(7))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigError):
        laplace_noise(3, 0.0, np.random.default_rng(0))


def test_laplace_like_torch():
    x = torch.zeros(400_000, dtype=torch.float32)
    g1, g2 = torch.Generator().manual_seed(4), torch.Generator().manual_seed(4)
    n1, n2 = laplace_like(x, 40.0, g1), laplace_like(x, 40.0, g2)
    assert n1.dtype == torch.float32
    assert torch.equal(n1, n2)
    assert float(n1.abs().mean()) == pytest.approx(40.0, rel=0.02)
    # median of a centred Laplace is 0
    assert abs(float(n1.median())) < 0.5


def test_laplace_distribution_quantiles():
    """Empirical CDF matches the Laplace CDF (Kolmogorov-Smirnov distance)."""
    b = 3.0
    s = np.sort(laplace_noise(200_000, b, np.random.default_rng(5)))
    cdf = np.where(s < 0, 0.5 * np.exp(s / b), 1 - 0.5 * np.exp(-s / b))
    emp = np.arange(1, len(s) + 1) / len(s)
    assert np.max(np.abs(emp - cdf)) < 0.005


def test_scalar_mechanism_clips_first():
    rng = np.random.default_rng(0)
    out = scalar_mechanism(1e6, 2.0, 1.0, 200_000, rng)
    assert out.mean() == pytest.approx(2.0, abs=0.05)


@pytest.mark.parametrize("eps", [0.5, 1.0, 2.0])
def test_dp_ratio_diameter_pair(eps):
    rep = dp_ratio_test(1.0, eps, 1.0, -1.0, n_samples=1_000_000)
    assert rep.status == "pass"
    assert rep.epsilon_empirical <= 1.15 * eps
    # the diameter pair actually attains the bound in the tails
    assert rep.epsilon_empirical > 0.8 * eps


def test_dp_ratio_identical_inputs():
    rep = dp_ratio_test(1.0, 1.0, 0.3, 0.3, n_samples=1_000_000)
    assert rep.passed
    assert rep.epsilon_empirical < 0.05


@pytest.mark.parametrize("T", [0.5, 1.0, 2.0, 5.0])
@pytest.mark.parametrize("eps", [0.25, 0.5, 1.0, 2.0])
def test_dp_ratio_grid(T, eps):
    rep = dp_ratio_test(T, eps, T, -T, n_samples=1_000_000, seed=11)
    assert rep.passed, rep.to_dict()


def test_dp_ratio_detects_a_broken_mechanism():
    """Noise four times too small must be caught."""
    from splitguard import privacy

    orig = privacy.scalar_mechanism
    try:
        privacy.scalar_mechanism = lambda x, T, e, n, rng: orig(x, T, 4 * e, n, rng)
        bad = privacy.dp_ratio_test(1.0, 0.5, 1.0, -1.0, n_samples=1_000_000)
    finally:
        privacy.scalar_mechanism = orig
    assert bad.status == "fail"


def test_dp_ratio_inconclusive_when_bins_sparse():
    rep = dp_ratio_test(1.0, 1.0, 1.0, -1.0, n_samples=50, n_bins=10)
    assert rep.status == "inconclusive"
    assert not rep.passed


def test_dp_report_json_roundtrip():
    rep = dp_ratio_test(1.0, 1.0, 1.0, -1.0, n_samples=10_000, min_count=10)
    d = json.loads(rep.to_json())
    assert d["pass"] == rep.passed
    assert d["epsilon_claimed"] == 1.0
    assert set(d) >= {"epsilon_empirical", "num_samples", "num_bins", "slack", "status"}


def test_analytic_ratio_bounded_by_eps():
    y = np.linspace(-50, 50, 2001)
    for eps in (0.25, 1.0, 2.0):
        r = analytic_log_ratio(y, 5.0, -5.0, 1.0, eps)
        assert np.abs(r).max() == pytest.approx(eps, rel=1e-12)
