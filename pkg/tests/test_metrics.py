"""Tests for the exact W1 estimator, envelopes, and sweep regression."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad
from scipy.special import ndtr

import fastslow.metrics as metrics_mod
from fastslow.metrics import (
    RateFit,
    WassersteinReport,
    bootstrap_w1,
    clt_verify,
    default_checkpoints,
    rate_sweep,
    theoretical_bound,
    theoretical_bound_terms,
    w1_between_gaussians,
    w1_vs_gaussian,
)
from fastslow.sde_engine import ScaleRegime

# -- exact W1 against a Gaussian ---------------------------------------


def test_w1_point_mass_target():
    assert w1_vs_gaussian([0.0, 1.0, 2.0], 1.0, 0.0) == pytest.approx(2.0 / 3.0)


def test_w1_matches_cdf_area():
    """Dual route: W1 equals the area between the empirical and Gaussian
    CDFs, here integrated numerically with breakpoints at the samples."""
    rng = np.random.default_rng(3)
    xs = rng.normal(0.4, 1.3, 20)
    mu, sigma2 = -0.2, 0.8
    got = w1_vs_gaussian(xs, mu, sigma2)
    sigma = math.sqrt(sigma2)
    xs_sorted = np.sort(xs)

    def area(x):
        fn = np.searchsorted(xs_sorted, x, side="right") / len(xs)
        return abs(fn - ndtr((x - mu) / sigma))

    lo = min(xs_sorted[0], mu - 9 * sigma) - 1.0
    hi = max(xs_sorted[-1], mu + 9 * sigma) + 1.0
    expect, err = quad(area, lo, hi, points=list(xs_sorted), limit=300)
    assert got == pytest.approx(expect, abs=max(1e-9, 10 * err))


def test_w1_permutation_invariance():
    rng = np.random.default_rng(5)
    xs = rng.normal(size=50)
    shuffled = rng.permutation(xs)
    assert w1_vs_gaussian(xs, 0.1, 1.2) == w1_vs_gaussian(shuffled, 0.1, 1.2)


_sample_lists = st.lists(
    st.floats(-5.0, 5.0, allow_nan=False, allow_infinity=False),
    min_size=3,
    max_size=20,
)


@settings(max_examples=50, deadline=None)
@given(_sample_lists, st.floats(-2.0, 2.0), st.floats(0.1, 4.0), st.floats(-3.0, 3.0))
def test_w1_location_equivariance(xs, mu, sigma2, d):
    base = w1_vs_gaussian(xs, mu, sigma2)
    moved = w1_vs_gaussian(np.asarray(xs) + d, mu + d, sigma2)
    assert moved == pytest.approx(base, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(_sample_lists, st.floats(-2.0, 2.0), st.floats(0.1, 4.0), st.floats(0.1, 10.0))
def test_w1_scale_equivariance(xs, mu, sigma2, c):
    base = w1_vs_gaussian(xs, mu, sigma2)
    scaled = w1_vs_gaussian(c * np.asarray(xs), c * mu, c * c * sigma2)
    assert scaled == pytest.approx(c * base, rel=1e-9, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(_sample_lists, st.floats(-2.0, 2.0), st.floats(0.0, 4.0))
def test_w1_dominates_mean_gap(xs, mu, sigma2):
    w1 = w1_vs_gaussian(xs, mu, sigma2)
    gap = abs(float(np.mean(xs)) - mu)
    assert w1 >= gap - 1e-9 * (1.0 + gap)


def test_w1_sampling_floor_decays():
    rng = np.random.default_rng(7)
    small = w1_vs_gaussian(rng.normal(0, 1, 10_000), 0.0, 1.0)
    large = w1_vs_gaussian(rng.normal(0, 1, 100_000), 0.0, 1.0)
    assert large < 0.5 * small  # roughly n^(-1/2)


def test_w1_validation():
    with pytest.raises(ValueError):
        w1_vs_gaussian([1.0], 0.0, 1.0)
    with pytest.raises(ValueError):
        w1_vs_gaussian([0.0, np.inf], 0.0, 1.0)
    with pytest.raises(ValueError):
        w1_vs_gaussian([0.0, 1.0], 0.0, -1.0)


# -- Gaussian-vs-Gaussian closed form ----------------------------------


def test_w1_between_gaussians_shift_and_scale():
    assert w1_between_gaussians(0.5, 1.0, 0.0, 1.0) == pytest.approx(0.5)
    assert w1_between_gaussians(0.0, 1.1, 0.0, 1.0) == pytest.approx(
        0.1 * math.sqrt(2.0 / math.pi)
    )
    assert w1_between_gaussians(2.0, 0.7, 2.0, 0.7) == 0.0


def test_w1_between_gaussians_general_case_quadrature():
    """E|d + s Z| via direct quadrature: d = 0.3, s = 0.2."""
    z = np.linspace(-12.0, 12.0, 200_001)
    phi = np.exp(-0.5 * z**2) / math.sqrt(2.0 * math.pi)
    expect = np.trapezoid(np.abs(0.3 + 0.2 * z) * phi, z)
    assert w1_between_gaussians(0.3, 1.2, 0.0, 1.0) == pytest.approx(
        expect, rel=1e-8
    )


# -- bootstrap ---------------------------------------------------------


def test_bootstrap_w1_determinism_and_shape():
    rng = np.random.default_rng(11)
    xs = rng.normal(0.2, 1.0, 200)
    lo, hi = bootstrap_w1(xs, 0.0, 1.0, seed=4, n_boot=100)
    assert lo <= hi
    assert lo > 0.0
    again = bootstrap_w1(xs, 0.0, 1.0, seed=4, n_boot=100)
    assert (lo, hi) == again
    other = bootstrap_w1(xs, 0.0, 1.0, seed=5, n_boot=100)
    assert (lo, hi) != other


# -- theoretical envelope ----------------------------------------------


def test_theoretical_bound_frozen_value():
    regime = ScaleRegime(0.01, 0.01, 1.0, 1.0)
    assert theoretical_bound(regime, K=1.0, zeta=0.1) == pytest.approx(
        1.5857506108320298, rel=1e-12
    )
    # written-out sum, independently of the bracket bookkeeping
    eps = eta = 0.01
    expect = (
        eta**0.25
        + eps**0.25
        + abs(eta / eps - 1.0) ** 0.5
        + (eta / eps) ** 0.5 * eta**0.4
        + eps**0.4
        + (eta / eps) ** 0.5 * eta**0.25
        + (eta / eps) * eta**0.25
        + (1.0 + eta / eps) * math.exp(-1.0 / (16.0 * eta))
    )
    assert theoretical_bound(regime, K=1.0, zeta=0.1) == pytest.approx(
        expect, rel=1e-12
    )


def test_theoretical_bound_terms_structure():
    regime = ScaleRegime(0.04, 0.01, 2.0, 1.0)
    terms = theoretical_bound_terms(regime, K=2.0, zeta=0.2, T=1.0)
    b1, b2 = terms["bracket1"], terms["bracket2"]
    ratio = 0.25
    assert b1["eta_quarter"] == pytest.approx(0.01**0.25)
    assert b1["eps_quarter"] == pytest.approx(0.04**0.25)
    assert b1["regime_drift_sqrt"] == pytest.approx(abs(ratio - 0.25) ** 0.5)
    assert b1["ratio_eta_holder"] == pytest.approx(ratio**0.5 * 0.01**0.3)
    assert b1["eps_holder"] == pytest.approx(0.04**0.3)
    assert b2["ratio_sqrt_eta_quarter"] == pytest.approx(ratio**0.5 * 0.01**0.25)
    assert b2["ratio_eta_quarter"] == pytest.approx(ratio * 0.01**0.25)
    assert b2["fast_transient"] == pytest.approx(
        1.25 * math.exp(-2.0 / (16.0 * 0.01))
    )
    assert terms["regime_drift_negative"] is False  # drift exactly zero here
    drifted = theoretical_bound_terms(
        ScaleRegime(0.04, 0.001, 2.0, 1.0), K=1.0, zeta=0.1, T=1.0
    )
    assert drifted["regime_drift_negative"] is True


def test_theoretical_bound_gamma_infinity_and_limits():
    tall = ScaleRegime(0.01, 0.0001, math.inf, 1.0)
    terms = theoretical_bound_terms(tall, K=1.0, zeta=0.1, T=1.0)
    assert terms["bracket1"]["regime_drift_sqrt"] == pytest.approx(0.1)  # |eta/eps|^0.5
    coarse = theoretical_bound(ScaleRegime(0.04, 0.04, 1.0, 1.0), K=1.0)
    fine = theoretical_bound(ScaleRegime(0.01, 0.01, 1.0, 1.0), K=1.0)
    tiny = theoretical_bound(ScaleRegime(1e-8, 1e-8, 1.0, 1.0), K=1.0)
    assert coarse > fine > tiny > 0.0
    assert tiny < 0.05


def test_theoretical_bound_validation():
    regime = ScaleRegime(0.01, 0.01, 1.0, 1.0)
    for bad_zeta in (0.0, 0.5, 0.7, -0.1):
        with pytest.raises(ValueError):
            theoretical_bound(regime, K=1.0, zeta=bad_zeta)
    with pytest.raises(ValueError):
        theoretical_bound(regime, K=0.0)


# -- end-to-end fluctuation check --------------------------------------


def test_clt_verify_affine_smoke(affine):
    regime = ScaleRegime(0.04, 0.04, 1.0, 0.4)
    reports = clt_verify(
        affine, regime, 0.0, 0.0, 0.002, 500, seed=11, n_boot=100
    )
    assert [r.t for r in reports] == [0.1, 0.2, 0.4]
    for rep in reports:
        assert rep.n == 500
        assert 0.0 <= rep.w1 < 0.5
        assert rep.bootstrap_ci[0] <= rep.bootstrap_ci[1]
        assert rep.mean_gap >= 0.0 and rep.sd_gap >= 0.0
        assert rep.w1 >= rep.mean_gap - 1e-12
        expect_var = 1.5 * (1.0 - math.exp(-2.0 * rep.t))
        assert rep.limit_var == pytest.approx(expect_var, rel=1e-4)
        keys = set(rep.to_dict())
        assert keys == {"t", "w1", "ci_lo", "ci_hi", "mean_gap", "sd_gap"}
    again = clt_verify(
        affine, regime, 0.0, 0.0, 0.002, 500, seed=11, n_boot=100
    )
    assert [r.w1 for r in again] == [r.w1 for r in reports]
    assert [r.bootstrap_ci for r in again] == [r.bootstrap_ci for r in reports]


def test_clt_verify_rejects_bad_checkpoints(affine):
    regime = ScaleRegime(0.04, 0.04, 1.0, 0.4)
    with pytest.raises(ValueError):
        clt_verify(affine, regime, 0.0, 0.0, 0.002, 10, checkpoints=(0.0,))
    with pytest.raises(ValueError):
        clt_verify(affine, regime, 0.0, 0.0, 0.002, 10, checkpoints=(0.9,))


def test_default_checkpoints():
    assert default_checkpoints(1.0) == (0.25, 0.5, 1.0)


# -- rate sweep --------------------------------------------------------


def _stub_clt(w1_of_eps, ci_of_w1):
    def fake(model, regime, x0, y0, dt, n_paths, checkpoints=None, seed=0, **kw):
        w1 = w1_of_eps(regime.epsilon)
        return [
            WassersteinReport(
                t=checkpoints[0],
                n=n_paths,
                w1=w1,
                bootstrap_ci=ci_of_w1(w1),
                mean_gap=0.0,
                sd_gap=0.0,
                limit_var=1.0,
            )
        ]

    return fake


def test_rate_sweep_recovers_synthetic_slope(affine, monkeypatch):
    monkeypatch.setattr(
        metrics_mod, "clt_verify", _stub_clt(lambda e: e**0.25, lambda w: (0.9 * w, 1.1 * w))
    )
    fit = rate_sweep(
        affine, (0.16, 0.08, 0.04, 0.02), "equal", {"n_paths": 10}, K=1.0
    )
    assert fit.slope == pytest.approx(0.25, abs=1e-12)
    assert fit.intercept == pytest.approx(0.0, abs=1e-12)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.noisy_points == ()
    # envelope anchored at the coarsest point by construction
    assert fit.bound_values[0] == pytest.approx(fit.points[0][2], rel=1e-12)
    assert len(fit.bound_values) == 4
    d = fit.to_dict()
    assert set(d) == {"points", "rate", "bound", "c_fit", "noisy_points"}
    assert set(d["rate"]) == {"slope", "intercept", "r2"}


def test_rate_sweep_flags_noisy_points_and_eta_rule(affine, monkeypatch):
    monkeypatch.setattr(
        metrics_mod, "clt_verify", _stub_clt(lambda e: e**0.5, lambda w: (w / 5.0, 1.1 * w))
    )
    fit = rate_sweep(
        affine, (0.16, 0.08, 0.04), lambda e: e * e, {"n_paths": 10}, K=1.0
    )
    assert fit.noisy_points == (0, 1, 2)
    assert [p[1] for p in fit.points] == pytest.approx([e * e for e, _, _ in fit.points])


def test_rate_sweep_validation(affine):
    with pytest.raises(ValueError):
        rate_sweep(affine, (0.1, 0.05), "equal", {})
    with pytest.raises(ValueError):
        rate_sweep(affine, (0.1, 0.1, 0.05), "equal", {})
    with pytest.raises(ValueError):
        rate_sweep(affine, (0.1, 0.05, 0.025), "linked", {})


def test_rate_sweep_affine_end_to_end(affine):
    fit = rate_sweep(
        affine,
        (0.16, 0.08, 0.04),
        "equal",
        {"n_paths": 300, "n_boot": 100},
        T=0.4,
        seed=6,
    )
    assert len(fit.points) == 3
    assert all(w > 0 for _, _, w in fit.points)
    assert all(b > 0 for b in fit.bound_values)
    assert fit.bound_values[0] == pytest.approx(fit.points[0][2], rel=1e-12)
    assert set(fit.to_dict()["rate"]) == {"slope", "intercept", "r2"}
