"""Wasserstein-1 verification of the Gaussian fluctuation limit.

In one dimension the Wasserstein-1 distance between two laws equals the
L1 distance between their CDFs, so the distance between an empirical
measure and a Gaussian target has a closed form piecewise between order
statistics.  This module provides that exact estimator with percentile
bootstrap confidence intervals, a checkpointed end-to-end verification
that the rescaled fluctuations theta_t = (X_t - Xbar_t)/sqrt(eps)
approach N(0, sigma_t^2), the two-bracket theoretical rate envelope

    C1 (eta^{1/4} + eps^{1/4} + |eta/eps - 1/gamma^2|^{1/2}
        + (eta/eps)^{1/2} eta^{1/2 - zeta} + eps^{1/2 - zeta})
  + C2 ((eta/eps)^{1/2} eta^{1/4} + (eta/eps) eta^{1/4}
        + (1 + eta/eps) exp(-K T/(16 eta)))

with zeta in (0, 1/2), and a log-log rate regression across (eps, eta)
sweeps with the envelope constant anchored at the coarsest point.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from fastslow.coefficients import CoefficientSet
from fastslow.homogenization import (
    HomogenizedModel,
    attach_variance,
    build_homogenized,
    limit_ode,
)
from fastslow.sde_engine import (
    CHANNEL_BOOTSTRAP,
    ScaleRegime,
    _grid_index,
    _stream,
    effective_dt,
    fluctuation_samples,
    simulate_paths,
)

__all__ = [
    "WassersteinReport",
    "RateFit",
    "w1_vs_gaussian",
    "w1_between_gaussians",
    "bootstrap_w1",
    "clt_verify",
    "theoretical_bound",
    "theoretical_bound_terms",
    "rate_sweep",
    "default_checkpoints",
]

#: Bootstrap defaults: resample count and CI level.
N_BOOTSTRAP = 400
CI_LEVEL = 0.95


@dataclass(frozen=True)
class WassersteinReport:
    """Exact W1 of fluctuation samples against the Gaussian limit at one time.

    ``bootstrap_ci`` is the percentile CI of the W1 estimate; the mean
    and standard-deviation gaps localize which moment drives a large
    distance.
    """

    t: float
    n: int
    w1: float
    bootstrap_ci: tuple[float, float]
    mean_gap: float
    sd_gap: float
    limit_var: float

    def to_dict(self) -> dict:
        return {
            "t": self.t,
            "w1": self.w1,
            "ci_lo": self.bootstrap_ci[0],
            "ci_hi": self.bootstrap_ci[1],
            "mean_gap": self.mean_gap,
            "sd_gap": self.sd_gap,
        }


@dataclass(frozen=True)
class RateFit:
    """Log-log regression of W1 against eps across a sweep.

    ``bound_values`` is the theoretical envelope evaluated at each sweep
    point with C1 = C2 = ``c_fit`` anchored so the envelope meets the
    coarsest point; ``noisy_points`` flags points whose bootstrap CI
    spans more than [w1/3, 3 w1].
    """

    points: tuple[tuple[float, float, float], ...]
    slope: float
    intercept: float
    r_squared: float
    bound_values: tuple[float, ...]
    c_fit: float
    noisy_points: tuple[int, ...]
    reports: tuple[WassersteinReport, ...] = ()

    def to_dict(self) -> dict:
        return {
            "points": [
                {"epsilon": e, "eta": h, "w1": w} for e, h, w in self.points
            ],
            "rate": {
                "slope": self.slope,
                "intercept": self.intercept,
                "r2": self.r_squared,
            },
            "bound": list(self.bound_values),
            "c_fit": self.c_fit,
            "noisy_points": list(self.noisy_points),
        }


#: |z| beyond which exp(-z^2/2) underflows to exactly 0.0 in float64;
#: clamping before squaring avoids overflow warnings without changing
#: any representable value.
_Z_UNDERFLOW = 40.0


def _gaussian_cdf_antiderivative(x: np.ndarray, mu: float, sigma: float) -> np.ndarray:
    """Antiderivative of the N(mu, sigma^2) CDF vanishing at -infinity."""
    z = (x - mu) / sigma
    zc = np.clip(z, -_Z_UNDERFLOW, _Z_UNDERFLOW)
    return (x - mu) * ndtr(z) + sigma * np.exp(-0.5 * zc**2) / math.sqrt(2.0 * math.pi)


def w1_vs_gaussian(samples, mu: float, sigma2: float) -> float:
    """Exact W1 distance of an empirical measure from N(mu, sigma2).

    Integrates |F_n - F| in closed form on each interval between
    consecutive order statistics (where F_n is constant and the Gaussian
    CDF F crosses the plateau at a known quantile) plus the two Gaussian
    tails.  With sigma2 = 0 the target is a point mass and the distance
    is mean |x_i - mu|.
    """
    xs = np.sort(np.asarray(samples, dtype=float))
    n = xs.size
    if n < 2:
        raise ValueError(f"need at least two samples (got {n})")
    if not np.all(np.isfinite(xs)):
        raise ValueError("samples must be finite")
    if sigma2 < 0:
        raise ValueError(f"variance must be nonnegative (got {sigma2})")
    if sigma2 == 0.0:
        return float(np.mean(np.abs(xs - mu)))
    sigma = math.sqrt(sigma2)

    q = np.arange(1, n) / n  # plateau levels of F_n between order stats
    a, b = xs[:-1], xs[1:]
    crossing = np.clip(mu + sigma * ndtri(q), a, b)
    G = lambda x: _gaussian_cdf_antiderivative(x, mu, sigma)  # noqa: E731
    middle = np.sum(q * (2.0 * crossing - a - b) + G(a) + G(b) - 2.0 * G(crossing))

    left_tail = G(xs[0])  # integral of F below the smallest sample
    z_hi = (xs[-1] - mu) / sigma
    z_hi_c = min(max(z_hi, -_Z_UNDERFLOW), _Z_UNDERFLOW)
    right_tail = sigma * (
        np.exp(-0.5 * z_hi_c**2) / math.sqrt(2.0 * math.pi)
        - z_hi * (1.0 - ndtr(z_hi))
    )
    return float(middle + left_tail + right_tail)


def w1_between_gaussians(mu1: float, sigma1: float, mu2: float, sigma2: float) -> float:
    """Closed-form W1 between two 1-D Gaussians.

    The optimal coupling is the common-quantile one, so the distance is
    E|d + s Z| with d = mu1 - mu2, s = sigma1 - sigma2 and Z standard
    normal (a folded-normal mean).
    """
    d = mu1 - mu2
    s = abs(sigma1 - sigma2)
    if s == 0.0:
        return abs(d)
    ratio = d / s
    return s * math.sqrt(2.0 / math.pi) * math.exp(-0.5 * ratio**2) + d * (
        1.0 - 2.0 * ndtr(-ratio)
    )


def bootstrap_w1(
    samples,
    mu: float,
    sigma2: float,
    seed,
    n_boot: int = N_BOOTSTRAP,
    level: float = CI_LEVEL,
) -> tuple[float, float]:
    """Percentile bootstrap CI for :func:`w1_vs_gaussian`.

    Resamples the empirical measure with replacement using the
    dedicated bootstrap noise channel of the seed, so path simulation
    and resampling never share a stream.
    """
    xs = np.asarray(samples, dtype=float)
    rng = _stream(seed, 0, CHANNEL_BOOTSTRAP)
    stats = np.empty(n_boot)
    for i in range(n_boot):
        stats[i] = w1_vs_gaussian(rng.choice(xs, size=xs.size, replace=True), mu, sigma2)
    alpha = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(stats, [alpha, 100.0 - alpha])
    return float(lo), float(hi)


def default_checkpoints(T: float) -> tuple[float, float, float]:
    """Default observation times {T/4, T/2, T}."""
    return (T / 4.0, T / 2.0, T)


# Cache of homogenized models keyed by coefficient expressions and grid.
_HOM_CACHE: dict[tuple, HomogenizedModel] = {}


def _cached_homogenized(
    model: CoefficientSet,
    x_range: tuple[float, float],
    nx: int,
    ny: int,
    gamma: float,
) -> HomogenizedModel:
    key = (
        model.name,
        tuple(sorted(model.expressions.items())),
        tuple(x_range),
        nx,
        ny,
        gamma,
    )
    if key not in _HOM_CACHE:
        _HOM_CACHE[key] = build_homogenized(model, x_range, nx, ny, gamma)
    return _HOM_CACHE[key]


def clt_verify(
    model: CoefficientSet,
    regime: ScaleRegime,
    x0: float,
    y0: float,
    dt: float,
    n_paths: int,
    checkpoints: Sequence[float] | None = None,
    seed=0,
    n_boot: int = N_BOOTSTRAP,
    x_range: tuple[float, float] = (-3.0, 3.0),
    nx: int = 33,
    ny: int = 4096,
    ode_dt: float = 5e-4,
    threads: int | None = None,
) -> list[WassersteinReport]:
    """End-to-end fluctuation check at each checkpoint time.

    Builds (and caches) the homogenized model, integrates the limit ODE
    with its variance profile, simulates the coupled system keeping
    only checkpoint snapshots, and reports the exact W1 distance of the
    rescaled fluctuations from N(0, sigma_t^2) with a bootstrap CI.

    Checkpoints must sit on the simulation grid (after the stability
    clamp) and default to {T/4, T/2, T}.
    """
    T = regime.T
    if checkpoints is None:
        checkpoints = default_checkpoints(T)
    times = [float(t) for t in checkpoints]
    for t in times:
        if not 0.0 < t <= T + 1e-12:
            raise ValueError(f"checkpoint {t} outside (0, {T}]")

    hom = _cached_homogenized(model, x_range, nx, ny, regime.gamma)
    trajectory = attach_variance(hom, limit_ode(hom, x0, T, ode_dt))

    step = effective_dt(dt, regime.eta)
    n_steps = max(1, int(math.ceil(T / step - 1e-9)))
    dt_eff = T / n_steps
    capture = [_grid_index(t, dt_eff, n_steps, "path") for t in times]
    bundle = simulate_paths(
        model,
        regime,
        x0,
        y0,
        dt,
        n_paths,
        seed,
        threads=threads,
        store_paths=False,
        store_increments=False,
        capture_indices=capture,
    )
    reports = []
    for i, t in enumerate(times):
        sample = fluctuation_samples(bundle, trajectory, t)
        w1 = w1_vs_gaussian(sample.theta, sample.limit_mean, sample.limit_var)
        ci = bootstrap_w1(
            sample.theta, sample.limit_mean, sample.limit_var, _point_seed(seed, i), n_boot
        )
        reports.append(
            WassersteinReport(
                t=t,
                n=len(sample.theta),
                w1=w1,
                bootstrap_ci=ci,
                mean_gap=abs(float(np.mean(sample.theta)) - sample.limit_mean),
                sd_gap=abs(
                    float(np.std(sample.theta)) - math.sqrt(sample.limit_var)
                ),
                limit_var=sample.limit_var,
            )
        )
    return reports


def theoretical_bound_terms(
    regime: ScaleRegime, K: float, zeta: float, T: float
) -> dict:
    """Individual envelope terms (C1 and C2 brackets) plus diagnostics.

    The regime-drift term eta/eps - 1/gamma^2 enters under an absolute
    value; its sign is reported separately rather than guessed away.
    """
    if not 0.0 < zeta < 0.5:
        raise ValueError(f"zeta must lie in (0, 1/2) (got {zeta})")
    if not K > 0:
        raise ValueError(f"K must be positive (got {K})")
    eps, eta, gamma = regime.epsilon, regime.eta, regime.gamma
    ratio = eta / eps
    inv_gamma2 = 0.0 if math.isinf(gamma) else 1.0 / gamma**2
    drift = ratio - inv_gamma2
    bracket1 = {
        "eta_quarter": eta**0.25,
        "eps_quarter": eps**0.25,
        "regime_drift_sqrt": abs(drift) ** 0.5,
        "ratio_eta_holder": ratio**0.5 * eta ** (0.5 - zeta),
        "eps_holder": eps ** (0.5 - zeta),
    }
    bracket2 = {
        "ratio_sqrt_eta_quarter": ratio**0.5 * eta**0.25,
        "ratio_eta_quarter": ratio * eta**0.25,
        "fast_transient": (1.0 + ratio) * math.exp(-K * T / (16.0 * eta)),
    }
    return {
        "bracket1": bracket1,
        "bracket2": bracket2,
        "regime_drift_negative": drift < 0,
    }


def theoretical_bound(
    regime: ScaleRegime,
    K: float,
    zeta: float = 0.1,
    C1: float = 1.0,
    C2: float = 1.0,
    T: float | None = None,
) -> float:
    """Two-bracket theoretical envelope at one (eps, eta, gamma) point."""
    terms = theoretical_bound_terms(regime, K, zeta, T if T is not None else regime.T)
    return C1 * sum(terms["bracket1"].values()) + C2 * sum(terms["bracket2"].values())


def rate_sweep(
    model: CoefficientSet,
    epsilons: Sequence[float],
    eta_rule: Callable[[float], float] | str,
    clt_config: Mapping,
    gamma: float = 1.0,
    T: float = 1.0,
    K: float = 1.0,
    zeta: float = 0.1,
    seed=0,
) -> RateFit:
    """W1 rate regression across an (eps, eta) sweep.

    Runs :func:`clt_verify` at the final-time checkpoint for each sweep
    point (eps decreasing, eta from ``eta_rule``; the string "equal"
    means eta = eps), regresses log w1 on log eps by ordinary least
    squares, and evaluates the theoretical envelope with C1 = C2
    anchored so it meets the coarsest point.  ``clt_config`` supplies
    the per-point keyword arguments of :func:`clt_verify` (x0, y0, dt
    as a rule ``dt_eta_fraction`` of eta, n_paths, ...).

    A point whose bootstrap CI extends outside [w1/3, 3 w1] is flagged
    as noisy, not failed.
    """
    eps_list = [float(e) for e in epsilons]
    if len(eps_list) < 3:
        raise ValueError("need at least three sweep points")
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("sweep must have strictly decreasing epsilon")
    if eta_rule == "equal":
        eta_of = lambda e: e  # noqa: E731
    elif callable(eta_rule):
        eta_of = eta_rule
    else:
        raise ValueError(f"unknown eta rule {eta_rule!r}")

    cfg = dict(clt_config)
    x0 = float(cfg.pop("x0", 0.0))
    y0 = float(cfg.pop("y0", 0.0))
    n_paths = int(cfg.pop("n_paths", 10_000))
    dt_eta_fraction = float(cfg.pop("dt_eta_fraction", 1.0 / 20.0))

    points: list[tuple[float, float, float]] = []
    reports: list[WassersteinReport] = []
    noisy: list[int] = []
    regimes: list[ScaleRegime] = []
    for i, eps in enumerate(eps_list):
        eta = float(eta_of(eps))
        regime = ScaleRegime(epsilon=eps, eta=eta, gamma=gamma, T=T)
        regimes.append(regime)
        rep = clt_verify(
            model,
            regime,
            x0,
            y0,
            dt_eta_fraction * eta,
            n_paths,
            checkpoints=(T,),
            seed=_point_seed(seed, i),
            **cfg,
        )[0]
        reports.append(rep)
        points.append((eps, eta, rep.w1))
        lo, hi = rep.bootstrap_ci
        if rep.w1 > 0 and (lo < rep.w1 / 3.0 or hi > 3.0 * rep.w1):
            noisy.append(i)

    log_e = np.log([p[0] for p in points])
    log_w = np.log([p[2] for p in points])
    slope, intercept = np.polyfit(log_e, log_w, 1)
    fitted = slope * log_e + intercept
    ss_res = float(np.sum((log_w - fitted) ** 2))
    ss_tot = float(np.sum((log_w - np.mean(log_w)) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    raw0 = theoretical_bound(regimes[0], K, zeta, 1.0, 1.0, T)
    c_fit = points[0][2] / raw0 if raw0 > 0 else 0.0
    bounds = tuple(
        theoretical_bound(r, K, zeta, c_fit, c_fit, T) for r in regimes
    )
    return RateFit(
        points=tuple(points),
        slope=float(slope),
        intercept=float(intercept),
        r_squared=r2,
        bound_values=bounds,
        c_fit=c_fit,
        noisy_points=tuple(noisy),
        reports=tuple(reports),
    )


def _point_seed(seed, i: int) -> tuple:
    if isinstance(seed, (tuple, list)):
        return tuple(int(v) for v in seed) + (i,)
    return (int(seed), i)
