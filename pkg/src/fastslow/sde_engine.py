"""Euler-Maruyama simulation of the coupled slow-fast system.

Paths of

    dX = c(X, Y) dt + sqrt(eps) * sigma(X, Y) dW^1
    dY = (1/eta) f(X, Y) dt + (1/sqrt(eta)) tau(X, Y) dW^2

are advanced with the explicit scheme

    X_{k+1} = X_k + c dt + sqrt(eps) sigma dW1_k
    Y_{k+1} = Y_k + (f/eta) dt + (tau/sqrt(eta)) dW2_k

under the stability guard dt <= eta/20 (twenty steps per fast
relaxation time).  Brownian increments come from counter-based
per-path streams keyed by (master_seed, path_id, channel), so results
are independent of execution order and worker count, and the stored
increments can be replayed exactly by the tangent-process module.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from fastslow.coefficients import CoefficientSet
from fastslow.homogenization import LimitTrajectory

__all__ = [
    "ScaleRegime",
    "PathBundle",
    "FluctuationSample",
    "StabilityError",
    "BlowUpError",
    "AlignmentError",
    "simulate_paths",
    "simulate_with_increments",
    "draw_increments",
    "fluctuation_samples",
    "limit_gaussian_samples",
    "save_bundle",
    "load_bundle",
    "export_paths_csv",
    "effective_dt",
]

#: Stream channel tags for the per-(seed, id, channel) generators.
CHANNEL_W1 = 0
CHANNEL_W2 = 1
CHANNEL_GAUSS_LIMIT = 2
CHANNEL_BOOTSTRAP = 3

#: Stability guard: at most this fraction of the fast relaxation time
#: per step.
STABILITY_FRACTION = 1.0 / 20.0


class StabilityError(ValueError):
    """The requested step exceeds the eta/20 stability guard."""


class BlowUpError(FloatingPointError):
    """A simulated state became non-finite."""


class AlignmentError(ValueError):
    """A requested time does not sit on the stored grids."""


@dataclass(frozen=True)
class ScaleRegime:
    """The two small parameters, the declared limit regime, and the horizon.

    ``gamma`` is the declared limit of sqrt(eps/eta) (may be ``inf``);
    at finite (eps, eta) the gap |sqrt(eps/eta) - gamma| is reported as
    regime drift, not treated as an error.
    """

    epsilon: float
    eta: float
    gamma: float
    T: float

    def __post_init__(self):
        for name in ("epsilon", "eta", "gamma", "T"):
            v = getattr(self, name)
            if not v > 0:
                raise ValueError(f"{name} must be positive (got {v})")

    @property
    def sqrt_ratio(self) -> float:
        """sqrt(eps / eta) at the configured point."""
        return math.sqrt(self.epsilon / self.eta)

    def regime_drift(self) -> float | None:
        """|sqrt(eps/eta) - gamma| for finite gamma, else None."""
        if math.isinf(self.gamma):
            return None
        return abs(self.sqrt_ratio - self.gamma)

    def scaling_quotient(self) -> float:
        """Diagnostic quotient for the admissibility of an (eps, eta) sweep.

        sqrt(eps) divided by sqrt(eta/eps) when gamma = inf, or by
        (sqrt(eps/eta) - gamma) when gamma is finite.  A sweep is
        admissible when this stays bounded away from zero; it is
        reported, never enforced.  May be ``inf`` when the configured
        point sits exactly on the declared regime.
        """
        if math.isinf(self.gamma):
            denom = math.sqrt(self.eta / self.epsilon)
        else:
            denom = self.sqrt_ratio - self.gamma
        if denom == 0.0:
            return math.inf
        return math.sqrt(self.epsilon) / denom


@dataclass(frozen=True)
class PathBundle:
    """Simulated paths plus the noise that generated them.

    ``X``/``Y`` have shape (n_steps + 1, n_paths) when stored;
    ``dW1``/``dW2`` have shape (n_steps, n_paths).  ``captures`` holds
    {step index: (X_row, Y_row)} snapshots for memory-light runs that
    skip full storage.  Immutable once assembled.
    """

    regime: ScaleRegime
    x0: float
    y0: float
    dt: float
    master_seed: object
    n_paths: int
    n_steps: int
    X: np.ndarray | None
    Y: np.ndarray | None
    dW1: np.ndarray | None
    dW2: np.ndarray | None
    captures: Mapping[int, tuple[np.ndarray, np.ndarray]] | None = None

    @property
    def t_grid(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    def state_at(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """(X, Y) rows at step index k, from full storage or captures."""
        if self.X is not None:
            return self.X[k], self.Y[k]
        if self.captures is not None and k in self.captures:
            return self.captures[k]
        raise AlignmentError(f"step {k} was not stored or captured")

    def increment_variance_z(self) -> float:
        """Worst z-score of the per-step increment variance against dt.

        Var of a chi^2-based variance estimate over N = n_steps*n_paths
        increments is 2 dt^2 / N; returns max |s^2 - dt| / se over the
        two channels.
        """
        if self.dW1 is None:
            raise ValueError("increments were not stored")
        worst = 0.0
        n = self.dW1.size
        se = math.sqrt(2.0 / n) * self.dt
        for dw in (self.dW1, self.dW2):
            s2 = float(np.mean(dw**2))
            worst = max(worst, abs(s2 - self.dt) / se)
        return worst


@dataclass(frozen=True)
class FluctuationSample:
    """Rescaled deviation theta = (X_t - Xbar_t)/sqrt(eps) across paths."""

    t: float
    theta: np.ndarray
    limit_mean: float
    limit_var: float


def effective_dt(dt_user: float, eta: float) -> float:
    """Clamp a requested step to the eta/20 stability guard."""
    return min(dt_user, eta * STABILITY_FRACTION)


def _stream(master_seed, path_id: int, channel: int) -> np.random.Generator:
    """Counter-based generator keyed by (master_seed, path_id, channel)."""
    if isinstance(master_seed, (tuple, list)):
        entropy = tuple(int(v) for v in master_seed) + (int(path_id), int(channel))
    else:
        entropy = (int(master_seed), int(path_id), int(channel))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def draw_increments(
    master_seed,
    path_ids: Sequence[int],
    n_steps: int,
    dt: float,
    threads: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Brownian increments (n_steps, n_paths) for both channels.

    Each (path, channel) stream is drawn independently of every other,
    so the result does not depend on scheduling order.
    """
    n_paths = len(path_ids)
    dW1 = np.empty((n_steps, n_paths))
    dW2 = np.empty((n_steps, n_paths))
    scale = math.sqrt(dt)

    def fill(j: int) -> None:
        pid = path_ids[j]
        dW1[:, j] = _stream(master_seed, pid, CHANNEL_W1).normal(0.0, scale, n_steps)
        dW2[:, j] = _stream(master_seed, pid, CHANNEL_W2).normal(0.0, scale, n_steps)

    if threads and threads > 1 and n_paths > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill, range(n_paths)))
    else:
        for j in range(n_paths):
            fill(j)
    return dW1, dW2


def simulate_with_increments(
    model: CoefficientSet,
    regime: ScaleRegime,
    x0: float,
    y0: float,
    dt: float,
    dW1: np.ndarray,
    dW2: np.ndarray,
    store_paths: bool = True,
    capture_indices: Iterable[int] = (),
):
    """Run the Euler-Maruyama recursion on externally supplied noise.

    Returns (X, Y, captures): full (n_steps+1, n_paths) arrays when
    ``store_paths`` (else None) and a dict of requested snapshots.
    Raises :class:`BlowUpError` (naming the step) on non-finite states.
    """
    n_steps, n_paths = dW1.shape
    eps_root = math.sqrt(regime.epsilon)
    eta = regime.eta
    eta_root = math.sqrt(eta)
    wanted = sorted(set(int(k) for k in capture_indices))
    for k in wanted:
        if not 0 <= k <= n_steps:
            raise AlignmentError(f"capture index {k} outside [0, {n_steps}]")
    captures: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    X = np.empty((n_steps + 1, n_paths)) if store_paths else None
    Y = np.empty((n_steps + 1, n_paths)) if store_paths else None
    x = np.full(n_paths, float(x0))
    y = np.full(n_paths, float(y0))
    if store_paths:
        X[0] = x
        Y[0] = y
    if 0 in wanted:
        captures[0] = (x.copy(), y.copy())
    for k in range(n_steps):
        x_new = x + model.c(x, y) * dt + eps_root * model.sigma(x, y) * dW1[k]
        y_new = y + model.f(x, y) * (dt / eta) + model.tau(x, y) * (dW2[k] / eta_root)
        x, y = x_new, y_new
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            bad = int(np.argmax(~(np.isfinite(x) & np.isfinite(y))))
            raise BlowUpError(
                f"non-finite state at step {k + 1} (path column {bad}); "
                "check coefficients and the step size"
            )
        if store_paths:
            X[k + 1] = x
            Y[k + 1] = y
        if (k + 1) in wanted:
            captures[k + 1] = (x.copy(), y.copy())
    return X, Y, captures


def simulate_paths(
    model: CoefficientSet,
    regime: ScaleRegime,
    x0: float,
    y0: float,
    dt: float,
    n_paths: int,
    master_seed,
    threads: int | None = None,
    store_paths: bool = True,
    store_increments: bool = True,
    capture_indices: Iterable[int] = (),
    path_chunk: int | None = None,
) -> PathBundle:
    """Simulate a bundle of independent paths.

    Parameters
    ----------
    dt : float
        Requested step; must satisfy dt <= eta/20 (StabilityError
        otherwise).  The realized step divides T exactly:
        dt_eff = T / ceil(T / dt).
    n_paths : int
        Number of Monte Carlo paths (>= 1).
    master_seed : int or tuple of int
        Root of the per-path noise streams.
    store_paths, store_increments : bool
        Full (n_steps+1, n_paths) state / (n_steps, n_paths) noise
        storage.  Disable both and use ``capture_indices`` for
        memory-light large runs.
    capture_indices : iterable of int
        Step indices whose state rows are snapshotted regardless of
        ``store_paths``.
    path_chunk : int, optional
        Simulate in chunks of this many paths to bound peak memory.
    """
    if n_paths < 1:
        raise ValueError(f"n_paths must be >= 1 (got {n_paths})")
    guard = regime.eta * STABILITY_FRACTION
    if dt > guard * (1.0 + 1e-12):
        raise StabilityError(
            f"dt={dt:g} exceeds the stability guard eta/20={guard:g}; "
            "reduce dt or increase eta"
        )
    n_steps = max(1, math.ceil(regime.T / dt - 1e-9))
    dt_eff = regime.T / n_steps
    wanted = sorted(set(int(k) for k in capture_indices))
    chunk = n_paths if not path_chunk else max(1, int(path_chunk))

    X = np.empty((n_steps + 1, n_paths)) if store_paths else None
    Y = np.empty((n_steps + 1, n_paths)) if store_paths else None
    dW1 = np.empty((n_steps, n_paths)) if store_increments else None
    dW2 = np.empty((n_steps, n_paths)) if store_increments else None
    captures: dict[int, np.ndarray] = {
        k: (np.empty(n_paths), np.empty(n_paths)) for k in wanted
    }

    for start in range(0, n_paths, chunk):
        stop = min(start + chunk, n_paths)
        ids = range(start, stop)
        w1, w2 = draw_increments(master_seed, list(ids), n_steps, dt_eff, threads)
        cx, cy, caps = simulate_with_increments(
            model, regime, x0, y0, dt_eff, w1, w2,
            store_paths=store_paths, capture_indices=wanted,
        )
        if store_paths:
            X[:, start:stop] = cx
            Y[:, start:stop] = cy
        if store_increments:
            dW1[:, start:stop] = w1
            dW2[:, start:stop] = w2
        for k, (rx, ry) in caps.items():
            captures[k][0][start:stop] = rx
            captures[k][1][start:stop] = ry

    return PathBundle(
        regime=regime,
        x0=float(x0),
        y0=float(y0),
        dt=dt_eff,
        master_seed=master_seed,
        n_paths=n_paths,
        n_steps=n_steps,
        X=X,
        Y=Y,
        dW1=dW1,
        dW2=dW2,
        captures={k: (v[0], v[1]) for k, v in captures.items()} or None,
    )


def _grid_index(t: float, dt: float, n_max: int, what: str) -> int:
    k = int(round(t / dt))
    if abs(k * dt - t) > dt / 2 + 1e-12 or not 0 <= k <= n_max:
        raise AlignmentError(
            f"time t={t} does not sit on the {what} grid (dt={dt:g})"
        )
    return k


def fluctuation_samples(
    bundle: PathBundle, trajectory: LimitTrajectory, t: float
) -> FluctuationSample:
    """Fluctuation samples theta_t = (X_t - Xbar_t)/sqrt(eps).

    ``t`` must sit on both the bundle grid and the trajectory grid
    within half a step.  The limit law is N(0, sigma_t^2); the variance
    is read from the trajectory profile (requires
    :func:`fastslow.homogenization.attach_variance`).
    """
    k = _grid_index(t, bundle.dt, bundle.n_steps, "path")
    traj_dt = float(trajectory.t_grid[1] - trajectory.t_grid[0])
    j = _grid_index(t, traj_dt, len(trajectory.t_grid) - 1, "trajectory")
    x_row, _ = bundle.state_at(k)
    theta = (x_row - trajectory.x_bar[j]) / math.sqrt(bundle.regime.epsilon)
    if not np.all(np.isfinite(theta)):
        raise BlowUpError(f"non-finite fluctuation samples at t={t}")
    if trajectory.sigma2 is None:
        raise ValueError(
            "trajectory has no variance profile; call attach_variance first"
        )
    return FluctuationSample(
        t=float(t),
        theta=theta,
        limit_mean=0.0,
        limit_var=float(trajectory.sigma2[j]),
    )


def limit_gaussian_samples(sigma2_t: float, n: int, seed) -> np.ndarray:
    """n i.i.d. N(0, sigma2_t) draws from the named limit-sampling stream."""
    if sigma2_t < 0:
        raise ValueError(f"variance must be nonnegative (got {sigma2_t})")
    rng = _stream(seed, 0, CHANNEL_GAUSS_LIMIT)
    return rng.normal(0.0, math.sqrt(sigma2_t), int(n))


# -- bundle serialization ---------------------------------------------


def save_bundle(bundle: PathBundle, path) -> None:
    """Binary dump: little-endian float64 header then per-path blocks.

    Header: n_paths, n_steps, dt, x0, y0, epsilon, eta, master_seed.
    Per path: X (n_steps+1), Y (n_steps+1), dW1 (n_steps), dW2 (n_steps).
    Requires full path and increment storage.
    """
    if bundle.X is None or bundle.dW1 is None:
        raise ValueError("bundle must store paths and increments to be saved")
    seed = bundle.master_seed
    seed_val = float(seed if not isinstance(seed, (tuple, list)) else seed[0])
    header = np.array(
        [
            bundle.n_paths,
            bundle.n_steps,
            bundle.dt,
            bundle.x0,
            bundle.y0,
            bundle.regime.epsilon,
            bundle.regime.eta,
            seed_val,
        ],
        dtype="<f8",
    )
    blocks = np.concatenate(
        [bundle.X.T, bundle.Y.T, bundle.dW1.T, bundle.dW2.T], axis=1
    ).astype("<f8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(blocks.tobytes())


def load_bundle(path, gamma: float = math.inf) -> PathBundle:
    """Load a bundle saved by :func:`save_bundle`.

    ``gamma`` is not part of the binary layout and must be re-supplied
    (defaults to inf); T is reconstructed as n_steps * dt.
    """
    raw = np.fromfile(path, dtype="<f8")
    n_paths, n_steps = int(raw[0]), int(raw[1])
    dt, x0, y0, eps, eta, seed = (float(v) for v in raw[2:8])
    per_path = 2 * (n_steps + 1) + 2 * n_steps
    body = raw[8:].reshape(n_paths, per_path)
    n1 = n_steps + 1
    return PathBundle(
        regime=ScaleRegime(epsilon=eps, eta=eta, gamma=gamma, T=n_steps * dt),
        x0=x0,
        y0=y0,
        dt=dt,
        master_seed=int(seed),
        n_paths=n_paths,
        n_steps=n_steps,
        X=np.ascontiguousarray(body[:, :n1].T),
        Y=np.ascontiguousarray(body[:, n1 : 2 * n1].T),
        dW1=np.ascontiguousarray(body[:, 2 * n1 : 2 * n1 + n_steps].T),
        dW2=np.ascontiguousarray(body[:, 2 * n1 + n_steps :].T),
    )


def export_paths_csv(bundle: PathBundle, path) -> None:
    """CSV dump (path_id, t, X, Y) for small runs."""
    if bundle.X is None:
        raise ValueError("bundle must store full paths for CSV export")
    t = bundle.t_grid
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("path_id,t,X,Y\n")
        for j in range(bundle.n_paths):
            for k in range(bundle.n_steps + 1):
                fh.write(
                    f"{j},{float(t[k])!r},"
                    f"{float(bundle.X[k, j])!r},{float(bundle.Y[k, j])!r}\n"
                )
