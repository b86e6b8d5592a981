"""Coefficient models for coupled slow-fast stochastic systems.

A model bundles the four coefficient functions of the system

    dX_t = c(X_t, Y_t) dt + sqrt(eps) * sigma(X_t, Y_t) dW^1_t
    dY_t = (1/eta) f(X_t, Y_t) dt + (1/sqrt(eta)) tau(X_t, Y_t) dW^2_t

together with every first- and second-order partial derivative that the
tangent (sensitivity) equations downstream need.  Models are defined as
symbolic expressions in ``x`` and ``y``; partials are produced by symbolic
differentiation, so the supplied derivatives are exact.

Two built-in models ship with the package:

``affine-oracle``
    c = y - 2x, sigma = 1, f = x - y, tau = sqrt(2).  Every derived
    quantity (invariant density, averaged drift, corrector, limit
    variance, tangent flows) has a closed form, making this the
    reference oracle for tests.

``bounded-coupled``
    c = tanh(y) - 0.5 tanh(x), sigma = 1 + 0.1 cos(x) cos(y),
    f = 0.5 tanh(x) - y, tau = sqrt(2).  Bounded with bounded
    derivatives and coupled in both variables; the stress model for
    the Monte Carlo inequality checks.
"""

from __future__ import annotations

import dataclasses
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import sympy as sp
from sympy.parsing.sympy_parser import (
    convert_xor,
    parse_expr,
    standard_transformations,
)

__all__ = [
    "CoefficientSet",
    "AssumptionReport",
    "ModelEvaluationError",
    "ExpressionError",
    "model_from_expressions",
    "get_model",
    "builtin_model_names",
    "eval_all",
    "check_assumptions",
    "validate_partials",
    "TAU_MIN",
]

#: Nondegeneracy floor for the fast diffusion: |tau| below this raises.
TAU_MIN = 1e-6

_FUNC_NAMES = ("c", "sigma", "f", "tau")
_PARTIAL_PREFIXES = ("d1_", "d2_", "d11_", "d12_", "d22_")

_X, _Y = sp.symbols("x y", real=True)
_PARSE_LOCALS = {
    "x": _X,
    "y": _Y,
    "sin": sp.sin,
    "cos": sp.cos,
    "tanh": sp.tanh,
    "exp": sp.exp,
    "sqrt": sp.sqrt,
    "pi": sp.pi,
}
_TRANSFORMS = standard_transformations + (convert_xor,)
# Expression strings may only use numbers, x/y, the allowed function
# names, arithmetic operators and parentheses.
_TEXT_OK = re.compile(r"^[0-9a-zA-Z_+\-*/^(). \t]*$")


class ExpressionError(ValueError):
    """A model expression failed to parse or used a disallowed symbol."""


class ModelEvaluationError(ValueError):
    """A coefficient function produced a non-finite or degenerate value."""


@dataclass(frozen=True)
class CoefficientSet:
    """The four coefficients c, sigma, f, tau and all their partials.

    ``d1_*`` / ``d2_*`` are the first partials in x and y, ``d11_*`` /
    ``d12_*`` / ``d22_*`` the second partials (the mixed partial is
    stored once; all models are C^2).  Every callable accepts scalars or
    numpy arrays and broadcasts.  Instances are immutable and safe to
    share across worker threads.
    """

    name: str
    c: Callable
    sigma: Callable
    f: Callable
    tau: Callable
    d1_c: Callable
    d2_c: Callable
    d11_c: Callable
    d12_c: Callable
    d22_c: Callable
    d1_sigma: Callable
    d2_sigma: Callable
    d11_sigma: Callable
    d12_sigma: Callable
    d22_sigma: Callable
    d1_f: Callable
    d2_f: Callable
    d11_f: Callable
    d12_f: Callable
    d22_f: Callable
    d1_tau: Callable
    d2_tau: Callable
    d11_tau: Callable
    d12_tau: Callable
    d22_tau: Callable
    expressions: Mapping[str, str] | None = None
    reference_solution: Mapping[str, object] | None = field(
        default=None, compare=False, repr=False
    )

    def partial(self, prefix: str, func: str) -> Callable:
        """Return the callable for e.g. ``partial("d12_", "sigma")``."""
        return getattr(self, prefix + func)


@dataclass(frozen=True)
class AssumptionReport:
    """Grid suprema of the dissipativity/boundedness constants.

    ``M_hat`` bounds the coupling strength of the fast tangent equation,
    ``K_hat`` is its dissipativity margin at moment order ``2p``:

        M_hat = sup |d1 f| + 2(2p-1) |d1 tau|^2 + |d2 tau|^2
        K_hat = -sup [ (2p-1)|d1 f| + (2p-1)(2p-2)|d1 tau|^2
                       + 2p(2p-1)|d2 tau|^2 + 2p d2 f ]

    with the suprema taken over the stated evaluation grid.  The moment
    machinery is well posed exactly when ``K_hat > 0``.
    """

    p: int
    M_hat: float
    K_hat: float
    grid: Mapping[str, object]
    passes: bool
    worst_point: tuple[float, float]

    def to_dict(self) -> dict:
        return {
            "p": self.p,
            "M_hat": self.M_hat,
            "K_hat": self.K_hat,
            "grid": dict(self.grid),
            "passes": self.passes,
            "worst_point": list(self.worst_point),
        }


def _parse_expression(text: str) -> sp.Expr:
    """Parse one coefficient expression over the variables x, y.

    Allowed: numbers, x, y, + - * / ^ ( ), and sin, cos, tanh, exp,
    sqrt, pi.  Anything else is rejected.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("coefficient expression must be a non-empty string")
    if "__" in text or not _TEXT_OK.match(text):
        raise ExpressionError(f"disallowed characters in expression {text!r}")
    try:
        expr = parse_expr(
            text, local_dict=_PARSE_LOCALS, transformations=_TRANSFORMS
        )
    except Exception as exc:  # sympy raises a zoo of error types
        raise ExpressionError(f"could not parse expression {text!r}: {exc}") from exc
    extra = expr.free_symbols - {_X, _Y}
    if extra:
        names = ", ".join(sorted(str(s) for s in extra))
        raise ExpressionError(
            f"expression {text!r} uses unknown symbol(s): {names}"
        )
    return expr


def _numpify(expr: sp.Expr) -> Callable:
    """Lambdify ``expr(x, y)`` with full scalar/array broadcasting.

    sympy collapses constant expressions to scalars; the wrapper
    re-broadcasts so the output shape always matches the broadcast
    input shape.
    """
    fn = sp.lambdify((_X, _Y), expr, modules="numpy")

    def wrapped(x, y):
        x_arr = np.asarray(x, dtype=float)
        y_arr = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(x_arr.shape, y_arr.shape)
        out = np.asarray(fn(x_arr, y_arr), dtype=float)
        if out.shape != shape:
            out = np.broadcast_to(out, shape).copy()
        if out.ndim == 0 and np.isscalar(x) and np.isscalar(y):
            return float(out)
        return out

    return wrapped


def model_from_expressions(
    name: str,
    c: str,
    sigma: str,
    f: str,
    tau: str,
    reference_solution: Mapping[str, object] | None = None,
) -> CoefficientSet:
    """Build a :class:`CoefficientSet` from four expression strings.

    Parameters
    ----------
    name : str
        Identifier used in reports and dumps.
    c, sigma, f, tau : str
        Expressions in ``x`` and ``y``; see :func:`_parse_expression`
        for the allowed grammar.
    reference_solution : mapping, optional
        Closed-form reference quantities for oracle models.

    Returns
    -------
    CoefficientSet
        With all 20 partials generated by symbolic differentiation.
    """
    texts = {"c": c, "sigma": sigma, "f": f, "tau": tau}
    fields: dict[str, Callable] = {}
    for func, text in texts.items():
        try:
            expr = _parse_expression(text)
        except ExpressionError as exc:
            raise ExpressionError(f"coefficient {func!r}: {exc}") from exc
        fields[func] = _numpify(expr)
        fields["d1_" + func] = _numpify(sp.diff(expr, _X))
        fields["d2_" + func] = _numpify(sp.diff(expr, _Y))
        fields["d11_" + func] = _numpify(sp.diff(expr, _X, 2))
        fields["d12_" + func] = _numpify(sp.diff(expr, _X, _Y))
        fields["d22_" + func] = _numpify(sp.diff(expr, _Y, 2))
    return CoefficientSet(
        name=name,
        expressions=dict(texts),
        reference_solution=reference_solution,
        **fields,
    )


def _affine_oracle() -> CoefficientSet:
    """Linear model with closed forms for every derived quantity.

    With c = y - 2x, f = x - y, tau = sqrt(2) the frozen-x fast process
    is an Ornstein-Uhlenbeck process with stationary law N(x, 1), the
    averaged drift is -x, the corrector is phi = x - y, and at gamma the
    effective diffusion is q = 1 + 2/gamma^2 (constant in x), so

        sigma_t^2 = q_bar * (1 - exp(-2 t)) / 2.
    """

    def q_bar(gamma: float) -> float:
        if math.isinf(gamma):
            return 1.0
        return 1.0 + 2.0 / gamma**2

    def sigma2(t, gamma: float):
        return q_bar(gamma) * (1.0 - np.exp(-2.0 * np.asarray(t, float))) / 2.0

    ref = {
        "density_mean": lambda x: np.asarray(x, float) + 0.0,
        "density_var": 1.0,
        "c_bar": lambda x: -np.asarray(x, float),
        "c_bar_prime": lambda x: np.full_like(np.asarray(x, float), -1.0),
        "phi": lambda x, y: np.asarray(x, float) - np.asarray(y, float),
        "dy_phi": lambda x, y: np.full(
            np.broadcast_shapes(np.shape(x), np.shape(y)), -1.0
        ),
        "q_bar": q_bar,
        "sigma2": sigma2,
    }
    return model_from_expressions(
        "affine-oracle",
        c="y - 2*x",
        sigma="1",
        f="x - y",
        tau="sqrt(2)",
        reference_solution=ref,
    )


def _bounded_coupled() -> CoefficientSet:
    """Bounded, fully coupled stress model.

    f = 0.5 tanh(x) - y with tau = sqrt(2) keeps the frozen-x fast
    process an OU process with stationary law N(0.5 tanh(x), 1);
    everything else (averaged drift, corrector) requires quadrature.
    """
    ref = {
        "density_mean": lambda x: 0.5 * np.tanh(np.asarray(x, float)),
        "density_var": 1.0,
    }
    return model_from_expressions(
        "bounded-coupled",
        c="tanh(y) - 0.5*tanh(x)",
        sigma="1 + 0.1*cos(x)*cos(y)",
        f="0.5*tanh(x) - y",
        tau="sqrt(2)",
        reference_solution=ref,
    )


_REGISTRY: dict[str, Callable[[], CoefficientSet]] = {
    "affine-oracle": _affine_oracle,
    "bounded-coupled": _bounded_coupled,
}


def builtin_model_names() -> tuple[str, ...]:
    """Names accepted by :func:`get_model`."""
    return tuple(sorted(_REGISTRY))


def get_model(name: str) -> CoefficientSet:
    """Look up a built-in model by name (spaces/underscores tolerated)."""
    key = name.strip().lower().replace("_", "-").replace(" ", "-")
    try:
        factory = _REGISTRY[key]
    except KeyError:
        known = ", ".join(builtin_model_names())
        raise KeyError(f"unknown model {name!r}; built-ins: {known}") from None
    return factory()


def eval_all(model: CoefficientSet, x: float, y: float) -> dict[str, float]:
    """Evaluate all 24 coefficient values at one point.

    Returns a dict keyed ``c, d1_c, ..., d22_tau``.  Raises
    :class:`ModelEvaluationError` if any value is non-finite or if tau
    degenerates (|tau| < TAU_MIN) at the point.
    """
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ModelEvaluationError(f"evaluation point ({x}, {y}) is not finite")
    out: dict[str, float] = {}
    for func in _FUNC_NAMES:
        for prefix in ("",) + _PARTIAL_PREFIXES:
            key = prefix + func
            val = float(model.partial(prefix, func)(x, y)) if prefix else float(
                getattr(model, func)(x, y)
            )
            if not np.isfinite(val):
                raise ModelEvaluationError(
                    f"model {model.name!r}: {key} is not finite at ({x}, {y})"
                )
            out[key] = val
    if abs(out["tau"]) < TAU_MIN:
        raise ModelEvaluationError(
            f"model {model.name!r}: tau degenerates at ({x}, {y}): "
            f"|tau|={abs(out['tau']):.3e} < {TAU_MIN:g}"
        )
    return out


def check_assumptions(
    model: CoefficientSet,
    x_range: tuple[float, float],
    y_range: tuple[float, float],
    nx: int,
    ny: int,
    p: int,
) -> AssumptionReport:
    """Evaluate the structural constants M_hat/K_hat on a grid.

    Parameters
    ----------
    x_range, y_range : (lo, hi)
        Evaluation box; must be non-empty.
    nx, ny : int
        Grid resolution per axis, at least 2.
    p : int
        Moment order; the constants weight derivatives by powers of 2p.

    Returns
    -------
    AssumptionReport
        ``passes`` is true iff the dissipativity margin K_hat > 0.
    """
    if nx < 2 or ny < 2:
        raise ValueError(f"grid must have nx, ny >= 2 (got {nx}, {ny})")
    if p < 1 or int(p) != p:
        raise ValueError(f"moment order p must be an integer >= 1 (got {p})")
    if not (x_range[0] < x_range[1]) or not (y_range[0] < y_range[1]):
        raise ValueError(
            f"empty evaluation range x={tuple(x_range)}, y={tuple(y_range)}"
        )
    p = int(p)
    xs = np.linspace(x_range[0], x_range[1], nx)
    ys = np.linspace(y_range[0], y_range[1], ny)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    d1f = np.abs(model.d1_f(X, Y))
    d1t = np.abs(model.d1_tau(X, Y))
    d2t = np.abs(model.d2_tau(X, Y))
    d2f = model.d2_f(X, Y)

    m_expr = d1f + 2 * (2 * p - 1) * d1t**2 + d2t**2
    k_expr = (
        (2 * p - 1) * d1f
        + (2 * p - 1) * (2 * p - 2) * d1t**2
        + 2 * p * (2 * p - 1) * d2t**2
        + 2 * p * d2f
    )
    worst = np.unravel_index(int(np.argmax(k_expr)), k_expr.shape)
    k_hat = -float(np.max(k_expr))
    return AssumptionReport(
        p=p,
        M_hat=float(np.max(m_expr)),
        K_hat=k_hat,
        grid={
            "x_range": [float(x_range[0]), float(x_range[1])],
            "y_range": [float(y_range[0]), float(y_range[1])],
            "nx": nx,
            "ny": ny,
        },
        passes=bool(k_hat > 0.0),
        worst_point=(float(X[worst]), float(Y[worst])),
    )


def validate_partials(
    model: CoefficientSet,
    sample_points,
    h: float = 1e-4,
) -> float:
    """Cross-check every supplied partial against a central difference.

    First partials are differenced from the parent function; second
    partials from the corresponding first partial (d12 from d1 in y).
    Returns the max over points and partials of

        |supplied - finite difference| / (1 + |supplied|).
    """
    if h <= 0:
        raise ValueError(f"step h must be positive (got {h})")
    worst = 0.0
    pairs = []
    for g in _FUNC_NAMES:
        base = getattr(model, g)
        d1 = model.partial("d1_", g)
        d2 = model.partial("d2_", g)
        pairs.extend(
            [
                (d1, base, "x"),
                (d2, base, "y"),
                (model.partial("d11_", g), d1, "x"),
                (model.partial("d12_", g), d1, "y"),
                (model.partial("d22_", g), d2, "y"),
            ]
        )
    for x, y in sample_points:
        for supplied, parent, axis in pairs:
            if axis == "x":
                fd = (parent(x + h, y) - parent(x - h, y)) / (2 * h)
            else:
                fd = (parent(x, y + h) - parent(x, y - h)) / (2 * h)
            val = float(supplied(x, y))
            worst = max(worst, abs(val - float(fd)) / (1.0 + abs(val)))
    return worst
