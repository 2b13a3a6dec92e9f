"""Domain types, validation and evaluation primitives.

The state w(t, x) has n = k + m components on x in [0, 1].  The first k
components carry negative diagonal speeds -lambda_1(x) < ... < -lambda_k(x) < 0
and travel rightward (their characteristics satisfy dx/dt = +lambda_i); the
last m components carry positive speeds 0 < lambda_{k+1}(x) < ... <
lambda_{k+m}(x) and travel leftward.  Reflection happens at x = 0 through a
constant k-by-m matrix B (or a nonlinear hook with Jacobian B at 0), controls
act at x = 1 on the last m components.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .expressions import Expr, ExpressionError, parse_expression, state_variable_names


# --------------------------------------------------------------------------- #
# errors
# --------------------------------------------------------------------------- #

class HypctrlError(Exception):
    """Base class for all library errors."""


class ValidationError(HypctrlError):
    """Bad input data or configuration (CLI exit code 2)."""


class NumericalError(HypctrlError):
    """A numerical procedure failed (CLI exit code 3)."""


class DimensionMismatch(ValidationError):
    pass


class OrderingViolated(ValidationError):
    pass


class NonFiniteEntry(ValidationError):
    pass


class OutOfDomain(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class IndexOutOfRange(ValidationError):
    pass


class NotInClassB(ValidationError):
    pass


class NotApplicable(ValidationError):
    pass


class TimeTooShort(ValidationError):
    pass


class CompatibilityViolated(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class QuadratureNonConvergent(NumericalError):
    pass


class CFLViolation(NumericalError):
    pass


class NonFiniteState(NumericalError):
    pass


class BoundaryClosureFailure(NumericalError):
    pass


class SingularBoundarySpeed(NumericalError):
    pass


class DiagonalCouplingPresent(ValidationError):
    pass


class FixedPointDivergence(NumericalError):
    pass


class MaxItersExceeded(NumericalError):
    pass


class FlowLeftDomain(NumericalError):
    pass


# --------------------------------------------------------------------------- #
# speeds
# --------------------------------------------------------------------------- #

class Speed:
    """One positive characteristic speed lambda_i, possibly state-dependent."""

    state_dependent = False

    def evaluate(self, x, state=None):
        raise NotImplementedError


class ConstantSpeed(Speed):
    def __init__(self, value: float):
        self.value = float(value)

    def evaluate(self, x, state=None):
        x = np.asarray(x, dtype=float)
        return np.full_like(x, self.value, dtype=float)

    def __repr__(self):
        return f"ConstantSpeed({self.value})"


class ExpressionSpeed(Speed):
    """Closed-form speed, expression in x and optionally w1..wn."""

    def __init__(self, expr: Expr, n_state: int = 0):
        self.expr = expr
        self.n_state = n_state
        self.state_dependent = any(name.startswith("w") for name in expr.names)

    def evaluate(self, x, state=None):
        x = np.asarray(x, dtype=float)
        bindings = {"x": x}
        if self.state_dependent:
            if state is None:
                raise OutOfDomain(
                    f"speed {self.expr.source!r} is state-dependent; a state vector is required"
                )
            state = np.asarray(state, dtype=float)
            for i in range(self.n_state):
                name = f"w{i + 1}"
                if name in self.expr.names:
                    bindings[name] = state[i]
        out = self.expr(**bindings)
        return np.broadcast_to(np.asarray(out, dtype=float), x.shape).copy()

    def __repr__(self):
        return f"ExpressionSpeed({self.expr.source!r})"


class SampledSpeed(Speed):
    """Speed given by samples on a reference grid, piecewise-linear in between."""

    def __init__(self, xs: Sequence[float], values: Sequence[float]):
        self.xs = np.asarray(xs, dtype=float)
        self.values = np.asarray(values, dtype=float)
        if self.xs.ndim != 1 or self.xs.shape != self.values.shape:
            raise DimensionMismatch("sampled speed needs matching 1-D grids and values")
        if np.any(np.diff(self.xs) <= 0):
            raise ValidationError("sample positions must be strictly increasing")
        if self.xs[0] > 0.0 or self.xs[-1] < 1.0:
            raise ValidationError("sample positions must cover [0, 1]")

    def evaluate(self, x, state=None):
        x = np.asarray(x, dtype=float)
        return np.interp(x, self.xs, self.values)

    def __repr__(self):
        return f"SampledSpeed({len(self.xs)} samples)"


def as_speed(value, n_state: int = 0) -> Speed:
    """Coerce a float, expression string, (xs, values) pair or Speed."""
    if isinstance(value, Speed):
        return value
    if isinstance(value, (int, float)):
        return ConstantSpeed(value)
    if isinstance(value, str):
        names = ("x",) + state_variable_names(n_state)
        return ExpressionSpeed(parse_expression(value, names), n_state)
    if isinstance(value, tuple) and len(value) == 2:
        return SampledSpeed(*value)
    raise ValidationError(f"cannot interpret {value!r} as a speed")


@dataclass
class SpeedProfile:
    """The n = k + m positive speed magnitudes, ordered per component index."""

    k: int
    m: int
    speeds: list

    def __post_init__(self):
        if self.k < 1 or self.m < 1:
            raise DimensionMismatch("need k >= 1 and m >= 1")
        self.speeds = [as_speed(s, self.k + self.m) for s in self.speeds]
        if len(self.speeds) != self.k + self.m:
            raise DimensionMismatch(
                f"expected {self.k + self.m} speeds, got {len(self.speeds)}"
            )

    @property
    def n(self) -> int:
        return self.k + self.m

    @property
    def state_dependent(self) -> bool:
        return any(s.state_dependent for s in self.speeds)

    def lambdas(self, x, state=None) -> np.ndarray:
        """Positive magnitudes lambda_i at positions x, shape (n, len(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty((self.n, x.size))
        for i, s in enumerate(self.speeds):
            out[i] = s.evaluate(x, state)
        return out


# --------------------------------------------------------------------------- #
# coupling
# --------------------------------------------------------------------------- #

class CouplingField:
    """The n-by-n zero-order coupling C(x), scaled by gamma.

    Three representations: a constant matrix, a matrix of closed-form entries,
    or samples on a grid with piecewise-constant interpolation (C only needs
    to be bounded measurable).
    """

    def __init__(self, n: int, constant=None, entries=None, samples=None, gamma: float = 1.0):
        self.n = n
        self.gamma = float(gamma)
        self._constant = None
        self._entries = None
        self._samples = None
        if constant is not None:
            mat = np.asarray(constant, dtype=float)
            if mat.shape != (n, n):
                raise DimensionMismatch(f"coupling matrix must be {n}x{n}, got {mat.shape}")
            self._constant = mat
        elif entries is not None:
            grid = [[None] * n for _ in range(n)]
            for (i, j), src in entries.items():
                if not (0 <= i < n and 0 <= j < n):
                    raise DimensionMismatch(f"coupling entry index {(i, j)} out of range")
                grid[i][j] = parse_expression(src, ("x",)) if isinstance(src, str) else float(src)
            self._entries = grid
        elif samples is not None:
            xs, mats = samples
            xs = np.asarray(xs, dtype=float)
            mats = np.asarray(mats, dtype=float)
            if mats.shape != (xs.size, n, n):
                raise DimensionMismatch("coupling samples must have shape (S, n, n)")
            self._samples = (xs, mats)
        else:
            self._constant = np.zeros((n, n))

    @classmethod
    def zero(cls, n: int) -> "CouplingField":
        return cls(n, constant=np.zeros((n, n)))

    def with_gamma(self, gamma: float) -> "CouplingField":
        out = CouplingField.__new__(CouplingField)
        out.n = self.n
        out.gamma = float(gamma)
        out._constant = self._constant
        out._entries = self._entries
        out._samples = self._samples
        return out

    @property
    def is_zero(self) -> bool:
        return self.gamma == 0.0 or (
            self._constant is not None and not np.any(self._constant)
        )

    def evaluate(self, x) -> np.ndarray:
        """gamma * C at positions x, shape (n, n, len(x))."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        n = self.n
        if self._constant is not None:
            out = np.repeat(self._constant[:, :, None], x.size, axis=2)
        elif self._entries is not None:
            out = np.zeros((n, n, x.size))
            for i in range(n):
                for j in range(n):
                    e = self._entries[i][j]
                    if e is None:
                        continue
                    if isinstance(e, float):
                        out[i, j] = e
                    else:
                        out[i, j] = np.broadcast_to(np.asarray(e(x=x), dtype=float), x.shape)
        else:
            xs, mats = self._samples
            # piecewise-constant on cells: value of the sample to the left
            idx = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, xs.size - 1)
            out = np.moveaxis(mats[idx], 0, 2)
        return self.gamma * out


# --------------------------------------------------------------------------- #
# reflection
# --------------------------------------------------------------------------- #

_HOOK_JAC_TOL = 1e-6


class ReflectionMatrix:
    """Constant reflection B at x = 0, with optional nonlinear hook.

    The hook is a map R^m -> R^k with hook(0) = 0 whose Jacobian at 0 must
    equal the stored linearization B.
    """

    def __init__(self, B, hook: Optional[Callable] = None):
        self.B = np.atleast_2d(np.asarray(B, dtype=float))
        self.hook = hook

    @property
    def k(self) -> int:
        return self.B.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def apply(self, w_plus: np.ndarray) -> np.ndarray:
        if self.hook is not None:
            return np.asarray(self.hook(np.asarray(w_plus, dtype=float)), dtype=float)
        return self.B @ np.asarray(w_plus, dtype=float)

    def check_hook(self):
        if self.hook is None:
            return
        k, m = self.B.shape
        zero = np.zeros(m)
        v0 = np.asarray(self.hook(zero), dtype=float)
        if v0.shape != (k,) or np.max(np.abs(v0)) > 1e-12:
            raise ValidationError("nonlinear boundary hook must map 0 to 0")
        eps = 1e-6
        jac = np.empty((k, m))
        for j in range(m):
            e = np.zeros(m)
            e[j] = eps
            jac[:, j] = (np.asarray(self.hook(e)) - np.asarray(self.hook(-e))) / (2 * eps)
        if np.max(np.abs(jac - self.B)) > _HOOK_JAC_TOL * max(1.0, np.max(np.abs(self.B))):
            raise ValidationError(
                "Jacobian of the boundary hook at 0 does not match the stored linearization"
            )


# --------------------------------------------------------------------------- #
# grids, states, controls
# --------------------------------------------------------------------------- #

@dataclass
class GridSpec:
    """Uniform spatial grid on [0, 1] plus CFL number and time horizon."""

    N: int
    cfl: float = 0.9
    T: float = 1.0

    def __post_init__(self):
        if self.N < 8:
            raise ValidationError("need at least N = 8 cells")
        if not (0.0 < self.cfl <= 1.0):
            raise ValidationError("CFL number must lie in (0, 1]")
        if self.T <= 0.0:
            raise ValidationError("time horizon must be positive")

    @property
    def h(self) -> float:
        return 1.0 / self.N

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.N + 1)

    def dt_for(self, lambda_max: float) -> float:
        return self.cfl * self.h / lambda_max


@dataclass
class StateField:
    """State samples w(t, x_q) at the grid nodes; values has shape (n, N+1)."""

    values: np.ndarray
    t: float
    xs: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.xs = np.asarray(self.xs, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != self.xs.size:
            raise DimensionMismatch("state values must have shape (n, len(xs))")
        if not np.all(np.isfinite(self.values)):
            raise NonFiniteEntry("state field contains non-finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def component_at(self, i: int, x) -> np.ndarray:
        return np.interp(x, self.xs, self.values[i])

    def copy(self) -> "StateField":
        return StateField(self.values.copy(), self.t, self.xs)


def state_from_exprs(exprs: Sequence, grid: GridSpec, n: int, t: float = 0.0) -> StateField:
    """Build a StateField from per-component expressions in x (or callables)."""
    xs = grid.xs
    vals = np.zeros((n, xs.size))
    for i, e in enumerate(exprs):
        if e is None:
            continue
        if callable(e):
            vals[i] = np.asarray(e(xs), dtype=float)
        elif isinstance(e, str):
            expr = parse_expression(e, ("x",))
            vals[i] = np.broadcast_to(np.asarray(expr(x=xs), dtype=float), xs.shape)
        else:
            vals[i] = float(e)
    return StateField(vals, t, xs)


@dataclass
class ControlSignal:
    """m boundary control samples on [0, T], piecewise-linear in time."""

    times: np.ndarray
    values: np.ndarray  # shape (m, len(times))

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))
        if np.any(np.diff(self.times) <= 0):
            raise ValidationError("control sample times must be strictly increasing")
        if self.values.shape[1] != self.times.size:
            raise DimensionMismatch("control values must have shape (m, len(times))")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    def __call__(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, row) for row in self.values])

    def as_closure(self):
        def closure(t, state, aux):
            return self(t)

        return closure


# --------------------------------------------------------------------------- #
# validated system
# --------------------------------------------------------------------------- #

VALIDATION_POINTS = 1025  # 4*256 + 1, finer than any solver grid we ship


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Validated, immutable description of one hyperbolic system."""

    profile: SpeedProfile
    coupling: CouplingField
    reflection: ReflectionMatrix
    k: int
    m: int
    n: int
    lambda_min: float
    lambda_max: float
    lipschitz: np.ndarray = field(repr=False)
    coupling_bound: float = 0.0
    state_dependent: bool = False

    def lambdas(self, x, state=None) -> np.ndarray:
        return self.profile.lambdas(x, state)

    def signed_speeds(self, x, state=None) -> np.ndarray:
        """Diagonal of the transport matrix: (-lambda_1..-lambda_k, +lambda_{k+1}..)."""
        lam = self.profile.lambdas(x, state)
        lam[: self.k] *= -1.0
        return lam

    def coupling_nodes(self, x) -> np.ndarray:
        return self.coupling.evaluate(x)

    @property
    def B(self) -> np.ndarray:
        return self.reflection.B


def validate_system(
    profile: SpeedProfile,
    coupling: CouplingField,
    reflection: ReflectionMatrix,
    validation_points: int = VALIDATION_POINTS,
) -> SystemSpec:
    """Check ordering, positivity and boundedness; freeze the result.

    The speed ordering and the uniform lower bound are checked on a grid finer
    than the solver grids so violations between solver nodes are caught.
    State-dependent speeds are checked at the zero state; their smoothness in
    the state is trusted, not verified.
    """
    k, m = profile.k, profile.m
    n = k + m
    if reflection.B.shape != (k, m):
        raise DimensionMismatch(
            f"reflection matrix must be {k}x{m}, got {reflection.B.shape}"
        )
    if coupling.n != n:
        raise DimensionMismatch(f"coupling field must be {n}x{n}, got {coupling.n}")
    if not np.all(np.isfinite(reflection.B)):
        raise NonFiniteEntry("reflection matrix has non-finite entries")
    reflection.check_hook()

    xs = np.linspace(0.0, 1.0, validation_points)
    zero_state = np.zeros(n) if profile.state_dependent else None
    lam = profile.lambdas(xs, zero_state)
    if not np.all(np.isfinite(lam)):
        raise NonFiniteEntry("speed profile has non-finite values on the validation grid")
    if np.min(lam) <= 0.0:
        comp = int(np.argwhere(lam <= 0.0)[0][0])
        raise OrderingViolated(f"lambda_{comp + 1} touches zero on the validation grid")
    # negative block: lambda_1 > ... > lambda_k; positive block increasing
    for i in range(k - 1):
        if np.any(lam[i] <= lam[i + 1]):
            raise OrderingViolated(
                f"need lambda_{i + 1}(x) > lambda_{i + 2}(x) on [0, 1] (negative block)"
            )
    for i in range(k, n - 1):
        if np.any(lam[i] >= lam[i + 1]):
            raise OrderingViolated(
                f"need lambda_{i + 1}(x) < lambda_{i + 2}(x) on [0, 1] (positive block)"
            )

    dx = xs[1] - xs[0]
    lipschitz = np.max(np.abs(np.diff(lam, axis=1)), axis=1) / dx

    cvals = coupling.evaluate(xs)
    if not np.all(np.isfinite(cvals)):
        raise NonFiniteEntry("coupling field has non-finite values on the validation grid")
    coupling_bound = float(np.max(np.abs(cvals))) if cvals.size else 0.0

    return SystemSpec(
        profile=profile,
        coupling=coupling,
        reflection=reflection,
        k=k,
        m=m,
        n=n,
        lambda_min=float(np.min(lam)),
        lambda_max=float(np.max(lam)),
        lipschitz=lipschitz,
        coupling_bound=coupling_bound,
        state_dependent=profile.state_dependent,
    )


def eval_speeds(spec: SystemSpec, x, y=None) -> np.ndarray:
    """Signed speeds (-lambda_1, .., -lambda_k, lambda_{k+1}, ..) at position x.

    ``y`` is the state vector, required exactly when the spec is
    state-dependent.
    """
    scalar = np.ndim(x) == 0
    xa = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(xa < 0.0) or np.any(xa > 1.0):
        raise OutOfDomain(f"position {x} outside [0, 1]")
    if spec.state_dependent and y is None:
        raise OutOfDomain("state-dependent speeds need the state argument")
    if not spec.state_dependent and y is not None:
        raise OutOfDomain("state argument supplied for state-independent speeds")
    out = spec.signed_speeds(xa, y)
    return out[:, 0] if scalar else out


def build_system(
    k: int,
    m: int,
    speeds: Sequence,
    coupling=None,
    b=None,
    gamma: Optional[float] = None,
    hook: Optional[Callable] = None,
) -> SystemSpec:
    """Convenience wrapper: coerce plain values and validate."""
    profile = SpeedProfile(k, m, list(speeds))
    n = k + m
    if coupling is None:
        cf = CouplingField.zero(n)
    elif isinstance(coupling, CouplingField):
        cf = coupling if gamma is None else coupling.with_gamma(gamma)
    else:
        cf = CouplingField(
            n, constant=np.asarray(coupling, dtype=float), gamma=1.0 if gamma is None else gamma
        )
    if b is None:
        b = np.zeros((k, m))
    refl = ReflectionMatrix(np.atleast_2d(np.asarray(b, dtype=float)), hook)
    return validate_system(profile, cf, refl)
