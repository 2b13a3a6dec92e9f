"""Characteristic travel times and the controllability-time landmarks.

tau_i is the time component i needs to cross [0, 1]:
tau_i = integral of 1/lambda_i over [0, 1].  From these, three landmark times:

    T1    = tau_k + tau_{k+1} + ... + tau_{k+m}
    T2    = tau_k + tau_{k+1}
    T_opt = max{tau_1 + tau_{m+1}, ..., tau_k + tau_{m+k}, tau_{k+1}}   (m >= k)
          = max{tau_{k+1-m} + tau_{k+1}, ..., tau_k + tau_{k+m}}        (m < k)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DimensionMismatch,
    QuadratureNonConvergent,
    SampledSpeed,
    SystemSpec,
)

_MAX_DEPTH = 50


def _adaptive_simpson(f, a, b, tol, reverse=False):
    """Adaptive composite Simpson with interval bisection.

    ``reverse`` flips the recursion order of the two half-intervals; the
    result must agree within tolerance either way.
    """

    def simpson(x0, x2, f0, f2):
        x1 = 0.5 * (x0 + x2)
        f1 = f(x1)
        return x1, f1, (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    def recurse(x0, x2, f0, f2, whole, x1, f1, tol, depth):
        lm, flm, left = simpson(x0, x1, f0, f1)
        rm, frm, right = simpson(x1, x2, f1, f2)
        delta = left + right - whole
        if abs(delta) <= 15.0 * tol:
            return left + right + delta / 15.0
        if depth >= _MAX_DEPTH:
            raise QuadratureNonConvergent(
                f"adaptive Simpson did not converge on [{x0}, {x2}]"
            )
        parts = [
            (x0, x1, f0, f1, left, lm, flm),
            (x1, x2, f1, f2, right, rm, frm),
        ]
        if reverse:
            parts.reverse()
        return sum(
            recurse(*p, tol / 2.0, depth + 1) for p in parts
        )

    fa, fb = f(a), f(b)
    x1, f1, whole = simpson(a, b, fa, fb)
    return recurse(a, b, fa, fb, whole, x1, f1, tol, 0)


def travel_times(spec: SystemSpec, quad_tolerance: float = 1e-10) -> np.ndarray:
    """tau_i for every component.

    Closed-form and constant speeds use adaptive Simpson; sampled speeds use
    the trapezoid rule on their own sample grid (no extra smoothness is
    available there).
    """
    if quad_tolerance <= 0:
        raise DimensionMismatch("quadrature tolerance must be positive")
    zero_state = np.zeros(spec.n) if spec.state_dependent else None
    taus = np.empty(spec.n)
    for i, speed in enumerate(spec.profile.speeds):
        if isinstance(speed, SampledSpeed):
            taus[i] = np.trapezoid(1.0 / speed.values, speed.xs)
        else:
            def f(x, _s=speed):
                return float(1.0 / _s.evaluate(np.asarray([x]), zero_state)[0])

            taus[i] = _adaptive_simpson(f, 0.0, 1.0, quad_tolerance)
    return taus


def travel_time_error_bounds(spec: SystemSpec, quad_tolerance: float = 1e-10) -> np.ndarray:
    """Per-component error bound on tau_i.

    Closed-form speeds are integrated adaptively to ``quad_tolerance``;
    sampled speeds use the trapezoid rule, whose bound is the cellwise
    h^2/12 curvature estimate of the integrand built from second difference
    quotients.
    """
    bounds = np.full(spec.n, quad_tolerance)
    for i, speed in enumerate(spec.profile.speeds):
        if isinstance(speed, SampledSpeed):
            f = 1.0 / speed.values
            xs = speed.xs
            if xs.size < 3:
                bounds[i] = np.inf
                continue
            mid = 0.5 * (xs[2:] - xs[:-2])
            curv = np.abs((f[2:] - f[1:-1]) / (xs[2:] - xs[1:-1])
                          - (f[1:-1] - f[:-2]) / (xs[1:-1] - xs[:-2])) / mid
            curv_cell = np.concatenate([[curv[0]], 0.5 * (curv[1:] + curv[:-1]), [curv[-1]]])
            h_cell = np.diff(xs)
            bounds[i] = float(np.sum(h_cell**3 / 12.0 * curv_cell))
    return bounds


def legacy_times(tau: np.ndarray, k: int, m: int) -> tuple[float, float]:
    """(T1, T2) exactly as defined above."""
    tau = np.asarray(tau, dtype=float)
    if tau.size != k + m:
        raise DimensionMismatch(f"tau must have length {k + m}")
    t1 = tau[k - 1] + float(np.sum(tau[k:]))
    t2 = tau[k - 1] + tau[k]
    return float(t1), float(t2)


def optimal_time(tau: np.ndarray, k: int, m: int) -> float:
    return optimal_time_argmax(tau, k, m)[0]


def optimal_time_argmax(tau: np.ndarray, k: int, m: int):
    """T_opt plus the term achieving the max.

    Returns (value, kind, index): kind is "pair" with index = i for the term
    tau_i + tau_(partner), or "single" with index = k+1 for the lone term in
    the m >= k case.  Ties keep the first maximizer.
    """
    tau = np.asarray(tau, dtype=float)
    if tau.size != k + m:
        raise DimensionMismatch(f"tau must have length {k + m}")
    terms = []
    if m >= k:
        for i in range(1, k + 1):
            terms.append((tau[i - 1] + tau[m + i - 1], "pair", i))
        terms.append((tau[k], "single", k + 1))
    else:
        for j in range(1, m + 1):
            i = k + 1 - m + j - 1  # pairs tau_{k+1-m}+tau_{k+1}, ..., tau_k+tau_{k+m}
            terms.append((tau[i - 1] + tau[k + j - 1], "pair", i))
    best = max(range(len(terms)), key=lambda idx: terms[idx][0])
    value, kind, index = terms[best]
    return float(value), kind, index


@dataclass
class TimeReport:
    k: int
    m: int
    tau: np.ndarray
    T1: float
    T2: float
    Topt: float
    argmax_kind: str
    argmax_index: int

    def as_dict(self) -> dict:
        d = {"k": self.k, "m": self.m}
        for i, t in enumerate(self.tau):
            d[f"tau_{i + 1}"] = float(t)
        d.update(
            T1=self.T1,
            T2=self.T2,
            T_opt=self.Topt,
            argmax_kind=self.argmax_kind,
            argmax_index=self.argmax_index,
        )
        return d


def time_report(spec: SystemSpec, quad_tolerance: float = 1e-10) -> TimeReport:
    tau = travel_times(spec, quad_tolerance)
    t1, t2 = legacy_times(tau, spec.k, spec.m)
    topt, kind, idx = optimal_time_argmax(tau, spec.k, spec.m)
    return TimeReport(spec.k, spec.m, tau, t1, t2, topt, kind, idx)


def cumulative_travel(spec: SystemSpec, i: int, n_fine: int = 4096, state=None):
    """(xs, T_i(xs)) with T_i(x) = travel time of component i from 0 to x.

    Strictly increasing, so both directions invert by interpolation.  Used by
    the kernel solver and the feedback to locate characteristics.
    """
    xs = np.linspace(0.0, 1.0, n_fine + 1)
    lam = spec.profile.speeds[i].evaluate(xs, state)
    integrand = 1.0 / lam
    ts = np.concatenate(
        [[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * np.diff(xs))]
    )
    return xs, ts
