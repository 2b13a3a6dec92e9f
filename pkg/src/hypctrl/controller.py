"""Finite-time stabilizing feedback, open-loop null controls, observability.

The feedback prescribes the m incoming values at x = 1.  Elimination level j
(outermost level first) controls component k+m+1-j through

    w_{k+m+1-j}(t, 1) = zeta(t) + (1 - eta(t)) * M_j(args),

where the arguments are the current values of components k+1..k+m-j at the
positions whose characteristics reach x = 0 exactly when the emitted control
arrives there (after the travel time of the controlled component); the
remaining controlled components follow their zeta ramp alone.  zeta and eta
are C^1 ramps that match the initial trace at x = 1, equal exactly zero from
delta/2 on (delta = T - T_opt), and switch the state-fed part on smoothly.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .bmatrix import EliminationMaps, boundary_elimination, in_class_B, trailing_minor_invertible
from .core import (
    CompatibilityViolated,
    ControlSignal,
    GridSpec,
    NotApplicable,
    NotInClassB,
    StateField,
    SystemSpec,
    TimeTooShort,
    ValidationError,
)
from .simulator import DualTrajectory, Trajectory, characteristic_flow, solve_dual, solve_forward, zero_control
from .times import cumulative_travel, optimal_time_argmax, travel_times

RATIO_CAP = 1e12


# --------------------------------------------------------------------------- #
# ramps
# --------------------------------------------------------------------------- #

class CubicRamp:
    """C^1 cubic Hermite from (value, slope) at 0 to (0, 0) at t = half.

    Evaluates to exactly 0.0 for every t >= half, not merely something small.
    """

    def __init__(self, value0: float, slope0: float, half: float):
        self.value0 = float(value0)
        self.slope0 = float(slope0)
        self.half = float(half)

    def __call__(self, t: float) -> float:
        if t >= self.half or (self.value0 == 0.0 and self.slope0 == 0.0):
            return 0.0
        s = t / self.half
        h00 = (1 + 2 * s) * (1 - s) ** 2
        h10 = s * (1 - s) ** 2
        return self.value0 * h00 + self.slope0 * self.half * h10

    def derivative(self, t: float) -> float:
        if t >= self.half:
            return 0.0
        s = t / self.half
        dh00 = 6 * s * (s - 1) / self.half
        dh10 = (3 * s**2 - 4 * s + 1) / self.half
        return self.value0 * dh00 + self.slope0 * self.half * dh10


@dataclass
class AuxiliaryDynamics:
    """Per controlled component: the (zeta, eta) ramp pair and the switch time."""

    delta: float
    zetas: dict  # component (1-based) -> CubicRamp
    etas: dict


# --------------------------------------------------------------------------- #
# feedback law
# --------------------------------------------------------------------------- #

@dataclass
class FeedbackLaw:
    spec: SystemSpec
    maps: EliminationMaps
    ramps: AuxiliaryDynamics
    delays: dict  # controlled component -> travel time across [0, 1]
    arg_positions: dict = field(default_factory=dict)  # level -> array of positions
    T: float = 0.0
    Topt: float = 0.0
    last_reads: list = field(default_factory=list)

    @property
    def levels(self) -> int:
        return min(self.spec.k, self.spec.m - 1)

    def _frozen_delay(self, component: int, state: StateField) -> float:
        """Travel time of a controlled component on the frozen current state.

        Two fixed-point passes of "integrate the flow backward from (t + t, 0)",
        initialized at the base travel time; with frozen coefficients the pass
        is a plain quadrature, so it settles immediately.
        """
        xs = state.xs
        t = self.delays[component]
        for _ in range(2):
            lam = self.spec.profile.speeds[component - 1].evaluate(xs, state.values)
            t = float(np.trapezoid(1.0 / lam, xs))
        return t

    def __call__(self, t: float, state: StateField, aux) -> np.ndarray:
        k, m = self.spec.k, self.spec.m
        ctrl = np.zeros(m)
        self.last_reads = []
        # outermost level first; each line only reads interior state values
        for j in range(1, self.levels + 1):
            comp = k + m + 1 - j
            zeta = self.ramps.zetas[comp](t)
            eta = self.ramps.etas[comp](t)
            mp = self.maps.by_level(j)
            nargs = m - j
            args = np.empty(nargs)
            if eta < 1.0:
                if self.spec.state_dependent:
                    delay = self._frozen_delay(comp, state)
                    positions = self._trace_positions(j, delay, state)
                else:
                    positions = self.arg_positions[j]
                for idx, l in enumerate(range(k + 1, k + m - j + 1)):
                    pos = min(float(positions[idx]), 1.0)
                    args[idx] = np.interp(pos, state.xs, state.values[l - 1])
                    self.last_reads.append((j, l, pos))
                ctrl[comp - k - 1] = zeta + (1.0 - eta) * mp(args)
            else:
                ctrl[comp - k - 1] = zeta
        for comp in range(k + 1, k + m - self.levels + 1):
            ctrl[comp - k - 1] = self.ramps.zetas[comp](t)
        return ctrl

    def _trace_positions(self, level: int, delay: float, state: StateField) -> np.ndarray:
        k, m = self.spec.k, self.spec.m
        accessor = _frozen_accessor(state)
        out = np.empty(m - level)
        for idx, l in enumerate(range(k + 1, k + m - level + 1)):
            res = characteristic_flow(
                self.spec, l, s=delay, xi=0.0, t=0.0, state=accessor, clip=True
            )
            out[idx] = res.position
        return out


def _frozen_accessor(state: StateField):
    def accessor(time, x):
        return np.array([np.interp(x, state.xs, row) for row in state.values])

    return accessor


def check_compatibility(spec: SystemSpec, w0: StateField, tolerance: Optional[float] = None):
    """Residuals of the corner conditions at (t, x) = (0, 0).

    Order zero: w_-(0,0) = B(w_+(0,0)).  Order one: the spatial derivatives
    must satisfy the differentiated relation with the diagonal speed blocks.
    Returns (r0, r1, tolerance).
    """
    k = spec.k
    h = float(w0.xs[1] - w0.xs[0])
    d0 = (w0.values[:, 1] - w0.values[:, 0]) / h
    deriv_scale = float(np.max(np.abs((w0.values[:, 1:] - w0.values[:, :-1]) / h), initial=0.0))
    if tolerance is None:
        tolerance = 10.0 * h * max(1.0, deriv_scale)
    corner = w0.values[:, 0]
    r0 = float(np.max(np.abs(corner[:k] - spec.reflection.apply(corner[k:])), initial=0.0))
    sig0 = spec.signed_speeds(
        np.array([0.0]), corner if spec.state_dependent else None
    )[:, 0]
    r1 = float(
        np.max(
            np.abs(sig0[:k] * d0[:k] - spec.B @ (sig0[k:] * d0[k:])),
            initial=0.0,
        )
    )
    return r0, r1, tolerance


def synthesize_feedback(
    spec: SystemSpec,
    B,
    T: float,
    w0: StateField,
    strict_compat: bool = False,
) -> FeedbackLaw:
    """Build the finite-time feedback for target time T > T_opt.

    The ramp initial data come from the trace of w0 at x = 1 (value and
    one-sided slope), so the closed-loop boundary trace starts without a jump.
    For state-independent speeds the argument positions are time-invariant and
    are traced once here with the characteristic flow.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if not in_class_B(B):
        raise NotInClassB("feedback needs an admissible reflection matrix")
    k, m = spec.k, spec.m
    zero_state = np.zeros(spec.n) if spec.state_dependent else None
    tau = travel_times(spec)
    topt, _, _ = optimal_time_argmax(tau, k, m)
    if T <= topt:
        raise TimeTooShort(f"target time {T} must exceed T_opt = {topt:.6g}")
    delta = T - topt

    r0, r1, tol = check_compatibility(spec, w0)
    if max(r0, r1) > tol:
        msg = (
            f"initial data violates the corner compatibility conditions "
            f"(residuals {r0:.3g}, {r1:.3g} > {tol:.3g})"
        )
        if strict_compat:
            raise CompatibilityViolated(msg)
        warnings.warn(msg, stacklevel=2)

    maps = boundary_elimination(B)
    h = float(w0.xs[1] - w0.xs[0])
    corner1 = w0.values[:, -1]
    lam1 = spec.lambdas(np.array([1.0]), corner1 if spec.state_dependent else None)[:, 0]
    zetas, etas = {}, {}
    half = delta / 2.0
    for comp in range(k + 1, k + m + 1):
        trace0 = float(w0.values[comp - 1, -1])
        slope_x = float((w0.values[comp - 1, -1] - w0.values[comp - 1, -2]) / h)
        zetas[comp] = CubicRamp(trace0, lam1[comp - 1] * slope_x, half)
        etas[comp] = CubicRamp(1.0, 0.0, half)
    ramps = AuxiliaryDynamics(delta=delta, zetas=zetas, etas=etas)

    delays = {k + p + 1: float(tau[k + p]) for p in range(m)}
    law = FeedbackLaw(
        spec=spec, maps=maps, ramps=ramps, delays=delays, T=T, Topt=float(topt)
    )
    if not spec.state_dependent:
        for j in range(1, law.levels + 1):
            comp = k + m + 1 - j
            positions = np.empty(m - j)
            for idx, l in enumerate(range(k + 1, k + m - j + 1)):
                res = characteristic_flow(spec, l, s=delays[comp], xi=0.0, t=0.0)
                positions[idx] = res.position
            law.arg_positions[j] = positions
    return law


@dataclass
class StabilizationReport:
    initial_linf: float
    terminal_linf: float
    terminal_rel: float
    first_below_1e2: Optional[float]
    first_below_1e3: Optional[float]


def run_closed_loop(spec: SystemSpec, law: FeedbackLaw, w0: StateField, grid: GridSpec):
    traj = solve_forward(spec, w0, law, grid)
    total = np.max(traj.norms_linf, axis=1)
    initial = float(total[0])
    report = StabilizationReport(
        initial_linf=initial,
        terminal_linf=float(total[-1]),
        terminal_rel=float(total[-1] / initial) if initial > 0 else 0.0,
        first_below_1e2=_first_time(traj.times, total, 1e-2 * initial),
        first_below_1e3=_first_time(traj.times, total, 1e-3 * initial),
    )
    return traj, report


def _first_time(times, series, threshold):
    hits = np.nonzero(series <= threshold)[0]
    return float(times[hits[0]]) if hits.size else None


# --------------------------------------------------------------------------- #
# open-loop least-squares control
# --------------------------------------------------------------------------- #

@dataclass
class NullControlResult:
    signal: ControlSignal
    residual: float
    condition: float
    ill_conditioned: bool
    terminal_norm: float


def _flat_l2_weights(n: int, xs: np.ndarray) -> np.ndarray:
    h = xs[1] - xs[0]
    w = np.full(xs.size, h)
    w[0] = w[-1] = h / 2.0
    return np.sqrt(np.tile(w, n))


def null_control_openloop(
    spec: SystemSpec,
    w0: StateField,
    T: float,
    grid: GridSpec,
    reg: float = 1e-8,
    segments: int = 64,
    target: Optional[StateField] = None,
) -> NullControlResult:
    """Least-norm steering with piecewise-constant controls.

    Each channel is parameterized by ``segments`` piecewise-constant pieces;
    the m*segments basis responses plus the free response assemble the
    terminal-state map, and Tikhonov-regularized normal equations give the
    minimizing coefficients.  The returned residual comes from re-simulating
    with the assembled control, which reproduces the superposition exactly for
    these linear systems.
    """
    if spec.state_dependent:
        raise ValidationError("open-loop least squares requires state-independent speeds")
    if spec.reflection.hook is not None:
        raise ValidationError("open-loop least squares requires a linear reflection")
    m = spec.m
    run_grid = GridSpec(N=grid.N, cfl=grid.cfl, T=T)
    xs = run_grid.xs
    sqw = _flat_l2_weights(spec.n, xs)

    def seg_index(t: float) -> int:
        return min(int(t / T * segments), segments - 1)

    free = solve_forward(spec, w0, zero_control(m), run_grid, snapshot_stride=10**9)
    free_flat = free.terminal_state().values.ravel() * sqw
    zero_init = StateField(np.zeros_like(w0.values), 0.0, xs)

    cols = []
    for c in range(m):
        for s in range(segments):
            def basis(t, state, aux, _c=c, _s=s):
                out = np.zeros(m)
                if seg_index(t) == _s:
                    out[_c] = 1.0
                return out

            resp = solve_forward(spec, zero_init, basis, run_grid, snapshot_stride=10**9)
            cols.append(resp.terminal_state().values.ravel() * sqw)
    A = np.column_stack(cols)

    target_flat = (
        np.zeros_like(free_flat) if target is None else target.values.ravel() * sqw
    )
    rhs = target_flat - free_flat
    gram = A.T @ A + reg * np.eye(A.shape[1])
    W = np.linalg.solve(gram, A.T @ rhs)

    sv = np.linalg.svd(A, compute_uv=False)
    condition = float(sv[0] / sv[-1]) if sv[-1] > 0 else np.inf

    def assembled(t, state, aux):
        si = seg_index(t)
        return np.array([W[c * segments + si] for c in range(m)])

    final = solve_forward(spec, w0, assembled, run_grid, snapshot_stride=10**9)
    term_flat = final.terminal_state().values.ravel() * sqw
    err = np.linalg.norm(term_flat - target_flat)
    scale = np.linalg.norm(w0.values.ravel() * sqw)
    if target is not None:
        scale = max(scale, np.linalg.norm(target_flat))
    residual = float(err / scale) if scale > 0 else float(err)

    sig_values = np.stack(
        [[W[c * segments + seg_index(t)] for t in final.times] for c in range(m)]
    )
    signal = ControlSignal(times=final.times, values=sig_values)
    return NullControlResult(
        signal=signal,
        residual=residual,
        condition=condition,
        ill_conditioned=bool(condition > 1e12),
        terminal_norm=float(err),
    )


# --------------------------------------------------------------------------- #
# optimality witness
# --------------------------------------------------------------------------- #

def _bump(xs: np.ndarray, center: float, halfwidth: float, amplitude: float) -> np.ndarray:
    u = (xs - center) / halfwidth
    out = np.where(np.abs(u) < 1.0, amplitude * np.cos(np.pi * u / 2.0) ** 2, 0.0)
    return out


@dataclass
class Witness:
    w0: StateField
    probe_component: int  # 1-based
    probe_x: float
    expected: float
    bump_component: int
    bump_center: float
    bump_halfwidth: float
    description: str


def optimality_witness(
    spec: SystemSpec,
    B,
    T: float,
    grid: GridSpec,
    amplitude: float = 1.0,
) -> Witness:
    """Initial datum plus probe whose value at time T no control can change.

    Works for zero coupling, below the optimal time, with all trailing minors
    up to min{k, m} invertible.  Pair candidates place a bump in a positive
    component so that its reflection at x = 0 feeds the probe component before
    any control can reach the boundary; direct candidates place the bump so
    the probe traces straight back to the initial data.  The candidate coming
    from the maximizing term of the optimal time is preferred; otherwise the
    feasible candidate with the widest timing margin wins.
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    k, m = spec.k, spec.m
    if spec.coupling_bound > 1e-14:
        raise NotApplicable("witness construction requires zero coupling")
    for i in range(1, min(k, m) + 1):
        if not trailing_minor_invertible(B, i)[0]:
            raise NotApplicable(f"trailing minor of order {i} is singular")
    tau = travel_times(spec)
    topt, arg_kind, arg_index = optimal_time_argmax(tau, k, m)
    if T >= topt:
        raise NotApplicable(f"T = {T} is not below T_opt = {topt:.6g}")

    tables = [cumulative_travel(spec, i) for i in range(spec.n)]

    def t_inv(comp_idx, t):  # comp_idx 0-based
        xs_f, ts_f = tables[comp_idx]
        return float(np.interp(t, ts_f, xs_f))

    candidates = []  # (margin, is_argmax, kind, payload)

    pairs = (
        [(i, m + i) for i in range(1, k + 1)]
        if m >= k
        else [(k - m + j, k + j) for j in range(1, m + 1)]
    )
    for a, bcomp in pairs:
        if tau[a - 1] + tau[bcomp - 1] <= T:
            continue
        feed = [q for q in range(1, m + 1) if B[a - 1, q - 1] != 0.0]
        if not feed:
            continue
        tau_min_feed = min(tau[k + q - 1] for q in feed)
        lo = max(0.0, T - tau[a - 1])
        hi = min(T, tau_min_feed)
        if hi - lo <= 1e-9:
            continue
        qstar = bcomp - k if B[a - 1, bcomp - k - 1] != 0.0 else max(
            feed, key=lambda q: tau[k + q - 1]
        )
        is_argmax = arg_kind == "pair" and arg_index == a
        candidates.append((hi - lo, is_argmax, "pair", (a, qstar, lo, hi)))

    for comp in range(1, spec.n + 1):
        if tau[comp - 1] > T + 1e-9:
            is_argmax = arg_kind == "single" and arg_index == comp
            candidates.append(
                (tau[comp - 1] - T, is_argmax, "direct", (comp,))
            )

    if not candidates:
        raise NotApplicable("no feasible witness candidate for this configuration")
    candidates.sort(key=lambda c: (c[1], c[0]), reverse=True)
    _, _, kind, payload = candidates[0]

    xs = grid.xs
    vals = np.zeros((spec.n, xs.size))
    if kind == "pair":
        a, qstar, lo, hi = payload
        t_mid = 0.5 * (lo + hi)
        window = hi - lo
        bump_comp = k + qstar
        center = t_inv(bump_comp - 1, t_mid)
        edge_lo = t_inv(bump_comp - 1, t_mid - 0.35 * window)
        edge_hi = t_inv(bump_comp - 1, t_mid + 0.35 * window)
        halfwidth = min(abs(center - edge_lo), abs(edge_hi - center))
        probe_comp = a
        probe_x = t_inv(a - 1, T - t_mid)
        expected = float(B[a - 1, qstar - 1] * amplitude)
        desc = (
            f"bump in component {bump_comp} reflects at x=0 into component {a} "
            f"at t={t_mid:.4g}, before any control reaches the boundary"
        )
    else:
        (comp,) = payload
        margin = tau[comp - 1] - T
        if comp <= k:
            t_start = 0.5 * margin
            center = t_inv(comp - 1, t_start)
            probe_x = t_inv(comp - 1, t_start + T)
            width_t = 0.35 * margin
            halfwidth = min(
                abs(center - t_inv(comp - 1, max(0.0, t_start - width_t))),
                abs(t_inv(comp - 1, t_start + width_t) - center),
            )
        else:
            t_start = T + 0.5 * margin
            center = t_inv(comp - 1, t_start)
            probe_x = t_inv(comp - 1, t_start - T)
            width_t = 0.35 * margin
            halfwidth = min(
                abs(center - t_inv(comp - 1, t_start - width_t)),
                abs(t_inv(comp - 1, min(tau[comp - 1], t_start + width_t)) - center),
            )
        bump_comp = comp
        probe_comp = comp
        expected = float(amplitude)
        desc = (
            f"bump in component {comp} travels for time {T} without meeting "
            f"any controlled boundary"
        )

    halfwidth = max(halfwidth, 3.0 * grid.h)
    vals[bump_comp - 1] = _bump(xs, center, halfwidth, amplitude)
    w0 = StateField(vals, 0.0, xs)
    return Witness(
        w0=w0,
        probe_component=probe_comp,
        probe_x=probe_x,
        expected=expected,
        bump_component=bump_comp,
        bump_center=center,
        bump_halfwidth=halfwidth,
        description=desc,
    )


def verify_witness(
    spec: SystemSpec,
    B,
    witness: Witness,
    grid: GridSpec,
    n_controls: int = 100,
    rng: Optional[np.random.Generator] = None,
    T: Optional[float] = None,
):
    """Probe deviation under random controls (plus the zero control).

    Returns (max relative deviation, list of probe values).
    """
    rng = rng or np.random.default_rng(0)
    if T is None:
        T = grid.T
    run_grid = GridSpec(N=grid.N, cfl=grid.cfl, T=T)
    scale = max(abs(witness.expected), 1e-12)
    values = []
    for trial in range(n_controls + 1):
        if trial == 0:
            closure = zero_control(spec.m)
        else:
            nodes = np.linspace(0.0, T, 9)
            amps = rng.normal(0.0, scale, size=(spec.m, nodes.size))
            sig = ControlSignal(times=nodes, values=amps)
            closure = sig.as_closure()
        traj = solve_forward(spec, witness.w0, closure, run_grid, snapshot_stride=10**9)
        term = traj.terminal_state()
        values.append(float(np.interp(witness.probe_x, term.xs, term.values[witness.probe_component - 1])))
    deviations = [abs(v - witness.expected) / scale for v in values]
    return max(deviations), values


# --------------------------------------------------------------------------- #
# observability
# --------------------------------------------------------------------------- #

@dataclass
class ObservabilityResult:
    estimate: float
    ratios: np.ndarray
    labels: list


def _band_limited_sample(n: int, xs: np.ndarray, rng: np.random.Generator, modes: int = 4):
    vals = np.zeros((n, xs.size))
    for i in range(n):
        for f in range(1, modes + 1):
            vals[i] += rng.normal() * np.cos(f * np.pi * xs) + rng.normal() * np.sin(
                f * np.pi * xs
            )
    return vals


def _l2_total(vals: np.ndarray, xs: np.ndarray) -> float:
    h = xs[1] - xs[0]
    sq = np.sum(vals**2, axis=0)
    return float(np.sqrt(h * (np.sum(sq) - 0.5 * (sq[0] + sq[-1]))))


def verify_observability(
    spec: SystemSpec,
    S,
    B,
    T: float,
    samples: int,
    grid: GridSpec,
    rng: Optional[np.random.Generator] = None,
    include_adversarial: bool = True,
) -> ObservabilityResult:
    """Monte Carlo lower-constant estimate for the dual observation inequality.

    Random band-limited terminal data of unit L2 norm are run backward for
    time T; the estimate is the minimum of observation energy over the norm of
    v(-T).  Deterministic bump candidates placed farthest from the observed
    boundary are added to the pool: a finite random draw alone cannot expose
    the unobservable data that exist below the optimal time.  Ratios with a
    vanishing denominator count as RATIO_CAP (the constraint is vacuous
    there).
    """
    rng = rng or np.random.default_rng(0)
    xs = grid.xs
    n = spec.n
    pool = []
    labels = []
    for s in range(samples):
        vals = _band_limited_sample(n, xs, rng)
        norm = _l2_total(vals, xs)
        if norm > 0:
            vals /= norm
        pool.append(vals)
        labels.append(f"random_{s}")
    if include_adversarial:
        for comp in range(1, n + 1):
            vals = np.zeros((n, xs.size))
            center = 0.8 if comp <= spec.k else 0.2
            vals[comp - 1] = _bump(xs, center, 0.15, 1.0)
            norm = _l2_total(vals, xs)
            if norm > 0:
                vals /= norm
            pool.append(vals)
            labels.append(f"bump_component_{comp}")

    run_grid = GridSpec(N=grid.N, cfl=grid.cfl, T=T)
    ratios = np.empty(len(pool))
    for idx, vals in enumerate(pool):
        v0 = StateField(vals, 0.0, xs)
        dual = solve_dual(spec, S, B, v0, T, run_grid, snapshot_stride=10**9)
        num = dual.observation_energy()
        den = _l2_total(dual.terminal_state().values, xs) ** 2
        ratios[idx] = min(num / den, RATIO_CAP) if den > 1e-14 else RATIO_CAP
    return ObservabilityResult(
        estimate=float(np.min(ratios)), ratios=ratios, labels=labels
    )
