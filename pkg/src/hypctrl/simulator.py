"""Forward and dual solvers plus a characteristic flow tracer.

The forward scheme is explicit first-order upwind: broad solutions may be
discontinuous and monotone upwinding avoids spurious oscillations, at the
price of O(h) diffusion.  Components 1..k propagate rightward (they enter at
x=0 through the reflection), components k+1..k+m leftward (they enter at x=1
through the controls), so the one-sided stencils use the neighbor on the side
the data comes from.

The dual system runs backward in time in conservative form
d_t v = d_x(Sigma v), which absorbs the Sigma' zero-order term exactly and
needs no derivative of the speeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .core import (
    BoundaryClosureFailure,
    CFLViolation,
    DimensionMismatch,
    FlowLeftDomain,
    GridSpec,
    NonFiniteState,
    OutOfDomain,
    SingularBoundarySpeed,
    StateField,
    SystemSpec,
    ValidationError,
)

_MAX_SUBSTEP_DOUBLINGS = 12


def zero_control(m: int) -> Callable:
    def closure(t, state, aux):
        return np.zeros(m)

    return closure


def _l2_linf(w: np.ndarray, h: float):
    sq = w * w
    l2 = np.sqrt(h * (np.sum(sq, axis=1) - 0.5 * (sq[:, 0] + sq[:, -1])))
    linf = np.max(np.abs(w), axis=1)
    return l2, linf


@dataclass
class Trajectory:
    """Time-ordered record of one forward run."""

    grid: GridSpec
    dt: float
    times: np.ndarray
    snapshot_times: np.ndarray
    snapshots: np.ndarray  # (n_snap, n, N+1)
    boundary_left: np.ndarray  # (n_steps+1, n), trace at x = 0
    boundary_right: np.ndarray  # (n_steps+1, n), trace at x = 1
    norms_l2: np.ndarray  # (n_steps+1, n)
    norms_linf: np.ndarray  # (n_steps+1, n)
    controls: np.ndarray = field(default=None, repr=False)  # (n_steps+1, m)

    @property
    def xs(self) -> np.ndarray:
        return self.grid.xs

    def terminal_state(self) -> StateField:
        return StateField(self.snapshots[-1].copy(), float(self.snapshot_times[-1]), self.xs)

    def initial_state(self) -> StateField:
        return StateField(self.snapshots[0].copy(), float(self.snapshot_times[0]), self.xs)

    def state_at(self, t: float) -> StateField:
        """Snapshot nearest to t (snapshots may be strided)."""
        idx = int(np.argmin(np.abs(self.snapshot_times - t)))
        return StateField(self.snapshots[idx].copy(), float(self.snapshot_times[idx]), self.xs)

    def state_vector_at(self, t: float, x: float) -> np.ndarray:
        """All components at (t, x), linear in time between stored snapshots."""
        ts = self.snapshot_times
        t = float(np.clip(t, ts[0], ts[-1]))
        j = int(np.searchsorted(ts, t))
        j = max(1, min(j, ts.size - 1))
        t0, t1 = ts[j - 1], ts[j]
        theta = 0.0 if t1 == t0 else (t - t0) / (t1 - t0)
        cols0 = np.array([np.interp(x, self.xs, row) for row in self.snapshots[j - 1]])
        cols1 = np.array([np.interp(x, self.xs, row) for row in self.snapshots[j]])
        return (1.0 - theta) * cols0 + theta * cols1


def _resolve_stride(n_steps: int, snapshot_stride) -> int:
    if snapshot_stride in (None, "auto"):
        return max(1, int(np.ceil((n_steps + 1) / 512)))
    stride = int(snapshot_stride)
    if stride < 1:
        raise ValidationError("snapshot stride must be >= 1")
    return stride


def solve_forward(
    spec: SystemSpec,
    w0: StateField,
    boundary_at_1: Callable,
    grid: GridSpec,
    snapshot_stride=None,
) -> Trajectory:
    """Run the upwind scheme on [0, T].

    ``boundary_at_1(t, state, aux)`` must return the m incoming values at
    x = 1 for time t; it is called once per step with the freshly updated
    state (boundary at x = 1 still pending) and must be side-effect free.
    For state-dependent speeds the CFL condition is re-checked every step and
    the step is split in halves until it holds again.
    """
    n, k = spec.n, spec.k
    xs = grid.xs
    h = grid.h
    if w0.values.shape != (n, xs.size):
        raise DimensionMismatch(
            f"initial state must have shape {(n, xs.size)}, got {w0.values.shape}"
        )
    dt_target = grid.dt_for(spec.lambda_max)
    n_steps = max(1, int(np.ceil(grid.T / dt_target - 1e-12)))
    dt = grid.T / n_steps
    stride = _resolve_stride(n_steps, snapshot_stride)

    cvals = None if spec.coupling.is_zero else spec.coupling_nodes(xs)
    lam_static = None if spec.state_dependent else spec.signed_speeds(xs)

    w = w0.values.copy()
    aux = {"grid": grid, "spec": spec, "dt": dt, "h": h, "step": 0}

    snapshots = [w.copy()]
    snapshot_times = [0.0]
    bl = np.empty((n_steps + 1, n))
    br = np.empty((n_steps + 1, n))
    nl2 = np.empty((n_steps + 1, n))
    nlinf = np.empty((n_steps + 1, n))
    ctrls = np.empty((n_steps + 1, spec.m))
    bl[0], br[0] = w[:, 0], w[:, -1]
    nl2[0], nlinf[0] = _l2_linf(w, h)
    ctrls[0] = w[k:, -1]

    def substep(w, lam, step_dt):
        dx = np.empty_like(w)
        dx[:k, 1:] = (w[:k, 1:] - w[:k, :-1]) / h
        dx[:k, 0] = 0.0
        dx[k:, :-1] = (w[k:, 1:] - w[k:, :-1]) / h
        dx[k:, -1] = 0.0
        rhs = lam * dx
        if cvals is not None:
            rhs += np.einsum("ijq,jq->iq", cvals, w)
        return w + step_dt * rhs

    for step in range(1, n_steps + 1):
        t_new = step * dt
        if spec.state_dependent:
            n_sub = 1
            while True:
                ok = True
                wtry = w
                sub_dt = dt / n_sub
                for _ in range(n_sub):
                    lam = spec.signed_speeds(xs, wtry)
                    if np.max(np.abs(lam)) * sub_dt / h > 1.0 + 1e-12:
                        ok = False
                        break
                    wtry = substep(wtry, lam, sub_dt)
                    wtry[:k, 0] = spec.reflection.apply(wtry[k:, 0])
                if ok:
                    w_new = wtry
                    break
                n_sub *= 2
                if n_sub > 2 ** _MAX_SUBSTEP_DOUBLINGS:
                    raise CFLViolation(
                        f"CFL could not be restored by halving at t = {t_new:.6g}"
                    )
        else:
            w_new = substep(w, lam_static, dt)
            w_new[:k, 0] = spec.reflection.apply(w_new[k:, 0])
        if not np.all(np.isfinite(w_new)):
            raise NonFiniteState(f"state blew up at t = {t_new:.6g}")
        aux["step"] = step
        state_view = StateField(w_new, t_new, xs)
        try:
            ctrl = np.asarray(boundary_at_1(t_new, state_view, aux), dtype=float)
        except Exception as exc:  # noqa: BLE001 - report as a solver failure
            raise BoundaryClosureFailure(f"boundary closure failed at t={t_new:.6g}: {exc}") from exc
        if ctrl.shape != (spec.m,) or not np.all(np.isfinite(ctrl)):
            raise BoundaryClosureFailure(
                f"boundary closure must return {spec.m} finite values at t={t_new:.6g}"
            )
        w_new[k:, -1] = ctrl
        w = w_new
        bl[step], br[step] = w[:, 0], w[:, -1]
        nl2[step], nlinf[step] = _l2_linf(w, h)
        ctrls[step] = ctrl
        if step % stride == 0 or step == n_steps:
            snapshots.append(w.copy())
            snapshot_times.append(t_new)

    return Trajectory(
        grid=grid,
        dt=dt,
        times=np.arange(n_steps + 1) * dt,
        snapshot_times=np.asarray(snapshot_times),
        snapshots=np.stack(snapshots),
        boundary_left=bl,
        boundary_right=br,
        norms_l2=nl2,
        norms_linf=nlinf,
        controls=ctrls,
    )


# --------------------------------------------------------------------------- #
# dual (backward) solver
# --------------------------------------------------------------------------- #

@dataclass
class DualTrajectory:
    """Backward run on [-T, 0]; internally stepped in s = -t from 0 to T."""

    grid: GridSpec
    dt: float
    times: np.ndarray  # the s values, ascending from 0 to T; t = -s
    snapshot_times: np.ndarray
    snapshots: np.ndarray
    observation: np.ndarray  # v_+(-s, 1), shape (n_steps+1, m)
    norms_l2: np.ndarray

    @property
    def xs(self) -> np.ndarray:
        return self.grid.xs

    def terminal_state(self) -> StateField:
        return StateField(self.snapshots[-1].copy(), -float(self.snapshot_times[-1]), self.xs)

    def observation_energy(self) -> float:
        """Integral over [-T, 0] of |v_+(t, 1)|^2."""
        sq = np.sum(self.observation**2, axis=1)
        return float(np.trapezoid(sq, self.times))


def solve_dual(
    spec: SystemSpec,
    S,
    B,
    v_at_0: StateField,
    T: float,
    grid: GridSpec,
    snapshot_stride=None,
) -> DualTrajectory:
    """Integrate the dual system backward from v(0, .) to t = -T.

    The boundary conditions are v_-(t, 1) = 0 and the nonlocal relation
    Sigma_+(0) v_+(t, 0) = -B^T Sigma_-(0) v_-(t, 0) + the source-matrix
    integral, evaluated by the trapezoid rule on the current snapshot and then
    divided by the diagonal Sigma_+(0).  The trace v_+(., 1) is recorded as
    the observation.
    """
    if spec.state_dependent:
        raise ValidationError("dual solver requires state-independent speeds")
    n, k, m = spec.n, spec.k, spec.m
    xs = grid.xs
    h = grid.h
    B = np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape != (k, m):
        raise DimensionMismatch(f"B must be {k}x{m}")
    if v_at_0.values.shape != (n, xs.size):
        raise DimensionMismatch("dual initial state has wrong shape")

    sig = spec.signed_speeds(xs)  # (n, N+1)
    sig_plus_0 = sig[k:, 0]
    sig_minus_0 = sig[:k, 0]
    if np.min(sig_plus_0) < 1e-12:
        raise SingularBoundarySpeed("a positive speed vanishes at x = 0")

    if S is None:
        smp_t = spp_t = None
    else:
        svals = S.value_nodes(xs)  # (n, n, N+1) including any scale
        if np.max(np.abs(svals[:, :k, :]), initial=0.0) > 1e-10 * max(
            1.0, np.max(np.abs(svals))
        ):
            raise ValidationError("source matrix must have zero first k columns")
        smp_t = np.transpose(svals[:k, k:, :], (1, 0, 2))  # (m, k, N+1)
        spp_t = np.transpose(svals[k:, k:, :], (1, 0, 2))  # (m, m, N+1)

    dt_target = grid.dt_for(spec.lambda_max)
    n_steps = max(1, int(np.ceil(T / dt_target - 1e-12)))
    ds = T / n_steps
    stride = _resolve_stride(n_steps, snapshot_stride)

    v = v_at_0.values.copy()
    snapshots = [v.copy()]
    snapshot_times = [0.0]
    obs = np.empty((n_steps + 1, m))
    nl2 = np.empty((n_steps + 1, n))
    obs[0] = v[k:, -1]
    nl2[0] = _l2_linf(v, h)[0]

    for step in range(1, n_steps + 1):
        G = sig * v
        v_new = np.empty_like(v)
        # rows < k move leftward in reversed time: forward flux difference
        v_new[:k, :-1] = v[:k, :-1] - ds / h * (G[:k, 1:] - G[:k, :-1])
        v_new[:k, -1] = 0.0
        # rows >= k move rightward in reversed time: backward flux difference
        v_new[k:, 1:] = v[k:, 1:] - ds / h * (G[k:, 1:] - G[k:, :-1])
        v_new[k:, 0] = v[k:, 0]  # placeholder for the integral endpoint
        rhs = -B.T @ (sig_minus_0 * v_new[:k, 0])
        if smp_t is not None:
            integrand = np.einsum("pkq,kq->pq", smp_t, v_new[:k]) + np.einsum(
                "pmq,mq->pq", spp_t, v_new[k:]
            )
            rhs = rhs + h * (
                np.sum(integrand, axis=1) - 0.5 * (integrand[:, 0] + integrand[:, -1])
            )
        v_new[k:, 0] = rhs / sig_plus_0
        if not np.all(np.isfinite(v_new)):
            raise NonFiniteState(f"dual state blew up at t = {-step * ds:.6g}")
        v = v_new
        obs[step] = v[k:, -1]
        nl2[step] = _l2_linf(v, h)[0]
        if step % stride == 0 or step == n_steps:
            snapshots.append(v.copy())
            snapshot_times.append(step * ds)

    return DualTrajectory(
        grid=grid,
        dt=ds,
        times=np.arange(n_steps + 1) * ds,
        snapshot_times=np.asarray(snapshot_times),
        snapshots=np.stack(snapshots),
        observation=obs,
        norms_l2=nl2,
    )


# --------------------------------------------------------------------------- #
# characteristic flow
# --------------------------------------------------------------------------- #

@dataclass
class FlowResult:
    position: float
    exited: bool = False
    exit_time: Optional[float] = None
    exit_side: Optional[float] = None


def characteristic_flow(
    spec: SystemSpec,
    j: int,
    s: float,
    xi: float,
    t: float,
    state=None,
    step: Optional[float] = None,
    clip: bool = True,
) -> FlowResult:
    """Position at time t of the component-j characteristic through (s, xi).

    dx/dt = +lambda_j for j <= k, -lambda_j for j > k; classical 4-stage
    Runge-Kutta, fixed step.  ``state`` supplies w(t, x) for state-dependent
    speeds: a Trajectory, or any callable (time, x) -> state vector.
    """
    if not (1 <= j <= spec.n):
        raise DimensionMismatch(f"component index {j} outside 1..{spec.n}")
    if not (0.0 <= xi <= 1.0):
        raise OutOfDomain(f"start position {xi} outside [0, 1]")
    sgn = 1.0 if j <= spec.k else -1.0
    speed = spec.profile.speeds[j - 1]

    if spec.state_dependent:
        if state is None:
            raise OutOfDomain("state-dependent speeds need a trajectory or state accessor")
        if isinstance(state, Trajectory):
            accessor = state.state_vector_at
        else:
            accessor = state

        def vel(time, x):
            return sgn * float(speed.evaluate(np.asarray([x]), accessor(time, x))[0])

    else:

        def vel(time, x):
            return sgn * float(speed.evaluate(np.asarray([x]))[0])

    span = t - s
    if span == 0.0:
        return FlowResult(position=xi)
    if step is None:
        step = 1.0 / (512.0 * spec.lambda_max)
    n_sub = max(1, int(np.ceil(abs(span) / step)))
    dt = span / n_sub

    x = float(xi)
    time = s
    for _ in range(n_sub):
        k1 = vel(time, x)
        k2 = vel(time + dt / 2, np.clip(x + dt / 2 * k1, 0.0, 1.0))
        k3 = vel(time + dt / 2, np.clip(x + dt / 2 * k2, 0.0, 1.0))
        k4 = vel(time + dt, np.clip(x + dt * k3, 0.0, 1.0))
        x_next = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if x_next < 0.0 or x_next > 1.0:
            side = 0.0 if x_next < 0.0 else 1.0
            theta = (side - x) / (x_next - x)
            exit_time = time + theta * dt
            if not clip:
                raise FlowLeftDomain(
                    f"flow of component {j} left the domain through x={side:g} "
                    f"at t = {exit_time:.6g}"
                )
            return FlowResult(position=side, exited=True, exit_time=exit_time, exit_side=side)
        x = x_next
        time += dt
    return FlowResult(position=float(np.clip(x, 0.0, 1.0)))
