"""Kernel equations on the triangle, source matrix, Volterra transform.

The transform u(t,x) = w(t,x) - integral_0^x K(x,y) w(t,y) dy maps the system
to a target form whose coupling acts only through the boundary value u(t,0),
provided K solves on the triangle {0 < y < x < 1}

    Sigma_ii(x) dK_ij/dx + Sigma_jj(y) dK_ij/dy
        = -K_ij Sigma'_jj(y) + sum_l K_il C_lj(y)

with the diagonal condition K_ij(x,x) = C_ij(x) / (Sigma_jj(x) - Sigma_ii(x))
for i != j (which forces zero diagonal coupling, removed beforehand by an
exponential gauge).

Each scalar entry is a transport equation along characteristics with constant
sign pattern; in travel-time coordinates T_i(x) = int_0^x dxi/lambda_i(xi)
the characteristics are straight, so anchors and exit points are found by
monotone interpolation.  Characteristics that meet the diagonal carry the
diagonal data; the remaining free data is zero on {x=1} and, on {y=0}, for
the positive-block rows it is fitted each sweep so that the lower triangle of
the target source block S_++ vanishes.  The multiplicative Sigma'_jj term is
absorbed exactly by integrating K*Sigma_jj(y) along the characteristic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .core import (
    DiagonalCouplingPresent,
    DimensionMismatch,
    FixedPointDivergence,
    GridMismatch,
    MaxItersExceeded,
    CouplingField,
    StateField,
    SystemSpec,
    ValidationError,
    validate_system,
)
from .times import cumulative_travel
from .simulator import Trajectory

# anchor kinds
_DIAG = 0
_X1_ZERO = 1
_Y0_FIT = 2
_Y0_ZERO = 3


def _tri_size(NK: int) -> int:
    return (NK + 1) * (NK + 2) // 2


def _tri_index(p, q):
    p = np.asarray(p)
    return p * (p + 1) // 2 + q


def _tri_points(NK: int):
    ps = np.concatenate([np.full(p + 1, p, dtype=int) for p in range(NK + 1)])
    qs = np.concatenate([np.arange(p + 1) for p in range(NK + 1)])
    return ps, qs


def _triangle_interp(xq, yq, NK: int):
    """COO data interpolating triangle-grid samples at points (xq, yq).

    Bilinear inside cells below the diagonal; cells cut by the diagonal use
    the affine interpolant on their lower triangle.  Points are clipped into
    the closed triangle first.
    """
    xq = np.clip(np.asarray(xq, dtype=float), 0.0, 1.0)
    yq = np.clip(np.asarray(yq, dtype=float), 0.0, None)
    yq = np.minimum(yq, xq)
    p = np.clip((xq * NK).astype(int), 0, NK - 1)
    q = np.clip((yq * NK).astype(int), 0, NK - 1)
    q = np.minimum(q, p)
    fx = np.clip(xq * NK - p, 0.0, 1.0)
    fy = np.clip(yq * NK - q, 0.0, 1.0)
    on_diag = q == p
    fy = np.where(on_diag, np.minimum(fy, fx), fy)

    M = xq.size
    cols = np.empty((4, M), dtype=int)
    wts = np.empty((4, M))
    # generic bilinear corners
    cols[0] = _tri_index(p, q)
    cols[1] = _tri_index(p + 1, q)
    cols[2] = _tri_index(p, q + 1)
    cols[3] = _tri_index(p + 1, q + 1)
    wts[0] = (1 - fx) * (1 - fy)
    wts[1] = fx * (1 - fy)
    wts[2] = (1 - fx) * fy
    wts[3] = fx * fy
    # diagonal-cut cells: affine on (p,p), (p+1,p), (p+1,p+1)
    if np.any(on_diag):
        cols[2, on_diag] = _tri_index(p[on_diag], q[on_diag])
        wts[0, on_diag] = 1 - fx[on_diag]
        wts[1, on_diag] = fx[on_diag] - fy[on_diag]
        wts[3, on_diag] = fy[on_diag]
        wts[2, on_diag] = 0.0
    rows = np.repeat(np.arange(M), 4)
    return rows, cols.T.ravel(), wts.T.ravel()


def _interp_matrix(xq, yq, NK: int) -> sp.csr_matrix:
    rows, cols, wts = _triangle_interp(xq, yq, NK)
    return sp.csr_matrix((wts, (rows, cols)), shape=(len(xq), _tri_size(NK)))


# --------------------------------------------------------------------------- #
# diagonal gauge
# --------------------------------------------------------------------------- #

@dataclass
class DiagonalGauge:
    """Exponential rescaling that removed the diagonal of the coupling."""

    xs: np.ndarray
    factors: np.ndarray  # (n, len(xs)); identity gauge has all ones
    identity: bool = False

    def factor_at(self, i: int, x):
        return np.interp(x, self.xs, self.factors[i])

    def apply(self, state: StateField) -> StateField:
        """Original variables -> gauged variables."""
        fac = np.vstack([np.interp(state.xs, self.xs, row) for row in self.factors])
        return StateField(state.values * fac, state.t, state.xs)

    def unapply(self, state: StateField) -> StateField:
        fac = np.vstack([np.interp(state.xs, self.xs, row) for row in self.factors])
        return StateField(state.values / fac, state.t, state.xs)


def preprocess_diagonal(spec: SystemSpec, n_fine: int = 2048):
    """Equivalent system with zero-diagonal coupling, plus the gauge record.

    The state change w~_i = exp(int_0^x C_ii/Sigma_ii) w_i cancels C_ii and
    multiplies the off-diagonal entries by factor ratios; reflection at x = 0
    is untouched because every factor equals one there.
    """
    if spec.state_dependent:
        raise ValidationError("diagonal preprocessing requires state-independent speeds")
    n = spec.n
    xs = np.linspace(0.0, 1.0, n_fine + 1)
    cvals = spec.coupling_nodes(xs)  # includes gamma
    diag = np.stack([cvals[i, i] for i in range(n)])
    if np.max(np.abs(diag), initial=0.0) <= 1e-14 * max(1.0, spec.coupling_bound):
        gauge = DiagonalGauge(xs=xs, factors=np.ones((n, xs.size)), identity=True)
        return spec, gauge

    sig = spec.signed_speeds(xs)
    integrand = diag / sig
    cum = np.concatenate(
        [
            np.zeros((n, 1)),
            np.cumsum(0.5 * (integrand[:, 1:] + integrand[:, :-1]) * np.diff(xs), axis=1),
        ],
        axis=1,
    )
    factors = np.exp(cum)
    ratio = factors[:, None, :] / factors[None, :, :]  # (i, j, x)
    new_c = cvals * ratio
    for i in range(n):
        new_c[i, i] = 0.0
    coupling = CouplingField(n, samples=(xs, np.moveaxis(new_c, 2, 0)), gamma=1.0)
    new_spec = validate_system(spec.profile, coupling, spec.reflection)
    return new_spec, DiagonalGauge(xs=xs, factors=factors)


# --------------------------------------------------------------------------- #
# kernel
# --------------------------------------------------------------------------- #

@dataclass
class KernelReport:
    iterations: int
    final_change: float
    residual_linf: float
    residual_per_entry: np.ndarray
    converged: bool
    changes: list = field(default_factory=list)


@dataclass
class Kernel:
    """Matrix-valued kernel samples on the triangle grid {y_q <= x_p}."""

    n: int
    k: int
    NK: int
    values: np.ndarray  # (n, n, n_pts)
    report: Optional[KernelReport] = field(default=None, repr=False)

    @property
    def h(self) -> float:
        return 1.0 / self.NK

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.NK + 1)

    def rows_at(self, x: float, ys) -> np.ndarray:
        """K(x, ys) for an array of ys, shape (len(ys), n, n)."""
        ys = np.atleast_1d(np.asarray(ys, dtype=float))
        W = _interp_matrix(np.full(ys.size, float(x)), ys, self.NK)
        flat = self.values.reshape(self.n * self.n, -1)
        return (W @ flat.T).reshape(ys.size, self.n, self.n)

    def value_at(self, x: float, y: float) -> np.ndarray:
        return self.rows_at(x, [y])[0]

    def at_y0(self) -> np.ndarray:
        """K(x_p, 0) at the grid nodes, shape (n, n, NK+1)."""
        idx = _tri_index(np.arange(self.NK + 1), 0)
        return self.values[:, :, idx]

    def diagonal_values(self) -> np.ndarray:
        """K(x_p, x_p) at the grid nodes, shape (n, n, NK+1)."""
        ps = np.arange(self.NK + 1)
        idx = _tri_index(ps, ps)
        return self.values[:, :, idx]


def _entry_geometry(spec, i, j, tables, NK):
    """Anchor classification and integration paths for one kernel entry.

    Returns a dict consumed by the sweep: anchor kinds/positions, the sparse
    interpolation matrix over all path sample points, trapezoid weights,
    segment starts, and fixed multiplicative data.
    """
    k = spec.k
    h = 1.0 / NK
    ps, qs = _tri_points(NK)
    xs_pts = ps * h
    ys_pts = qs * h
    n_pts = xs_pts.size

    xf_i, Tf_i = tables[i]
    xf_j, Tf_j = tables[j]
    s_i = -1.0 if i < k else 1.0
    s_j = -1.0 if j < k else 1.0
    Ti_full = Tf_i[-1]
    a = np.interp(xs_pts, xf_i, Tf_i)
    b = np.interp(ys_pts, xf_j, Tf_j)

    # backward edge events (inf where the coordinate moves the other way)
    inf = np.inf
    tau_edge = np.full(n_pts, inf)
    edge_kind = np.full(n_pts, -1, dtype=int)
    if s_i < 0:  # x increases backward: exits through x = 1
        tau_x1 = Ti_full - a
        better = tau_x1 < tau_edge
        tau_edge = np.where(better, tau_x1, tau_edge)
        edge_kind = np.where(better, _X1_ZERO, edge_kind)
    if s_j > 0:  # y decreases backward: exits through y = 0
        better = b < tau_edge
        tau_edge = np.where(better, b, tau_edge)
        edge_kind = np.where(
            better, _Y0_FIT if (i >= k and j >= k and j <= i) else _Y0_ZERO, edge_kind
        )
    if s_i > 0:  # guard: x = 0 (geometrically never first, only roundoff)
        better = a < tau_edge
        tau_edge = np.where(better, a, tau_edge)
        edge_kind = np.where(better, _Y0_ZERO, edge_kind)

    anchor_kind = edge_kind.copy()
    s_anchor = -tau_edge
    anchor_x = np.where(anchor_kind == _X1_ZERO, 1.0, np.interp(a - s_i * tau_edge, Tf_i, xf_i))
    anchor_y = np.where(anchor_kind == _X1_ZERO, np.interp(b - s_j * tau_edge, Tf_j, xf_j), 0.0)

    if i != j:
        # the characteristic through (x,y) meets the diagonal where
        # s_j*T_i(d) - s_i*T_j(d) = s_j*a - s_i*b; phi is strictly monotone.
        phi = s_j * np.interp(xf_j, xf_i, Tf_i) - s_i * Tf_j
        c = s_j * a - s_i * b
        if phi[-1] < phi[0]:
            d = np.interp(c, phi[::-1], xf_j[::-1])
            in_range = (c <= phi[0]) & (c >= phi[-1])
        else:
            d = np.interp(c, phi, xf_j)
            in_range = (c >= phi[0]) & (c <= phi[-1])
        tau_diag = s_i * (a - np.interp(d, xf_i, Tf_i))  # backward flow time to the touch
        eps = 1e-12
        backward_touch = in_range & (tau_diag >= -eps) & (tau_diag <= tau_edge + eps)
        # forward touch: sigma = -tau_diag, must beat the forward edge events
        sigma_edge = np.full(n_pts, inf)
        if s_i < 0:
            sigma_edge = np.minimum(sigma_edge, a)
        else:
            sigma_edge = np.minimum(sigma_edge, Ti_full - a)
        if s_j < 0:
            sigma_edge = np.minimum(sigma_edge, b)
        forward_touch = in_range & (tau_diag < -eps) & (-tau_diag <= sigma_edge + eps)
        touched = backward_touch | forward_touch
        anchor_kind = np.where(touched, _DIAG, anchor_kind)
        s_anchor = np.where(touched, -tau_diag, s_anchor)
        anchor_x = np.where(touched, d, anchor_x)
        anchor_y = np.where(touched, d, anchor_y)

    # path samples from the anchor to the point, trapezoid in the flow time
    dtau = h / spec.lambda_max
    lengths = np.maximum(1, np.ceil(np.abs(s_anchor) / dtau).astype(int))
    seg_starts = np.concatenate([[0], np.cumsum(lengths + 1)])[:-1]
    total = int(np.sum(lengths + 1))
    rel = np.concatenate([np.linspace(0.0, 1.0, L + 1) for L in lengths])
    s_samp = np.repeat(s_anchor, lengths + 1) * (1.0 - rel)
    deltas = -s_anchor / lengths
    wts = np.repeat(deltas, lengths + 1)
    is_end = np.zeros(total, dtype=bool)
    is_end[seg_starts] = True
    ends = seg_starts + lengths
    is_end[ends] = True
    wts[is_end] *= 0.5

    a_samp = np.repeat(a, lengths + 1) + s_i * s_samp
    b_samp = np.repeat(b, lengths + 1) + s_j * s_samp
    x_samp = np.interp(a_samp, Tf_i, xf_i)
    y_samp = np.interp(b_samp, Tf_j, xf_j)

    lam_j = spec.profile.speeds[j].evaluate(np.clip(y_samp, 0.0, 1.0))
    sig_samp = s_j * lam_j
    lam_j_pts = spec.profile.speeds[j].evaluate(ys_pts)
    sig_pts = s_j * lam_j_pts
    lam_j_anchor = spec.profile.speeds[j].evaluate(np.clip(anchor_y, 0.0, 1.0))
    sig_anchor = s_j * lam_j_anchor

    cvals = spec.coupling_nodes(np.clip(y_samp, 0.0, 1.0))  # (n, n, total), gamma included
    src_coef = cvals[:, j, :] * sig_samp  # row l: Sigma_jj(y) * C_lj(y)
    nz_rows = [l for l in range(spec.n) if np.max(np.abs(src_coef[l]), initial=0.0) > 0.0]

    geom = {
        "i": i,
        "j": j,
        "anchor_kind": anchor_kind,
        "anchor_x": anchor_x,
        "anchor_sig": sig_anchor,
        "sig_pts": sig_pts,
        "seg_starts": seg_starts,
        "wts": wts,
        "src_coef": src_coef,
        "nz_rows": nz_rows,
        "P": _interp_matrix(x_samp, y_samp, NK) if nz_rows else None,
    }
    if i != j:
        diag_mask = anchor_kind == _DIAG
        dvals = np.zeros(n_pts)
        if np.any(diag_mask):
            d = anchor_x[diag_mask]
            cd = spec.coupling_nodes(d)[i, j, :]
            lam_i_d = spec.profile.speeds[i].evaluate(d)
            lam_j_d = spec.profile.speeds[j].evaluate(d)
            denom = s_j * lam_j_d - s_i * lam_i_d
            dvals[diag_mask] = cd / denom
        geom["diag_value"] = dvals
    else:
        geom["diag_value"] = np.zeros(n_pts)
    return geom


def solve_kernel(
    spec: SystemSpec,
    NK: int = 64,
    max_iters: int = 200,
    fp_tolerance: float = 1e-10,
) -> Kernel:
    """Successive approximation of the kernel on the triangle grid.

    Every sweep re-evaluates the characteristic integral of each entry from
    the previous iterate (Jacobi style), then refreshes the fitted free data
    on {y=0}.  Stops when the sup-change falls below ``fp_tolerance``; raises
    if the change grows five sweeps in a row or the iteration budget runs out.
    """
    if spec.state_dependent:
        raise ValidationError("kernel equations require state-independent speeds")
    if NK < 8:
        raise ValidationError("kernel grid too coarse")
    n, k, m = spec.n, spec.k, spec.m
    check_x = np.linspace(0.0, 1.0, 513)
    cdiag = spec.coupling_nodes(check_x)
    diag_max = max(float(np.max(np.abs(cdiag[i, i]))) for i in range(n))
    if diag_max > 1e-12 * max(1.0, spec.coupling_bound):
        raise DiagonalCouplingPresent(
            "coupling has nonzero diagonal entries; run preprocess_diagonal first"
        )

    tables = [cumulative_travel(spec, i, n_fine=max(4096, 8 * NK)) for i in range(n)]
    geoms = [[_entry_geometry(spec, i, j, tables, NK) for j in range(n)] for i in range(n)]

    n_pts = _tri_size(NK)
    nodes_x = np.linspace(0.0, 1.0, NK + 1)
    y0_idx = _tri_index(np.arange(NK + 1), 0)
    lam0 = spec.lambdas(np.array([0.0]))[:, 0]
    B = spec.B

    K = np.zeros((n, n, n_pts))
    gfit = np.zeros((n, n, NK + 1))  # only rows i>=k, cols k<=j<=i are used

    changes = []
    grew = 0
    converged = False
    for it in range(1, max_iters + 1):
        K_new = np.empty_like(K)
        for i in range(n):
            for j in range(n):
                g = geoms[i][j]
                kind = g["anchor_kind"]
                anchor = np.where(kind == _DIAG, g["diag_value"] * g["anchor_sig"], 0.0)
                fit_mask = kind == _Y0_FIT
                if np.any(fit_mask):
                    data = np.interp(g["anchor_x"][fit_mask], nodes_x, gfit[i, j])
                    anchor[fit_mask] = data * g["anchor_sig"][fit_mask]
                if g["nz_rows"]:
                    acc = np.zeros(g["wts"].size)
                    for l in g["nz_rows"]:
                        acc += g["src_coef"][l] * (g["P"] @ K[i, l])
                    integral = np.add.reduceat(g["wts"] * acc, g["seg_starts"])
                else:
                    integral = 0.0
                K_new[i, j] = (anchor + integral) / g["sig_pts"]
        # refresh fitted boundary data on {y=0} for the positive-block rows
        g_new = np.zeros_like(gfit)
        Ky0 = K_new[:, :, y0_idx]  # (n, n, NK+1)
        for p_row in range(m):
            i = k + p_row
            for q_col in range(p_row + 1):
                j = k + q_col
                g_new[i, j] = (
                    np.einsum("l,lx->x", lam0[:k] * B[:, q_col], Ky0[i, :k]) / lam0[j]
                )
        change = float(np.max(np.abs(K_new - K)))
        if np.any(gfit):
            change = max(change, float(np.max(np.abs(g_new - gfit))))
        K, gfit = K_new, g_new
        if changes and change > changes[-1]:
            grew += 1
            if grew >= 5:
                raise FixedPointDivergence(
                    f"kernel iteration diverging: change {change:.3e} after {it} sweeps"
                )
        else:
            grew = 0
        changes.append(change)
        if change < fp_tolerance:
            converged = True
            break
    if not converged:
        raise MaxItersExceeded(
            f"kernel iteration did not reach {fp_tolerance:g} in {max_iters} sweeps "
            f"(last change {changes[-1]:.3e})"
        )

    kernel = Kernel(n=n, k=k, NK=NK, values=K)
    res_linf, res_entries = kernel_pde_residual(kernel, spec)
    kernel.report = KernelReport(
        iterations=len(changes),
        final_change=changes[-1],
        residual_linf=res_linf,
        residual_per_entry=res_entries,
        converged=True,
        changes=changes,
    )
    return kernel


def kernel_pde_residual(kernel: Kernel, spec: SystemSpec):
    """First-order finite-difference residual of the kernel transport equations.

    One-sided differences take the neighbor on the side the data comes from;
    a one-cell band around the diagonal is excluded (the kernel may lose
    smoothness there).  Returns (overall max, per-entry max).
    """
    n, k, NK = kernel.n, kernel.k, kernel.NK
    h = kernel.h
    ps, qs = _tri_points(NK)
    mask = (qs >= 1) & (ps <= NK - 1) & (qs <= ps - 2)
    p_in, q_in = ps[mask], qs[mask]
    x_in, y_in = p_in * h, q_in * h
    idx0 = _tri_index(p_in, q_in)
    idx_px = _tri_index(p_in + 1, q_in)
    idx_mx = _tri_index(p_in - 1, q_in)
    idx_py = _tri_index(p_in, q_in + 1)
    idx_my = _tri_index(p_in, q_in - 1)

    lam_x = spec.lambdas(x_in)
    lam_y = spec.lambdas(y_in)
    dstep = h / 4.0
    lam_y_p = spec.lambdas(y_in + dstep)
    lam_y_m = spec.lambdas(y_in - dstep)
    cvals = spec.coupling_nodes(y_in)

    res_entries = np.zeros((n, n))
    K = kernel.values
    for i in range(n):
        s_i = -1.0 if i < k else 1.0
        sig_x = s_i * lam_x[i]
        for j in range(n):
            s_j = -1.0 if j < k else 1.0
            sig_y = s_j * lam_y[j]
            dsig = s_j * (lam_y_p[j] - lam_y_m[j]) / (2 * dstep)
            if s_i < 0:  # data arrives from larger x
                dx = (K[i, j][idx_px] - K[i, j][idx0]) / h
            else:
                dx = (K[i, j][idx0] - K[i, j][idx_mx]) / h
            if s_j < 0:
                dy = (K[i, j][idx_py] - K[i, j][idx0]) / h
            else:
                dy = (K[i, j][idx0] - K[i, j][idx_my]) / h
            coup = sum(K[i, l][idx0] * cvals[l, j] for l in range(n))
            res = sig_x * dx + sig_y * dy + K[i, j][idx0] * dsig - coup
            res_entries[i, j] = np.max(np.abs(res), initial=0.0)
    return float(np.max(res_entries)), res_entries


# --------------------------------------------------------------------------- #
# source matrix
# --------------------------------------------------------------------------- #

@dataclass
class SourceMatrix:
    """S(x) = K(x,0) Sigma(0) Q on the kernel nodes; first k columns are zero."""

    k: int
    m: int
    xs: np.ndarray
    values: np.ndarray  # (n, n, NK+1)
    lower_triangle_max: float = 0.0

    def value_nodes(self, xq) -> np.ndarray:
        xq = np.atleast_1d(np.asarray(xq, dtype=float))
        n = self.k + self.m
        out = np.zeros((n, n, xq.size))
        for i in range(n):
            for j in range(self.k, n):
                out[i, j] = np.interp(xq, self.xs, self.values[i, j])
        return out


def source_matrix(kernel: Kernel, spec: SystemSpec, B=None) -> SourceMatrix:
    """Assemble S(x) = K(x,0) Sigma(0) Q and report the S_++ lower triangle.

    Q stacks (0_k B; 0_mk I_m), so the first k columns of S vanish exactly;
    the lower-triangle magnitude of S_++ measures how well the fitted kernel
    boundary data achieved the structural zeros.
    """
    if B is None:
        B = spec.B
    B = np.atleast_2d(np.asarray(B, dtype=float))
    n, k, m = kernel.n, kernel.k, spec.m
    if B.shape != (k, m):
        raise DimensionMismatch(f"B must be {k}x{m}")
    sig0 = spec.signed_speeds(np.array([0.0]))[:, 0]
    Q = np.zeros((n, n))
    Q[:k, k:] = B
    Q[k:, k:] = np.eye(m)
    Ky0 = kernel.at_y0()  # (n, n, NK+1)
    S = np.einsum("ilx,l,lj->ijx", Ky0, sig0, Q)
    S[:, :k, :] = 0.0  # structural, forced by Q's zero columns
    low = 0.0
    for p in range(m):
        for q in range(p + 1):
            low = max(low, float(np.max(np.abs(S[k + p, k + q]), initial=0.0)))
    return SourceMatrix(k=k, m=m, xs=kernel.xs, values=S, lower_triangle_max=low)


# --------------------------------------------------------------------------- #
# Volterra transform
# --------------------------------------------------------------------------- #

def _check_uniform(xs: np.ndarray) -> float:
    h = xs[1] - xs[0]
    if not np.allclose(np.diff(xs), h, rtol=1e-9, atol=1e-12):
        raise GridMismatch("transform needs a uniform state grid")
    return float(h)


def transform(w: StateField, kernel: Kernel) -> StateField:
    """u(x_p) = w(x_p) - sum_{q<=p} trapz-weight K(x_p, y_q) w(y_q)."""
    if w.n != kernel.n:
        raise GridMismatch("state and kernel have different component counts")
    xs = w.xs
    h = _check_uniform(xs)
    N = xs.size - 1
    u = w.values.copy()
    for p in range(1, N + 1):
        rows = kernel.rows_at(xs[p], xs[: p + 1])  # (p+1, n, n)
        wts = np.full(p + 1, h)
        wts[0] = wts[-1] = h / 2.0
        u[:, p] -= np.einsum("q,qij,jq->i", wts, rows, w.values[:, : p + 1])
    return StateField(u, w.t, xs)


def inverse_transform(u: StateField, kernel: Kernel) -> StateField:
    """Solve the discrete Volterra system by forward substitution in x."""
    if u.n != kernel.n:
        raise GridMismatch("state and kernel have different component counts")
    xs = u.xs
    h = _check_uniform(xs)
    N = xs.size - 1
    n = u.n
    w = np.empty_like(u.values)
    w[:, 0] = u.values[:, 0]
    eye = np.eye(n)
    for p in range(1, N + 1):
        rows = kernel.rows_at(xs[p], xs[: p + 1])
        wts = np.full(p + 1, h)
        wts[0] = wts[-1] = h / 2.0
        rhs = u.values[:, p] + np.einsum(
            "q,qij,jq->i", wts[:-1], rows[:-1], w[:, :p]
        )
        w[:, p] = np.linalg.solve(eye - wts[-1] * rows[-1], rhs)
    return StateField(w, u.t, xs)


def target_residual(traj: Trajectory, S: Optional[SourceMatrix], spec: SystemSpec) -> float:
    """Space-time L2 residual of the target dynamics on a transformed trajectory.

    Forward difference in time, central difference in space over interior
    points; with a zero kernel this reduces to the upwind truncation error of
    the plain system, O(h).
    """
    xs = traj.xs
    h = _check_uniform(xs)
    snaps = traj.snapshots
    ts = traj.snapshot_times
    sig = spec.signed_speeds(xs)
    svals = S.value_nodes(xs) if S is not None else None
    total = 0.0
    for s0, s1, t0, t1 in zip(snaps[:-1], snaps[1:], ts[:-1], ts[1:]):
        dt = t1 - t0
        du = (s1 - s0) / dt
        dx = (s0[:, 2:] - s0[:, :-2]) / (2 * h)
        res = du[:, 1:-1] - sig[:, 1:-1] * dx
        if svals is not None:
            res -= np.einsum("ijq,j->iq", svals[:, :, 1:-1], s0[:, 0])
        total += h * dt * float(np.sum(res**2))
    return float(np.sqrt(total))
