"""Null-phase charts near the controlled face and the normalized operator.

The pipeline turns the variable-coefficient wave operator on a slab
0 <= x_n <= depth into a unit-speed normal form on a rectangle in chart
coordinates:

    solve_eikonal        two families of null phase functions seeded on the
                         face, one advancing with time ('+') and one receding
                         ('-'), integrated along their own characteristics
    solve_transport_phi  lateral coordinates frozen along the receding
                         family's characteristic curves
    build_chart          the boundary-normal chart (time, lateral, depth)
                         built from the phase pair, with the gauge phase that
                         removes the outgoing potential component and the
                         lateral volume factor
    transform_operator   coefficients of the operator rewritten in the chart,
                         with unit speeds in the (time, depth) plane
    solve_transformed_ibvp  forward run of the normalized operator

Arrays follow the package layout [time, lateral..., depth]; the controlled
face sits at depth zero and the chart restricts to the identity there.
Characteristic launches are independent per boundary node and integrate as
one vectorized batch, so results are deterministic regardless of how the
work is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.interpolate import CloughTocher2DInterpolator, CubicSpline, RectBivariateSpline
from scipy.spatial import Delaunay

from .expr import Call, Const, Expr
from .geometry import MetricField, SpacetimeGrid
from .solver import CFLViolation, SampledCoefficients, WaveField, solve_ibvp

__all__ = [
    "CharacteristicCrossing",
    "FocalRegion",
    "EikonalField",
    "GoursatChart",
    "TransformedOperator",
    "solve_eikonal",
    "solve_transport_phi",
    "build_chart",
    "transform_operator",
    "solve_transformed_ibvp",
    "transformed_time_step",
    "find_chart_depth",
    "potential_term",
    "potential_symbolic",
    "sample_field",
    "export_chart_csv",
    "export_operator_npz",
]


class CharacteristicCrossing(RuntimeError):
    """Characteristics launched from the face fold over before the requested depth."""


class FocalRegion(RuntimeError):
    """Requested chart values land where the coordinate map degenerates."""


# ---------------------------------------------------------------------------
# Characteristic fans
# ---------------------------------------------------------------------------

def _normal_root(g: np.ndarray, ptan: np.ndarray):
    """Depth component completing a tangential covector to a null one.

    Takes the branch with the plus sign in front of the radical; since
    g^{nn} < 0 this is the branch whose two phases have strictly negative
    slope sum at the face.  Returns (root, radicand).
    """
    n = g.shape[-1] - 1
    a = g[..., n, n]
    b = np.einsum("...j,...j->...", g[..., n, :n], ptan)
    c = np.einsum("...jk,...j,...k->...", g[..., :n, :n], ptan, ptan)
    radicand = b * b - a * c
    root = (-b + np.sqrt(np.maximum(radicand, 0.0))) / a
    return root, radicand


def _fan_env(n: int, pos: np.ndarray, z: float) -> dict:
    env = {f"x{i}": pos[..., i] for i in range(n)}
    env[f"x{n}"] = np.full(pos.shape[:-1], float(z))
    return env


def _eval_grad_g(metric: MetricField, env: dict, shape) -> np.ndarray:
    size = metric.n + 1
    table = metric.grad_g()
    out = np.zeros(shape + (size, size, size))
    for j in range(size):
        for k in range(j, size):
            for p in range(size):
                e = table[j][k][p]
                if isinstance(e, Const) and e.value == 0.0:
                    continue
                v = np.broadcast_to(np.asarray(e.evaluate(env), dtype=float), shape)
                out[..., j, k, p] = v
                if k != j:
                    out[..., k, j, p] = v
    return out


@dataclass
class _Fan:
    """One characteristic family, integrated in depth from a padded face lattice."""

    side: str
    axes: tuple            # launch coordinate arrays (time, lateral...)
    depth_nodes: np.ndarray
    pos: np.ndarray        # (nz+1, *lattice, n) tangential positions
    ptan: np.ndarray       # (nz+1, *lattice, n) tangential covector
    pn: np.ndarray         # (nz+1, *lattice) depth covector component
    value: np.ndarray      # (*lattice,) frozen phase value per ray
    _tri: dict = field(default_factory=dict)

    def triangulation(self, row: int) -> Delaunay:
        if row not in self._tri:
            self._tri[row] = Delaunay(self.pos[row].reshape(-1, 2))
        return self._tri[row]

    def trimmed(self, slices: tuple) -> "_Fan":
        take = (slice(None),) + slices
        return _Fan(
            side=self.side,
            axes=tuple(ax[s] for ax, s in zip(self.axes, slices)),
            depth_nodes=self.depth_nodes,
            pos=self.pos[take],
            ptan=self.ptan[take],
            pn=self.pn[take],
            value=self.value[slices],
        )


def _fan_rhs(metric: MetricField, pos: np.ndarray, ptan: np.ndarray, z: float):
    """Depth-parameterized characteristic flow of the null-phase graph."""
    n = metric.n
    lattice = pos.shape[:-1]
    env = _fan_env(n, pos, z)
    g = metric.eval_g(env, lattice)
    pn, radicand = _normal_root(g, ptan)
    if np.any(radicand <= 0.0):
        raise CharacteristicCrossing(
            f"face foliation degenerates near depth {z:.4f} (radicand <= 0)"
        )
    pfull = np.concatenate([ptan, pn[..., None]], axis=-1)
    v = 2.0 * np.einsum("...jk,...k->...j", g, pfull)
    vn = v[..., n]
    dg = _eval_grad_g(metric, env, lattice)
    dH = np.einsum("...jkp,...j,...k->...p", dg, pfull, pfull)
    dpos = v[..., :n] / vn[..., None]
    dptan = -dH[..., :n] / vn[..., None]
    return dpos, dptan


def _check_fold(pos_row: np.ndarray, side: str, z: float):
    if pos_row.shape[-1] == 1:
        if np.any(np.diff(pos_row[..., 0]) <= 0.0):
            raise CharacteristicCrossing(
                f"'{side}' family folds over by depth {z:.4f}"
            )
    else:
        d00 = np.gradient(pos_row[..., 0], axis=0)
        d01 = np.gradient(pos_row[..., 0], axis=1)
        d10 = np.gradient(pos_row[..., 1], axis=0)
        d11 = np.gradient(pos_row[..., 1], axis=1)
        if np.any(d00 * d11 - d01 * d10 <= 0.0):
            raise CharacteristicCrossing(
                f"'{side}' family folds over by depth {z:.4f}"
            )


def _slope_bound(metric: MetricField, grid: SpacetimeGrid) -> float:
    """Largest tangential drift per unit depth of either family at the face."""
    n = grid.n
    axes = [grid.times()] + [grid.axis(i) for i in range(1, n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    pos = np.stack(mesh, axis=-1)
    worst = 0.0
    for sign in (1.0, -1.0):
        ptan = np.zeros(pos.shape)
        ptan[..., 0] = sign
        dpos, _ = _fan_rhs(metric, pos, ptan, 0.0)
        worst = max(worst, float(np.max(np.abs(dpos))))
    return worst


def _integrate_fan(metric, side, grid, depth, pad_time, pad_lat) -> _Fan:
    n = grid.n
    dt = grid.dt
    hz = grid.h[-1]
    nz = int(round(depth / hz))
    if nz < 3:
        raise ValueError("slab depth must cover at least three depth steps")

    m_pad = int(math.ceil(pad_time / dt)) + 2
    axes = [grid.t1 + dt * np.arange(-m_pad, grid.nt + m_pad)]
    for i in range(1, n):
        h = grid.h[i - 1]
        k_pad = int(math.ceil(pad_lat / h)) + 2
        axes.append(h * np.arange(-k_pad, grid.shape[i - 1] + k_pad))
    mesh = np.meshgrid(*axes, indexing="ij")
    lattice = mesh[0].shape

    pos = np.empty((nz + 1,) + lattice + (n,))
    ptan = np.empty_like(pos)
    pn = np.empty((nz + 1,) + lattice)
    cur_pos = np.stack(mesh, axis=-1)
    cur_p = np.zeros(lattice + (n,))
    cur_p[..., 0] = 1.0 if side == "+" else -1.0
    value = (mesh[0] - grid.t1) if side == "+" else (grid.t2 - mesh[0])

    zs = hz * np.arange(nz + 1)
    for m in range(nz + 1):
        g = metric.eval_g(_fan_env(n, cur_pos, zs[m]), lattice)
        root, radicand = _normal_root(g, cur_p)
        if np.any(radicand <= 0.0):
            raise CharacteristicCrossing(
                f"face foliation degenerates near depth {zs[m]:.4f} (radicand <= 0)"
            )
        pos[m], ptan[m], pn[m] = cur_pos, cur_p, root
        _check_fold(pos[m], side, zs[m])
        if m == nz:
            break
        k1 = _fan_rhs(metric, cur_pos, cur_p, zs[m])
        k2 = _fan_rhs(metric, cur_pos + 0.5 * hz * k1[0], cur_p + 0.5 * hz * k1[1], zs[m] + 0.5 * hz)
        k3 = _fan_rhs(metric, cur_pos + 0.5 * hz * k2[0], cur_p + 0.5 * hz * k2[1], zs[m] + 0.5 * hz)
        k4 = _fan_rhs(metric, cur_pos + hz * k3[0], cur_p + hz * k3[1], zs[m] + hz)
        cur_pos = cur_pos + (hz / 6.0) * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        cur_p = cur_p + (hz / 6.0) * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])

    return _Fan(side, tuple(axes), zs, pos, ptan, pn, value)


# ---------------------------------------------------------------------------
# Fan -> tensor-slab resampling (cubic, row by row)
# ---------------------------------------------------------------------------

def _coverage_axes(fan: _Fan, grid: SpacetimeGrid):
    """Grid-aligned extended axes covered by every fan row.

    For each direction the bound comes from the boundary slice of the launch
    lattice: the box lies to the right of every image of the first slice and
    to the left of every image of the last one, which keeps it inside the
    fold-free rows.  The box must contain the grid's own window.
    """
    n = grid.n
    spacings = [grid.dt] + [grid.h[i - 1] for i in range(1, n)]
    origins = [grid.t1] + [0.0] * (n - 1)
    spans = [(grid.t1, grid.t2)] + [(0.0, grid.extent[i - 1]) for i in range(1, n)]
    inset = 1 if n > 1 else 0
    axes = []
    for d in range(n):
        comp = fan.pos[..., d]
        lo = float(np.max(np.take(comp, 0, axis=d + 1)))
        hi = float(np.min(np.take(comp, -1, axis=d + 1)))
        step, org = spacings[d], origins[d]
        i_lo = int(math.ceil((lo - org) / step - 1e-9)) + inset
        i_hi = int(math.floor((hi - org) / step + 1e-9)) - inset
        if org + i_lo * step > spans[d][0] + 1e-12 or org + i_hi * step < spans[d][1] - 1e-12:
            raise ValueError(
                "characteristic fan does not cover the slab window; increase pad_time/pad_lat"
            )
        axes.append(org + step * np.arange(i_lo, i_hi + 1))
    return tuple(axes)


def _resample_rows(fan: _Fan, target_axes: tuple, fields: dict) -> dict:
    """Interpolate per-ray row samples onto tensor (time, lateral) nodes.

    fields maps name -> (nrows, *lattice) arrays.  Output arrays are shaped
    (*target_counts, nrows) with the depth row index last.
    """
    names = list(fields)
    nrows = fan.pos.shape[0]
    tdim = tuple(len(ax) for ax in target_axes)
    out = {name: np.empty(tdim + (nrows,)) for name in names}
    if len(target_axes) == 1:
        times = target_axes[0]
        for m in range(nrows):
            x = fan.pos[m, :, 0]
            mat = np.stack([fields[name][m] for name in names], axis=-1)
            vals = CubicSpline(x, mat)(times)
            for i, name in enumerate(names):
                out[name][:, m] = vals[:, i]
    else:
        mesh_t, mesh_x = np.meshgrid(target_axes[0], target_axes[1], indexing="ij")
        for m in range(nrows):
            tri = fan.triangulation(m)
            for name in names:
                interp = CloughTocher2DInterpolator(tri, fields[name][m].reshape(-1))
                vals = interp(mesh_t, mesh_x)
                if np.any(np.isnan(vals)):
                    raise ValueError(
                        "fan rows leave the target window; increase pad_time/pad_lat"
                    )
                out[name][:, :, m] = vals
    return out


def _slab_env(grid: SpacetimeGrid, time_axis, lat_axes, depth_nodes) -> dict:
    axes = [time_axis] + list(lat_axes) + [depth_nodes]
    mesh = np.meshgrid(*axes, indexing="ij")
    env = {"x0": mesh[0]}
    for i in range(1, grid.n + 1):
        env[f"x{i}"] = mesh[i]
    return env


# ---------------------------------------------------------------------------
# Eikonal fields
# ---------------------------------------------------------------------------

@dataclass
class EikonalField:
    """One null phase family sampled on the slab 0 <= x_n <= depth.

    psi holds the phase, grad its spacetime gradient with the depth component
    recomputed from the null constraint along each ray.  Both live on the
    grid's (time, lateral) window times the slab depth nodes, depth last.
    """

    psi: np.ndarray
    side: str
    grad: np.ndarray
    grid: SpacetimeGrid
    depth: float
    depth_nodes: np.ndarray
    metric: MetricField
    _fan: _Fan
    _ext_axes: tuple
    _ext_psi: np.ndarray
    _ext_grad: np.ndarray

    def residual(self) -> np.ndarray:
        """Null-constraint defect of the cached gradient at every slab node."""
        env = _slab_env(self.grid, self.grid.times(),
                        [self.grid.axis(i) for i in range(1, self.grid.n)],
                        self.depth_nodes)
        g = self.metric.eval_g(env, self.psi.shape)
        return np.einsum("...jk,...j,...k->...", g, self.grad, self.grad)

    def residual_fd(self) -> np.ndarray:
        """Null-constraint defect with the gradient re-taken by differences."""
        spacings = [self.grid.dt] + list(self.grid.h[:-1]) + [self.grid.h[-1]]
        parts = np.gradient(self.psi, *spacings, edge_order=2)
        grad = np.stack(parts, axis=-1)
        env = _slab_env(self.grid, self.grid.times(),
                        [self.grid.axis(i) for i in range(1, self.grid.n)],
                        self.depth_nodes)
        g = self.metric.eval_g(env, self.psi.shape)
        return np.einsum("...jk,...j,...k->...", g, grad, grad)

    def boundary_slope(self) -> np.ndarray:
        """Depth derivative of the phase on the face x_n = 0."""
        return self.grad[..., 0, self.grid.n]


def solve_eikonal(metric: MetricField, side: str, grid: SpacetimeGrid, depth: float,
                  *, pad_time: float | None = None, pad_lat: float | None = None) -> EikonalField:
    """Integrate one null phase family from the face down to the given depth.

    side '+' seeds the phase advancing with time, '-' the receding one.  The
    phase is frozen along each characteristic; rays launch from a padded face
    lattice and the fan is resampled onto the tensor slab by cubic
    interpolation row by row.  Raises CharacteristicCrossing when the family
    folds over before reaching the depth.
    """
    if side not in ("+", "-"):
        raise ValueError("side must be '+' or '-'")
    if not 0.0 < depth:
        raise ValueError("depth must be positive")
    if pad_time is None or pad_lat is None:
        slope = _slope_bound(metric, grid)
        if pad_time is None:
            pad_time = 1.6 * depth * slope + 0.5 * (grid.t2 - grid.t1) + 4.0 * grid.dt
        if pad_lat is None:
            pad_lat = 1.6 * depth * slope + 4.0 * max(grid.h)

    fan = _integrate_fan(metric, side, grid, depth, pad_time, pad_lat)
    ext_axes = _coverage_axes(fan, grid)

    nrows = fan.pos.shape[0]
    fields = {"psi": np.broadcast_to(fan.value, (nrows,) + fan.value.shape)}
    for d in range(grid.n):
        fields[f"p{d}"] = fan.ptan[..., d]
    fields[f"p{grid.n}"] = fan.pn
    ext = _resample_rows(fan, ext_axes, fields)

    ext_psi = ext["psi"]
    ext_grad = np.stack([ext[f"p{d}"] for d in range(grid.n + 1)], axis=-1)

    window = _window_slices(grid, ext_axes)
    return EikonalField(
        psi=ext_psi[window],
        side=side,
        grad=ext_grad[window],
        grid=grid,
        depth=fan.depth_nodes[-1],
        depth_nodes=fan.depth_nodes,
        metric=metric,
        _fan=fan,
        _ext_axes=ext_axes,
        _ext_psi=ext_psi,
        _ext_grad=ext_grad,
    )


def _window_slices(grid: SpacetimeGrid, ext_axes: tuple) -> tuple:
    sl = []
    starts = [grid.t1] + [0.0] * (grid.n - 1)
    counts = [grid.nt] + [grid.shape[i] for i in range(grid.n - 1)]
    steps = [grid.dt] + list(grid.h[:-1])
    for ax, start, count, step in zip(ext_axes, starts, counts, steps):
        i0 = int(round((start - ax[0]) / step))
        if not np.isclose(ax[i0], start, atol=1e-9):
            raise AssertionError("extended axes misaligned with the grid window")
        sl.append(slice(i0, i0 + count))
    return tuple(sl)


def solve_transport_phi(metric: MetricField, psi_minus: EikonalField,
                        grid: SpacetimeGrid) -> list:
    """Lateral coordinates carried along the receding family's characteristics.

    Each field equals its launch value on the face and is constant along the
    rays of psi_minus, which realizes the defining first-order transport
    equation exactly at ray points.  Returns n-1 slab arrays.
    """
    if psi_minus.side != "-":
        raise ValueError("transport runs along the receding ('-') family")
    n = grid.n
    if n == 1:
        return []
    fan = psi_minus._fan
    nrows = fan.pos.shape[0]
    mesh = np.meshgrid(*fan.axes, indexing="ij")
    fields = {}
    for j in range(1, n):
        fields[f"phi{j}"] = np.broadcast_to(mesh[j], (nrows,) + mesh[j].shape)
    ext = _resample_rows(fan, psi_minus._ext_axes, fields)
    window = _window_slices(grid, psi_minus._ext_axes)
    return [ext[f"phi{j}"][window] for j in range(1, n)]


# ---------------------------------------------------------------------------
# Fractional-row cubic evaluation (used by the chart pulls)
# ---------------------------------------------------------------------------

def _lagrange_weights(t: np.ndarray):
    wm1 = -t * (t - 1.0) * (t - 2.0) / 6.0
    w0 = (t * t - 1.0) * (t - 2.0) / 2.0
    wp1 = -t * (t + 1.0) * (t - 2.0) / 2.0
    wp2 = t * (t * t - 1.0) / 6.0
    return wm1, w0, wp1, wp2


def _lagrange_dweights(t: np.ndarray):
    dm1 = -(3.0 * t * t - 6.0 * t + 2.0) / 6.0
    d0 = (3.0 * t * t - 4.0 * t - 1.0) / 2.0
    dp1 = -(3.0 * t * t - 2.0 * t - 2.0) / 2.0
    dp2 = (3.0 * t * t - 1.0) / 6.0
    return dm1, d0, dp1, dp2


def _row_base(F: np.ndarray, r: np.ndarray):
    i0 = np.clip(np.floor(r).astype(int), 1, F.shape[0] - 3)
    return i0, r - i0


def _row_gather(F: np.ndarray, i0: np.ndarray, weights) -> np.ndarray:
    out = np.zeros(i0.shape, dtype=F.dtype)
    for off, w in zip((-1, 0, 1, 2), weights):
        out += w * np.take_along_axis(F, (i0 + off)[None, ...], axis=0)[0]
    return out


def _row_value(F, r):
    i0, t = _row_base(F, r)
    return _row_gather(F, i0, _lagrange_weights(t))


def _row_slope(F, r):
    i0, t = _row_base(F, r)
    return _row_gather(F, i0, _lagrange_dweights(t))


# ---------------------------------------------------------------------------
# Chart construction
# ---------------------------------------------------------------------------

@dataclass
class GoursatChart:
    """Boundary-normal chart assembled from a null phase pair.

    Slab arrays (psi fields, y_of_x, jacobian_det, focal_mask) live on the
    grid window times depth nodes.  Chart-space arrays (d_gauge, g1, x_at_y
    and the pulled coefficient fields) live on y_grid, whose depth axis is
    the distance to the face in chart coordinates.
    """

    psi_plus: EikonalField
    psi_minus: EikonalField
    phi: list
    y_of_x: np.ndarray
    jacobian_det: np.ndarray
    focal_mask: np.ndarray
    d_gauge: np.ndarray
    g1: np.ndarray
    y_grid: SpacetimeGrid
    x_at_y: np.ndarray
    T1: float
    T2: float
    metric: MetricField
    grid: SpacetimeGrid
    depth_nodes: np.ndarray
    j_max: float
    _pull: dict

    # the linear half of the chart: (s, tau) -> (y0, yn)
    @staticmethod
    def pair_to_normal(s, tau, T1, T2):
        y0 = 0.5 * (s - tau) + 0.5 * (T2 + T1)
        yn = 0.5 * (T2 - T1 - s - tau)
        return y0, yn

    @staticmethod
    def normal_to_pair(y0, yn, T1, T2):
        return y0 - yn - T1, T2 - y0 - yn

    @staticmethod
    def pair_jacobian() -> float:
        """|d(yn, y0)/d(s, tau)| of the linear half; 1/2 by construction."""
        m = np.array([[-0.5, -0.5], [0.5, -0.5]])
        return abs(float(np.linalg.det(m)))


def _lateral_g1(ghjk: list) -> np.ndarray:
    """Inverse absolute determinant of the lateral coefficient block."""
    if not ghjk:
        return None
    m = len(ghjk)
    shape = ghjk[0][0].shape
    mat = np.empty(shape + (m, m))
    for j in range(m):
        for k in range(m):
            mat[..., j, k] = ghjk[j][k]
    return 1.0 / np.abs(np.linalg.det(mat))


def build_chart(psi_plus: EikonalField, psi_minus: EikonalField, phi: list,
                T1: float, T2: float, *, y_depth: float | None = None,
                y_time_step: float | None = None, j_max: float = 1e3) -> GoursatChart:
    """Assemble the boundary-normal chart from the phase pair.

    The chart coordinates are y0 (time), the transported lateral fields, and
    the depth yn, all linear in the two phases; on the face the map restricts
    to the identity.  Coefficient fields of the transformed operator are
    sampled along the receding family's rays and re-gridded onto a rectangle
    in chart coordinates whose depth step is three times its time step (the
    forward run then sits safely inside the stability bound).

    y_depth caps the chart depth; the default takes what the fan coverage
    supports.  Nodes where the Jacobian leaves [1/j_max, j_max], or where the
    phase-pair normalization loses positivity, are flagged in focal_mask.
    """
    if psi_plus.side != "+" or psi_minus.side != "-":
        raise ValueError("build_chart expects ('+', '-') phase fields in that order")
    grid = psi_plus.grid
    if psi_minus.grid is not grid and psi_minus.grid != grid:
        raise ValueError("phase fields live on different grids")
    if abs(T1 - grid.t1) > 1e-12 or abs(T2 - grid.t2) > 1e-12:
        raise ValueError("chart window must match the grid's time window")
    if len(phi) != grid.n - 1:
        raise ValueError("need one transported lateral field per lateral axis")
    for p in phi:
        if p.shape != psi_minus.psi.shape:
            raise ValueError("transported fields must share the phase slab shape")
    metric = psi_plus.metric
    n = grid.n
    hz = grid.h[-1]
    depth_nodes = psi_plus.depth_nodes
    if len(depth_nodes) != len(psi_minus.depth_nodes) or abs(psi_plus.depth - psi_minus.depth) > 1e-12:
        raise ValueError("phase fields sampled to different depths")

    # shared extended axes: overlap of the two coverage windows (same lattice)
    ext_axes = []
    for ax_p, ax_m, step in zip(psi_plus._ext_axes, psi_minus._ext_axes,
                                [grid.dt] + list(grid.h[:-1])):
        lo = max(ax_p[0], ax_m[0])
        hi = min(ax_p[-1], ax_m[-1])
        k0 = int(round((lo - ax_p[0]) / step))
        k1 = int(round((hi - ax_p[0]) / step))
        ext_axes.append(ax_p[k0:k1 + 1])
    ext_axes = tuple(ext_axes)

    def on_axes(field_ext, source_axes):
        sl = []
        for ax_src, ax_dst, s in zip(source_axes, ext_axes, [grid.dt] + list(grid.h[:-1])):
            i0 = int(round((ax_dst[0] - ax_src[0]) / s))
            sl.append(slice(i0, i0 + len(ax_dst)))
        return field_ext[tuple(sl)]

    psi_p = on_axes(psi_plus._ext_psi, psi_plus._ext_axes)
    grad_p = on_axes(psi_plus._ext_grad, psi_plus._ext_axes)
    psi_m = on_axes(psi_minus._ext_psi, psi_minus._ext_axes)
    grad_m = on_axes(psi_minus._ext_grad, psi_minus._ext_axes)

    # lateral transport fields on the shared extended slab
    fan = psi_minus._fan
    nrows = fan.pos.shape[0]
    if n > 1:
        mesh = np.meshgrid(*fan.axes, indexing="ij")
        launch_fields = {
            f"phi{j}": np.broadcast_to(mesh[j], (nrows,) + mesh[j].shape)
            for j in range(1, n)
        }
        phi_ext = _resample_rows(fan, ext_axes, launch_fields)
        phi_ext = [phi_ext[f"phi{j}"] for j in range(1, n)]
    else:
        phi_ext = []

    spacings = [grid.dt] + list(grid.h[:-1]) + [hz]
    dphi = [np.stack(np.gradient(p, *spacings, edge_order=2), axis=-1) for p in phi_ext]

    env = _slab_env(grid, ext_axes[0], ext_axes[1:], depth_nodes)
    slab_shape = psi_p.shape
    g = metric.eval_g(env, slab_shape)

    ghpm = -0.5 * np.einsum("...jk,...j,...k->...", g, grad_p, grad_m)
    ghpj = [0.5 * np.einsum("...jk,...j,...k->...", g, grad_p, dphi[j]) for j in range(n - 1)]
    ghjk = [[np.einsum("...jk,...j,...k->...", g, dphi[a], dphi[b]) for b in range(n - 1)]
            for a in range(n - 1)]
    g1_x = _lateral_g1(ghjk)
    if g1_x is None:
        g1_x = np.ones(slab_shape)

    # chart map and its Jacobian on the slab
    y0 = 0.5 * (psi_p - psi_m) + 0.5 * (T2 + T1)
    yn = 0.5 * (T2 - T1 - psi_p - psi_m)
    y_comps = [y0] + phi_ext + [yn]
    jac_rows = [0.5 * (grad_p - grad_m)] + dphi + [-0.5 * (grad_p + grad_m)]
    jac = np.empty(slab_shape + (n + 1, n + 1))
    for r, row in enumerate(jac_rows):
        jac[..., r, :] = row
    jac_det = np.linalg.det(jac)
    focal = (np.abs(jac_det) > j_max) | (np.abs(jac_det) < 1.0 / j_max) | (ghpm <= 0.0)

    # hatted potentials from the one-form transformation rule
    pot_zero = all(isinstance(a, Const) and a.value == 0.0 for a in metric.A)
    if pot_zero:
        Ap_x = np.zeros(slab_shape)
        Am_x = np.zeros(slab_shape)
        Aj_x = [np.zeros(slab_shape) for _ in range(n - 1)]
    else:
        rhs = metric.eval_A(env, slab_shape)
        M = np.empty(slab_shape + (n + 1, n + 1))
        M[..., :, 0] = -grad_p
        M[..., :, 1] = -grad_m
        for j in range(n - 1):
            M[..., :, 2 + j] = dphi[j]
        hat = np.linalg.solve(M, rhs[..., None])[..., 0]
        Ap_x, Am_x = hat[..., 0], hat[..., 1]
        Aj_x = [hat[..., 2 + j] for j in range(n - 1)]

    window = _window_slices(grid, ext_axes)
    y_of_x = np.stack([c[window] for c in y_comps], axis=-1)

    # ---- pull the coefficient fields onto a chart-space rectangle ----------
    pull_fan = _trim_fan(fan, ext_axes)
    slab_fields = {"s": psi_p, "ghpm": ghpm, "g1": g1_x,
                   "Am": Am_x, "focal": focal.astype(float)}
    for j in range(n - 1):
        slab_fields[f"ghp{j}"] = ghpj[j]
        slab_fields[f"Aj{j}"] = Aj_x[j]
        for k in range(n - 1):
            slab_fields[f"gh{j}{k}"] = ghjk[j][k]
    if not pot_zero:
        slab_fields["Ap"] = Ap_x

    fan_samples = _fields_at_fan(pull_fan, ext_axes, slab_fields)
    for d in range(n):
        fan_samples[f"x{d}"] = pull_fan.pos[..., d]

    # gauge phase: d/ds d = -(outgoing hatted potential), zero on the face,
    # integrated along each ray where (tau, y') are frozen
    if pot_zero:
        fan_samples["d"] = np.zeros_like(fan_samples["s"])
    else:
        fan_samples["d"] = cumulative_trapezoid(
            -fan_samples["Ap"], x=fan_samples["s"], axis=0, initial=0.0)
        del fan_samples["Ap"]

    y_grid, pulled, row_index = _pull_to_chart(
        pull_fan, fan_samples, grid, T1, T2, y_depth, y_time_step)
    x_at_y = np.stack(
        [pulled[f"x{d}"] for d in range(n)] + [row_index * hz], axis=-1)

    return GoursatChart(
        psi_plus=psi_plus,
        psi_minus=psi_minus,
        phi=list(phi),
        y_of_x=y_of_x,
        jacobian_det=jac_det[window],
        focal_mask=focal[window],
        d_gauge=pulled["d"],
        g1=pulled["g1"],
        y_grid=y_grid,
        x_at_y=x_at_y,
        T1=float(T1),
        T2=float(T2),
        metric=metric,
        grid=grid,
        depth_nodes=depth_nodes,
        j_max=float(j_max),
        _pull=pulled,
    )


def _trim_fan(fan: _Fan, ext_axes: tuple) -> _Fan:
    """Drop outer rays whose positions ever leave the extended slab."""
    n_tan = fan.pos.shape[-1]
    slices = []
    for d in range(n_tan):
        lo, hi = ext_axes[d][0], ext_axes[d][-1]
        red = tuple(a for a in range(fan.pos.ndim - 1) if a != d + 1)
        inside = (fan.pos[..., d].min(axis=red) >= lo - 1e-12) & \
                 (fan.pos[..., d].max(axis=red) <= hi + 1e-12)
        idx = np.nonzero(inside)[0]
        if idx.size < 8:
            raise ValueError("too few rays stay inside the slab; increase pads")
        slices.append(slice(idx[0], idx[-1] + 1))
    return fan.trimmed(tuple(slices))


def _fields_at_fan(fan: _Fan, ext_axes: tuple, slab_fields: dict) -> dict:
    """Sample extended-slab fields at the fan's ray points, row by row.

    Fan rows sit exactly on the slab depth nodes, so only the (time, lateral)
    directions interpolate.
    """
    names = list(slab_fields)
    nrows = fan.pos.shape[0]
    lattice = fan.pos.shape[1:-1]
    out = {name: np.empty((nrows,) + lattice) for name in names}
    if len(ext_axes) == 1:
        for m in range(nrows):
            x = fan.pos[m, :, 0]
            mat = np.stack([slab_fields[name][:, m] for name in names], axis=-1)
            vals = CubicSpline(ext_axes[0], mat)(x)
            for i, name in enumerate(names):
                out[name][m] = vals[:, i]
    else:
        for m in range(nrows):
            t_pts = fan.pos[m, ..., 0].reshape(-1)
            x_pts = fan.pos[m, ..., 1].reshape(-1)
            for name in names:
                spl = RectBivariateSpline(ext_axes[0], ext_axes[1], slab_fields[name][:, :, m])
                out[name][m] = spl.ev(t_pts, x_pts).reshape(lattice)
    return out


def _pull_to_chart(fan: _Fan, fan_samples: dict, grid: SpacetimeGrid,
                   T1: float, T2: float, y_depth, y_time_step):
    """Re-grid per-ray samples onto the chart rectangle.

    Stage one interpolates across rays onto virtual launches at the chart's
    own time lattice; stage two inverts the advancing phase along each
    virtual ray (Newton-refined cubic row lookup) to land on the requested
    chart depth nodes.  Returns (y_grid, pulled fields, fractional row index).
    """
    n = grid.n
    window = T2 - T1

    if y_time_step is None:
        href = min(grid.h[:-1]) if n > 1 else grid.h[-1]
        steps = int(math.ceil(window / (href / 3.0)))
    else:
        steps = int(round(window / y_time_step))
        if abs(steps * y_time_step - window) > 1e-9:
            raise ValueError("y_time_step must divide the time window")
    dty = window / steps
    dz = 3.0 * dty
    nt_y = steps + 1

    # stage one: cross-ray interpolation at the dense virtual-launch lattice
    if fan.axes[0][0] > T1 + 1e-12:
        raise ValueError("trimmed fan misses early launches; increase pad_time")
    for i in range(1, n):
        if fan.axes[i][0] > 1e-12 or fan.axes[i][-1] < grid.extent[i - 1] - 1e-12:
            raise ValueError("trimmed fan misses lateral launches; increase pad_lat")

    cap = 0.5 * window if y_depth is None else min(float(y_depth), 0.5 * window)
    nq_cap = int(math.floor(cap / dz + 1e-9))
    xi_hi = min(T2 + nq_cap * dz, fan.axes[0][-1])
    n_star = int(math.floor((xi_hi - T1) / dty + 1e-9)) + 1
    nq_cap = min(nq_cap, (n_star - nt_y) // 3)
    if nq_cap < 4:
        raise ValueError("fan launch coverage too narrow for the chart; increase pad_time")
    xi_star = T1 + dty * np.arange(n_star)

    names = list(fan_samples)
    nrows = fan.pos.shape[0]
    if n == 1:
        stage1 = {name: np.empty((nrows, n_star)) for name in names}
        for m in range(nrows):
            mat = np.stack([fan_samples[name][m] for name in names], axis=-1)
            vals = CubicSpline(fan.axes[0], mat)(xi_star)
            for i, name in enumerate(names):
                stage1[name][m] = vals[:, i]
        lat_shape = ()
    else:
        lat_nodes = grid.axis(1)
        stage1 = {name: np.empty((nrows, n_star, len(lat_nodes))) for name in names}
        for m in range(nrows):
            for name in names:
                spl = RectBivariateSpline(fan.axes[0], fan.axes[1], fan_samples[name][m])
                stage1[name][m] = spl(xi_star, lat_nodes, grid=True)
        lat_shape = (len(lat_nodes),)

    # feasible chart depth: every virtual ray must reach its deepest target
    S = stage1["s"]
    nq = nq_cap
    while nq > 0:
        i_idx = np.arange(nt_y)
        cols = i_idx + 3 * nq
        s_star = dty * (i_idx - 3.0 * nq)
        deepest = S[-1, cols] if n == 1 else S[-1, cols].max(axis=-1)
        if np.all(deepest <= s_star + 1e-12):
            break
        nq -= 1
    if nq < 4:
        raise ValueError("chart depth coverage too shallow; deepen the slab")

    i_grid, q_grid = np.meshgrid(np.arange(nt_y), np.arange(nq + 1), indexing="ij")
    cols = (i_grid + 3 * q_grid).ravel()
    s_star = (dty * (i_grid - 3.0 * q_grid)).ravel()
    if lat_shape:
        s_star = s_star[:, None]

    S_t = S[:, cols]
    SS = -S_t
    ss = -s_star
    k = np.sum(SS < ss, axis=0)
    k = np.clip(k, 1, nrows - 1)
    lo = np.take_along_axis(SS, (k - 1)[None], axis=0)[0]
    hi = np.take_along_axis(SS, k[None], axis=0)[0]
    theta = np.where(hi > lo, (ss - lo) / np.where(hi > lo, hi - lo, 1.0), 0.0)
    r = np.clip(k - 1 + theta, 0.0, nrows - 1.0)
    for _ in range(2):
        fval = _row_value(S_t, r)
        slope = _row_slope(S_t, r)
        slope = np.where(np.abs(slope) < 1e-14, -1e-14, slope)
        r = np.clip(r - (fval - s_star) / slope, 0.0, nrows - 1.0)

    def to_y_shape(flat):
        shaped = flat.reshape((nt_y, nq + 1) + lat_shape)
        if lat_shape:
            shaped = np.moveaxis(shaped, 1, -1)
        return shaped

    pulled = {}
    for name in names:
        vals = _row_value(stage1[name][:, cols], r)
        pulled[name] = to_y_shape(vals)
    row_index = to_y_shape(r)

    extent = tuple(grid.extent[:-1]) + (nq * dz,)
    h = tuple(grid.h[:-1]) + (dz,)
    y_grid = SpacetimeGrid(n=n, extent=extent, h=h, dt=dty, t1=T1, t2=T2,
                           boundary_patch=grid.boundary_patch)
    return y_grid, pulled, row_index


# ---------------------------------------------------------------------------
# The transformed operator
# ---------------------------------------------------------------------------

@dataclass
class TransformedOperator:
    """Unit-speed normal form of the wave operator on the chart rectangle.

    The time and depth slots both carry speed one and the shared potential
    component A_minus; the outgoing potential component is identically zero
    by the gauge choice.  metric_matrix/potential_vector/rho are the sampled
    arrays a forward run consumes; V1 is the zeroth-order remainder from the
    lateral volume normalization.
    """

    g0_plus_j: list
    g0_jk: list
    A_minus: np.ndarray
    A_j: list
    V1: np.ndarray
    gh_pm: np.ndarray
    grid: SpacetimeGrid
    metric_matrix: np.ndarray
    potential_vector: np.ndarray
    rho: np.ndarray
    g1: np.ndarray
    d_gauge: np.ndarray
    vmax: float
    chart: GoursatChart

    def provider(self) -> SampledCoefficients:
        """Sampled-coefficient view consumed by the forward stepper."""
        v1 = self.V1 if np.any(self.V1 != 0.0) else None
        return SampledCoefficients(self.grid, self.metric_matrix,
                                   self.potential_vector, rho=self.rho, v1=v1)

    def boundary_traces(self) -> dict:
        """Face values used by the flux-map transformation: g1, its depth
        slope (one-sided second order), the normalization, and the lateral
        couplings."""
        dz = self.grid.h[-1]
        g1f = self.g1[..., 0]
        dg1 = (-3.0 * self.g1[..., 0] + 4.0 * self.g1[..., 1] - self.g1[..., 2]) / (2.0 * dz)
        return {
            "g1": g1f,
            "dg1_dyn": dg1,
            "gh_pm": self.gh_pm[..., 0],
            "g0_plus_j": [b[..., 0] for b in self.g0_plus_j],
            "A_minus": self.A_minus[..., 0],
            "A_j": [a[..., 0] for a in self.A_j],
        }


def _grad_axes(grid: SpacetimeGrid):
    return [grid.dt] + list(grid.h)


def potential_term(g1: np.ndarray, g0_plus_j: list, g0_jk: list,
                   grid: SpacetimeGrid) -> np.ndarray:
    """Zeroth-order remainder of the lateral volume normalization, sampled.

    Derivatives are centered differences on the chart grid; the in/outgoing
    derivative combinations are formed from the time and depth axes.
    """
    n = grid.n
    shape = (grid.nt,) + grid.shape
    if n == 1:
        return np.zeros(shape)
    steps = _grad_axes(grid)
    A = 0.25 * np.log(g1)
    dA = list(np.gradient(A, *steps, edge_order=2))
    A_s = 0.5 * (dA[0] - dA[n])
    A_tau = -0.5 * (dA[0] + dA[n])
    d2_00 = np.gradient(dA[0], steps[0], axis=0, edge_order=2)
    d2_nn = np.gradient(dA[n], steps[n], axis=n, edge_order=2)
    A_stau = -0.25 * (d2_00 - d2_nn)

    V = -4.0 * A_stau - 4.0 * A_s * A_tau
    for j in range(1, n):
        for k in range(1, n):
            gjk = g0_jk[j - 1][k - 1]
            V = V + gjk * dA[j] * dA[k]
            V = V + np.gradient(gjk * dA[j], steps[k], axis=k, edge_order=2)
        bj = g0_plus_j[j - 1]
        V = V + 4.0 * bj * A_s * dA[j]
        flux = bj * dA[j]
        ds_flux = 0.5 * (np.gradient(flux, steps[0], axis=0, edge_order=2)
                         - np.gradient(flux, steps[n], axis=n, edge_order=2))
        dyj = np.gradient(bj * A_s, steps[j], axis=j, edge_order=2)
        V = V + 2.0 * (ds_flux + dyj)
    return V


def potential_symbolic(g1: Expr, g0_plus_j=None, g0_jk=None, n: int = 2) -> Expr:
    """Closed-form zeroth-order remainder for expression-backed chart data.

    Chart expressions reuse the positional slot names x0..x{n}, here meaning
    (chart time, lateral..., chart depth).  Exact differentiation; useful when
    the volume factor is known analytically.  Defaults: no in/out lateral
    coupling and an orthonormal lateral block.
    """
    xn = f"x{n}"

    def d_s(e):
        return (e.diff("x0") - e.diff(xn)) / Const(2.0)

    def d_tau(e):
        return (e.diff("x0") + e.diff(xn)) / Const(-2.0)

    zero = Const(0.0)
    lat = n - 1
    g0_plus_j = list(g0_plus_j) if g0_plus_j else [zero] * lat
    if g0_jk is None:
        g0_jk = [[Const(-1.0) if j == k else zero for k in range(lat)] for j in range(lat)]

    A = Const(0.25) * Call("log", g1)
    A_s = d_s(A)
    A_tau = d_tau(A)
    V = Const(-4.0) * d_s(d_tau(A)) - Const(4.0) * A_s * A_tau
    for j in range(lat):
        Aj = A.diff(f"x{j + 1}")
        for k in range(lat):
            Ak = A.diff(f"x{k + 1}")
            V = V + g0_jk[j][k] * Aj * Ak
            V = V + (g0_jk[j][k] * Aj).diff(f"x{k + 1}")
        V = V + Const(4.0) * g0_plus_j[j] * A_s * Aj
        V = V + Const(2.0) * (d_s(g0_plus_j[j] * Aj) + (g0_plus_j[j] * A_s).diff(f"x{j + 1}"))
    return V


def transform_operator(metric: MetricField, A, chart: GoursatChart,
                       *, g1_expression: Expr | None = None) -> TransformedOperator:
    """Coefficients of the wave operator in the chart, unit-speed normal form.

    Raises FocalRegion when the chart rectangle overlaps flagged nodes.  The
    potential argument must be the one the chart was built with (pass None to
    take it from the metric).  g1_expression switches the zeroth-order term
    to exact differentiation when the volume factor is known in closed form.
    """
    if A is None:
        A = metric.A
    built = [a.render() for a in chart.metric.A]
    given = [_as_expr_like(a).render() for a in A]
    if built != given:
        raise ValueError("chart was built for a different potential")

    pulled = chart._pull
    if float(np.max(pulled["focal"])) > 0.05:
        raise FocalRegion(
            "chart rectangle overlaps focal nodes; reduce y_depth or j_max"
        )

    n = chart.grid.n
    y_grid = chart.y_grid
    ghpm = pulled["ghpm"]
    if np.any(ghpm <= 0.0):
        raise FocalRegion("phase-pair normalization lost positivity on the rectangle")

    g0_plus_j = [pulled[f"ghp{j}"] / ghpm for j in range(n - 1)]
    g0_jk = [[pulled[f"gh{j}{k}"] / ghpm for k in range(n - 1)] for j in range(n - 1)]

    pot_zero = all(isinstance(a, Const) and a.value == 0.0 for a in chart.metric.A)
    shape = (y_grid.nt,) + y_grid.shape
    if pot_zero:
        A_minus = np.zeros(shape)
        A_j = [np.zeros(shape) for _ in range(n - 1)]
    else:
        steps = _grad_axes(y_grid)
        d = chart.d_gauge
        d_y0 = np.gradient(d, steps[0], axis=0, edge_order=2)
        d_yn = np.gradient(d, steps[n], axis=n, edge_order=2)
        d_tau = -0.5 * (d_y0 + d_yn)
        A_minus = pulled["Am"] + d_tau
        A_j = [pulled[f"Aj{j}"] - np.gradient(d, steps[j + 1], axis=j + 1, edge_order=2)
               for j in range(n - 1)]

    if g1_expression is not None:
        v1_expr = potential_symbolic(g1_expression, n=n)
        env = _chart_env(y_grid)
        V1 = np.broadcast_to(np.asarray(v1_expr.evaluate(env), dtype=float), shape).copy()
    else:
        V1 = potential_term(chart.g1, g0_plus_j, g0_jk, y_grid)

    G = np.zeros(shape + (n + 1, n + 1))
    G[..., 0, 0] = 1.0
    G[..., n, n] = -1.0
    for j in range(1, n):
        G[..., 0, j] = g0_plus_j[j - 1]
        G[..., j, 0] = g0_plus_j[j - 1]
        G[..., n, j] = -g0_plus_j[j - 1]
        G[..., j, n] = -g0_plus_j[j - 1]
        for k in range(1, n):
            G[..., j, k] = g0_jk[j - 1][k - 1]

    A_vec = np.zeros(shape + (n + 1,))
    A_vec[..., 0] = A_minus
    A_vec[..., n] = A_minus
    for j in range(1, n):
        A_vec[..., j] = A_j[j - 1]

    vmax = _sampled_speed(G)
    return TransformedOperator(
        g0_plus_j=g0_plus_j,
        g0_jk=g0_jk,
        A_minus=A_minus,
        A_j=A_j,
        V1=V1,
        gh_pm=ghpm,
        grid=y_grid,
        metric_matrix=G,
        potential_vector=A_vec,
        rho=np.ones(y_grid.shape),
        g1=chart.g1,
        d_gauge=chart.d_gauge,
        vmax=vmax,
        chart=chart,
    )


def _as_expr_like(a):
    from .geometry import _as_expr

    return _as_expr(a)


def _chart_env(y_grid: SpacetimeGrid) -> dict:
    axes = [y_grid.times()] + [y_grid.axis(i) for i in range(1, y_grid.n + 1)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return {f"x{i}": mesh[i] for i in range(y_grid.n + 1)}


def _sampled_speed(G: np.ndarray) -> float:
    """Characteristic speed bound of a sampled coefficient matrix field."""
    n = G.shape[-1] - 1
    if n == 1:
        dirs = [np.array([1.0])]
    else:
        angles = np.linspace(0.0, np.pi, 8, endpoint=False)
        dirs = [np.array([math.cos(a), math.sin(a)]) for a in angles]
    worst = 0.0
    for e in dirs:
        a = G[..., 0, 0]
        b = np.einsum("...j,j->...", G[..., 0, 1:], e)
        c = np.einsum("...jk,j,k->...", G[..., 1:, 1:], e, e)
        disc = np.sqrt(np.maximum(b * b - a * c, 0.0))
        worst = max(worst, float(np.max((np.abs(b) + disc) / np.abs(a))))
    return worst


def transformed_time_step(op: TransformedOperator, fraction: float = 0.5) -> float:
    return fraction * min(op.grid.h) / op.vmax


def solve_transformed_ibvp(op: TransformedOperator, f, grid: SpacetimeGrid,
                           forcing=None, *, cfl_fraction: float = 0.5,
                           **kwargs) -> WaveField:
    """Forward run of the normalized operator on its chart rectangle.

    f is face data in chart coordinates (identical to face data in the
    original coordinates, since the chart restricts to the identity there).
    Remaining keyword arguments pass through to the forward solver.
    """
    if grid != op.grid:
        raise ValueError("grid must be the operator's chart rectangle")
    bound = cfl_fraction * min(grid.h) / op.vmax
    if grid.dt > bound * (1.0 + 1e-9):
        raise CFLViolation(
            f"dt = {grid.dt:.3e} exceeds {cfl_fraction} * h / v_max = {bound:.3e}"
        )
    return solve_ibvp(None, None, f, grid, forcing, provider=op.provider(),
                      check=False, **kwargs)


# ---------------------------------------------------------------------------
# Utilities
# ---------------------------------------------------------------------------

def find_chart_depth(metric: MetricField, grid: SpacetimeGrid, cap: float) -> float:
    """Largest slab depth (multiple of the depth spacing) both families reach.

    Bisects on the crossing error; the positivity of the phase-pair
    normalization is enforced later by the chart's focal mask.
    """
    hz = grid.h[-1]
    nz_cap = int(math.floor(cap / hz + 1e-9))
    if nz_cap < 3:
        raise ValueError("cap must allow at least three depth steps")

    def clean(nz: int) -> bool:
        try:
            for side in ("+", "-"):
                solve_eikonal(metric, side, grid, nz * hz)
            return True
        except CharacteristicCrossing:
            return False

    if clean(nz_cap):
        return nz_cap * hz
    lo, hi = 3, nz_cap
    if not clean(lo):
        raise CharacteristicCrossing("families fold within three depth steps")
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if clean(mid):
            lo = mid
        else:
            hi = mid
    return lo * hz


def sample_field(samples: np.ndarray, grid: SpacetimeGrid, points: np.ndarray) -> np.ndarray:
    """Cubic tensor-product evaluation of (nt, *shape) samples at spacetime points.

    points[..., :] = (t, x1, ..., xn).  Clamps the stencil at edges; callers
    keep points inside the domain.
    """
    n = grid.n
    fracs = [(points[..., 0] - grid.t1) / grid.dt]
    for k in range(1, n + 1):
        fracs.append(points[..., k] / grid.h[k - 1])
    sizes = (grid.nt,) + grid.shape

    bases, offsets = [], []
    for frac, size in zip(fracs, sizes):
        i0 = np.clip(np.floor(frac).astype(int), 1, size - 3)
        bases.append(i0)
        offsets.append(_lagrange_weights(frac - i0))

    out = np.zeros(points.shape[:-1], dtype=samples.dtype)
    for combo in product((-1, 0, 1, 2), repeat=n + 1):
        w = np.ones(points.shape[:-1])
        idx = []
        for d, off in enumerate(combo):
            w = w * offsets[d][off + 1]
            idx.append(bases[d] + off)
        out += w * samples[tuple(idx)]
    return out


def export_chart_csv(chart: GoursatChart, path: str) -> None:
    """Write the slab nodes with their chart images and Jacobian to CSV."""
    grid = chart.grid
    n = grid.n
    axes = [grid.times()] + [grid.axis(i) for i in range(1, n)] + [chart.depth_nodes]
    mesh = np.meshgrid(*axes, indexing="ij")
    cols = [m.ravel() for m in mesh]
    for c in range(n + 1):
        cols.append(chart.y_of_x[..., c].ravel())
    cols.append(chart.jacobian_det.ravel())
    cols.append(chart.focal_mask.astype(float).ravel())
    names = [f"x{i}" for i in range(n + 1)] + [f"y{i}" for i in range(n + 1)] \
        + ["jacobian", "focal"]
    data = np.column_stack(cols)
    np.savetxt(path, data, delimiter=",", header=",".join(names), comments="",
               fmt="%.17g")


def export_operator_npz(op: TransformedOperator, path: str) -> None:
    """Dump the transformed coefficient arrays for external inspection."""
    payload = {
        "gh_pm": op.gh_pm,
        "A_minus": op.A_minus,
        "V1": op.V1,
        "g1": op.g1,
        "d_gauge": op.d_gauge,
        "metric_matrix": op.metric_matrix,
        "potential_vector": op.potential_vector,
        "times": op.grid.times(),
        "depth_nodes": op.grid.axis(op.grid.n),
    }
    for j, b in enumerate(op.g0_plus_j):
        payload[f"g0_plus_{j + 1}"] = b
    for j, row in enumerate(op.g0_jk):
        for k, a in enumerate(row):
            payload[f"g0_{j + 1}{k + 1}"] = a
    for j, a in enumerate(op.A_j):
        payload[f"A_{j + 1}"] = a
    np.savez(path, **payload)
