"""Dirichlet-to-Neumann traces and high-frequency boundary probing.

The trace of a forward run is the conormal derivative on the accessible face,
normalized by the face value of the depth coefficient so that it is invariant
under changes of variables fixing the face pointwise.  For runs on a chart
rectangle the unit-speed normal form makes the trace a plain normal
derivative plus lateral couplings.

Probing drives the solver with localized oscillatory data and reads the
boundary coefficients off the leading, frequency-proportional part of the
response: in the elliptic cone of the face symbol the solution is evanescent
in depth and the trace responds like (face normalization)^(1/2) times the
square root of the symbol's depth discriminant.  Sweeping the time frequency
at fixed tangential direction and fitting a quadratic recovers the
normalization, the time-tangential coupling, and the tangential block.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .expr import Expr
from .geometry import MetricField, SpacetimeGrid, _as_expr
from .goursat import TransformedOperator
from .solver import WaveField, _bump

__all__ = [
    "DNTrace",
    "SymbolEstimate",
    "MissingBoundaryData",
    "NotElliptic",
    "PoorFit",
    "dn_trace",
    "transform_dn",
    "probe_symbol",
    "export_dn_csv",
    "symbol_report",
]


class MissingBoundaryData(ValueError):
    """Trace transformation lacks a required face coefficient."""


class NotElliptic(ValueError):
    """Probe covector lies outside the elliptic cone of the face symbol."""


class PoorFit(UserWarning):
    """Frequency sweep fit exceeded the residual threshold; values reported anyway."""


@dataclass
class DNTrace:
    """Neumann response on the accessible face, one value per face node.

    values is complex with shape (nt,) + face shape; normal_order is the
    accuracy order of the one-sided depth stencil that produced it.
    """

    values: np.ndarray
    normal_order: int
    grid: SpacetimeGrid


@dataclass
class SymbolEstimate:
    """Boundary coefficients recovered from a frequency sweep.

    estimates holds the recovered face values (keys gh_pm, g0_plus_j, g0_jk);
    samples records one entry per probed covector with the raw demodulated
    responses, the fitted slope, and the relative fit residual.  poor_fit
    flags a residual above the caller's threshold; the values are still
    reported.
    """

    covector: tuple
    frequencies: tuple
    estimates: dict
    residual: float
    poor_fit: bool
    samples: list


def _face_env(grid: SpacetimeGrid) -> dict:
    n = grid.n
    shape = (grid.nt,) + grid.shape[:-1]
    idx = [None] * len(shape)
    idx[0] = slice(None)
    env = {"x0": grid.times()[tuple(idx)]}
    for j in range(1, n):
        idx = [None] * len(shape)
        idx[j] = slice(None)
        env[f"x{j}"] = grid.axis(j)[tuple(idx)]
    env[f"x{n}"] = 0.0
    return env


def _eval_face(e: Expr, env: dict, shape) -> np.ndarray:
    return np.broadcast_to(np.asarray(e.evaluate(env), dtype=float), shape)


def _tangential_derivatives(face: np.ndarray, grid: SpacetimeGrid) -> list:
    steps = [grid.dt] + list(grid.h[:-1])
    return [np.gradient(face, steps[j], axis=j, edge_order=2)
            for j in range(grid.n)]


def dn_trace(u: WaveField, metric, A=None, grid: SpacetimeGrid | None = None) -> DNTrace:
    """Neumann trace of a forward run on the accessible face.

    For an expression-backed metric the trace is the conormal derivative
    with the involved potential, normalized by (-g^{nn})^(-1/2) at the face.
    Passing a TransformedOperator instead evaluates the normal-form trace:
    plain depth derivative plus the lateral couplings, no normalization.
    The depth derivative is one-sided second order either way.
    """
    if grid is None:
        grid = u.grid
    elif grid != u.grid:
        raise ValueError("trace grid must match the run's grid")
    layers = u.boundary_layers
    hz = grid.h[-1]
    face = layers[..., 0]
    du_n = (-3.0 * layers[..., 0] + 4.0 * layers[..., 1] - layers[..., 2]) / (2.0 * hz)

    if isinstance(metric, TransformedOperator):
        if grid != metric.grid:
            raise ValueError("trace grid must be the operator's chart rectangle")
        tr = metric.boundary_traces()
        d_tan = _tangential_derivatives(face, grid)
        values = du_n - 1j * tr["A_minus"] * face
        for j in range(1, grid.n):
            values = values + tr["g0_plus_j"][j - 1] * (
                d_tan[j] - 1j * tr["A_j"][j - 1] * face)
        return DNTrace(values=values, normal_order=2, grid=grid)

    n = grid.n
    pot = metric.A if A is None else [_as_expr(a) for a in A]
    env = _face_env(grid)
    shape = face.shape
    d_tan = _tangential_derivatives(face, grid)
    gnn = _eval_face(metric.g[n][n], env, shape)
    values = np.zeros(shape, dtype=complex)
    for j in range(n + 1):
        gjn = _eval_face(metric.g[j][n], env, shape)
        if not np.any(gjn):
            continue
        aj = _eval_face(pot[j], env, shape)
        dj = du_n if j == n else d_tan[j]
        values = values - gjn * (dj - 1j * aj * face)
    values = values / np.sqrt(-gnn)
    return DNTrace(values=values, normal_order=2, grid=grid)


def transform_dn(dn: DNTrace, boundary_coeffs: dict, f=None) -> DNTrace:
    """Trace of the normal-form problem from the measured trace.

    Given the face trace of the original problem (equal to the chart-frame
    trace, since the chart and gauge restrict to the identity on the face)
    and the face coefficients, produces the trace of the volume-normalized
    problem whose Dirichlet datum is g1^(1/4) f.  Algebraic in the trace and
    the datum; the only derivatives taken are of the face coefficients.
    f holds the datum samples on the face at the trace's nodes; omitting it
    asserts a vanishing datum, which kills the drift term.
    """
    required = ("g1", "dg1_dyn", "gh_pm", "g0_plus_j")
    missing = [key for key in required if key not in boundary_coeffs]
    if missing:
        raise MissingBoundaryData(
            "missing face coefficients: " + ", ".join(missing))

    g1 = np.asarray(boundary_coeffs["g1"], dtype=float)
    dg1 = np.asarray(boundary_coeffs["dg1_dyn"], dtype=float)
    ghpm = np.asarray(boundary_coeffs["gh_pm"], dtype=float)
    q = g1 ** 0.25
    values = q * ghpm ** (-0.5) * dn.values
    if f is not None:
        f = np.asarray(f, dtype=complex)
        if f.shape != dn.values.shape:
            raise ValueError("datum samples must match the trace shape")
        dq_n = 0.25 * g1 ** (-0.75) * dg1
        drift = np.zeros_like(dn.values, dtype=float) + dq_n
        steps = [dn.grid.dt] + list(dn.grid.h[:-1])
        for j in range(1, dn.grid.n):
            bj = np.asarray(boundary_coeffs["g0_plus_j"][j - 1], dtype=float)
            dq_j = np.gradient(np.broadcast_to(q, dn.values.shape),
                               steps[j], axis=j, edge_order=2)
            drift = drift + bj * dq_j
        values = values + drift * f / q
    return DNTrace(values=values, normal_order=dn.normal_order, grid=dn.grid)


# ---------------------------------------------------------------------------
# Symbol probing
# ---------------------------------------------------------------------------

def _elliptic_q(covector, coeffs) -> float:
    """Depth discriminant of the face symbol; negative inside the cone."""
    eta0 = covector[0]
    etap = np.asarray(covector[1:], dtype=float)
    if coeffs is None:
        b = 0.0
        lat = -float(etap @ etap)
    else:
        bvec = np.asarray(coeffs["g0_plus_j"], dtype=float)
        b = float(bvec @ etap)
        gl = np.asarray(coeffs["g0_jk"], dtype=float)
        lat = float(etap @ gl @ etap)
    return (eta0 + b) ** 2 + lat


def probe_symbol(pipeline, boundary_point, covector, k_list, *,
                 grid: SpacetimeGrid | None = None,
                 boundary_coeffs: dict | None = None,
                 delta: float = 0.3,
                 t_width: float = 0.15,
                 lat_width: float = 0.2,
                 ellipticity_margin: float = 0.05,
                 fit_threshold: float = 0.2,
                 ppw_min: float = 10.0) -> SymbolEstimate:
    """Recover face coefficients from a localized frequency sweep.

    pipeline(face_data) must run the forward problem with the given Dirichlet
    face profile (a callable t -> complex face array) and return its DNTrace.
    The probe drives it with a bump at boundary_point carrying the plane
    phase k*(eta0*y0 + eta'*y'), for the base covector and two time-frequency
    shifts of size delta, at every k in k_list.  Each response is demodulated
    against its own data and fitted to slope*k; the squared slopes against
    the shifted eta0 make a downward parabola whose curvature, vertex, and
    value yield the face normalization, the time-tangential couplings, and
    the tangential block in the probed direction.

    boundary_coeffs (face values g0_plus_j, g0_jk at the probe point) arms
    the elliptic-cone precondition; without them the covector is taken on
    trust, except for structural failures (no tangential directions, or a
    vanishing tangential part).  Raises NotElliptic accordingly.
    """
    covector = tuple(float(c) for c in covector)
    n = len(covector)
    if n < 2:
        raise NotElliptic(
            "the face carries no tangential directions for n = 1; "
            "the face symbol is never elliptic")
    etap = np.asarray(covector[1:], dtype=float)
    scale = float(np.sqrt(etap @ etap))
    if scale == 0.0:
        raise NotElliptic("tangential part of the covector vanishes")
    base = tuple(c / scale for c in covector)
    probes = [(base[0] + m * delta,) + base[1:] for m in (-1, 0, 1)]
    for p in probes:
        q_val = _elliptic_q(p, boundary_coeffs)
        if boundary_coeffs is not None and q_val > -ellipticity_margin:
            raise NotElliptic(
                f"covector {tuple(round(c, 6) for c in p)} has depth "
                f"discriminant {q_val:.4f}; need < -{ellipticity_margin}")

    if grid is None:
        raise ValueError("the probe needs the run grid to shape its data")
    k_list = tuple(float(k) for k in k_list)
    kmax = max(k_list)
    steps = [grid.dt] + list(grid.h[:-1])
    worst = max(abs(c) * kmax * s for c, s in zip(base, steps))
    if worst > 0 and 2.0 * math.pi / worst < ppw_min:
        raise ValueError(
            f"largest frequency resolves {2.0 * math.pi / worst:.1f} "
            f"points per wavelength; need at least {ppw_min}")

    samples = []
    magnitudes = []
    for p in probes:
        responses = {}
        for k in k_list:
            trace = _run_probe(pipeline, boundary_point, p, k,
                               t_width, lat_width, grid)
            responses[k] = _demodulate(trace, boundary_point, p, k,
                                       t_width, lat_width)
        ks = np.asarray(k_list)
        rs = np.asarray([responses[k] for k in k_list])
        slope = complex(np.sum(ks * rs) / np.sum(ks * ks))
        misfit = float(np.linalg.norm(rs - slope * ks) / np.linalg.norm(rs))
        samples.append({
            "covector": p,
            "responses": responses,
            "slope": slope,
            "magnitude": abs(slope),
            "residual": misfit,
        })
        magnitudes.append(abs(slope))

    x = np.asarray([p[0] for p in probes])
    s_vals = np.asarray(magnitudes) ** 2
    c2, c1, c0 = np.polyfit(x, s_vals, 2)
    worst = max(s["residual"] for s in samples)
    bad = worst > fit_threshold or c2 >= 0.0
    if bad:
        warnings.warn(PoorFit(
            f"worst relative fit residual {worst:.3g} "
            f"(threshold {fit_threshold}), curvature {c2:.3g}"))
    with np.errstate(divide="ignore", invalid="ignore"):
        gh_pm = -float(c2)
        b = float(c1 / (2.0 * c2))
        lat = float(c0 / c2 - b * b)
    estimates = {"gh_pm": gh_pm}
    if n == 2:
        e1 = base[1]
        estimates["g0_plus_j"] = [b / e1]
        estimates["g0_jk"] = [[lat / (e1 * e1)]]
    else:
        # one probed direction determines only the contractions along it
        estimates["b_along"] = b
        estimates["lat_along"] = lat
    return SymbolEstimate(
        covector=base,
        frequencies=k_list,
        estimates=estimates,
        residual=worst,
        poor_fit=bad,
        samples=samples,
    )


def _run_probe(pipeline, point, covector, k, t_width, lat_width, grid):
    t_star = point[0]
    eta0 = covector[0]
    lat_field = None
    if grid is not None and grid.n > 1:
        lat_field = np.ones(grid.shape[:-1], dtype=complex)
        for j in range(1, grid.n):
            coords = grid.axis(j)
            factor = (_bump((coords - point[j]) / lat_width)
                      * np.exp(1j * k * covector[j] * coords))
            reshape = [1] * (grid.n - 1)
            reshape[j - 1] = len(coords)
            lat_field = lat_field * factor.reshape(reshape)

    def face_data(t):
        amp = _bump((t - t_star) / t_width) * np.exp(1j * k * eta0 * t)
        if lat_field is None:
            return np.asarray(amp, dtype=complex)
        return amp * lat_field

    return pipeline(face_data)


def _demodulate(trace: DNTrace, point, covector, k, t_width, lat_width):
    grid = trace.grid
    times = grid.times()
    chi = _bump((times - point[0]) / t_width)
    phase = np.exp(1j * k * covector[0] * times)
    w = chi
    z = phase
    shape = trace.values.shape
    w_full = np.broadcast_to(w.reshape((len(times),) + (1,) * (len(shape) - 1)), shape).copy()
    z_full = np.broadcast_to(z.reshape((len(times),) + (1,) * (len(shape) - 1)), shape).astype(complex).copy()
    for j in range(1, grid.n):
        coords = grid.axis(j)
        chi_j = _bump((coords - point[j]) / lat_width)
        ph_j = np.exp(1j * k * covector[j] * coords)
        reshape = (1,) * j + (len(coords),) + (1,) * (len(shape) - 1 - j)
        w_full = w_full * chi_j.reshape(reshape)
        z_full = z_full * ph_j.reshape(reshape)
    weight = float(np.sum(w_full * w_full))
    return complex(np.sum(w_full * np.conj(z_full) * trace.values) / weight)


def export_dn_csv(trace: DNTrace, path: str) -> None:
    """Write the trace as one row per face node: coordinates, Re, Im."""
    grid = trace.grid
    n = grid.n
    axes = [grid.times()] + [grid.axis(j) for j in range(1, n)]
    header = ",".join([f"y{j}" for j in range(n)] + ["re", "im"])
    mesh = np.meshgrid(*axes, indexing="ij")
    vals = trace.values
    with open(path, "w") as fh:
        fh.write(header + "\n")
        flat = [m.ravel() for m in mesh]
        re = vals.real.ravel()
        im = vals.imag.ravel()
        for i in range(re.size):
            cells = [f"{c[i]:.17g}" for c in flat] + [f"{re[i]:.17g}", f"{im[i]:.17g}"]
            fh.write(",".join(cells) + "\n")


def symbol_report(est: SymbolEstimate) -> str:
    """Structured-text report of a probe, with per-value provenance."""
    prov = {
        "gh_pm": "negative curvature of the quadratic fit of squared "
                 "response slopes against the shifted time frequency",
        "g0_plus_j": "parabola vertex offset divided by the tangential "
                     "component",
        "g0_jk": "parabola value at its vertex divided by the squared "
                 "tangential component",
        "b_along": "parabola vertex offset along the probed direction",
        "lat_along": "parabola vertex value along the probed direction",
    }
    body = {
        "covector": list(est.covector),
        "frequencies": list(est.frequencies),
        "estimates": {
            key: {"value": value, "provenance": prov.get(key, "")}
            for key, value in est.estimates.items()
        },
        "fit": {
            "residual": est.residual,
            "poor_fit": est.poor_fit,
            "probes": [
                {
                    "covector": list(s["covector"]),
                    "magnitude": s["magnitude"],
                    "residual": s["residual"],
                    "responses": {
                        str(k): [r.real, r.imag]
                        for k, r in s["responses"].items()
                    },
                }
                for s in est.samples
            ],
        },
    }
    return json.dumps(body, indent=2)
