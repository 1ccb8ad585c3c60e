"""bclab: a numerical laboratory for the boundary-control method.

Forward finite-difference simulation of second-order hyperbolic operators with
time-dependent coefficients, Dirichlet-to-Neumann traces, characteristic
(Goursat) coordinates, geometric-optics probes, and a verification harness for
the invariance identities that make boundary data a well-defined measurement.
"""

from .expr import Expr, ExprError, parse_expr
from .dn import (
    DNTrace,
    MissingBoundaryData,
    NotElliptic,
    PoorFit,
    SymbolEstimate,
    dn_trace,
    export_dn_csv,
    probe_symbol,
    symbol_report,
    transform_dn,
)
from .geometry import (
    Bicharacteristic,
    Diffeo,
    GaugeField,
    HyperbolicityReport,
    MetricField,
    NonHyperbolic,
    NotNull,
    RegionMask,
    SingularJacobian,
    SpacetimeGrid,
    apply_conjugation_gauge,
    apply_gauge,
    check_hyperbolicity,
    direction_sample,
    influence_region,
    max_characteristic_speed,
    pushforward,
    substitute,
    trace_bicharacteristic,
)
from .goursat import (
    CharacteristicCrossing,
    EikonalField,
    FocalRegion,
    GoursatChart,
    TransformedOperator,
    build_chart,
    export_chart_csv,
    export_operator_npz,
    find_chart_depth,
    potential_symbolic,
    potential_term,
    sample_field,
    solve_eikonal,
    solve_transformed_ibvp,
    solve_transport_phi,
    transform_operator,
    transformed_time_step,
)
from .solver import (
    BoundarySignal,
    CFLViolation,
    Instability,
    SampledCoefficients,
    WaveField,
    apply_operator_symbolic,
    cfl_time_step,
    energy,
    graph_norm_sq,
    solve_ibvp,
)

__version__ = "0.1.0"

__all__ = [
    "Expr",
    "ExprError",
    "parse_expr",
    "Bicharacteristic",
    "Diffeo",
    "GaugeField",
    "HyperbolicityReport",
    "MetricField",
    "NonHyperbolic",
    "NotNull",
    "RegionMask",
    "SingularJacobian",
    "SpacetimeGrid",
    "apply_conjugation_gauge",
    "apply_gauge",
    "check_hyperbolicity",
    "direction_sample",
    "influence_region",
    "max_characteristic_speed",
    "pushforward",
    "substitute",
    "trace_bicharacteristic",
    "DNTrace",
    "MissingBoundaryData",
    "NotElliptic",
    "PoorFit",
    "SymbolEstimate",
    "dn_trace",
    "export_dn_csv",
    "probe_symbol",
    "symbol_report",
    "transform_dn",
    "CharacteristicCrossing",
    "EikonalField",
    "FocalRegion",
    "GoursatChart",
    "TransformedOperator",
    "build_chart",
    "export_chart_csv",
    "export_operator_npz",
    "find_chart_depth",
    "potential_symbolic",
    "potential_term",
    "sample_field",
    "solve_eikonal",
    "solve_transformed_ibvp",
    "solve_transport_phi",
    "transform_operator",
    "transformed_time_step",
    "BoundarySignal",
    "CFLViolation",
    "Instability",
    "SampledCoefficients",
    "WaveField",
    "apply_operator_symbolic",
    "cfl_time_step",
    "energy",
    "graph_norm_sq",
    "solve_ibvp",
    "__version__",
]
