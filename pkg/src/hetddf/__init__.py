"""Heterogeneous decentralized data fusion on Gaussian factor graphs."""

from .canonical import (
    CanonicalDensity,
    CanonicalFactor,
    MomentGaussian,
    VariableKey,
    align_scope,
    canonical_order,
    conditional,
    factor_diff,
    factor_from_bytes,
    factor_sum,
    factor_to_bytes,
    from_moments,
    marginalize,
    to_moments,
)
from .errors import (
    ConfigError,
    DensityError,
    EliminationError,
    FusionError,
    HetddfError,
    NumericalFailure,
    ScopeError,
)
from .filtering import (
    LinearDynamics,
    LinearMeasurement,
    SparsityPattern,
    add_linearized_measurement,
    add_measurement,
    add_prediction,
    conservative_filter,
    decouple_hidden,
    deflation_constant,
    regain_conditional_independence,
    wrap_angle,
)
from .fusion import HSCF, HSCI, FusionAgent, FusionMessage, optimize_omega
from .graph import CliqueGraph, FactorGraph
from .network import DeliveryRecord, DropoutModel, Topology, run_round

__version__ = "0.1.0"
