"""Layered joint source-channel coding for parallel Gaussian sources
multicast over binary erasure broadcast channels.

Subpackages by stage of the chain:

- rd_math: reverse-waterfilling rate-distortion functions and the
  closed-form minimum-bandwidth layer allocation.
- allocator: convex layer-allocation solvers (weighted-distortion and
  min-max penalty criteria), bit-plane rounding, codeword planning.
- quantizer: embedded scalar quantizer for the unit Gaussian with exact
  bit-plane entropies and soft-bit reconstruction.
- raptor: rateless linear encoding over GF(2) and prior-aware belief
  propagation decoding.
- channel: binary erasure broadcast channel simulation.
- pipeline: end-to-end experiments with distortion measurement.
- cli: command-line front end.
"""

from .rd_math import (
    SourceSpec,
    ChannelSpec,
    WaterLevel,
    RatePoint,
    rate_of_distortion,
    distortion_of_rate,
    rate_increment,
    min_bandwidth,
)
from .allocator import (
    AllocationProblem,
    AllocationSolution,
    TransmissionPlan,
    user_opt_distortion,
    solve_mwtd,
    solve_mmdp,
    round_bitplanes,
    plan_codewords,
    default_overheads,
    kkt_residual,
)
from .quantizer import (
    QuantizerModel,
    BitPlaneArray,
    build_quantizer,
    quantize,
    bitplanes,
    plane_entropies,
    conditional_plane_prior,
    conditional_plane_prior_soft,
    quantizer_distortion,
    fit_gamma,
    soft_reconstruct,
    reconstruct,
    save_model,
    load_model,
)
from .raptor import (
    DegreeDistribution,
    DEFAULT_OUTPUT_DISTRIBUTION,
    PrecodeConfig,
    default_precode,
    CodeGraph,
    DecodeResult,
    DecodeStage,
    sample_graph,
    lt_subgraph,
    encode,
    bp_decode,
    multistage_decode,
)
from .channel import ERASED, ErasurePattern, erasure_pattern, transmit, derive_seed
from .pipeline import (
    ExperimentConfig,
    ExperimentReport,
    run_experiment,
    measure_distortion,
)

__version__ = "0.1.0"
