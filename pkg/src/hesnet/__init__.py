"""Grid-energy / packet-drop scheduling for hybrid-powered base stations.

A grid-powered and an energy-harvesting base station share the job of
delivering one packet per block to a user.  The package covers the
offline assignment problem (full side information), a quantized
finite-horizon decision-table solver, causal heuristics, and the Monte
Carlo machinery to compare them, plus a CLI that drives it all from
key=value configs.
"""

from .errors import (
    ConfigError,
    FeasibilityError,
    HesnetError,
    InvalidActionError,
    InvalidParameterError,
    InvalidStateError,
    ModelMismatchError,
    ReplayParseError,
    ResourceLimitError,
    StalePolicyError,
    StructureViolationError,
)
from .model import (
    ExponentialFading,
    FrameTrajectory,
    SystemParams,
    UniformArrivals,
    channel_gain,
    cost_parameter,
    inversion_power,
    kappa,
    make_rng,
    rate,
    required_snr,
    sample_trajectories,
    sample_trajectory,
)
from .offline import (
    FullSolution,
    IpInstance,
    check_swap_optimality,
    exhaustive_optimal,
    expand_solution,
    find_feasible,
    first_violation,
    greedy_assignment,
    multiuser_greedy_assignment,
    to_ip_instance,
    total_service_cost,
)
from .mdp import (
    CostToGo,
    MdpModel,
    PolicyTable,
    QuantizationGrid,
    backward_induction,
    battery_level_index,
    build_grid,
    build_mdp_model,
    channel_state_index,
    energy_transition_probs,
    equiprobable_channel_states,
    load_policy_artifact,
    monotone_backward_induction,
    quantize_energy,
    save_policy_artifact,
    thresholds_from_policy,
)
from .policies import (
    GreedyTransmit,
    LookAhead,
    MdpTablePolicy,
    MultiuserGreedyTransmit,
    MultiuserThreshold,
    ThresholdHeuristic,
    ThresholdParams,
    calibrate_zeta,
    exponential_integral_E1,
    greedy_transmit_decide,
    look_ahead_build,
    mdp_policy_decide,
    multiuser_threshold_decide,
    ratio_metric,
    threshold_decide,
    threshold_lambdas,
)
from .sim import (
    GridOnlyPolicy,
    OnlineObservation,
    RunMetrics,
    ScriptedAssignmentPolicy,
    ScriptedMultiuserAssignment,
    apply_axis,
    monte_carlo,
    multiuser_monte_carlo,
    offline_frame_metrics,
    run_batch,
    run_frame,
    run_frame_multiuser,
    sample_multiuser_trajectories,
    sweep,
    tradeoff_region,
    write_manifest,
    write_rows_csv,
)

__version__ = "0.1.0"
