"""Causal serving policies: greedy, calibrated threshold, table lookups.

Everything here decides one block at a time from (block index, battery,
both fading gains).  The threshold rule needs two closed-form constants,
the mean skip cost lambda1 and the mean feasible battery power lambda2;
they are exact for exponential fading, and a Monte Carlo cross-check of
both lives in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import InvalidParameterError, ModelMismatchError, StalePolicyError
from .mdp import (
    PolicyTable,
    battery_level_index,
    build_grid,
    build_mdp_model,
    channel_state_index,
    monotone_backward_induction,
)
from .model import (
    ExponentialFading,
    SystemParams,
    channel_gain,
    cost_parameter,
    inversion_power,
    kappa,
    sample_trajectories,
)
from .sim import OnlineObservation, run_batch

__all__ = [
    "ThresholdParams",
    "GreedyTransmit",
    "ThresholdHeuristic",
    "LookAhead",
    "MdpTablePolicy",
    "MultiuserGreedyTransmit",
    "MultiuserThreshold",
    "exponential_integral_E1",
    "threshold_lambdas",
    "greedy_transmit_decide",
    "threshold_decide",
    "calibrate_zeta",
    "look_ahead_build",
    "mdp_policy_decide",
    "multiuser_threshold_decide",
    "ratio_metric",
]


def ratio_metric(c, p):
    """Cost saved per watt of battery power; the default serving priority.

    Any replacement must be nondecreasing in the cost argument and
    nonincreasing in the power argument.
    """
    return c / p


def exponential_integral_E1(x):
    """E1(x) = integral of exp(-t)/t from x to infinity, for x > 0."""
    arr = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
        raise InvalidParameterError(f"E1 is used on x > 0 only, got {x!r}")
    out = special.exp1(arr)
    return float(out) if out.ndim == 0 else out


def threshold_lambdas(params: SystemParams, fading_G=None, fading_H=None):
    """Closed-form constants of the threshold rule.

    lambda1 is the expected skip cost of a block: the drop price times the
    probability the grid BS's inversion power exceeds kappa, plus the
    expected grid bill below it.  lambda2 is the expected inversion power
    of the harvesting link given it fits under the peak cap.  Both
    expectations integrate the exponential fading law; anything else has no
    closed form here and is rejected.
    """
    for f in (fading_G, fading_H):
        if f is not None and not isinstance(f, ExponentialFading):
            raise ModelMismatchError(
                f"closed-form thresholds need exponential fading, got {type(f).__name__}")
    mu_g = fading_G.mean if fading_G is not None else params.mu_G
    mu_h = fading_H.mean if fading_H is not None else params.mu_H
    # inversion powers at the mean gains; dividing by mu folds the fading
    # mean into the 1/gamma integrals below
    a_g = float(inversion_power(channel_gain(params.d_G, mu_g, params), params))
    a_h = float(inversion_power(channel_gain(params.d_H, mu_h, params), params))
    x_g = a_g / kappa(params)
    lambda1 = (params.w_D * -math.expm1(-x_g)
               + params.w_G * params.tau * a_g * exponential_integral_E1(x_g))
    x_h = a_h / params.p_H_max
    lambda2 = a_h * exponential_integral_E1(x_h) * math.exp(x_h)
    return lambda1, lambda2


@dataclass(frozen=True)
class ThresholdParams:
    """Calibrated threshold rule constants."""

    zeta: float     # unitless scale, tuned by calibrate_zeta
    lambda1: float  # expected skip cost per block
    lambda2: float  # W, expected feasible battery power

    def __post_init__(self):
        if not (math.isfinite(self.zeta) and self.zeta >= 0):
            raise InvalidParameterError(f"zeta must be finite and >= 0, got {self.zeta!r}")
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise InvalidParameterError(f"{name} must be finite and > 0, got {v!r}")


def _p_inv_h(gamma_h, params: SystemParams):
    return inversion_power(channel_gain(params.d_H, gamma_h, params), params)


def _skip_cost(gamma_g, params: SystemParams):
    return cost_parameter(inversion_power(channel_gain(params.d_G, gamma_g, params), params),
                          params)


def _feasible(p_h, battery, params: SystemParams):
    return p_h <= np.minimum(np.asarray(battery, dtype=float) / params.tau, params.p_H_max)


# ---------------------------------------------------------------------------
# decision rules
# ---------------------------------------------------------------------------

def greedy_transmit_decide(obs: OnlineObservation, params: SystemParams) -> int:
    """Serve from the battery whenever one block of inversion power fits
    both the stored energy and the peak cap; boundaries serve."""
    p_h = float(_p_inv_h(obs.gamma_H, params))
    return int(p_h <= min(obs.battery / params.tau, params.p_H_max))


def threshold_decide(obs: OnlineObservation, tp: ThresholdParams, metric=None,
                     params: SystemParams | None = None) -> int:
    """Single-block threshold rule.

    Infeasible states never serve; the last block serves whenever feasible;
    otherwise serve when battery * metric(skip cost, battery power) clears
    zeta * P_avg * tau * metric(lambda1, lambda2).  With zeta = 0 the rule
    degenerates to greedy transmission for every observation.
    """
    if params is None:
        raise InvalidParameterError("params is required")
    metric = metric or ratio_metric
    p_h = float(_p_inv_h(obs.gamma_H, params))
    if not (p_h <= min(obs.battery / params.tau, params.p_H_max)):
        return 0
    if obs.block >= params.N - 1:
        return 1
    lhs = obs.battery * float(metric(float(_skip_cost(obs.gamma_G, params)), p_h))
    rhs = tp.zeta * params.P_avg * params.tau * float(metric(tp.lambda1, tp.lambda2))
    return int(lhs >= rhs)


class GreedyTransmit:
    """Myopic baseline: spend battery whenever spending is possible."""

    def __init__(self, name: str = "GT"):
        self.name = name

    def decide(self, obs: OnlineObservation, params: SystemParams) -> int:
        return greedy_transmit_decide(obs, params)

    def decide_batch(self, block, battery, gamma_g, gamma_h, params):
        return _feasible(_p_inv_h(gamma_h, params), battery, params).astype(np.int8)


class ThresholdHeuristic:
    """Threshold rule with fixed constants; see threshold_decide."""

    def __init__(self, tp: ThresholdParams, metric=None, name: str = "TH"):
        self.tp = tp
        self.metric = metric or ratio_metric
        self.name = name

    def decide(self, obs: OnlineObservation, params: SystemParams) -> int:
        return threshold_decide(obs, self.tp, self.metric, params)

    def decide_batch(self, block, battery, gamma_g, gamma_h, params):
        p_h = _p_inv_h(gamma_h, params)
        feas = _feasible(p_h, battery, params)
        if block >= params.N - 1:
            return feas.astype(np.int8)
        with np.errstate(invalid="ignore"):
            lhs = battery * np.asarray(self.metric(_skip_cost(gamma_g, params), p_h),
                                       dtype=float)
        rhs = self.tp.zeta * params.P_avg * params.tau * float(
            self.metric(self.tp.lambda1, self.tp.lambda2))
        return (feas & (lhs >= rhs)).astype(np.int8)


# ---------------------------------------------------------------------------
# table-lookup policies
# ---------------------------------------------------------------------------

def _check_hash(table: PolicyTable, params: SystemParams):
    if table.params_hash != params.content_hash():
        raise StalePolicyError(
            "policy table was trained on different parameters; retrain it "
            f"(table hash {table.params_hash[:12]}..., params hash "
            f"{params.content_hash()[:12]}...)")


def _lookup(table: PolicyTable, t: int, battery, gamma_g, gamma_h, params):
    grid = table.grid
    m = battery_level_index(battery, grid)
    kg = channel_state_index(gamma_g, grid.bounds_G)
    kh = channel_state_index(gamma_h, grid.bounds_H)
    return table.actions[t, m, kg, kh]


def mdp_policy_decide(obs: OnlineObservation, table: PolicyTable, grid=None,
                      params: SystemParams | None = None) -> int:
    """Table lookup at the quantized state, bridged back to reality.

    The tabled action assumes the bin's mid-value battery; when the true
    battery (or the peak cap) cannot cover this block's spend, the action
    demotes to 0.  That is the only divergence from the table.  A table
    trained on different parameters raises a stale-policy error.
    """
    if params is None:
        raise InvalidParameterError("params is required")
    _check_hash(table, params)
    if grid is not None and grid is not table.grid:
        if not np.array_equal(grid.bin_edges, table.grid.bin_edges):
            raise InvalidParameterError("grid does not match the policy table")
    if not 0 <= obs.block < table.N:
        raise InvalidParameterError(
            f"block {obs.block} outside the table horizon {table.N}")
    action = int(_lookup(table, obs.block, obs.battery, obs.gamma_G, obs.gamma_H, params))
    if action == 1:
        p_h = float(_p_inv_h(obs.gamma_H, params))
        if not (p_h <= min(obs.battery / params.tau, params.p_H_max)):
            action = 0
    return action


class MdpTablePolicy:
    """Plays a trained full-horizon policy table."""

    def __init__(self, table: PolicyTable, name: str = "MBIA"):
        self.table = table
        self.name = name

    def decide(self, obs: OnlineObservation, params: SystemParams) -> int:
        return mdp_policy_decide(obs, self.table, None, params)

    def decide_batch(self, block, battery, gamma_g, gamma_h, params):
        _check_hash(self.table, params)
        if not 0 <= block < self.table.N:
            raise InvalidParameterError(
                f"block {block} outside the table horizon {self.table.N}")
        act = _lookup(self.table, block, battery, gamma_g, gamma_h, params)
        demote = ~_feasible(_p_inv_h(gamma_h, params), battery, params)
        return np.where(demote, 0, act).astype(np.int8)


def look_ahead_build(params: SystemParams, grid=None, *, M: int = 100, K: int = 25) -> PolicyTable:
    """Two-block policy table on the real battery range.

    Solving a 2-horizon recursion on the full grid yields the rule "serve
    now or bank for one more block"; its first-block slice is the
    look-ahead decision for every non-terminal block.
    """
    grid = grid if grid is not None else build_grid(params, M=M, K=K)
    model = build_mdp_model(params, grid)
    policy, _, _ = monotone_backward_induction(model, 2)
    return policy


class LookAhead:
    """Two-block table for interior blocks, greedy on the last one."""

    def __init__(self, table: PolicyTable, name: str = "Look-Ahead"):
        if table.N != 2:
            raise InvalidParameterError("look-ahead needs a 2-block table")
        self.table = table
        self.name = name

    def decide(self, obs: OnlineObservation, params: SystemParams) -> int:
        if obs.block >= params.N - 1:
            return greedy_transmit_decide(obs, params)
        _check_hash(self.table, params)
        action = int(_lookup(self.table, 0, obs.battery, obs.gamma_G, obs.gamma_H, params))
        if action == 1:
            p_h = float(_p_inv_h(obs.gamma_H, params))
            if not (p_h <= min(obs.battery / params.tau, params.p_H_max)):
                action = 0
        return action

    def decide_batch(self, block, battery, gamma_g, gamma_h, params):
        feas = _feasible(_p_inv_h(gamma_h, params), battery, params)
        if block >= params.N - 1:
            return feas.astype(np.int8)
        _check_hash(self.table, params)
        act = _lookup(self.table, 0, battery, gamma_g, gamma_h, params)
        return np.where(feas, act, 0).astype(np.int8)


# ---------------------------------------------------------------------------
# threshold calibration
# ---------------------------------------------------------------------------

def calibrate_zeta(candidates, params: SystemParams, budget: int, seed: int, *,
                   metric=None, return_costs: bool = False):
    """Pick the zeta minimizing mean frame cost over shared trajectories.

    Every candidate is scored on the same `budget` frames (keyed by `seed`),
    so the argmin is deterministic; ties resolve to the first candidate in
    the given order.
    """
    cand = np.asarray(list(candidates), dtype=float)
    if cand.size == 0 or np.any(~np.isfinite(cand)) or np.any(cand < 0):
        raise InvalidParameterError("candidates must be finite, nonnegative, and nonempty")
    if budget < 1:
        raise InvalidParameterError(f"budget must be >= 1 frame, got {budget!r}")
    lambda1, lambda2 = threshold_lambdas(params)
    gg, gh, eh = sample_trajectories(params, seed, budget)
    costs = np.empty(cand.size)
    for i, zeta in enumerate(cand):
        policy = ThresholdHeuristic(ThresholdParams(float(zeta), lambda1, lambda2),
                                    metric=metric)
        frame_costs, _, _ = run_batch(policy, params, gg, gh, eh)
        costs[i] = frame_costs.mean()
    best = float(cand[int(np.argmin(costs))])
    return (best, costs) if return_costs else best


# ---------------------------------------------------------------------------
# multi-user joint rules
# ---------------------------------------------------------------------------

def multiuser_threshold_decide(observations, tps, params_list, p_H_max_sum: float,
                               metric=None):
    """Joint threshold rule over users sharing the battery and the peak sum.

    Each user first applies the single-user rule with the shared battery
    and the summed peak cap as its feasibility limits; tentative serves are
    then admitted in decreasing metric order while the battery and the
    summed peak power hold out.  Returns a 0/1 vector over users.
    """
    users = len(observations)
    if not (len(tps) == len(params_list) == users):
        raise InvalidParameterError("observations, tps and params_list must align")
    metric = metric or ratio_metric
    battery = observations[0].battery
    base = params_list[0]
    acts = np.zeros(users, dtype=np.int8)
    scored = []
    for u, (obs, tp, p) in enumerate(zip(observations, tps, params_list)):
        p_h = float(_p_inv_h(obs.gamma_H, p))
        if not (p_h <= min(battery / p.tau, p_H_max_sum)):
            continue
        if obs.block >= p.N - 1:
            tentative = 1
        else:
            lhs = battery * float(metric(float(_skip_cost(obs.gamma_G, p)), p_h))
            rhs = tp.zeta * p.P_avg * p.tau * float(metric(tp.lambda1, tp.lambda2))
            tentative = int(lhs >= rhs)
        if tentative:
            scored.append((-float(metric(float(_skip_cost(obs.gamma_G, p)), p_h)), u, p_h))
    scored.sort()
    power_used = 0.0
    energy_used = 0.0
    for _, u, p_h in scored:
        spend = p_h * base.tau
        if power_used + p_h <= p_H_max_sum and energy_used + spend <= battery:
            power_used += p_h
            energy_used += spend
            acts[u] = 1
    return acts


class MultiuserThreshold:
    """Joint threshold policy; see multiuser_threshold_decide."""

    def __init__(self, tps, p_H_max_sum: float, metric=None, name: str = "MU-TH"):
        self.tps = list(tps)
        self.p_H_max_sum = float(p_H_max_sum)
        self.metric = metric or ratio_metric
        self.name = name

    def decide_joint(self, block, battery, gamma_g, gamma_h, params_list):
        observations = [OnlineObservation(block=block, battery=battery,
                                          gamma_G=float(gamma_g[u]), gamma_H=float(gamma_h[u]))
                        for u in range(len(params_list))]
        return multiuser_threshold_decide(observations, self.tps, params_list,
                                          self.p_H_max_sum, self.metric)


class MultiuserGreedyTransmit:
    """Myopic joint baseline: admit users cheapest battery power first."""

    def __init__(self, p_H_max_sum: float, name: str = "MU-GT"):
        self.p_H_max_sum = float(p_H_max_sum)
        self.name = name

    def decide_joint(self, block, battery, gamma_g, gamma_h, params_list):
        users = len(params_list)
        base = params_list[0]
        p_h = np.array([float(_p_inv_h(gamma_h[u], params_list[u])) for u in range(users)])
        acts = np.zeros(users, dtype=np.int8)
        power_used = 0.0
        energy_used = 0.0
        for u in np.argsort(p_h, kind="stable"):
            spend = p_h[u] * base.tau
            if power_used + p_h[u] <= self.p_H_max_sum and energy_used + spend <= battery:
                power_used += p_h[u]
                energy_used += spend
                acts[u] = 1
        return acts
