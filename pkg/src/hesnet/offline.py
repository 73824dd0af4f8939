"""Offline (non-causal) per-frame scheduling.

With all N blocks' channel gains and energy arrivals on the table, choosing
which blocks the harvesting BS serves reduces to a 0/1 program: skipping
block i costs c_i (grid bill or drop penalty), serving it spends
p_H_inv,i * tau joules of battery under prefix energy causality and the peak
power cap.  This module holds that reduced instance, a greedy solver, the
exhaustive oracle, and the expansion back to per-block powers.

Sums that enter exactness contracts (reported costs) use math.fsum, so two
selections with mathematically equal cost report identical floats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FeasibilityError, InvalidParameterError, ResourceLimitError
from .model import FrameTrajectory, SystemParams, channel_gain, cost_parameter, inversion_power, kappa

__all__ = [
    "ENERGY_RTOL",
    "IpInstance",
    "FullSolution",
    "to_ip_instance",
    "total_service_cost",
    "first_violation",
    "find_feasible",
    "greedy_assignment",
    "exhaustive_optimal",
    "check_swap_optimality",
    "expand_solution",
    "multiuser_greedy_assignment",
]

# Relative slack on every energy-causality comparison.  Accumulated prefix
# sums of float64 terms deserve this much benefit of the doubt; peak-power
# checks compare unaccumulated values and stay exact.
ENERGY_RTOL = 1e-9

EXHAUSTIVE_CAP = 20  # default hard cap on N for 2^N enumeration


@dataclass(frozen=True)
class IpInstance:
    """One frame reduced to the 0/1 assignment data.

    c[i] is what block i costs if the harvesting BS skips it; p_H_inv / p_G_inv
    are the channel inversion powers (inf on a dead channel); e_H are the
    battery credits ahead of each block.
    """

    c: np.ndarray        # (N,) cost of a skipped block
    p_H_inv: np.ndarray  # (N,) W, harvesting BS inversion power
    p_G_inv: np.ndarray  # (N,) W, grid BS inversion power
    e_H: np.ndarray      # (N,) J, energy arriving ahead of each block
    tau: float           # s, block duration
    p_H_max: float       # W, harvesting BS peak power

    def __post_init__(self):
        arrays = {}
        for name in ("c", "p_H_inv", "p_G_inv", "e_H"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            arrays[name] = arr
            if arr.ndim != 1 or arr.shape != arrays["c"].shape:
                raise InvalidParameterError(f"{name} must be 1-D and match c in length")
        if self.c.size == 0:
            raise InvalidParameterError("instance needs at least one block")
        if np.any(self.c < 0) or np.any(np.isnan(self.c)) or np.any(np.isinf(self.c)):
            raise InvalidParameterError("c must be finite and >= 0")
        for name in ("p_H_inv", "p_G_inv"):
            if np.any(arrays[name] <= 0):  # +inf is a legal dead-channel sentinel
                raise InvalidParameterError(f"{name} must be > 0")
        if np.any(self.e_H < 0) or not np.all(np.isfinite(self.e_H)):
            raise InvalidParameterError("e_H must be finite and >= 0")
        if not (self.tau > 0 and self.p_H_max > 0):
            raise InvalidParameterError("tau and p_H_max must be > 0")

    @property
    def n_blocks(self) -> int:
        return self.c.shape[0]


def to_ip_instance(traj: FrameTrajectory, params: SystemParams) -> IpInstance:
    """Reduce a realized frame to its 0/1 assignment instance."""
    h_g = channel_gain(params.d_G, traj.gamma_G, params)
    h_h = channel_gain(params.d_H, traj.gamma_H, params)
    p_g = inversion_power(h_g, params)
    p_h = inversion_power(h_h, params)
    return IpInstance(
        c=cost_parameter(p_g, params),
        p_H_inv=np.atleast_1d(p_h),
        p_G_inv=np.atleast_1d(p_g),
        e_H=traj.e_H.copy(),
        tau=params.tau,
        p_H_max=params.p_H_max,
    )


def _as_alpha(alpha, n: int) -> np.ndarray:
    arr = np.asarray(alpha)
    if arr.shape != (n,) or not np.all((arr == 0) | (arr == 1)):
        raise InvalidParameterError(f"alpha must be a length-{n} 0/1 vector")
    return arr.astype(np.int8)


def first_violation(alpha, inst: IpInstance):
    """1-based index of the first block where `alpha` breaks a constraint.

    None when the assignment is feasible.  Peak power is checked exactly;
    energy causality with ENERGY_RTOL relative slack.
    """
    alpha = _as_alpha(alpha, inst.n_blocks)
    on = alpha == 1
    peak_bad = on & (inst.p_H_inv > inst.p_H_max)
    spend = np.where(on & np.isfinite(inst.p_H_inv), inst.p_H_inv * inst.tau, 0.0)
    spend[peak_bad] = np.inf  # unaffordable either way; keep cumsum NaN-free
    used = np.cumsum(spend)
    avail = np.cumsum(inst.e_H)
    energy_bad = used > avail * (1.0 + ENERGY_RTOL)
    bad = peak_bad | energy_bad
    if not bad.any():
        return None
    return int(np.argmax(bad)) + 1


def total_service_cost(alpha, inst: IpInstance) -> float:
    """Frame cost sum((1 - alpha_i) * c_i) of a feasible assignment."""
    alpha = _as_alpha(alpha, inst.n_blocks)
    block = first_violation(alpha, inst)
    if block is not None:
        raise FeasibilityError(f"assignment infeasible at block {block}", block=block)
    return math.fsum(inst.c[alpha == 0])


def find_feasible(inst: IpInstance, alpha) -> np.ndarray:
    """0-based indices of unselected blocks that can be added to `alpha`.

    Adding block i raises every prefix from i on by p_H_inv[i] * tau, so i
    fits iff that fits under the worst remaining slack from i onward.
    """
    alpha = _as_alpha(alpha, inst.n_blocks)
    on = alpha == 1
    spend = np.where(on, np.where(np.isfinite(inst.p_H_inv), inst.p_H_inv * inst.tau, np.inf), 0.0)
    slack = np.cumsum(inst.e_H) * (1.0 + ENERGY_RTOL) - np.cumsum(spend)
    tail_slack = np.minimum.accumulate(slack[::-1])[::-1]
    with np.errstate(invalid="ignore"):
        ok = (~on) & (inst.p_H_inv <= inst.p_H_max) & (inst.p_H_inv * inst.tau <= tail_slack)
    return np.flatnonzero(ok)


def _default_metric(c, p):
    """Cost saved per watt of battery power: the ratio rule."""
    return c / p


def greedy_assignment(inst: IpInstance, metric=None, return_order: bool = False):
    """Greedy H-block selection by descending metric score.

    Each pass adds the feasible unselected block maximizing metric(c, p_H_inv)
    (ties: earliest block) until nothing fits.  Returns (alpha, cost), plus
    the selection order when `return_order`.
    """
    metric = metric or _default_metric
    alpha = np.zeros(inst.n_blocks, dtype=np.int8)
    order: list[int] = []
    for _ in range(inst.n_blocks):
        cand = find_feasible(inst, alpha)
        if cand.size == 0:
            break
        scores = np.asarray(metric(inst.c[cand], inst.p_H_inv[cand]), dtype=float)
        pick = int(cand[np.argmax(scores)])
        alpha[pick] = 1
        order.append(pick)
    cost = total_service_cost(alpha, inst)
    if return_order:
        return alpha, cost, order
    return alpha, cost


def exhaustive_optimal(inst: IpInstance, cap: int = EXHAUSTIVE_CAP):
    """Optimal assignment by full 2^N enumeration.

    Ties between optimal selections break toward the lexicographically
    smallest alpha vector.  N above `cap` is refused: the search doubles per
    block, and this oracle exists for desk-scale verification only.
    """
    n = inst.n_blocks
    if n > cap:
        raise ResourceLimitError(f"exhaustive search over N={n} blocks exceeds cap {cap}")
    avail = np.cumsum(inst.e_H)
    headroom = avail * (1.0 + ENERGY_RTOL)
    # finite stand-in for inf keeps 0 * inf out of the matmuls; such blocks
    # are killed by the peak-power mask anyway
    big = 2.0 * (avail[-1] + 1.0)
    spend = np.where(np.isfinite(inst.p_H_inv), inst.p_H_inv * inst.tau, big)
    peak_bad = (inst.p_H_inv > inst.p_H_max).astype(np.int8)

    # bit (n-1-j) holds alpha_j, so ascending code order is ascending
    # lexicographic order of alpha and ties resolve by taking the first hit
    shifts = (n - 1 - np.arange(n)).astype(np.uint32)
    best_cost = np.inf
    best_code = -1
    chunk = 1 << 16
    for start in range(0, 1 << n, chunk):
        codes = np.arange(start, min(start + chunk, 1 << n), dtype=np.uint32)
        bits = ((codes[:, None] >> shifts[None, :]) & 1).astype(np.int8)
        ok = bits @ peak_bad == 0
        used = np.cumsum(bits * spend, axis=1)
        ok &= np.all(used <= headroom, axis=1)
        if not ok.any():
            continue
        costs = np.where(ok, (1 - bits) @ inst.c, np.inf)
        lo = int(np.argmin(costs))
        if costs[lo] < best_cost:
            best_cost = float(costs[lo])
            best_code = int(codes[lo])
    # every-alpha-zero is always feasible, so a winner exists
    alpha = ((best_code >> shifts) & 1).astype(np.int8)
    return alpha, total_service_cost(alpha, inst)


def check_swap_optimality(alpha, inst: IpInstance) -> bool:
    """True when no later unselected block dominates a selected one.

    A pair (i selected, j > i unselected) with c_i < c_j and
    p_H_inv,i >= p_H_inv,j could be swapped: the battery spend moves later
    (causality keeps), power does not grow, and the cost strictly drops.
    """
    alpha = _as_alpha(alpha, inst.n_blocks)
    sel = np.flatnonzero(alpha == 1)
    uns = np.flatnonzero(alpha == 0)
    if sel.size == 0 or uns.size == 0:
        return True
    later = uns[None, :] > sel[:, None]
    cheaper = inst.c[sel][:, None] < inst.c[uns][None, :]
    no_more_power = inst.p_H_inv[sel][:, None] >= inst.p_H_inv[uns][None, :]
    return not bool(np.any(later & cheaper & no_more_power))


@dataclass(frozen=True)
class FullSolution:
    """Per-block serving decisions and transmit powers for one frame."""

    I_G: np.ndarray      # (N,) grid BS serves
    I_H: np.ndarray      # (N,) harvesting BS serves
    I_D: np.ndarray      # (N,) packet dropped
    p_G: np.ndarray      # (N,) W
    p_H: np.ndarray      # (N,) W
    total_cost: float
    grid_energy: float   # J
    drops: int


def expand_solution(alpha, inst: IpInstance, params: SystemParams) -> FullSolution:
    """Expand an H-block selection to per-block decisions and powers.

    Unselected blocks go to the grid BS when its inversion power is within
    `kappa(params)` (boundary transmits) and are dropped otherwise.
    """
    alpha = _as_alpha(alpha, inst.n_blocks)
    cost = total_service_cost(alpha, inst)  # validates feasibility
    kap = kappa(params)
    i_h = alpha.copy()
    with np.errstate(invalid="ignore"):
        i_g = ((alpha == 0) & (inst.p_G_inv <= kap)).astype(np.int8)
    i_d = (1 - i_g - i_h).astype(np.int8)
    p_g = np.where(i_g == 1, inst.p_G_inv, 0.0)
    p_h = np.where(i_h == 1, inst.p_H_inv, 0.0)
    return FullSolution(
        I_G=i_g, I_H=i_h, I_D=i_d, p_G=p_g, p_H=p_h,
        total_cost=cost,
        grid_energy=math.fsum(p_g * inst.tau),
        drops=int(i_d.sum()),
    )


# ---------------------------------------------------------------------------
# multi-user variant: one sub-carrier per user, both BSs shared
# ---------------------------------------------------------------------------

def _pooled_feasible(instances, sel, p_H_max_sum):
    """Candidate (user, block) pairs addable to the joint selection `sel`."""
    p = np.stack([inst.p_H_inv for inst in instances])         # (U, N)
    spend = np.where(sel == 1, np.where(np.isfinite(p), p * instances[0].tau, np.inf), 0.0)
    slack = np.cumsum(instances[0].e_H) * (1.0 + ENERGY_RTOL) - np.cumsum(spend.sum(axis=0))
    tail_slack = np.minimum.accumulate(slack[::-1])[::-1]      # (N,)
    block_power = np.where(sel == 1, np.where(np.isfinite(p), p, np.inf), 0.0).sum(axis=0)
    with np.errstate(invalid="ignore"):
        ok = (sel == 0)
        ok &= p + block_power[None, :] <= p_H_max_sum
        ok &= p * instances[0].tau <= tail_slack[None, :]
    return ok


def multiuser_greedy_assignment(instances, p_H_max_sum: float, metric=None):
    """Greedy H-block selection for several users sharing one battery.

    `instances` are per-user reductions over a common arrival stream (the
    e_H columns must agree).  Selection pools energy causality across users
    and caps the per-block sum of harvesting-BS powers at `p_H_max_sum`.
    Ties break toward (earlier block, lower user index).  Returns
    (alpha matrix (U, N), cost), cost being the sum of per-user skip costs.
    """
    if len(instances) == 0:
        raise InvalidParameterError("need at least one user instance")
    n = instances[0].n_blocks
    for inst in instances[1:]:
        if inst.n_blocks != n or inst.tau != instances[0].tau:
            raise InvalidParameterError("user instances must share block structure")
        if not np.array_equal(inst.e_H, instances[0].e_H):
            raise InvalidParameterError("user instances must share the arrival stream")
    metric = metric or _default_metric
    u = len(instances)
    c = np.stack([inst.c for inst in instances])
    p = np.stack([inst.p_H_inv for inst in instances])
    sel = np.zeros((u, n), dtype=np.int8)
    for _ in range(u * n):
        ok = _pooled_feasible(instances, sel, p_H_max_sum)
        if not ok.any():
            break
        scores = np.where(ok, np.asarray(metric(c, p), dtype=float), -np.inf)
        flat = np.argmax(scores.T)  # block-major: earliest block, then user
        block, user = divmod(int(flat), u)
        sel[user, block] = 1
    cost = math.fsum(float(c[i, j]) for i in range(u) for j in range(n) if sel[i, j] == 0)
    return sel, cost
