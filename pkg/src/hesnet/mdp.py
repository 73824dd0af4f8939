"""Finite-horizon MDP machinery for the causal (online) setting.

The online problem is a per-block choice: spend battery on this packet or
leave it to the grid BS / the drop rule.  The state is (battery level,
G-channel state, H-channel state) on a finite grid: battery quantized into M
equal bins represented by mid-values, each channel into K equi-probable
states represented by conditional means.  Backward induction solves the
resulting Bellman recursion exactly; the monotone variant exploits the
threshold structure of the optimal policy to decide each (block, battery
level) slice with at most 2K-1 state evaluations instead of K^2.

Both solvers share one code path for the expectation terms, so their value
tables agree bitwise, not just within tolerance.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import (
    InvalidActionError,
    InvalidParameterError,
    InvalidStateError,
    StructureViolationError,
)
from .model import ExponentialFading, SystemParams, channel_gain, cost_parameter, inversion_power

__all__ = [
    "QuantizationGrid",
    "MdpModel",
    "PolicyTable",
    "CostToGo",
    "equiprobable_channel_states",
    "build_grid",
    "quantize_energy",
    "battery_level_index",
    "channel_state_index",
    "energy_transition_probs",
    "allowable_actions",
    "build_mdp_model",
    "backward_induction",
    "monotone_backward_induction",
    "thresholds_from_policy",
    "save_policy_artifact",
    "load_policy_artifact",
]


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def equiprobable_channel_states(K: int, fading) -> tuple[np.ndarray, np.ndarray]:
    """Split a fading distribution into K states of probability exactly 1/K.

    `fading` is a distribution exposing quantile/interval_mean (see
    ExponentialFading) or a bare positive float taken as an exponential
    mean.  Returns (levels, boundaries): levels[k] is the conditional mean
    on [boundaries[k], boundaries[k+1]); boundaries run 0..inf.
    """
    if isinstance(fading, (int, float, np.floating)):
        fading = ExponentialFading(float(fading))
    if not (isinstance(K, (int, np.integer)) and K >= 1):
        raise InvalidParameterError(f"K must be a positive integer, got {K!r}")
    bounds = np.array([fading.quantile(k / K) for k in range(K + 1)])
    levels = np.array([fading.interval_mean(bounds[k], bounds[k + 1]) for k in range(K)])
    return levels, bounds


@dataclass(frozen=True)
class QuantizationGrid:
    """Battery and channel discretization shared by training and lookup."""

    battery_levels: np.ndarray  # (M,) mid-values (2m-1) B_m / (2M), joules
    bin_edges: np.ndarray       # (M+1,) bin boundaries 0 .. B_m
    levels_G: np.ndarray        # (K,) representative gains, grid link
    bounds_G: np.ndarray        # (K+1,) quantile boundaries, 0 .. inf
    levels_H: np.ndarray        # (K,) representative gains, harvesting link
    bounds_H: np.ndarray        # (K+1,)

    def __post_init__(self):
        for name in ("battery_levels", "bin_edges", "levels_G", "bounds_G", "levels_H", "bounds_H"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.bin_edges.shape != (self.M + 1,):
            raise InvalidParameterError("bin_edges must have one more entry than battery_levels")
        for name in ("bounds_G", "bounds_H"):
            if getattr(self, name).shape != (self.K + 1,):
                raise InvalidParameterError(f"{name} must have K+1 entries")
        for name in ("battery_levels", "bin_edges", "levels_G", "bounds_G", "levels_H", "bounds_H"):
            arr = getattr(self, name)
            if np.any(np.diff(arr) <= 0):
                raise InvalidParameterError(f"{name} must be strictly increasing")
        if self.levels_G.shape != self.levels_H.shape:
            raise InvalidParameterError("both channels must use the same K")
        if not (self.battery_levels[0] > 0 and self.battery_levels[-1] < self.B_m):
            raise InvalidParameterError("battery mid-values must lie strictly inside (0, B_m)")

    @property
    def M(self) -> int:
        return self.battery_levels.shape[0]

    @property
    def K(self) -> int:
        return self.levels_G.shape[0]

    @property
    def B_m(self) -> float:
        return float(self.bin_edges[-1])


def build_grid(params: SystemParams, M: int = 100, K: int = 25, *,
               fading_G=None, fading_H=None) -> QuantizationGrid:
    """Default grid: M equal battery bins over [0, B_m], K equi-probable
    channel states per link (exponential fading from `params` unless models
    are passed in)."""
    if not (isinstance(M, (int, np.integer)) and M >= 1):
        raise InvalidParameterError(f"M must be a positive integer, got {M!r}")
    fading_G = fading_G if fading_G is not None else ExponentialFading(params.mu_G)
    fading_H = fading_H if fading_H is not None else ExponentialFading(params.mu_H)
    levels_g, bounds_g = equiprobable_channel_states(K, fading_G)
    levels_h, bounds_h = equiprobable_channel_states(K, fading_H)
    b_m = params.B_m
    mids = (2.0 * np.arange(1, M + 1) - 1.0) * b_m / (2.0 * M)
    edges = np.linspace(0.0, b_m, M + 1)
    return QuantizationGrid(mids, edges, levels_g, bounds_g, levels_h, bounds_h)


def battery_level_index(epsilon, grid: QuantizationGrid):
    """0-based battery bin of a (possibly array) energy value; top bin clamps."""
    eps = np.asarray(epsilon, dtype=float)
    if np.any(eps < 0):
        raise InvalidStateError(f"battery energy must be >= 0, got {epsilon!r}")
    m = grid.M
    idx = np.minimum(np.floor(m * np.minimum(eps, grid.B_m) / grid.B_m), m - 1).astype(np.int64)
    return int(idx) if idx.ndim == 0 else idx


def quantize_energy(epsilon, grid: QuantizationGrid):
    """Mid-value of the battery bin containing min(epsilon, B_m)."""
    out = grid.battery_levels[battery_level_index(epsilon, grid)]
    return float(out) if np.ndim(out) == 0 else out


def channel_state_index(gamma, bounds: np.ndarray):
    """0-based channel state of a gain: interval [bounds[k], bounds[k+1])."""
    g = np.asarray(gamma, dtype=float)
    if np.any(g < 0):
        raise InvalidStateError(f"channel gain must be >= 0, got {gamma!r}")
    idx = np.clip(np.searchsorted(bounds, g, side="right") - 1, 0, bounds.shape[0] - 2)
    return int(idx) if idx.ndim == 0 else idx.astype(np.int64)


def energy_transition_probs(level: float, consumption: float, grid: QuantizationGrid,
                            params: SystemParams) -> np.ndarray:
    """Distribution of the next battery level after spending `consumption`.

    The residual level - consumption plus a Uniform[0, E_m] arrival is
    re-quantized; each next bin's probability is the length of the arrival
    interval that lands in it, divided by E_m.  The top bin absorbs
    overflow past B_m.
    """
    if not np.isclose(quantize_energy(max(level, 0.0), grid), level, rtol=1e-9, atol=0.0):
        raise InvalidStateError(f"{level!r} is not a battery mid-value of this grid")
    if consumption < 0 or consumption > level * (1 + 1e-12):
        raise InvalidActionError(
            f"consumption {consumption!r} outside [0, level={level!r}]")
    base = max(level - consumption, 0.0)
    hi_edges = grid.bin_edges[1:].copy()
    hi_edges[-1] = np.inf
    lo = np.maximum(grid.bin_edges[:-1] - base, 0.0)
    hi = np.minimum(hi_edges - base, params.E_m)
    return np.maximum(hi - lo, 0.0) / params.E_m


def allowable_actions(state, params: SystemParams) -> tuple[int, ...]:
    """Feasible actions in (battery level, G-gain, H-gain): spend only when
    the H inversion power fits both the battery over one block and the peak
    cap; boundaries included."""
    level, _gamma_g, gamma_h = state
    if level < 0:
        raise InvalidStateError(f"battery level must be >= 0, got {level!r}")
    p_inv = inversion_power(channel_gain(params.d_H, gamma_h, params), params)
    if p_inv <= min(level / params.tau, params.p_H_max):
        return (0, 1)
    return (0,)


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MdpModel:
    """Grid-level system description consumed by the induction solvers."""

    params: SystemParams
    grid: QuantizationGrid
    p_inv_H: np.ndarray   # (K,) W, inversion power at each H-state gain
    cost_G: np.ndarray    # (K,) skip cost at each G-state gain
    allowed: np.ndarray   # (M, K) bool, action 1 permitted
    kernel0: np.ndarray   # (M, M) next-level distribution, no spend
    kernel1: np.ndarray   # (K, M, M) next-level distribution when serving;
                          #           zero rows where not allowed

    @cached_property
    def stage_costs(self) -> np.ndarray:
        """(M, K_G, K_H, 2) immediate costs; action 1 always costs 0."""
        m, k = self.grid.M, self.grid.K
        out = np.zeros((m, k, k, 2))
        out[:, :, :, 0] = self.cost_G[None, :, None]
        return out


def build_mdp_model(params: SystemParams, grid: QuantizationGrid) -> MdpModel:
    """Precompute per-state powers, skip costs, action masks and kernels."""
    p_inv_h = inversion_power(channel_gain(params.d_H, grid.levels_H, params), params)
    p_inv_g = inversion_power(channel_gain(params.d_G, grid.levels_G, params), params)
    cost_g = cost_parameter(p_inv_g, params)
    m, k = grid.M, grid.K
    levels = grid.battery_levels
    allowed = p_inv_h[None, :] <= np.minimum(levels[:, None] / params.tau, params.p_H_max)
    kernel0 = np.empty((m, m))
    for i in range(m):
        kernel0[i] = energy_transition_probs(levels[i], 0.0, grid, params)
    kernel1 = np.zeros((k, m, m))
    for j in range(k):
        spend = p_inv_h[j] * params.tau
        for i in range(m):
            if allowed[i, j]:
                kernel1[j, i] = energy_transition_probs(levels[i], spend, grid, params)
    return MdpModel(params=params, grid=grid, p_inv_H=p_inv_h, cost_G=cost_g,
                    allowed=allowed, kernel0=kernel0, kernel1=kernel1)


# ---------------------------------------------------------------------------
# backward induction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolicyTable:
    """Binary decision per (block, battery level, G-state, H-state)."""

    actions: np.ndarray  # (N, M, K, K) uint8
    grid: QuantizationGrid
    params_hash: str

    @property
    def N(self) -> int:
        return self.actions.shape[0]


@dataclass(frozen=True)
class CostToGo:
    """Optimal expected remaining cost per state, plus per-level sums."""

    u: np.ndarray       # (N, M, K, K)
    u_hat: np.ndarray   # (N, M) sum of u over both channel states
    params_hash: str


def _expected_values(model: MdpModel, u_hat_next: np.ndarray):
    """Expectation terms shared by both solvers (bitwise-identical path).

    Channel states regenerate independently with probability 1/K each, so
    the next-state expectation factorizes through u_hat: ev0[m] (no spend)
    and ev1[m, kh] (spend at H-state kh), both already divided by K^2.
    """
    k = model.grid.K
    inv_k2 = 1.0 / (k * k)
    ev0 = (model.kernel0 @ u_hat_next) * inv_k2
    ev1 = np.stack([model.kernel1[j] @ u_hat_next for j in range(k)], axis=1) * inv_k2
    return ev0, ev1


def _q_mask(model: MdpModel) -> np.ndarray:
    return np.where(model.allowed, 0.0, np.inf)  # (M, K) additive mask on q1


def backward_induction(model: MdpModel, N: int):
    """Exact solve of the finite-horizon recursion over all N*M*K^2 states.

    The terminal block minimizes the stage cost alone.  Ties between the
    two actions resolve to serving (action 1).  Returns (PolicyTable,
    CostToGo).
    """
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise InvalidParameterError(f"N must be a positive integer, got {N!r}")
    m, k = model.grid.M, model.grid.K
    params_hash = model.params.content_hash()
    actions = np.zeros((N, m, k, k), dtype=np.uint8)
    u = np.zeros((N, m, k, k))
    u_hat = np.zeros((N, m))
    mask = _q_mask(model)
    for t in range(N - 1, -1, -1):
        if t == N - 1:
            ev0 = np.zeros(m)
            ev1 = np.zeros((m, k))
        else:
            ev0, ev1 = _expected_values(model, u_hat[t + 1])
        q0 = model.cost_G[None, :, None] + ev0[:, None, None]  # (M, K, 1)
        q1 = (ev1 + mask)[:, None, :]                          # (M, 1, K)
        act = q1 <= q0
        u[t] = np.where(act, q1, q0)
        actions[t] = act
        u_hat[t] = u[t].sum(axis=(1, 2))
    return (PolicyTable(actions=actions, grid=model.grid, params_hash=params_hash),
            CostToGo(u=u, u_hat=u_hat, params_hash=params_hash))


def _monotone_slice(q0_row: np.ndarray, q1_row: np.ndarray, k: int):
    """Decide one (block, battery level) slice walking the threshold staircase.

    Start at the best state of both channels.  Serving there implies serving
    at every lower G-state (same value), so the whole column is filled and
    the H cursor drops; not serving implies not serving at every lower
    H-state (value doesn't depend on the H-state then), so the row is filled
    and the G cursor drops.  Each evaluated state retires one cursor step,
    hence at most 2K-1 evaluations.
    """
    pol = np.zeros((k, k), dtype=np.uint8)
    val = np.empty((k, k))
    kg = kh = k - 1
    evals = 0
    while kg >= 0 and kh >= 0:
        evals += 1
        if q1_row[kh] <= q0_row[kg]:
            val[:kg + 1, kh] = q1_row[kh]
            pol[:kg + 1, kh] = 1
            kh -= 1
        else:
            val[kg, :kh + 1] = q0_row[kg]
            kg -= 1
    return pol, val, evals


def monotone_backward_induction(model: MdpModel, N: int):
    """Threshold-walk variant of `backward_induction`.

    Produces bitwise-identical tables (the expectation terms come from the
    same code path) while evaluating at most 2K-1 states per (block,
    battery level).  Returns (PolicyTable, CostToGo, eval_counts) with
    eval_counts of shape (N, M).
    """
    if not (isinstance(N, (int, np.integer)) and N >= 1):
        raise InvalidParameterError(f"N must be a positive integer, got {N!r}")
    m, k = model.grid.M, model.grid.K
    params_hash = model.params.content_hash()
    actions = np.zeros((N, m, k, k), dtype=np.uint8)
    u = np.zeros((N, m, k, k))
    u_hat = np.zeros((N, m))
    counts = np.zeros((N, m), dtype=np.int64)
    mask = _q_mask(model)
    for t in range(N - 1, -1, -1):
        if t == N - 1:
            ev0 = np.zeros(m)
            ev1 = np.zeros((m, k))
        else:
            ev0, ev1 = _expected_values(model, u_hat[t + 1])
        for i in range(m):
            q0_row = model.cost_G + ev0[i]
            q1_row = ev1[i] + mask[i]
            pol, val, evals = _monotone_slice(q0_row, q1_row, k)
            actions[t, i] = pol
            u[t, i] = val
            counts[t, i] = evals
        u_hat[t] = u[t].sum(axis=(1, 2))
    return (PolicyTable(actions=actions, grid=model.grid, params_hash=params_hash),
            CostToGo(u=u, u_hat=u_hat, params_hash=params_hash),
            counts)


def thresholds_from_policy(policy: PolicyTable, t: int, level: int):
    """Threshold states of one (block, battery level) slice.

    Returns (g_thresholds, h_thresholds): per H-state the largest G-state
    index still served, per G-state the smallest H-state index served; -1
    marks "never".  Raises when the slice is not monotone, which signals a
    solver bug rather than bad input data.
    """
    sl = policy.actions[t, level].astype(np.int8)  # (K_G, K_H)
    if np.any(np.diff(sl, axis=0) > 0):
        raise StructureViolationError(
            f"slice (t={t}, level={level}) not monotone along the G-state axis")
    if np.any(np.diff(sl, axis=1) < 0):
        raise StructureViolationError(
            f"slice (t={t}, level={level}) not monotone along the H-state axis")
    k = sl.shape[0]
    g_counts = sl.sum(axis=0)  # ones occupy the lowest G-states per column
    h_counts = sl.sum(axis=1)  # ones occupy the highest H-states per row
    g_thresholds = g_counts - 1
    h_thresholds = np.where(h_counts > 0, k - h_counts, -1)
    return g_thresholds.astype(np.int64), h_thresholds.astype(np.int64)


# ---------------------------------------------------------------------------
# artifact serialization
# ---------------------------------------------------------------------------

_MAGIC = b"HESNETPOLICY 1\n"


def save_policy_artifact(path, policy: PolicyTable, values: CostToGo | None = None) -> None:
    """Write a policy (and optionally its values) to a versioned binary file.

    Layout: magic line; one JSON header line with n/m/k, the params hash and
    a has_values flag; then raw little-endian row-major arrays in fixed
    order (battery levels, bin edges, G bounds/levels, H bounds/levels,
    actions as uint8, then u and u_hat as float64 when present).  The
    writer is deterministic: identical inputs give identical bytes.
    """
    g = policy.grid
    header = {
        "version": 1,
        "n": int(policy.N),
        "m": int(g.M),
        "k": int(g.K),
        "params_hash": policy.params_hash,
        "has_values": values is not None,
    }
    if values is not None and values.params_hash != policy.params_hash:
        raise InvalidParameterError("policy and values were trained on different parameters")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode() + b"\n")
        for arr in (g.battery_levels, g.bin_edges, g.bounds_G, g.levels_G, g.bounds_H, g.levels_H):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(policy.actions, dtype="|u1").tobytes())
        if values is not None:
            f.write(np.ascontiguousarray(values.u, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(values.u_hat, dtype="<f8").tobytes())


def load_policy_artifact(path):
    """Read a file written by `save_policy_artifact`.

    Returns (PolicyTable, CostToGo-or-None).  Consumers are responsible for
    comparing the stored params hash against their own configuration.
    """
    with open(path, "rb") as f:
        magic = f.read(len(_MAGIC))
        if magic != _MAGIC:
            raise InvalidParameterError(f"{path}: not a policy artifact (bad magic)")
        header = json.loads(f.readline().decode())
        if header.get("version") != 1:
            raise InvalidParameterError(f"{path}: unsupported artifact version {header.get('version')!r}")
        n, m, k = header["n"], header["m"], header["k"]

        def read_f8(count):
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise InvalidParameterError(f"{path}: truncated artifact")
            return np.frombuffer(buf, dtype="<f8").copy()

        battery_levels = read_f8(m)
        bin_edges = read_f8(m + 1)
        bounds_g = read_f8(k + 1)
        levels_g = read_f8(k)
        bounds_h = read_f8(k + 1)
        levels_h = read_f8(k)
        grid = QuantizationGrid(battery_levels, bin_edges, levels_g, bounds_g, levels_h, bounds_h)
        buf = f.read(n * m * k * k)
        if len(buf) != n * m * k * k:
            raise InvalidParameterError(f"{path}: truncated artifact")
        actions = np.frombuffer(buf, dtype="|u1").reshape(n, m, k, k).copy()
        policy = PolicyTable(actions=actions, grid=grid, params_hash=header["params_hash"])
        values = None
        if header["has_values"]:
            u = read_f8(n * m * k * k).reshape(n, m, k, k)
            u_hat = read_f8(n * m).reshape(n, m)
            values = CostToGo(u=u, u_hat=u_hat, params_hash=header["params_hash"])
    return policy, values
