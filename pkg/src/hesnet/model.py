"""Physical-layer model for a two-BS hybrid energy supply downlink.

One user is served over frames of N equal blocks.  In every block exactly one
packet of R bits is due; it is carried by the grid-powered BS, carried by the
energy-harvesting BS out of its battery, or dropped.  This module holds the
system parameters, the stochastic channel/arrival models, and the scalar
primitives (channel gain, rate, inversion power, per-block cost) everything
else is built from.

Units are SI throughout: watts, joules, seconds, hertz, bits.  dB-valued
inputs are converted at the parsing boundary (see `cli`), never stored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidParameterError

__all__ = [
    "SystemParams",
    "ExponentialFading",
    "UniformArrivals",
    "FrameTrajectory",
    "channel_gain",
    "rate",
    "inversion_power",
    "required_snr",
    "kappa",
    "cost_parameter",
    "make_rng",
    "sample_trajectory",
    "sample_trajectories",
]


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemParams:
    """Static system description.

    Defaults reproduce the reference simulation setup used throughout the
    test suite: a 10 MHz downlink with 50-block frames, one 50 Kbit packet
    per 1 ms block, unit-mean block fading on both links, and uniform energy
    arrivals with a 20 mW long-term harvest rate.

    `P_avg` and `B_m` may be omitted; they default to ``E_m / (2 tau)``
    (the mean of uniform arrivals on [0, E_m]) and ``N * E_m``.
    """

    w_G: float = 1.0            # cost weight per joule of grid energy
    w_D: float = 0.01           # cost weight per dropped packet
    R: float = 50e3             # bits per packet
    N: int = 50                 # blocks per frame
    tau: float = 1e-3           # s, block duration
    W: float = 10e6             # Hz, bandwidth of the user's channel
    sigma2: float = 10.0 ** -12.75   # W, noise power (-97.5 dBm)
    g0: float = 1e-4            # path loss at unit distance (-40 dB)
    theta: float = 4.0          # path loss exponent
    d_G: float = 50.0           # m, distance to the grid-powered BS
    d_H: float = 30.0           # m, distance to the energy-harvesting BS
    p_G_max: float = 2.0        # W, grid BS peak transmit power
    p_H_max: float = 0.5        # W, harvesting BS peak transmit power
    mu_G: float = 1.0           # mean fading power gain, grid link
    mu_H: float = 1.0           # mean fading power gain, harvesting link
    E_m: float = 4e-5           # J, max harvested energy per block
    P_avg: float | None = None  # W, mean harvest rate
    B_m: float | None = None    # J, battery capacity

    def __post_init__(self):
        def usable(x):
            return isinstance(x, (int, float, np.floating)) and math.isfinite(x) and x > 0

        if self.P_avg is None and usable(self.E_m) and usable(self.tau):
            object.__setattr__(self, "P_avg", self.E_m / (2.0 * self.tau))
        if self.B_m is None and usable(self.E_m) and isinstance(self.N, (int, np.integer)):
            object.__setattr__(self, "B_m", self.N * self.E_m)
        self._validate()

    def _validate(self):
        if not (isinstance(self.N, (int, np.integer)) and self.N >= 1):
            raise InvalidParameterError(f"N must be a positive integer, got {self.N!r}")
        positive = [
            "w_G", "R", "tau", "W", "sigma2", "g0", "theta", "d_G", "d_H",
            "p_G_max", "p_H_max", "mu_G", "mu_H", "E_m", "P_avg", "B_m",
        ]
        for name in positive:
            value = getattr(self, name)
            if not (isinstance(value, (int, float, np.floating)) and math.isfinite(value) and value > 0):
                raise InvalidParameterError(f"{name} must be finite and > 0, got {value!r}")
        if not (math.isfinite(self.w_D) and self.w_D >= 0):
            raise InvalidParameterError(f"w_D must be finite and >= 0, got {self.w_D!r}")
        if self.B_m < self.E_m:
            raise InvalidParameterError(
                f"battery capacity B_m={self.B_m} cannot be below the per-block arrival cap E_m={self.E_m}")
        # uniform arrivals on [0, E_m] fix the mean harvest rate
        if not math.isclose(self.P_avg * self.tau, self.E_m / 2.0, rel_tol=1e-9):
            raise InvalidParameterError(
                f"P_avg={self.P_avg} inconsistent with E_m={self.E_m}: need P_avg*tau == E_m/2")

    def evolve(self, **changes) -> "SystemParams":
        """Copy with `changes` applied; dependent fields are re-derived.

        Setting `P_avg` rescales `E_m`; setting `E_m`, `N`, or `tau` re-derives
        whichever of `P_avg` / `B_m` is not pinned in the same call.
        """
        if "P_avg" in changes and "E_m" not in changes:
            tau = changes.get("tau", self.tau)
            changes["E_m"] = 2.0 * changes["P_avg"] * tau
        elif "E_m" in changes and "P_avg" not in changes:
            changes["P_avg"] = None
        if "B_m" not in changes and any(k in changes for k in ("N", "E_m", "P_avg", "tau")):
            changes["B_m"] = None
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def content_hash(self) -> str:
        """SHA-256 over the canonical parameter encoding (hex digest)."""
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"),
                          default=float).encode()
        return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# stochastic models
# ---------------------------------------------------------------------------

class ExponentialFading:
    """Exponentially distributed block fading power gain (Rayleigh amplitude).

    The quantile and interval-mean methods are what the quantizer needs, so
    any distribution exposing the same three methods can stand in.
    """

    def __init__(self, mean: float):
        if not (math.isfinite(mean) and mean > 0):
            raise InvalidParameterError(f"fading mean must be > 0, got {mean!r}")
        self.mean = float(mean)

    def sample(self, rng: np.random.Generator, size: int | tuple) -> np.ndarray:
        return rng.exponential(self.mean, size)

    def quantile(self, p: float) -> float:
        """Inverse CDF; quantile(1.0) is +inf."""
        if not 0.0 <= p <= 1.0:
            raise InvalidParameterError(f"quantile level must be in [0, 1], got {p!r}")
        if p == 1.0:
            return math.inf
        return -self.mean * math.log1p(-p)

    def interval_mean(self, lo: float, hi: float) -> float:
        """E[gamma | lo <= gamma < hi].  `hi` may be +inf."""
        if not 0.0 <= lo < hi:
            raise InvalidParameterError(f"need 0 <= lo < hi, got [{lo}, {hi})")
        mu = self.mean
        if math.isinf(hi):
            return lo + mu  # memoryless tail
        w_lo = math.exp(-lo / mu)
        w_hi = math.exp(-hi / mu)
        return mu + (lo * w_lo - hi * w_hi) / (w_lo - w_hi)

    def __repr__(self):
        return f"ExponentialFading(mean={self.mean!r})"


class UniformArrivals:
    """Energy harvested per block, uniform on [0, e_max] joules."""

    def __init__(self, e_max: float):
        if not (math.isfinite(e_max) and e_max > 0):
            raise InvalidParameterError(f"arrival cap must be > 0, got {e_max!r}")
        self.e_max = float(e_max)

    @property
    def mean(self) -> float:
        return self.e_max / 2.0

    def sample(self, rng: np.random.Generator, size: int | tuple) -> np.ndarray:
        return rng.uniform(0.0, self.e_max, size)

    def __repr__(self):
        return f"UniformArrivals(e_max={self.e_max!r})"


# ---------------------------------------------------------------------------
# scalar primitives
# ---------------------------------------------------------------------------

def channel_gain(distance, gamma, params: SystemParams):
    """Power gain g0 * d^-theta * gamma of a link at `distance` meters."""
    if np.any(np.asarray(distance) <= 0):
        raise InvalidParameterError(f"distance must be > 0, got {distance!r}")
    if np.any(np.asarray(gamma) < 0):
        raise InvalidParameterError(f"fading gain must be >= 0, got {gamma!r}")
    return params.g0 * np.asarray(distance, dtype=float) ** -params.theta * gamma


def rate(p, h, params: SystemParams):
    """Bits deliverable in one block at transmit power `p` over gain `h`."""
    p = np.asarray(p, dtype=float)
    h = np.asarray(h, dtype=float)
    if np.any(p < 0) or np.any(h < 0):
        raise InvalidParameterError("power and gain must be >= 0")
    out = params.tau * params.W * np.log2(1.0 + h * p / params.sigma2)
    return float(out) if out.ndim == 0 else out


def required_snr(params: SystemParams) -> float:
    """SNR needed to fit one packet in one block: 2^(R/(W tau)) - 1."""
    return 2.0 ** (params.R / (params.W * params.tau)) - 1.0


def inversion_power(h, params: SystemParams):
    """Transmit power that delivers exactly one packet per block over gain `h`.

    A dead channel (h == 0) yields +inf: the block is unservable at any
    power, and downstream feasibility logic treats it that way.
    """
    h = np.asarray(h, dtype=float)
    if np.any(h < 0):
        raise InvalidParameterError(f"channel gain must be >= 0, got {h!r}")
    need = required_snr(params) * params.sigma2
    with np.errstate(divide="ignore"):
        out = np.where(h > 0.0, need / np.where(h > 0.0, h, 1.0), np.inf)
    return float(out) if out.ndim == 0 else out


def kappa(params: SystemParams) -> float:
    """Grid-power level above which dropping is cheaper than transmitting.

    min{p_G_max, w_D / (w_G tau)}: the peak-power cap or the power at which
    one block of grid energy costs exactly one drop, whichever binds first.
    """
    return min(params.p_G_max, params.w_D / (params.w_G * params.tau))


def cost_parameter(p_G_inv, params: SystemParams):
    """Cost of a block the harvesting BS does not take.

    w_D when the grid BS would have to exceed `kappa` (the packet is
    dropped), else the grid energy bill w_G * p_G_inv * tau.  The boundary
    p_G_inv == kappa transmits; both branches price it identically there.
    """
    p = np.asarray(p_G_inv, dtype=float)
    if np.any(p < 0):
        raise InvalidParameterError(f"inversion power must be >= 0, got {p_G_inv!r}")
    kap = kappa(params)
    with np.errstate(invalid="ignore"):
        out = np.where(p > kap, params.w_D, params.w_G * p * params.tau)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# trajectory sampling
# ---------------------------------------------------------------------------

def make_rng(*key: int) -> np.random.Generator:
    """Counter-based generator (Philox4x64) for a (stream, substream) key.

    The same key always yields the same draws, on any machine and with any
    worker layout, which is what makes paired policy comparisons and
    parallel Monte Carlo reproducible.
    """
    if not 1 <= len(key) <= 2:
        raise InvalidParameterError("rng key takes one or two integer components")
    words = [int(k) & (2 ** 64 - 1) for k in key]
    if len(words) == 1:
        words.append(0x9E3779B97F4A7C15)  # salt: keeps (k,) and (k, 0) distinct
    return np.random.Generator(np.random.Philox(key=np.asarray(words, dtype=np.uint64)))


@dataclass(frozen=True)
class FrameTrajectory:
    """Realized randomness of one frame: fading gains and energy arrivals."""

    gamma_G: np.ndarray  # (N,) fading power gains, grid link
    gamma_H: np.ndarray  # (N,) fading power gains, harvesting link
    e_H: np.ndarray      # (N,) J, energy harvested ahead of each block

    def __post_init__(self):
        for name in ("gamma_G", "gamma_H", "e_H"):
            arr = np.asarray(getattr(self, name), dtype=float)
            object.__setattr__(self, name, arr)
            if arr.ndim != 1 or arr.shape != self.gamma_G.shape:
                raise InvalidParameterError(f"{name} must be 1-D and match gamma_G in length")
            if not np.all(np.isfinite(arr)) or np.any(arr < 0):
                raise InvalidParameterError(f"{name} must be finite and >= 0")

    @property
    def n_blocks(self) -> int:
        return self.gamma_G.shape[0]


def _default_models(params: SystemParams, fading_G, fading_H, arrivals):
    fading_G = fading_G if fading_G is not None else ExponentialFading(params.mu_G)
    fading_H = fading_H if fading_H is not None else ExponentialFading(params.mu_H)
    arrivals = arrivals if arrivals is not None else UniformArrivals(params.E_m)
    return fading_G, fading_H, arrivals


def sample_trajectory(params: SystemParams, seed, *, fading_G=None, fading_H=None,
                      arrivals=None) -> FrameTrajectory:
    """Draw one frame of channel gains and arrivals.

    `seed` is an int or an (int, int) pair; draw order is fixed (grid gains,
    then harvesting gains, then arrivals) so results are reproducible.
    """
    fading_G, fading_H, arrivals = _default_models(params, fading_G, fading_H, arrivals)
    key = seed if isinstance(seed, (tuple, list)) else (seed,)
    rng = make_rng(*key)
    return FrameTrajectory(
        gamma_G=fading_G.sample(rng, params.N),
        gamma_H=fading_H.sample(rng, params.N),
        e_H=arrivals.sample(rng, params.N),
    )


def sample_trajectories(params: SystemParams, seed: int, frames: int, *,
                        fading_G=None, fading_H=None, arrivals=None):
    """Batch of frames as (frames, N) arrays (gamma_G, gamma_H, e_H).

    Frame f is keyed (seed, f): the first half of a 2n-frame batch is
    bit-identical to the n-frame batch, and disjoint workers can split the
    frame range without sharing generator state.
    """
    if frames < 1:
        raise InvalidParameterError(f"frames must be >= 1, got {frames!r}")
    fading_G, fading_H, arrivals = _default_models(params, fading_G, fading_H, arrivals)
    n = params.N
    gg = np.empty((frames, n))
    gh = np.empty((frames, n))
    eh = np.empty((frames, n))
    for f in range(frames):
        rng = make_rng(seed, f)
        gg[f] = fading_G.sample(rng, n)
        gh[f] = fading_H.sample(rng, n)
        eh[f] = arrivals.sample(rng, n)
    return gg, gh, eh
