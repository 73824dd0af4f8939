"""Command-line front end: configs in, CSV/JSON artifacts out.

Configuration is a flat key=value text file whose keys carry explicit
units (tau_ms, sigma2_dbm, p_avg_mw, ...); dB-style values are converted
to SI once, at the parse boundary, so everything downstream is Watts,
Joules, seconds.  Resolution order: built-in defaults, then --preset,
then --config, then command-line --set pairs and flags.  Unknown keys are
rejected rather than ignored.

Exit codes: 0 success, 2 configuration error, 3 resource limit,
4 artifact/parameter mismatch.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import (
    ConfigError,
    HesnetError,
    InvalidParameterError,
    ModelMismatchError,
    ReplayParseError,
    ResourceLimitError,
    StalePolicyError,
)
from .mdp import build_grid, build_mdp_model, load_policy_artifact, monotone_backward_induction, save_policy_artifact
from .model import FrameTrajectory, SystemParams, sample_trajectories, sample_trajectory
from .offline import (
    EXHAUSTIVE_CAP,
    exhaustive_optimal,
    expand_solution,
    greedy_assignment,
    multiuser_greedy_assignment,
    to_ip_instance,
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
    look_ahead_build,
    threshold_lambdas,
)
from .sim import (
    RunMetrics,
    GridOnlyPolicy,
    ScriptedMultiuserAssignment,
    apply_axis,
    file_sha256,
    metrics_from_arrays,
    metrics_row,
    offline_frame_metrics,
    run_batch,
    run_frame_multiuser,
    sample_multiuser_trajectories,
    sweep,
    write_manifest,
    write_rows_csv,
)

__all__ = ["main", "resolve_config", "RunConfig", "parse_kv_text"]


# ---------------------------------------------------------------------------
# config keys
# ---------------------------------------------------------------------------

def _db10(x: float) -> float:
    return 10.0 ** (x / 10.0)


def _ident(x: float) -> float:
    return x


# config key -> (SystemParams field, unit conversion applied after float parse)
PARAM_KEYS = {
    "w_g": ("w_G", _ident),
    "w_d": ("w_D", _ident),
    "r_bits": ("R", _ident),
    "n_blocks": ("N", _ident),
    "tau_ms": ("tau", lambda v: v * 1e-3),
    "bandwidth_hz": ("W", _ident),
    "sigma2_dbm": ("sigma2", lambda v: _db10(v) * 1e-3),
    "sigma2_w": ("sigma2", _ident),
    "g0_db": ("g0", _db10),
    "g0_linear": ("g0", _ident),
    "theta": ("theta", _ident),
    "d_g_m": ("d_G", _ident),
    "d_h_m": ("d_H", _ident),
    "p_g_max_w": ("p_G_max", _ident),
    "p_h_max_w": ("p_H_max", _ident),
    "mu_g_db": ("mu_G", _db10),
    "mu_g": ("mu_G", _ident),
    "mu_h_db": ("mu_H", _db10),
    "mu_h": ("mu_H", _ident),
    "e_m_j": ("E_m", _ident),
    "p_avg_mw": ("P_avg", lambda v: v * 1e-3),
    "b_m_j": ("B_m", _ident),
}

RUN_KEYS = {
    "m_levels", "k_states", "policies", "axis", "axis_values", "frames",
    "seed", "out_dir", "artifact_dir", "zeta", "zeta_grid", "zeta_budget",
    "users", "threads", "solver",
}

# sweep-axis config token -> (internal axis name, raw-unit -> SI scale)
AXES = {
    "d_h_m": ("d_H", 1.0),
    "p_avg_mw": ("P_avg", 1e-3),
    "w_d": ("w_D", 1.0),
    "p_h_max_w": ("p_H_max", 1.0),
}

OFFLINE_HEADER = ["solver", "block", "gamma_G", "gamma_H", "e_H_j",
                  "alpha", "i_G", "i_H", "i_D", "p_G_w", "p_H_w"]


@dataclass
class RunConfig:
    """One fully resolved run: physics plus orchestration knobs."""

    params: SystemParams
    m_levels: int
    k_states: int
    policies: tuple
    axis: str | None            # internal axis name, None for point runs
    axis_key: str | None        # the config token, kept for file naming
    axis_values: tuple          # SI units
    axis_values_raw: tuple      # as written in the config
    frames: int
    seed: int
    out_dir: str
    artifact_dir: str           # where simulate looks for trained tables
    zeta: object                # float or the string "auto"
    zeta_grid: tuple
    zeta_budget: int
    users: int
    threads: int
    solver: str
    raw: dict                   # resolved key -> string, echoed in manifests


def parse_kv_text(text: str, source: str = "<config>") -> dict:
    """Flat key = value lines; '#' starts a comment; keys may not repeat."""
    out: dict = {}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip().lower(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {rawline.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _preset_dir():
    return resources.files("hesnet").joinpath("presets")


def _load_preset_text(name: str) -> str:
    f = _preset_dir().joinpath(f"{name}.cfg")
    if not f.is_file():
        names = sorted(p.name[:-4] for p in _preset_dir().iterdir() if p.name.endswith(".cfg"))
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(names)}")
    return f.read_text()


def _num(value: str, key: str, source: str) -> float:
    try:
        num = float(value)
    except ValueError:
        raise ConfigError(f"{source}: key {key!r} needs a number, got {value!r}") from None
    if not math.isfinite(num):
        raise ConfigError(f"{source}: key {key!r} must be finite, got {value!r}")
    return num


def _int(value: str, key: str, source: str, minimum: int = 1) -> int:
    num = _num(value, key, source)
    if num != int(num):
        raise ConfigError(f"{source}: key {key!r} needs an integer, got {value!r}")
    n = int(num)
    if n < minimum:
        raise ConfigError(f"{source}: key {key!r} must be >= {minimum}, got {n}")
    return n


def _merge_source(kv: dict, source: str, field_map: dict, run_map: dict, raw: dict) -> None:
    seen_fields: dict = {}
    for key, value in kv.items():
        if key in PARAM_KEYS:
            field, _ = PARAM_KEYS[key]
            if field in seen_fields:
                raise ConfigError(
                    f"{source}: keys {seen_fields[field]!r} and {key!r} both set {field}; pick one")
            seen_fields[field] = key
            if field in field_map:          # a later source replaces the whole quantity,
                raw.pop(field_map[field][0], None)   # whichever unit spelled it before
            field_map[field] = (key, value)
            raw[key] = value
        elif key in RUN_KEYS:
            run_map[key] = (key, value, source)
            raw[key] = value
        else:
            raise ConfigError(f"{source}: unknown key {key!r}")


def _parse_zeta_grid(value: str, source: str) -> tuple:
    parts = value.split(":")
    if len(parts) != 3:
        raise ConfigError(f"{source}: zeta_grid must be 'start:step:stop', got {value!r}")
    start, step, stop = (_num(p, "zeta_grid", source) for p in parts)
    if step <= 0 or stop < start or start < 0:
        raise ConfigError(f"{source}: zeta_grid needs start >= 0, step > 0, stop >= start")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    return tuple(start + i * step for i in range(count))


def resolve_config(preset: str | None = None, config_path: str | None = None,
                   overrides: dict | None = None) -> RunConfig:
    """Layer defaults <- preset <- config file <- command line into a RunConfig."""
    field_map: dict = {}
    run_map: dict = {}
    raw: dict = {}
    _merge_source(parse_kv_text(_load_preset_text("default"), "preset default"),
                  "preset default", field_map, run_map, raw)
    if preset and preset != "default":
        _merge_source(parse_kv_text(_load_preset_text(preset), f"preset {preset}"),
                      f"preset {preset}", field_map, run_map, raw)
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        _merge_source(parse_kv_text(path.read_text(), str(path)), str(path),
                      field_map, run_map, raw)
    if overrides:
        _merge_source(dict(overrides), "command line", field_map, run_map, raw)

    changes: dict = {}
    for field, (key, value) in field_map.items():
        if field == "N":
            changes["N"] = _int(value, key, "config")
        else:
            changes[field] = PARAM_KEYS[key][1](_num(value, key, "config"))
    try:
        params = SystemParams().evolve(**changes)
    except InvalidParameterError as exc:
        raise ConfigError(f"invalid physical configuration: {exc}") from exc

    def run_value(key, default=None):
        return run_map.get(key, (key, default, "default"))[1]

    def run_source(key):
        return run_map.get(key, (key, None, "config"))[2]

    m_levels = _int(run_value("m_levels", "100"), "m_levels", run_source("m_levels"))
    k_states = _int(run_value("k_states", "25"), "k_states", run_source("k_states"))
    frames = _int(run_value("frames", "1000"), "frames", run_source("frames"))
    seed = _int(run_value("seed", "1"), "seed", run_source("seed"), minimum=0)
    users = _int(run_value("users", "1"), "users", run_source("users"))
    threads = _int(run_value("threads", "1"), "threads", run_source("threads"))
    zeta_budget = _int(run_value("zeta_budget", "1000"), "zeta_budget", run_source("zeta_budget"))

    policies = tuple(t.strip() for t in run_value("policies", "").split(",") if t.strip())

    axis_token = run_value("axis", "none").lower()
    if axis_token in ("none", ""):
        axis = axis_key = None
        axis_values = axis_values_raw = ()
    else:
        if axis_token not in AXES:
            raise ConfigError(
                f"{run_source('axis')}: unknown axis {axis_token!r}; one of {', '.join(sorted(AXES))}")
        axis, scale = AXES[axis_token]
        axis_key = axis_token
        values_text = run_value("axis_values", "")
        if not values_text:
            raise ConfigError("axis is set but axis_values is empty")
        axis_values_raw = tuple(_num(v.strip(), "axis_values", run_source("axis_values"))
                                for v in values_text.split(",") if v.strip())
        if not axis_values_raw:
            raise ConfigError("axis_values is empty")
        axis_values = tuple(v * scale for v in axis_values_raw)

    zeta_text = str(run_value("zeta", "auto")).lower()
    if zeta_text == "auto":
        zeta: object = "auto"
    else:
        zeta = _num(zeta_text, "zeta", run_source("zeta"))
        if zeta < 0:
            raise ConfigError(f"zeta must be >= 0, got {zeta}")

    zeta_grid = _parse_zeta_grid(run_value("zeta_grid", "0:0.5:200"), run_source("zeta_grid"))

    solver = str(run_value("solver", "auto")).lower()
    if solver not in ("auto", "greedy", "exhaustive"):
        raise ConfigError(f"solver must be auto, greedy, or exhaustive, got {solver!r}")

    out_dir = str(run_value("out_dir", "runs"))
    artifact_dir = str(run_value("artifact_dir", "") or out_dir)

    return RunConfig(
        params=params, m_levels=m_levels, k_states=k_states, policies=policies,
        axis=axis, axis_key=axis_key, axis_values=axis_values,
        axis_values_raw=axis_values_raw, frames=frames, seed=seed,
        out_dir=out_dir, artifact_dir=artifact_dir, zeta=zeta,
        zeta_grid=zeta_grid, zeta_budget=zeta_budget, users=users,
        threads=threads, solver=solver, raw=raw,
    )


# ---------------------------------------------------------------------------
# policy construction
# ---------------------------------------------------------------------------

def _mbia_m_from_token(token: str, default_m: int) -> int:
    t = token.lower()
    if t == "mbia":
        return default_m
    if t.startswith("mbia-m") and t[6:].isdigit():
        return int(t[6:])
    raise ConfigError(f"bad MBIA policy token {token!r}; use MBIA or MBIA-M<levels>")


def _artifact_path(cfg: RunConfig, m: int) -> Path:
    return Path(cfg.artifact_dir) / f"mbia_M{m}_K{cfg.k_states}.pol"


def _resolve_zeta(cfg: RunConfig, point: SystemParams) -> float:
    if cfg.zeta == "auto":
        # calibration gets its own trajectory stream so the pick is not
        # tuned to the exact frames it will be scored on
        return calibrate_zeta(cfg.zeta_grid, point, cfg.zeta_budget, cfg.seed + 1)
    return float(cfg.zeta)


def _online_factories(cfg: RunConfig, mbia_mode: str):
    """Map config policy tokens to display-name -> factory(params) callables.

    mbia_mode: "load" reads trained artifacts (simulate), "train" runs the
    induction inline per sweep point.  Returns (factories, include_offline,
    zeta_log, artifact_log); the logs fill in as factories run.
    """
    factories: dict = {}
    include_offline = False
    zeta_log: dict = {}
    artifact_log: dict = {}
    lock = threading.Lock()

    def threshold_factory(point: SystemParams):
        lam1, lam2 = threshold_lambdas(point)
        z = _resolve_zeta(cfg, point)
        with lock:
            zeta_log[point.content_hash()[:12]] = {
                "zeta_star": z, "lambda1": lam1, "lambda2": lam2}
        return ThresholdHeuristic(ThresholdParams(z, lam1, lam2))

    def mbia_factory(m: int):
        def load(point: SystemParams):
            path = _artifact_path(cfg, m)
            if not path.is_file():
                raise ConfigError(
                    f"policy artifact not found: {path}; train it first with "
                    f"'hesnet mdp-train --set m_levels={m} --set k_states={cfg.k_states} "
                    f"--out {path.parent}'")
            table, _ = load_policy_artifact(path)
            if table.params_hash != point.content_hash():
                raise StalePolicyError(
                    f"{path} was trained for parameter hash {table.params_hash[:12]}..., "
                    f"this run hashes to {point.content_hash()[:12]}...; retrain with mdp-train")
            with lock:
                artifact_log[f"MBIA-M{m}"] = {
                    "path": str(path), "sha256": file_sha256(path),
                    "params_hash": table.params_hash}
            return MdpTablePolicy(table, name=f"MBIA-M{m}")

        def train(point: SystemParams):
            grid = build_grid(point, M=m, K=cfg.k_states)
            table, _, _ = monotone_backward_induction(build_mdp_model(point, grid), point.N)
            return MdpTablePolicy(table, name=f"MBIA-M{m}")

        return load if mbia_mode == "load" else train

    for token in cfg.policies:
        t = token.lower()
        if t in ("ga", "greedy", "exhaustive"):
            include_offline = True
        elif t == "gt":
            factories["GT"] = lambda p: GreedyTransmit()
        elif t in ("la", "lookahead", "look-ahead"):
            factories["Look-Ahead"] = (
                lambda p, m=cfg.m_levels, k=cfg.k_states: LookAhead(look_ahead_build(p, M=m, K=k)))
        elif t in ("th", "threshold"):
            factories["Threshold"] = threshold_factory
        elif t in ("gp-only", "gponly"):
            factories["GP-only"] = lambda p: GridOnlyPolicy()
        elif t.startswith("mbia"):
            m = _mbia_m_from_token(token, cfg.m_levels)
            factories[f"MBIA-M{m}"] = mbia_factory(m)
        else:
            raise ConfigError(f"unknown policy token {token!r}")
    if not factories and not include_offline:
        raise ConfigError("policy list is empty; set policies=... in the config")
    return factories, include_offline, zeta_log, artifact_log


# ---------------------------------------------------------------------------
# trajectory replay files
# ---------------------------------------------------------------------------

def _write_trajectory(path: Path, traj: FrameTrajectory) -> None:
    lines = ["# block gamma_G gamma_H e_H_j"]
    for i in range(traj.n_blocks):
        lines.append(f"{i + 1} {float(traj.gamma_G[i])!r} "
                     f"{float(traj.gamma_H[i])!r} {float(traj.e_H[i])!r}")
    path.write_text("\n".join(lines) + "\n")


def _read_trajectory(path: Path, params: SystemParams) -> FrameTrajectory:
    if not path.is_file():
        raise ConfigError(f"replay file not found: {path}")
    rows: list = []
    for lineno, rawline in enumerate(path.read_text().splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ReplayParseError(
                f"{path}:{lineno}: expected 4 fields (block gamma_G gamma_H e_H_j), "
                f"got {len(parts)}", line=lineno)
        try:
            idx = int(parts[0])
            g, h, e = (float(x) for x in parts[1:])
        except ValueError as exc:
            raise ReplayParseError(f"{path}:{lineno}: {exc}", line=lineno) from None
        if idx != len(rows) + 1:
            raise ReplayParseError(
                f"{path}:{lineno}: block index {idx}, expected {len(rows) + 1}", line=lineno)
        rows.append((g, h, e))
    if len(rows) != params.N:
        raise ReplayParseError(
            f"{path}: {len(rows)} blocks for an N={params.N} configuration")
    arr = np.asarray(rows, dtype=float)
    try:
        return FrameTrajectory(gamma_G=arr[:, 0], gamma_H=arr[:, 1], e_H=arr[:, 2])
    except InvalidParameterError as exc:
        raise ReplayParseError(f"{path}: {exc}") from exc


def _trajectory_sha256(traj: FrameTrajectory) -> str:
    h = hashlib.sha256()
    for arr in (traj.gamma_G, traj.gamma_H, traj.e_H):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_offline_solve(cfg: RunConfig, args) -> int:
    params = cfg.params
    if args.replay:
        traj = _read_trajectory(Path(args.replay), params)
        source = f"replay {args.replay}"
    else:
        traj = sample_trajectory(params, cfg.seed)
        source = f"seed {cfg.seed}"
    if args.dump:
        dump = Path(args.dump)
        dump.parent.mkdir(parents=True, exist_ok=True)
        _write_trajectory(dump, traj)
    inst = to_ip_instance(traj, params)

    solutions = {}
    alpha_g, cost_g = greedy_assignment(inst)
    solutions["greedy"] = (alpha_g, cost_g)
    want_exhaustive = cfg.solver == "exhaustive" or (
        cfg.solver == "auto" and params.N <= EXHAUSTIVE_CAP)
    if want_exhaustive:
        # over the cap this raises the resource-limit error (exit 3)
        solutions["exhaustive"] = exhaustive_optimal(inst)

    out = _out_dir(cfg)
    csv_path = out / "offline_schedule.csv"
    rows = []
    report: dict = {"params_hash": params.content_hash(), "n_blocks": params.N,
                    "trajectory_sha256": _trajectory_sha256(traj), "solvers": {}}
    for solver_name, (alpha, cost) in solutions.items():
        full = expand_solution(alpha, inst, params)
        report["solvers"][solver_name] = {
            "total_cost": cost, "grid_energy_j": full.grid_energy, "drops": full.drops}
        for i in range(params.N):
            rows.append({
                "solver": solver_name, "block": i + 1,
                "gamma_G": float(traj.gamma_G[i]), "gamma_H": float(traj.gamma_H[i]),
                "e_H_j": float(traj.e_H[i]), "alpha": int(alpha[i]),
                "i_G": int(full.I_G[i]), "i_H": int(full.I_H[i]), "i_D": int(full.I_D[i]),
                "p_G_w": float(full.p_G[i]), "p_H_w": float(full.p_H[i]),
            })
    write_rows_csv(csv_path, rows, header=OFFLINE_HEADER)
    if "exhaustive" in solutions:
        gap = cost_g - solutions["exhaustive"][1]
        report["gap"] = gap
        report["gap_relative"] = gap / solutions["exhaustive"][1] if solutions["exhaustive"][1] else 0.0
    summary_path = out / "offline_summary.json"
    summary_path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")

    print(f"offline solve: N={params.N}, {source}")
    for solver_name, info in report["solvers"].items():
        print(f"  {solver_name:<11} cost={info['total_cost']:.10g} "
              f"grid_mj={info['grid_energy_j'] * 1e3:.6g} drops={info['drops']}")
    if "gap" in report:
        print(f"  gap = {report['gap']:.10g} ({100 * report['gap_relative']:.3g}% above optimal)")
    print(f"wrote {csv_path} and {summary_path}")
    return 0


def cmd_mdp_train(cfg: RunConfig, args) -> int:
    params = cfg.params
    grid = build_grid(params, M=cfg.m_levels, K=cfg.k_states)
    model = build_mdp_model(params, grid)
    table, values, counts = monotone_backward_induction(model, params.N)
    out = _out_dir(cfg)
    path = out / f"mbia_M{cfg.m_levels}_K{cfg.k_states}.pol"
    save_policy_artifact(path, table, values)
    per_state_bound = 2 * cfg.k_states - 1
    log = {
        "m_levels": cfg.m_levels, "k_states": cfg.k_states, "n_blocks": params.N,
        "params_hash": params.content_hash(),
        "evaluations_total": int(counts.sum()),
        "bound_total": per_state_bound * cfg.m_levels * params.N,
        "per_state_max": int(counts.max()),
        "per_state_bound": per_state_bound,
        "dense_equivalent_total": cfg.k_states ** 2 * cfg.m_levels * params.N,
        "artifact": path.name,
        "artifact_sha256": file_sha256(path),
    }
    (out / f"mbia_M{cfg.m_levels}_K{cfg.k_states}.train.json").write_text(
        json.dumps(log, indent=2, sort_keys=True) + "\n")
    print(f"trained M={cfg.m_levels} K={cfg.k_states} N={params.N}: "
          f"{log['evaluations_total']} evaluations "
          f"(bound {log['bound_total']}, dense {log['dense_equivalent_total']})")
    print(f"wrote {path}")
    return 0


def _print_rows(rows) -> None:
    print(f"{'policy':<12} {'mean_cost':>12} {'stderr':>10} {'grid_mJ':>9} {'drop_%':>7}")
    for r in rows:
        print(f"{r['policy']:<12} {r['mean_total_cost']:>12.6g} "
              f"{r['stderr_total_cost']:>10.3g} {r['grid_energy_mj']:>9.4g} "
              f"{100 * r['drop_ratio']:>7.3f}")


def _finish_run(cfg: RunConfig, rows, csv_name: str, manifest_name: str, **extras) -> int:
    out = _out_dir(cfg)
    csv_path = out / csv_name
    write_rows_csv(csv_path, rows)
    manifest_path = out / manifest_name
    write_manifest(manifest_path, cfg.params,
                   config=dict(cfg.raw), csv=csv_name, csv_sha256=file_sha256(csv_path),
                   frames=cfg.frames, seed=cfg.seed, users=cfg.users, **extras)
    _print_rows(rows)
    print(f"wrote {csv_path} and {manifest_path}")
    return 0


def cmd_simulate(cfg: RunConfig, args) -> int:
    if not cfg.policies:
        raise ConfigError("policy list is empty; set policies=... in the config")
    if cfg.users > 1:
        rows = _multiuser_rows(cfg, cfg.params, "none", 0.0)
        return _finish_run(cfg, rows, "simulate.csv", "simulate_manifest.json",
                           command="simulate",
                           per_user_bandwidth_hz=cfg.params.W)
    factories, include_offline, zeta_log, artifact_log = _online_factories(cfg, "load")
    params = cfg.params
    gg, gh, eh = sample_trajectories(params, cfg.seed, cfg.frames)
    rows = []
    for name, factory in factories.items():
        policy = factory(params)
        costs, grid, drops = run_batch(policy, params, gg, gh, eh)
        rows.append(metrics_row(
            metrics_from_arrays(name, params, cfg.seed, costs, grid, drops), "none", 0.0))
    if include_offline:
        costs, grid, drops = offline_frame_metrics(params, gg, gh, eh, solver="greedy")
        rows.append(metrics_row(
            metrics_from_arrays("Greedy", params, cfg.seed, costs, grid, drops), "none", 0.0))
        if params.N <= EXHAUSTIVE_CAP:
            costs, grid, drops = offline_frame_metrics(params, gg, gh, eh, solver="exhaustive")
            rows.append(metrics_row(
                metrics_from_arrays("Exhaustive", params, cfg.seed, costs, grid, drops),
                "none", 0.0))
    return _finish_run(cfg, rows, "simulate.csv", "simulate_manifest.json",
                       command="simulate", zeta=zeta_log, artifacts=artifact_log)


def cmd_sweep(cfg: RunConfig, args) -> int:
    if cfg.axis is None:
        raise ConfigError("sweep needs axis=... and axis_values=... (e.g. axis=p_avg_mw)")
    if not cfg.policies:
        raise ConfigError("policy list is empty; set policies=... in the config")
    csv_name = f"sweep_{cfg.axis_key}.csv"
    if cfg.users > 1:
        rows = []
        for value in cfg.axis_values:
            point = apply_axis(cfg.params, cfg.axis, value)
            rows.extend(_multiuser_rows(cfg, point, cfg.axis, value))
        return _finish_run(cfg, rows, csv_name, "sweep_manifest.json",
                           command="sweep", axis=cfg.axis_key,
                           axis_values=list(cfg.axis_values_raw),
                           per_user_bandwidth_hz=cfg.params.W)
    factories, include_offline, zeta_log, artifact_log = _online_factories(cfg, "train")
    rows = sweep(cfg.params, cfg.axis, cfg.axis_values, factories, cfg.frames,
                 cfg.seed, include_offline=include_offline, threads=cfg.threads)
    return _finish_run(cfg, rows, csv_name, "sweep_manifest.json",
                       command="sweep", axis=cfg.axis_key,
                       axis_values=list(cfg.axis_values_raw),
                       zeta=zeta_log, artifacts=artifact_log,
                       threads=cfg.threads, mbia_trained_inline=True)


def _multiuser_rows(cfg: RunConfig, point: SystemParams, axis: str, value: float) -> list:
    """Two-or-more-user evaluation at one parameter point.

    Users are identical (same distances) and ride their own equal-bandwidth
    sub-carriers, so they couple only through the shared EH battery and the
    per-block sum-power caps of both stations.
    """
    users = cfg.users
    per_user = point
    plist = [per_user] * users
    p_h_sum, p_g_sum = point.p_H_max, point.p_G_max
    gg, gh, eh = sample_multiuser_trajectories(plist, cfg.seed, cfg.frames)
    rows = []
    for token in cfg.policies:
        t = token.lower()
        if t == "gt":
            policy = MultiuserGreedyTransmit(p_H_max_sum=p_h_sum)
            rows.append(_mu_run(policy, "GT", plist, gg, gh, eh, p_h_sum, p_g_sum,
                                cfg.seed, axis, value))
        elif t in ("th", "threshold"):
            lam1, lam2 = threshold_lambdas(per_user)
            z = _resolve_zeta(cfg, per_user)
            tps = [ThresholdParams(z, lam1, lam2)] * users
            policy = MultiuserThreshold(tps, p_H_max_sum=p_h_sum)
            rows.append(_mu_run(policy, "Threshold", plist, gg, gh, eh, p_h_sum,
                                p_g_sum, cfg.seed, axis, value))
        elif t in ("ga", "greedy"):
            rows.append(_mu_offline_run(plist, gg, gh, eh, p_h_sum, p_g_sum,
                                        cfg.seed, axis, value))
        else:
            raise ConfigError(
                f"policy {token!r} is single-user only; runs with users={users} "
                f"support GT, Threshold, GA")
    if not rows:
        raise ConfigError("policy list is empty; set policies=... in the config")
    return rows


def _mu_metrics(name, gg, seed, costs, grid, drops) -> RunMetrics:
    frames, users, n = gg.shape
    stderr = float(costs.std(ddof=1) / math.sqrt(frames)) if frames > 1 else 0.0
    return RunMetrics(
        policy=name, frames=frames, seed=seed,
        mean_total_cost=float(costs.mean()), stderr_total_cost=stderr,
        mean_grid_energy=float(grid.mean()),
        drop_ratio=float(drops.sum() / (frames * users * n)),
    )


def _mu_run(policy, name, plist, gg, gh, eh, p_h_sum, p_g_sum, seed, axis, value):
    frames = gg.shape[0]
    costs = np.zeros(frames)
    grid = np.zeros(frames)
    drops = np.zeros(frames, dtype=np.int64)
    for f in range(frames):
        costs[f], grid[f], drops[f] = run_frame_multiuser(
            policy, gg[f], gh[f], eh[f], plist,
            p_H_max_sum=p_h_sum, p_G_max_sum=p_g_sum)
    return metrics_row(_mu_metrics(name, gg, seed, costs, grid, drops), axis, value)


def _mu_offline_run(plist, gg, gh, eh, p_h_sum, p_g_sum, seed, axis, value):
    frames, users, n = gg.shape
    costs = np.zeros(frames)
    grid = np.zeros(frames)
    drops = np.zeros(frames, dtype=np.int64)
    for f in range(frames):
        instances = [
            to_ip_instance(FrameTrajectory(gamma_G=gg[f, u], gamma_H=gh[f, u], e_H=eh[f]),
                           plist[u])
            for u in range(users)
        ]
        sel, _ = multiuser_greedy_assignment(instances, p_H_max_sum=p_h_sum)
        costs[f], grid[f], drops[f] = run_frame_multiuser(
            ScriptedMultiuserAssignment(sel), gg[f], gh[f], eh[f], plist,
            p_H_max_sum=p_h_sum, p_G_max_sum=p_g_sum)
    return metrics_row(_mu_metrics("Greedy", gg, seed, costs, grid, drops), axis, value)


def cmd_calibrate_zeta(cfg: RunConfig, args) -> int:
    point = cfg.params
    lam1, lam2 = threshold_lambdas(point)
    zeta_star, costs = calibrate_zeta(cfg.zeta_grid, point, cfg.zeta_budget,
                                      cfg.seed, return_costs=True)
    out = _out_dir(cfg)
    doc = {
        "zeta_star": zeta_star, "lambda1": lam1, "lambda2": lam2,
        "budget_frames": cfg.zeta_budget, "seed": cfg.seed, "users": cfg.users,
        "params_hash": point.content_hash(),
        "grid": {"start": cfg.zeta_grid[0], "stop": cfg.zeta_grid[-1],
                 "count": len(cfg.zeta_grid)},
        "cost_at_star": float(np.min(costs)),
    }
    path = out / "zeta.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"zeta* = {zeta_star:g} (cost {doc['cost_at_star']:.6g} over "
          f"{cfg.zeta_budget} frames; lambda1={lam1:.6g}, lambda2={lam2:.6g})")
    print(f"wrote {path}")
    return 0


def cmd_quantize_info(cfg: RunConfig, args) -> int:
    grid = build_grid(cfg.params, M=cfg.m_levels, K=cfg.k_states)
    print(f"battery: M={grid.M} levels over [0, {float(grid.B_m)!r}] J "
          f"(bin width {float(grid.B_m / grid.M)!r} J)")
    for m in range(grid.M):
        print(f"  {m:4d} level={float(grid.battery_levels[m])!r} "
              f"bin=[{float(grid.bin_edges[m])!r}, {float(grid.bin_edges[m + 1])!r})")
    for label, levels, bounds in (("G", grid.levels_G, grid.bounds_G),
                                  ("H", grid.levels_H, grid.bounds_H)):
        print(f"{label}-channel: K={grid.K} equi-probable states")
        for k in range(grid.K):
            hi = bounds[k + 1]
            hi_txt = "inf" if math.isinf(hi) else repr(float(hi))
            print(f"  {k:4d} level={float(levels[k])!r} "
                  f"interval=[{float(bounds[k])!r}, {hi_txt})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing and dispatch
# ---------------------------------------------------------------------------

def _flag_overrides(args) -> dict:
    overrides: dict = {}
    for pair in getattr(args, "assignments", []) or []:
        key, sep, value = pair.partition("=")
        if not sep or not key.strip() or not value.strip():
            raise ConfigError(f"--set needs KEY=VALUE, got {pair!r}")
        overrides[key.strip().lower()] = value.strip()
    flag_map = {
        "out": "out_dir", "frames": "frames", "seed": "seed", "threads": "threads",
        "m_levels": "m_levels", "k_states": "k_states", "artifact_dir": "artifact_dir",
        "axis": "axis", "axis_values": "axis_values", "zeta_grid": "zeta_grid",
        "budget": "zeta_budget", "solver": "solver",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    return overrides


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", metavar="NAME",
                        help="built-in configuration: default, fig3, fig4, "
                             "fig5-two-user, fig6, fig7")
    common.add_argument("--config", metavar="PATH", help="key=value configuration file")
    common.add_argument("--set", dest="assignments", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory (out_dir)")
    common.add_argument("--frames", type=int, help="Monte Carlo frames")
    common.add_argument("--seed", type=int, help="base RNG seed")
    common.add_argument("--threads", type=int, help="max concurrent sweep points")

    parser = argparse.ArgumentParser(
        prog="hesnet",
        description="Grid-energy / packet-drop scheduling for a hybrid "
                    "grid-plus-harvesting base-station pair.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("offline-solve", parents=[common],
                       help="solve one frame with full side information")
    p.add_argument("--replay", metavar="PATH", help="read the trajectory from a dump file")
    p.add_argument("--dump", metavar="PATH", help="write the trajectory in replay format")
    p.add_argument("--solver", choices=["auto", "greedy", "exhaustive"],
                   help="offline solver selection")

    p = sub.add_parser("mdp-train", parents=[common],
                       help="train a decision table by monotone backward induction")
    p.add_argument("--m-levels", dest="m_levels", type=int, help="battery levels M")
    p.add_argument("--k-states", dest="k_states", type=int, help="channel states K per link")

    p = sub.add_parser("simulate", parents=[common],
                       help="Monte Carlo at one parameter point")
    p.add_argument("--artifact-dir", dest="artifact_dir", metavar="DIR",
                   help="where trained policy artifacts live (default: out_dir)")

    p = sub.add_parser("sweep", parents=[common],
                       help="Monte Carlo across one parameter axis")
    p.add_argument("--axis", metavar="KEY",
                   help="axis key: d_h_m, p_avg_mw, w_d, or p_h_max_w")
    p.add_argument("--axis-values", dest="axis_values", metavar="V1,V2,...",
                   help="axis points in the key's units")

    p = sub.add_parser("calibrate-zeta", parents=[common],
                       help="pick the threshold scale by simulated search")
    p.add_argument("--zeta-grid", dest="zeta_grid", metavar="START:STEP:STOP",
                   help="candidate grid (default 0:0.5:200)")
    p.add_argument("--budget", type=int, metavar="FRAMES",
                   help="frames per candidate")

    sub.add_parser("quantize-info", parents=[common],
                   help="print battery and channel quantization tables")
    # quantize-info reuses m_levels / k_states through --set

    return parser


DISPATCH = {
    "offline-solve": cmd_offline_solve,
    "mdp-train": cmd_mdp_train,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "calibrate-zeta": cmd_calibrate_zeta,
    "quantize-info": cmd_quantize_info,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(preset=args.preset, config_path=args.config,
                             overrides=_flag_overrides(args))
        return DISPATCH[args.command](cfg, args)
    except ReplayParseError as exc:
        _fail(exc)
        return 2
    except (StalePolicyError, ModelMismatchError) as exc:
        _fail(exc)
        return 4
    except ResourceLimitError as exc:
        _fail(exc)
        return 3
    except (ConfigError, InvalidParameterError) as exc:
        _fail(exc)
        return 2
    except HesnetError as exc:
        _fail(exc)
        return 2


def _fail(exc) -> None:
    print(f"hesnet: error: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
