"""Config resolution, subcommand behavior, exit codes, output files."""

import json
import math

import numpy as np
import pytest

from hesnet.cli import AXES, PARAM_KEYS, RunConfig, main, parse_kv_text, resolve_config
from hesnet.errors import ConfigError
from hesnet.mdp import load_policy_artifact
from hesnet.model import SystemParams

GOLDEN_HEADER = ("policy,axis,axis_value,mean_total_cost,stderr_total_cost,"
                 "grid_energy_j,grid_energy_mj,drop_ratio,frames,seed")

# small-everything overrides so subcommand tests stay fast
SMALL = ["--set", "n_blocks=8", "--set", "m_levels=4", "--set", "k_states=2",
         "--set", "zeta=10", "--frames", "30"]


# ---------------------------------------------------------------------------
# key=value parsing and layering
# ---------------------------------------------------------------------------

def test_parse_kv_text_basics():
    kv = parse_kv_text("a = 1\n# comment\n\nb=two  # trailing\n")
    assert kv == {"a": "1", "b": "two"}


def test_parse_kv_text_rejects_bad_lines():
    with pytest.raises(ConfigError, match="key = value"):
        parse_kv_text("just words\n")
    with pytest.raises(ConfigError, match="duplicate"):
        parse_kv_text("a=1\na=2\n")
    with pytest.raises(ConfigError, match=":2:"):
        parse_kv_text("a=1\n=3\n")


def test_default_config_matches_reference_parameters():
    cfg = resolve_config()
    p = cfg.params
    ref = SystemParams()
    assert p.sigma2 == pytest.approx(10 ** -12.75, rel=1e-12)
    assert (p.W, p.tau, p.N, p.R) == (ref.W, ref.tau, ref.N, ref.R)
    assert (p.d_G, p.d_H, p.p_G_max, p.p_H_max) == (50.0, 30.0, 2.0, 0.5)
    assert p.mu_G == pytest.approx(1.0, rel=1e-12)
    assert p.E_m == pytest.approx(4e-5, rel=1e-12)
    assert p.B_m == pytest.approx(2e-3, rel=1e-12)
    assert cfg.m_levels == 100 and cfg.k_states == 25
    assert cfg.zeta == "auto"
    assert len(cfg.zeta_grid) == 401
    assert cfg.zeta_grid[0] == 0.0 and cfg.zeta_grid[-1] == pytest.approx(200.0)


def test_db_keys_convert_at_parse_time():
    cfg = resolve_config(overrides={"g0_db": "-30", "mu_g_db": "3.0",
                                    "sigma2_dbm": "-90"})
    assert cfg.params.g0 == pytest.approx(1e-3, rel=1e-12)
    assert cfg.params.mu_G == pytest.approx(10 ** 0.3, rel=1e-12)
    assert cfg.params.sigma2 == pytest.approx(1e-12, rel=1e-12)


def test_si_unit_override_replaces_db_spelling():
    cfg = resolve_config(overrides={"sigma2_w": "2e-13"})
    assert cfg.params.sigma2 == 2e-13
    assert "sigma2_w" in cfg.raw and "sigma2_dbm" not in cfg.raw


def test_conflicting_unit_keys_in_one_source_rejected():
    with pytest.raises(ConfigError, match="both set sigma2"):
        resolve_config(overrides={"sigma2_dbm": "-97.5", "sigma2_w": "1e-13"})


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="unknown key 'frequency'"):
        resolve_config(overrides={"frequency": "1"})


def test_invalid_physical_config_is_config_error():
    with pytest.raises(ConfigError, match="invalid physical configuration"):
        resolve_config(overrides={"tau_ms": "0"})


def test_axis_values_converted_to_si():
    cfg = resolve_config(overrides={"axis": "p_avg_mw", "axis_values": "10,20"})
    assert cfg.axis == "P_avg"
    assert cfg.axis_values == (pytest.approx(0.01), pytest.approx(0.02))
    assert cfg.axis_values_raw == (10.0, 20.0)
    with pytest.raises(ConfigError, match="unknown axis"):
        resolve_config(overrides={"axis": "voltage", "axis_values": "1"})
    with pytest.raises(ConfigError, match="axis_values"):
        resolve_config(overrides={"axis": "w_d"})


def test_zeta_parsing():
    assert resolve_config(overrides={"zeta": "7.5"}).zeta == 7.5
    with pytest.raises(ConfigError, match="zeta"):
        resolve_config(overrides={"zeta": "-1"})
    grid = resolve_config(overrides={"zeta_grid": "0:5:30"}).zeta_grid
    assert grid == tuple(float(x) for x in range(0, 31, 5))
    with pytest.raises(ConfigError, match="zeta_grid"):
        resolve_config(overrides={"zeta_grid": "0,5,30"})


def test_all_presets_resolve():
    for name, users in [("fig3", 1), ("fig4", 1), ("fig5-two-user", 2),
                        ("fig6", 1), ("fig7", 1)]:
        cfg = resolve_config(preset=name)
        assert cfg.users == users
        assert cfg.axis is not None and cfg.policies
    assert resolve_config(preset="fig3").axis == "d_H"
    with pytest.raises(ConfigError, match="available"):
        resolve_config(preset="fig99")


def test_flag_style_overrides_win():
    assert resolve_config(overrides={"frames": "7"}).frames == 7
    assert resolve_config(preset="fig4", overrides={"axis_values": "20"}).axis_values_raw == (20.0,)


# ---------------------------------------------------------------------------
# offline-solve
# ---------------------------------------------------------------------------

def test_offline_solve_replay_round_trip(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    dump = tmp_path / "traj.txt"
    base = ["offline-solve", "--set", "n_blocks=10", "--seed", "5"]
    assert main(base + ["--out", str(out1), "--dump", str(dump)]) == 0
    assert main(base + ["--out", str(out2), "--replay", str(dump)]) == 0
    assert (out1 / "offline_schedule.csv").read_bytes() == (out2 / "offline_schedule.csv").read_bytes()
    assert (out1 / "offline_summary.json").read_bytes() == (out2 / "offline_summary.json").read_bytes()
    report = json.loads((out1 / "offline_summary.json").read_text())
    assert report["gap"] >= 0
    assert set(report["solvers"]) == {"greedy", "exhaustive"}


def test_offline_schedule_header_and_partition(tmp_path):
    assert main(["offline-solve", "--set", "n_blocks=6", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "offline_schedule.csv").read_text().splitlines()
    assert lines[0] == "solver,block,gamma_G,gamma_H,e_H_j,alpha,i_G,i_H,i_D,p_G_w,p_H_w"
    for line in lines[1:]:
        parts = line.split(",")
        assert int(parts[6]) + int(parts[7]) + int(parts[8]) == 1  # one of serve/serve/drop


def test_offline_solve_replay_errors_carry_line_numbers(tmp_path, capsys):
    bad = tmp_path / "bad.txt"
    bad.write_text("1 0.5 0.5 1e-5\n2 oops 0.5 1e-5\n")
    code = main(["offline-solve", "--set", "n_blocks=2", "--replay", str(bad),
                 "--out", str(tmp_path)])
    assert code == 2
    assert ":2:" in capsys.readouterr().err

    short = tmp_path / "short.txt"
    short.write_text("1 0.5 0.5 1e-5\n")
    assert main(["offline-solve", "--set", "n_blocks=9", "--replay", str(short),
                 "--out", str(tmp_path)]) == 2

    wide = tmp_path / "wide.txt"
    wide.write_text("1 0.5 0.5 1e-5 9\n")
    code = main(["offline-solve", "--set", "n_blocks=1", "--replay", str(wide),
                 "--out", str(tmp_path)])
    assert code == 2
    assert "4 fields" in capsys.readouterr().err


def test_offline_solve_exhaustive_over_cap_is_resource_limit(tmp_path):
    assert main(["offline-solve", "--set", "n_blocks=60", "--solver", "exhaustive",
                 "--out", str(tmp_path)]) == 3


def test_offline_solve_greedy_only_over_cap(tmp_path):
    assert main(["offline-solve", "--set", "n_blocks=60", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "offline_summary.json").read_text())
    assert set(report["solvers"]) == {"greedy"} and "gap" not in report


# ---------------------------------------------------------------------------
# mdp-train
# ---------------------------------------------------------------------------

def test_mdp_train_writes_artifact_and_retrains_identically(tmp_path):
    argv = ["mdp-train"] + SMALL + ["--out", str(tmp_path)]
    assert main(argv) == 0
    art = tmp_path / "mbia_M4_K2.pol"
    log_path = tmp_path / "mbia_M4_K2.train.json"
    first = art.read_bytes()
    log = json.loads(log_path.read_text())
    assert log["evaluations_total"] <= log["bound_total"]
    assert log["per_state_max"] <= log["per_state_bound"] == 3
    assert log["bound_total"] == 3 * 4 * 8
    table, values = load_policy_artifact(art)
    assert table.N == 8 and values is not None
    assert main(argv) == 0
    assert art.read_bytes() == first  # retraining is byte-identical


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def test_simulate_loads_artifact_and_pins_csv_header(tmp_path):
    assert main(["mdp-train"] + SMALL + ["--out", str(tmp_path)]) == 0
    argv = ["simulate"] + SMALL + ["--set", "policies=GT,Threshold,MBIA-M4,GA",
                                   "--out", str(tmp_path)]
    assert main(argv) == 0
    lines = (tmp_path / "simulate.csv").read_text().splitlines()
    assert lines[0] == GOLDEN_HEADER
    names = [line.split(",", 1)[0] for line in lines[1:]]
    assert names == ["GT", "Threshold", "MBIA-M4", "Greedy", "Exhaustive"]
    manifest = json.loads((tmp_path / "simulate_manifest.json").read_text())
    assert manifest["params_hash"] == resolve_config(
        overrides={"n_blocks": "8", "m_levels": "4", "k_states": "2"}).params.content_hash()
    art = manifest["artifacts"]["MBIA-M4"]
    assert art["path"].endswith("mbia_M4_K2.pol") and len(art["sha256"]) == 64
    assert manifest["csv_sha256"]


def test_simulate_missing_artifact_names_expected_path(tmp_path, capsys):
    code = main(["simulate"] + SMALL + ["--set", "policies=MBIA-M4",
                                        "--out", str(tmp_path)])
    assert code == 2
    err = capsys.readouterr().err
    assert "mbia_M4_K2.pol" in err and "mdp-train" in err


def test_simulate_stale_artifact_is_exit_4(tmp_path, capsys):
    assert main(["mdp-train"] + SMALL + ["--out", str(tmp_path)]) == 0
    code = main(["simulate"] + SMALL + ["--set", "policies=MBIA-M4",
                                        "--set", "w_d=0.3", "--out", str(tmp_path)])
    assert code == 4
    assert "retrain" in capsys.readouterr().err


def test_simulate_rejects_unknown_policy(tmp_path):
    assert main(["simulate"] + SMALL + ["--set", "policies=Oracle",
                 "--out", str(tmp_path)]) == 2


def test_simulate_two_user_rejects_table_policies(tmp_path):
    assert main(["simulate"] + SMALL + ["--set", "users=2",
                 "--set", "policies=MBIA-M4", "--out", str(tmp_path)]) == 2


def test_simulate_two_user_runs(tmp_path):
    assert main(["simulate"] + SMALL + ["--set", "users=2",
                 "--set", "policies=GT,Threshold,GA", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "simulate.csv").read_text().splitlines()
    assert lines[0] == GOLDEN_HEADER
    assert [l.split(",", 1)[0] for l in lines[1:]] == ["GT", "Threshold", "Greedy"]
    manifest = json.loads((tmp_path / "simulate_manifest.json").read_text())
    assert manifest["users"] == 2


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def test_sweep_axis_required(tmp_path):
    assert main(["sweep"] + SMALL + ["--set", "policies=GT",
                 "--out", str(tmp_path)]) == 2


def test_sweep_rows_and_threads_determinism(tmp_path):
    base = ["sweep"] + SMALL + ["--set", "policies=GT,MBIA-M4,GA",
                                "--axis", "w_d", "--axis-values", "0.01,1.0"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(base + ["--out", str(out1), "--threads", "1"]) == 0
    assert main(base + ["--out", str(out2), "--threads", "2"]) == 0
    text1 = (out1 / "sweep_w_d.csv").read_text()
    assert text1 == (out2 / "sweep_w_d.csv").read_text()
    lines = text1.splitlines()
    assert lines[0] == GOLDEN_HEADER
    assert len(lines) == 1 + 2 * 4  # two points x (GT, MBIA-M4, Greedy, Exhaustive)
    manifest = json.loads((out1 / "sweep_manifest.json").read_text())
    assert manifest["axis"] == "w_d"
    assert manifest["axis_values"] == [0.01, 1.0]
    assert manifest["mbia_trained_inline"] is True


def test_sweep_preset_smoke(tmp_path):
    assert main(["sweep", "--preset", "fig7"] + SMALL +
                ["--set", "axis_values=0.01,1.0", "--set", "policies=GT,GP-only,GA",
                 "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep_w_d.csv").read_text().splitlines()
    names = {l.split(",", 1)[0] for l in lines[1:]}
    assert names == {"GT", "GP-only", "Greedy", "Exhaustive"}


# ---------------------------------------------------------------------------
# calibrate-zeta / quantize-info
# ---------------------------------------------------------------------------

def test_calibrate_zeta_outputs(tmp_path):
    assert main(["calibrate-zeta"] + SMALL + ["--zeta-grid", "0:10:30",
                 "--budget", "50", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "zeta.json").read_text())
    assert doc["zeta_star"] in (0.0, 10.0, 20.0, 30.0)
    assert doc["budget_frames"] == 50
    assert doc["lambda1"] > 0 and doc["lambda2"] > 0
    assert doc["grid"]["count"] == 4


def test_quantize_info_prints_reference_levels(capsys):
    assert main(["quantize-info", "--set", "m_levels=4", "--set", "k_states=2"]) == 0
    out = capsys.readouterr().out
    assert "battery: M=4" in out
    assert repr(1.0 - math.log(2.0)) in out   # low equi-probable state, unit mean
    assert repr(1.0 + math.log(2.0)) in out   # high state
    assert "0.00175" in out                   # top battery level of a 2 mJ pack


def test_main_rejects_malformed_set(tmp_path):
    assert main(["simulate", "--set", "oops", "--out", str(tmp_path)]) == 2
