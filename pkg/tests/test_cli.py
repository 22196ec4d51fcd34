"""Config parsing, CSV serialization, and the four CLI subcommands."""

from __future__ import annotations

import numpy as np
import pytest

import visco1d as v
from visco1d.cli import (
    ConfigError,
    cli_main,
    parse_config,
    read_state_csv,
    write_state_csv,
)


MINIMAL = "[scenario]\nname = constant\n"


def write_cfg(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return str(p)


# ======================================================================
# parsing
# ======================================================================


def test_minimal_config_fills_every_default():
    rc = parse_config(MINIMAL)
    sc = rc.scenario
    assert sc.name == "constant"
    assert sc.levels == (64, 128, 256, 512)
    assert sc.couple_dt_dx is True
    assert rc.solver == v.SolverConfig()
    assert rc.out_dir == "."
    assert rc.warnings == ()


def test_to_text_round_trips_through_parse():
    rc = parse_config(
        "[scenario]\n"
        "name = smooth-bump\n"
        "T = 0.125\n"
        "levels = 8,16,32\n"
        "[solver]\n"
        "newton_tol = 1e-11\n"
        "[output]\n"
        "out_dir = results\n"
    )
    rc2 = parse_config(rc.to_text())
    assert rc2.scenario == rc.scenario
    assert rc2.solver == rc.solver
    assert rc2.out_dir == rc.out_dir
    # and the round-trip is a fixed point of serialization
    assert rc2.to_text() == rc.to_text()


def test_auto_newton_tol_round_trips():
    rc = parse_config(MINIMAL)
    assert rc.solver.newton_tol is None
    assert "newton_tol = auto" in rc.to_text()
    assert parse_config(rc.to_text()).solver.newton_tol is None


def test_comments_and_blank_lines_ignored():
    rc = parse_config(
        "# leading comment\n\n[scenario]\n"
        "name = constant   ; trailing comment\n"
        "T = 0.5  # another\n"
    )
    assert rc.scenario.T == 0.5


def test_gamma_outside_window_is_warning_not_error():
    rc = parse_config(MINIMAL + "gamma = 1.4\n")
    assert rc.scenario.params.gamma == 1.4
    assert any("outside 3/2<gamma<2 convergence regime" in w for w in rc.warnings)


def test_negative_mu_is_error_naming_key_and_line():
    text = "[scenario]\nname = constant\nmu = -0.5\n"
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    msg = str(err.value)
    assert "mu" in msg
    assert "(line 3)" in msg


def test_unknown_section_key_and_duplicate_are_line_annotated():
    with pytest.raises(ConfigError, match=r"unknown section.*\(line 1\)"):
        parse_config("[physics]\n")
    with pytest.raises(ConfigError, match=r"unknown key 'rho'.*\(line 3\)"):
        parse_config("[scenario]\nname = constant\nrho = 1\n")
    with pytest.raises(ConfigError, match=r"duplicate key 'T'.*\(line 4\)"):
        parse_config("[scenario]\nname = constant\nT = 0.1\nT = 0.2\n")
    with pytest.raises(ConfigError, match=r"before any section"):
        parse_config("name = constant\n")
    with pytest.raises(ConfigError, match=r"key = value"):
        parse_config("[scenario]\nname\n")


def test_missing_or_unknown_name():
    with pytest.raises(ConfigError, match="name"):
        parse_config("[scenario]\nT = 0.1\n")
    with pytest.raises(ConfigError, match="unknown scenario"):
        parse_config("[scenario]\nname = quantum\n")
    # an unknown name with an explicit profile is a custom scenario
    rc = parse_config("[scenario]\nname = quantum\nrho0 = constant:2\n")
    assert rc.scenario.rho0 == "constant:2"


def test_malformed_values_name_key_and_line():
    with pytest.raises(ConfigError, match=r"'L' is not a number.*\(line 3\)"):
        parse_config("[scenario]\nname = constant\nL = fast\n")
    with pytest.raises(ConfigError, match=r"not on/off.*\(line 3\)"):
        parse_config("[scenario]\nname = constant\ncouple_dt_dx = maybe\n")
    with pytest.raises(ConfigError, match=r"'levels' is not an integer"):
        parse_config("[scenario]\nname = constant\nlevels = 8,big\n")


# ======================================================================
# state CSV
# ======================================================================


def run_cli(argv):
    return cli_main(argv)


def constant_cfg(tmp_path, extra=""):
    return write_cfg(tmp_path, "[scenario]\nname = constant\nlevels = 2\n" + extra)


def test_run_constant_state_csv_shape(tmp_path, capsys):
    cfg = constant_cfg(tmp_path)
    out = tmp_path / "out"
    assert run_cli(["run", "--config", cfg, "--out", str(out)]) == 0
    assert "wrote" in capsys.readouterr().out
    lines = (out / "state.csv").read_text().splitlines()
    data = [ln for ln in lines if ln and not ln.startswith("#") and not ln.startswith("k,")]
    # N=2, T=0.25, dt=dx=0.5 -> one step -> time levels k=0 and k=1
    ks = sorted({int(ln.split(",")[0]) for ln in data})
    assert ks == [0, 1]
    for k in ks:
        rows = [ln.split(",") for ln in data if ln.startswith(f"{k},")]
        assert len(rows) == 3  # one per velocity face
        rho_entries = [r[4] for r in rows if r[4]]
        assert len(rho_entries) == 2  # one per cell
        assert all(float(e) == 1.0 for e in rho_entries)
        assert all(float(r[6]) == 0.0 for r in rows)


def test_rerun_is_byte_identical(tmp_path):
    cfg = constant_cfg(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(["run", "--config", cfg, "--out", str(a)]) == 0
    assert run_cli(["run", "--config", cfg, "--out", str(b)]) == 0
    assert (a / "state.csv").read_bytes() == (b / "state.csv").read_bytes()


def test_state_csv_round_trip_is_bit_exact(tmp_path):
    sc = next(s for s in v.builtin_scenarios() if s.name == "smooth-bump")
    traj = v.run(sc, sc.grid_for(8), sc.params)
    path = str(tmp_path / "state.csv")
    write_state_csv(traj, path)
    rho, u = read_state_csv(path)
    assert np.array_equal(rho, traj.rho_matrix)
    assert np.array_equal(u, traj.u_matrix)


# ======================================================================
# refine / verify / flux subcommands
# ======================================================================


def test_refine_constant_reports_exact_orders(tmp_path, capsys):
    cfg = constant_cfg(tmp_path)
    out = tmp_path / "rep"
    code = run_cli(["refine", "--config", cfg, "--levels", "8,16,32", "--out", str(out)])
    assert code == 0
    text = (out / "report.csv").read_text()
    assert "exact (0 magnitude)" in text
    assert "# summary" in text
    assert "# order E1: observed exact" in text
    assert "floor" in text


def test_refine_rejects_too_few_levels(tmp_path, capsys):
    cfg = constant_cfg(tmp_path)
    code = run_cli(["refine", "--config", cfg, "--levels", "8,16", "--out", str(tmp_path)])
    assert code == 2
    assert "at least 3 levels" in capsys.readouterr().err


def test_refine_rejects_garbage_level_override(tmp_path, capsys):
    cfg = constant_cfg(tmp_path)
    code = run_cli(["refine", "--config", cfg, "--levels", "8,many", "--out", str(tmp_path)])
    assert code == 2


def test_verify_constant_all_identities_pass(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[scenario]\nname = constant\nlevels = 8,16,32\n")
    assert run_cli(["verify", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "identity checks passed" in out
    assert "FAIL" not in out
    assert out.count("PASS") >= 10


def test_verify_smooth_bump_passes_too(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[scenario]\nname = smooth-bump\nlevels = 16,32,64\n")
    assert run_cli(["verify", "--config", cfg]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_flux_subcommand_writes_ledger(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path,
        "[scenario]\nname = smooth-bump\nlevels = 8\n"
        f"[output]\nout_dir = {tmp_path / 'fx'}\n",
    )
    assert run_cli(["flux", "--config", cfg]) == 0
    text = (tmp_path / "fx" / "flux.csv").read_text()
    assert text.splitlines()[0].startswith("#")
    body = [ln for ln in text.splitlines() if not ln.startswith("#")]
    assert body[0] == "term,value"
    terms = {ln.split(",")[0] for ln in body[1:]}
    for needed in ("m", "lhs", "S1", "S2", "E1", "E2", "rhs_total",
                   "identity_gap", "pairing_gap", "decomposition_gap"):
        assert needed in terms
    gap = float(next(ln.split(",")[1] for ln in body if ln.startswith("identity_gap,")))
    assert abs(gap) < 1e-10


def test_flux_step_out_of_range_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[scenario]\nname = constant\nlevels = 4\n")
    assert run_cli(["flux", "--config", cfg, "--step", "99"]) == 2


def test_warning_goes_to_stderr_and_run_succeeds(tmp_path, capsys):
    cfg = write_cfg(
        tmp_path,
        "[scenario]\nname = smooth-bump\ngamma = 1.4\nlevels = 4\nT = 0.25\n",
    )
    assert run_cli(["run", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    captured = capsys.readouterr()
    assert "WARNING" in captured.err
    assert "outside 3/2<gamma<2" in captured.err


def test_corrupted_config_exits_2_with_location(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[scenario]\nname = constant\nmu = -3\n")
    assert run_cli(["run", "--config", cfg, "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "mu" in err
    assert "line 3" in err


def test_missing_config_file_exits_2(tmp_path, capsys):
    code = run_cli(["run", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path)])
    assert code == 2
    assert "cannot read config" in capsys.readouterr().err
