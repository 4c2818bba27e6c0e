"""Experiment registry, reporting, sweeps, and the CLI."""

import os

import numpy as np
import pytest

import itopath.bismut
import itopath.conditional
import itopath.functionals
import itopath.geometry
import itopath.ito_map
import itopath.wiener
from itopath import cli, harness
from itopath.harness import (
    CSV_FIELDS,
    REGISTRY,
    ExperimentConfig,
    make_config,
    report_csv,
    report_text,
    run_experiment,
    sweep,
    write_report,
)

MODULES = [
    itopath.geometry,
    itopath.wiener,
    itopath.ito_map,
    itopath.bismut,
    itopath.functionals,
    itopath.conditional,
]

# operations every registry must exercise somewhere, by public name
CORE_OPERATIONS = [
    "solve_sde",
    "parallel_transport",
    "damped_transport",
    "derivative_of_ito_map",
    "bismut_inner",
    "project_cm_to_bismut",
    "bismut_to_cm",
    "conditional_bismut_projection",
    "resample_noise",
    "conditional_expectation",
    "conditional_ito_check",
    "pathspace_divergence",
    "divergence_projection_check",
    "weak_derivative",
    "conditional_chaos",
]

TINY = dict(dt=0.02, n_paths=8, n_resamples=8, seed=7)


def _resolves(name):
    return any(hasattr(mod, name) for mod in MODULES)


def test_registry_exercises_resolve():
    for spec in REGISTRY.values():
        assert spec.exercises, spec.experiment_id
        for name in spec.exercises:
            assert _resolves(name), f"{spec.experiment_id} lists unknown {name}"


def test_registry_covers_core_operations():
    exercised = set()
    for spec in REGISTRY.values():
        exercised.update(spec.exercises)
    missing = [op for op in CORE_OPERATIONS if op not in exercised]
    assert not missing, f"no experiment exercises {missing}"


def test_registry_rows_complete():
    for spec in REGISTRY.values():
        assert spec.runner is not None
        assert spec.description
        assert spec.sweep_row
        cfg = make_config(spec.experiment_id)
        assert cfg.experiment_id == spec.experiment_id
        cfg.validate()


def test_make_config_applies_overrides():
    cfg = make_config("brownian_marginal", n_paths=12, seed=5)
    assert cfg.n_paths == 12
    assert cfg.seed == 5
    assert cfg.manifold == "sphere:2"
    with pytest.raises(ValueError):
        make_config("no_such_experiment")


def test_config_validation_errors():
    with pytest.raises(ValueError):
        make_config("brownian_marginal", dt=0.3).validate()  # does not divide T
    with pytest.raises(ValueError):
        make_config("brownian_marginal", n_paths=0).validate()
    with pytest.raises(ValueError):
        make_config("brownian_marginal", horizon=-1.0).validate()
    with pytest.raises(ValueError):
        ExperimentConfig("no_such_experiment").validate()


def test_csv_schema_and_determinism():
    cfg = make_config("conditional_ito_integral", **TINY)
    a = report_csv(run_experiment(cfg))
    b = report_csv(run_experiment(cfg))
    assert a == b
    header = a.splitlines()[0]
    assert header == ",".join(CSV_FIELDS)
    assert header == ("check_id,lhs,rhs,se_lhs,se_rhs,z,"
                      "n_paths,n_resamples,dt,seed,pass")


def test_report_row_lookup_and_text():
    cfg = make_config("covariant_residual", n_paths=4)
    rep = run_experiment(cfg)
    row = rep.row("covariant_residual_max")
    assert row.passed
    with pytest.raises(KeyError):
        rep.row("no_such_row")
    text = report_text(rep)
    assert "covariant_residual_max" in text
    assert "PASS" in text


def test_write_report_creates_files(tmp_path):
    cfg = make_config("covariant_residual", n_paths=4,
                      out_dir=str(tmp_path / "out"))
    rep = run_experiment(cfg)
    paths = write_report(rep)
    assert all(os.path.exists(p) for p in paths)
    csv_files = [p for p in paths if p.endswith(".csv")]
    with open(csv_files[0]) as fh:
        assert fh.readline().strip() == ",".join(CSV_FIELDS)


def test_run_experiment_writes_when_out_dir_set(tmp_path):
    out = tmp_path / "auto"
    cfg = make_config("covariant_residual", n_paths=4, out_dir=str(out))
    run_experiment(cfg)
    assert any(p.endswith(".csv") for p in os.listdir(out))


def test_sweep_rejects_bad_param():
    cfg = make_config("brownian_marginal", n_paths=64)
    with pytest.raises(ValueError):
        sweep(cfg, "horizon", [1.0, 2.0])
    with pytest.raises(ValueError):
        sweep(cfg, "dt", [])


def test_sweep_n_paths_structure():
    cfg = make_config("conditional_ito_integral", **TINY)
    rep = sweep(cfg, "n_paths", [8, 32])
    assert rep.param == "n_paths"
    assert len(rep.reports) == 2
    assert rep.reports[0].config.n_paths == 8
    assert rep.reports[1].config.n_paths == 32
    assert rep.fit_rows[0].check_id == "se_scaling_n_paths"


def test_plan_chunk_size_bounds():
    from itopath.wiener import TimeGrid

    grid = TimeGrid(1.0, 1000)
    small = harness._plan_chunk_size(grid, 3, 256)
    assert 1 <= small <= 16
    coarse = harness._plan_chunk_size(TimeGrid(1.0, 10), 3, 4)
    assert coarse == 16


# -- command line ----------------------------------------------------------------


def test_cli_list():
    assert cli.main(["list"]) == 0


def test_cli_run_pass_and_artifacts(tmp_path, capsys):
    out = tmp_path / "cli_out"
    code = cli.main([
        "run", "covariant_residual", "--n-paths", "4", "--out", str(out)])
    assert code == 0
    captured = capsys.readouterr()
    assert "covariant_residual" in captured.out
    assert any(p.endswith(".csv") for p in os.listdir(out))


def test_cli_unknown_experiment_exits_2(capsys):
    assert cli.main(["run", "bogus_experiment"]) == 2
    assert "error" in capsys.readouterr().err


def test_cli_bad_override_exits_2(capsys):
    assert cli.main(["run", "brownian_marginal", "--dt", "0.3"]) == 2


def test_cli_config_file_roundtrip(tmp_path, capsys):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text(
        "# tiny smoke configuration\n"
        "dt = 0.02\n"
        "n_paths = 8\n"
        "n_resamples = 8\n"
        "seed = 7\n"
    )
    code = cli.main(["run", "conditional_ito_integral",
                     "--config", str(cfg_file)])
    assert code in (0, 1)
    out = capsys.readouterr().out
    assert "dt=0.02" in out
    assert "n_paths=8" in out


def test_cli_config_file_flag_precedence(tmp_path, capsys):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("n_paths = 8\nseed = 7\n")
    code = cli.main(["run", "covariant_residual",
                     "--config", str(cfg_file), "--n-paths", "5"])
    assert code == 0
    assert "n_paths=5" in capsys.readouterr().out


def test_cli_rejects_unknown_config_key(tmp_path, capsys):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("paths = 8\n")
    assert cli.main(["run", "covariant_residual",
                     "--config", str(cfg_file)]) == 2


def test_cli_sweep_runs(tmp_path, capsys):
    code = cli.main([
        "sweep", "covariant_residual", "--param", "n_paths",
        "--values", "4,8", "--seed", "3"])
    out = capsys.readouterr().out
    assert "se_scaling_n_paths" in out
    assert code in (0, 1)


def test_cli_parse_config_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("just words\n")
    with pytest.raises(ValueError):
        cli.parse_config_file(str(bad))
