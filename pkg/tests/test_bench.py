import json

import pytest
import yaml

from embserve.bench.cli import main
from embserve.bench.config import ExperimentConfig, config_from_dict, defaults_yaml, load_config
from embserve.bench.experiments import (
    NAMED_EXPERIMENTS,
    named_experiment_config,
    run_experiment,
    run_generic,
)
from embserve.errors import ConfigError


def smoke_config(**workload):
    cfg = ExperimentConfig()
    cfg.workload.duration_batches = workload.get("duration_batches", 8)
    cfg.workload.lookups_per_batch = workload.get("lookups_per_batch", 16)
    cfg.validate()
    return cfg


# -- config ---------------------------------------------------------------------


def test_defaults_validate():
    ExperimentConfig().validate()


def test_defaults_yaml_round_trips():
    data = yaml.safe_load(defaults_yaml())
    cfg = config_from_dict(data)
    assert cfg.to_dict() == ExperimentConfig().to_dict()


def test_unknown_field_names_path():
    with pytest.raises(ConfigError, match=r"config\.transport\.warp_speed"):
        config_from_dict({"transport": {"warp_speed": 9}})


def test_missing_table_in_placement_is_preflight_error():
    data = {
        "store": {
            "tables": [{"id": 0, "rows": 100, "dim": 8}],
            "placement": [{"table": 0, "start": 0, "end": 100, "server": 0}],
        },
        "workload": {"tables": [{"table": 3}], "indices_per_lookup": [2, 2]},
    }
    with pytest.raises(ConfigError, match=r"workload\.tables\[0\].*table 3"):
        config_from_dict(data)


def test_partial_override_keeps_defaults():
    cfg = config_from_dict({"seed": 9, "transport": {"num_engines": 2}})
    assert cfg.seed == 9
    assert cfg.transport.num_engines == 2
    assert cfg.transport.num_units == 8  # untouched default


def test_fingerprint_changes_with_config():
    a = ExperimentConfig()
    b = ExperimentConfig()
    b.seed = 1
    assert a.fingerprint() != b.fingerprint()


def test_load_config_file(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("seed: 4\nworkload:\n  duration_batches: 3\n")
    cfg = load_config(path)
    assert cfg.seed == 4 and cfg.workload.duration_batches == 3


# -- generic run -----------------------------------------------------------------


def test_smoke_run_completes_and_conserves():
    report = run_generic(smoke_config())
    inv = report.invariants
    assert inv["quiesced"] is True
    assert inv["drops"] == 0
    assert inv["responses_sent"] == inv["responses_consumed"]
    assert inv["equivalence_pass"] is True


def test_generic_run_deterministic_bytes():
    a = run_generic(smoke_config()).to_machine()
    b = run_generic(smoke_config()).to_machine()
    assert a == b
    assert json.loads(a)["experiment"] == "smoke"


def test_summary_invariant_to_output_location(tmp_path):
    # the report is a pure function of (config, seed); `out` is I/O plumbing
    cfg1 = smoke_config()
    cfg1.out = str(tmp_path / "a")
    cfg2 = smoke_config()
    cfg2.out = str(tmp_path / "b")
    assert run_experiment(cfg1).to_machine() == run_experiment(cfg2).to_machine()


def test_seed_changes_summary():
    cfg1 = smoke_config()
    cfg2 = smoke_config()
    cfg2.seed = 1
    assert run_generic(cfg1).to_machine() != run_generic(cfg2).to_machine()


def test_report_files_written(tmp_path):
    cfg = smoke_config()
    cfg.out = str(tmp_path / "reports")
    report = run_experiment(cfg)
    text, machine = report.write(cfg.out)
    assert json.load(open(machine))["fingerprint"] == cfg.fingerprint()
    assert "== run: pipeline" in open(text).read()


def test_named_experiment_configs_validate():
    for name in NAMED_EXPERIMENTS:
        named_experiment_config(name).validate()


def test_threaded_backend_restricted_to_stream_experiments():
    cfg = smoke_config()
    cfg.backend = "threaded"
    with pytest.raises(ConfigError, match="threaded"):
        run_experiment(cfg)


# -- cli ----------------------------------------------------------------------------


def test_cli_experiments_lists_all(capsys):
    assert main(["experiments"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out == list(NAMED_EXPERIMENTS)


def test_cli_print_defaults(capsys):
    assert main(["run", "--print-defaults"]) == 0
    data = yaml.safe_load(capsys.readouterr().out)
    assert data["transport"]["num_engines"] == 8


def test_cli_unknown_subcommand_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err.lower()


def test_cli_unknown_flag_usage_error(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--wat"])
    assert exc.value.code == 2


def test_cli_gen_then_run_chain(tmp_path, capsys):
    config_path = tmp_path / "exp.yaml"
    config_path.write_text(yaml.safe_dump({
        "workload": {"duration_batches": 4, "lookups_per_batch": 8},
        "ranker": {"check_equivalence": False},
    }))
    trace_path = tmp_path / "w.trace"
    assert main(["gen", "--config", str(config_path), "--out", str(trace_path)]) == 0
    assert trace_path.exists()
    gen_out = capsys.readouterr().out
    fingerprint = gen_out.split("fingerprint ")[1].strip().rstrip(")")

    run_config = tmp_path / "run.yaml"
    run_config.write_text(yaml.safe_dump({
        "workload": {"trace_path": str(trace_path)},
        "ranker": {"check_equivalence": False},
        "out": str(tmp_path / "reports"),
    }))
    assert main(["run", "--config", str(run_config)]) == 0
    summary_path = tmp_path / "reports" / "smoke.summary.json"
    assert summary_path.exists()
    summary = json.loads(summary_path.read_text())
    # fingerprints chain: the report embeds the config that names the trace
    assert summary["config"]["workload"]["trace_path"] == str(trace_path)
    assert len(fingerprint) == 16


def test_cli_preflight_error_names_table(tmp_path, capsys):
    config_path = tmp_path / "bad.yaml"
    config_path.write_text(yaml.safe_dump({
        "store": {"tables": [{"id": 0, "rows": 100, "dim": 8}],
                  "placement": [{"table": 0, "start": 0, "end": 100, "server": 0}]},
        "workload": {"tables": [{"table": 7}], "indices_per_lookup": [2, 2]},
    }))
    assert main(["run", "--config", str(config_path)]) == 1
    assert "table 7" in capsys.readouterr().err


def test_cli_run_named_experiment(tmp_path, capsys):
    out = tmp_path / "rep"
    assert main(["run", "--experiment", "pooling-bytes", "--out", str(out)]) == 0
    assert (out / "pooling-bytes.summary.json").exists()


def test_cli_report_comparison(tmp_path, capsys):
    out = tmp_path / "rep"
    main(["run", "--experiment", "pooling-bytes", "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out / "pooling-bytes.summary.json")]) == 0
    table = capsys.readouterr().out
    assert "pooling-bytes" in table and "payload_ratio" in table
