import json

import pytest

from tierfl.cli import (compare_runs, control_sweep, main, run_bound_report,
                        run_experiment, verify_privacy)
from tierfl.config import load_config, override, validate_config
from tierfl.errors import AxisMismatch, ConfigInvalid


def base_doc(**overrides):
    doc = {
        "seed": 1,
        "protocol": "m2fdp",
        "topology": {"layers": [4, 12], "cloud_secure": False,
                     "secure_ratios": [0.5]},
        "dataset": {"kind": "synthetic", "samples_per_device": 10,
                    "feature_dim": 3, "num_classes": 2, "heterogeneity": 0.5},
        "loss": {"kind": "logistic", "l2": 0.05, "clip_norm": 5.0},
        "dp": {"epsilon": 1.0, "delta": 1e-5, "sample_rate": 0.5, "c1": 100.0},
        "schedule": {"rounds": 3, "local_steps": 6, "agg_periods": {"1": 3}},
    }
    doc.update(overrides)
    return doc


def test_validate_happy_path():
    cfg = validate_config(base_doc())
    assert cfg.topology.num_devices == 12
    assert cfg.schedule.K_max == 6
    assert cfg.dp.epsilon == 1.0


@pytest.mark.parametrize("mutate,field", [
    (lambda d: d["dp"].pop("epsilon"), "dp.epsilon"),
    (lambda d: d["topology"].pop("layers"), "topology.layers"),
    (lambda d: d["schedule"].pop("rounds"), "schedule.rounds"),
])
def test_missing_fields_name_their_path(mutate, field):
    doc = base_doc()
    mutate(doc)
    with pytest.raises(ConfigInvalid) as err:
        validate_config(doc)
    assert err.value.field == field


def test_bad_protocol_and_loss_kind():
    with pytest.raises(ConfigInvalid):
        validate_config(base_doc(protocol="nope"))
    doc = base_doc()
    doc["loss"]["kind"] = "nope"
    with pytest.raises(ConfigInvalid):
        validate_config(doc)


def test_premise_violation_reported_as_config_error():
    doc = base_doc()
    doc["dp"]["c1"] = 1.0
    doc["schedule"]["rounds"] = 2  # c1*q*T = 1.0, not strictly above epsilon
    with pytest.raises(ConfigInvalid) as err:
        validate_config(doc)
    assert err.value.field == "dp"


def test_overlapping_schedule_rejected():
    doc = base_doc()
    doc["schedule"]["agg_periods"] = {"1": 2}
    doc["schedule"]["agg_sets"] = None
    doc["topology"]["layers"] = [2, 4, 8]
    doc["topology"]["secure_ratios"] = [0.5, 0.5]
    doc["schedule"]["agg_periods"] = {"1": 2, "2": 4}
    with pytest.raises(ConfigInvalid) as err:
        validate_config(doc)
    assert err.value.field == "schedule"


def test_control_tau_must_exceed_rounds():
    doc = base_doc(control={"enabled": True, "weights": [1, 1, 1], "tau": 2})
    with pytest.raises(ConfigInvalid) as err:
        validate_config(doc)
    assert err.value.field == "control.tau"


def test_agg_layer_must_fit_topology():
    doc = base_doc()
    doc["schedule"]["agg_periods"] = {"2": 3}
    with pytest.raises(ConfigInvalid) as err:
        validate_config(doc)
    assert err.value.field == "schedule.agg_periods"


def test_override_dotted_paths():
    doc = base_doc()
    out = override(doc, "dp.epsilon", 2.0)
    assert out["dp"]["epsilon"] == 2.0 and doc["dp"]["epsilon"] == 1.0
    out = override(doc, "topology.secure_ratios.0", 1.0)
    assert out["topology"]["secure_ratios"] == [1.0]


def test_run_experiment_artifacts(tmp_path):
    cfg = validate_config(base_doc())
    out = tmp_path / "run"
    summary = run_experiment(cfg, out, figures=False)
    for name in ("trace.csv", "ledger.csv", "bound_report.json", "summary.json"):
        assert (out / name).exists()
    lines = (out / "trace.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 1 + 3  # header + initial row + 3 rounds
    assert summary["rounds"] == 3


def test_summary_numbers_recomputable_from_trace(tmp_path):
    cfg = validate_config(base_doc())
    out = tmp_path / "run"
    summary = run_experiment(cfg, out, figures=False)
    import csv as _csv
    with open(out / "trace.csv", newline="") as fh:
        rows = list(_csv.DictReader(fh))
    first, last = rows[0], rows[-1]
    assert int(first["t"]) == 0
    assert summary["initial_loss"] == float(first["global_loss"])
    assert summary["final_loss"] == float(last["global_loss"])
    assert summary["final_grad_norm"] == float(last["global_grad_norm"])
    assert summary["total_energy_j"] == float(last["energy_J"])
    assert summary["total_delay_s"] == float(last["delay_s"])
    assert summary["total_noise_draws"] == int(last["noise_draws"])
    assert summary["k_total"] == int(last["k_total"])
    # gamma is recoverable from the first round's step size
    eta1 = float(rows[1]["eta"])
    assert abs(summary["gamma"] - eta1 * (2.0 ** 0.5)) < 1e-12


def test_rerun_reproduces_artifacts_byte_for_byte(tmp_path):
    cfg = validate_config(base_doc())
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(cfg, a, figures=False)
    run_experiment(cfg, b, figures=False)
    for name in ("trace.csv", "ledger.csv", "summary.json", "bound_report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_compare_runs_and_axis_guard(tmp_path):
    docs = [override(base_doc(), "dp.epsilon", v) for v in (0.5, 1.0, 2.0)]
    rows = compare_runs(docs, "dp.epsilon", tmp_path / "cmp", figures=False)
    assert [r["value"] for r in rows] == [0.5, 1.0, 2.0]
    gaps = [r["analytic_gap"] for r in rows]
    assert abs(gaps[0] / gaps[1] - 4.0) < 1e-9
    assert abs(gaps[2] / gaps[1] - 0.25) < 1e-9
    assert (tmp_path / "cmp" / "comparison.csv").exists()

    with pytest.raises(AxisMismatch):
        compare_runs([], "dp.epsilon", tmp_path / "x")
    bad = [base_doc(), override(base_doc(), "seed", 9)]
    with pytest.raises(AxisMismatch):
        compare_runs(bad, "dp.epsilon", tmp_path / "y")


def test_verify_privacy_over_stored_run(tmp_path):
    cfg = validate_config(base_doc())
    out = tmp_path / "run"
    run_experiment(cfg, out, figures=False)
    rows = verify_privacy(cfg, out)
    assert rows and all(r.passed for r in rows)
    # a noise-disabled run must fail at every insecure node
    doc = base_doc()
    doc["dp"]["enabled"] = False
    cfg_off = validate_config(doc)
    out_off = tmp_path / "off"
    run_experiment(cfg_off, out_off, figures=False)
    cfg_check = validate_config(base_doc())
    rows = verify_privacy(cfg_check, out_off)
    assert rows and all(not r.passed for r in rows)


def test_verify_privacy_with_sampling(tmp_path):
    doc = base_doc(participation={"secure": 2, "insecure": 2})
    cfg = validate_config(doc)
    out = tmp_path / "run"
    run_experiment(cfg, out, figures=False)
    rows = verify_privacy(cfg, out, round_t=2)
    assert rows and all(r.passed for r in rows)


def test_control_sweep_artifact(tmp_path):
    doc = base_doc(control={"enabled": True, "weights": [1.0, 1.0, 1e-6],
                            "k_max": 8, "tau": 50})
    cfg = validate_config(doc)
    rows = control_sweep(cfg, [0.1, 1.0, 10.0], tmp_path / "sweep", figures=False)
    axes = {r["axis"] for r in rows}
    assert axes == {"energy", "delay", "gap", "compute_energy"}
    assert (tmp_path / "sweep" / "control_sweep.csv").exists()


def test_cli_main_run_and_exit_codes(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(base_doc()))
    out = tmp_path / "out"
    assert main(["run", "--config", str(path), "--out", str(out),
                 "--no-figures"]) == 0
    assert (out / "trace.csv").exists()

    bad = tmp_path / "bad.json"
    doc = base_doc()
    del doc["dp"]["epsilon"]
    bad.write_text(json.dumps(doc))
    assert main(["run", "--config", str(bad), "--out", str(out)]) == 2

    missing = tmp_path / "nope.json"
    assert main(["run", "--config", str(missing), "--out", str(out)]) == 2


def test_cli_verify_exit_code(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(base_doc()))
    out = tmp_path / "out"
    assert main(["run", "--config", str(path), "--out", str(out),
                 "--no-figures"]) == 0
    assert main(["verify-privacy", "--config", str(path), "--out", str(out)]) == 0


def test_bound_report_cli(tmp_path):
    cfg = validate_config(base_doc())
    report = run_bound_report(cfg)
    assert report["gap"] > 0
    assert report["rhs"] >= report["gap"]


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigInvalid):
        load_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigInvalid):
        load_config(bad)
