import json

import pytest

from acbc.cli import EXIT, RunReport, main, report_json, run, write_report


def args(data_dir, spec, *extra):
    return ["--spec", str(data_dir / spec), *extra]


def test_verify_opacity_vehicle(data_dir, tmp_path):
    code, rep = run(["verify-opacity", *args(data_dir, "vehicle.json"), "--deg-b", "2", "--eps-lo", "1",
                     "--eps-hi", "1.001", "--margin", "0.01", "--samples", "20000", "--out", str(tmp_path)])
    assert code == 0 and rep.outcome == "certified-opaque"
    doc = json.loads((tmp_path / "report.json").read_text())
    assert len(doc["certificate"]["polynomial"]) == 15
    assert doc["recheck"]["outcome"] == "certified"
    assert (tmp_path / "certificate.json").exists()


def test_delta_below_threshold(data_dir):
    code, rep = run(["verify-opacity", *args(data_dir, "vehicle.json"), "--delta", "0.9"])
    assert code == 2 and rep.outcome == "input-error"
    assert rep.extra["assumption"]["witness"][0] < 0.1


def test_validate_zero_certificate(data_dir, tmp_path):
    cert = tmp_path / "zero.json"
    cert.write_text(json.dumps({"kind": "safety", "polynomial": "0", "policy": ["u1"],
                                "constants": {"eps_lo": 1.0, "eps_hi": 1.001}}))
    code, rep = run(["validate-cert", *args(data_dir, "vehicle.json"), "--cert", str(cert), "--samples", "5000"])
    assert code == 3 and rep.outcome == "candidate-rejected"


def test_validate_published(data_dir):
    code, rep = run(["validate-cert", *args(data_dir, "vehicle.json"), "--cert",
                     str(data_dir / "vehicle_published_certificate.json"), "--samples", "5000"])
    assert code == 3
    assert rep.validation["policy_bounds"]["out_of_bounds"] > 0


def test_verify_lack_room_inconclusive(data_dir, tmp_path):
    code, rep = run(["verify-lack", *args(data_dir, "room.json"), "--fixed-policy", "0;0", "--out",
                     str(tmp_path)])
    assert code == 1 and rep.outcome == "inconclusive"
    doc = json.loads((tmp_path / "report.json").read_text())
    assert "certificate" not in doc
    assert doc["solver"][0]["status"] == "infeasible"


def test_input_errors(data_dir, tmp_path):
    assert main(["check-assumption", "--spec", str(tmp_path / "none.json")]) == 2
    assert main(["verify-lack", *args(data_dir, "room.json"), "--fixed-policy", "v1;0"]) == 2
    assert main(["validate-cert", *args(data_dir, "vehicle.json")]) == 2
    assert main(["verify-opacity", *args(data_dir, "vehicle.json"), "--deg-sweep", "3"]) == 2
    with pytest.raises(SystemExit):
        main(["frobnicate", "--spec", "x"])


def test_check_assumption(data_dir):
    assert main(["check-assumption", *args(data_dir, "vehicle.json")]) == 0
    assert main(["check-assumption", *args(data_dir, "vehicle.json"), "--delta", "0.9"]) == 2


def test_simulate_room_deterministic(data_dir, tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        code, rep = run(["simulate", *args(data_dir, "room.json"), "--trials", "10", "--horizon", "40",
                         "--out", str(d)])
        assert code == 0
        outs.append(d)
    doc = json.loads((outs[0] / "report.json").read_text())
    assert doc["csv"] == ["reach_random_trajectories.csv", "reach_greedy_trajectories.csv"]
    for name in ["report.json"] + doc["csv"]:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_report_canonical(tmp_path):
    rep = RunReport("t", {"b": 1, "a": 0.1}, "inconclusive", timing={"seconds": 1.5},
                    solver=[{"seconds": 2.0, "status": "x", "residual": float("inf")}])
    text = report_json(rep)
    assert "seconds" not in text and '"inf"' in text
    assert text.index('"a"') < text.index('"b"')
    assert "0.1" in text
    assert EXIT[rep.outcome] == 1
    p = tmp_path / "r.json"
    write_report(rep, p)
    assert p.read_text() == text
    assert "seconds" in report_json(rep, include_timing=True)


def test_deg_sweep_stops_at_first_success(data_dir):
    code, rep = run(["verify-opacity", *args(data_dir, "vehicle.json"), "--deg-sweep", "1..3",
                     "--samples", "5000", "--skip-assumption"])
    assert code == 0
    assert [e["degree"] for e in rep.solver] == [1, 2]
