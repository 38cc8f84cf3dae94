import json

import numpy as np
import pytest

from cardiotwin import io as cio
from cardiotwin.analysis import PvLoop, ed_es_volumes
from cardiotwin.cli import main
from cardiotwin.data import generate_finetune_dataset, generate_pretext_dataset
from cardiotwin.model import PatientParams
from cardiotwin.solver import simulate_cycles


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# -- io ---------------------------------------------------------------------------

def test_csv_round_trip_9_digits(tmp_path):
    rng = np.random.default_rng(0)
    table = rng.normal(size=(20, 3)) * 10.0 ** rng.integers(-6, 6, size=(20, 3))
    cio.write_csv(tmp_path / "t.csv", ["a", "b", "c"], table, {"seed": 3})
    header, back, meta = cio.read_csv(tmp_path / "t.csv")
    assert header == ["a", "b", "c"]
    assert np.allclose(back, table, rtol=5e-9, atol=0)
    assert np.array_equal(np.vectorize(cio.fmt)(back), np.vectorize(cio.fmt)(table))
    assert meta["seed"] == 3 and len(meta["config_hash"]) == 16


def test_config_hash_stable():
    assert cio.config_hash({"a": 1, "b": [1, 2]}) == cio.config_hash({"b": [1, 2], "a": 1})
    assert cio.config_hash({"a": 1}) != cio.config_hash({"a": 2})


def test_dataset_round_trips(tmp_path):
    pre = generate_pretext_dataset(20, seed=2)
    cio.save_pretext(pre, tmp_path / "pre.csv")
    back = cio.load_pretext(tmp_path / "pre.csv")
    assert np.allclose(back.thetas, pre.thetas, rtol=5e-9) and np.allclose(back.volumes, pre.volumes, rtol=5e-9)
    side = cio.read_json(tmp_path / "pre.json")
    assert side["meta"]["seed"] == 2 and "bounds" in side["meta"]

    ft = generate_finetune_dataset(12, seed=4, render_seed=1, noise_sigma=0.02)
    cio.save_finetune(ft, tmp_path / "ft.csv")
    fb = cio.load_finetune(tmp_path / "ft.csv")
    header = (tmp_path / "ft.csv").read_text().splitlines()[1].split(",")
    assert header[:2] == ["y_1", "y_2"] and header[64:66] == ["v_ed", "v_es"] and header[-1] == "theta_7"
    assert np.allclose(fb.ys, ft.ys, rtol=5e-9, atol=1e-15)
    assert np.allclose(fb.thetas, ft.thetas, rtol=5e-9)
    meta = cio.read_json(tmp_path / "ft.json")["meta"]
    assert meta["noise_sigma"] == 0.02 and meta["render_seed"] == 1


def test_wrong_header_rejected(tmp_path):
    cio.write_csv(tmp_path / "x.csv", ["a", "b"], [[1, 2]])
    with pytest.raises(ValueError):
        cio.load_pretext(tmp_path / "x.csv")
    with pytest.raises(ValueError):
        cio.load_finetune(tmp_path / "x.csv")


# -- cli ----------------------------------------------------------------------------

def test_simulate(tmp_path, capsys):
    code, out, _ = run(capsys, "simulate", "--out", tmp_path)
    assert code == 0
    assert json.loads(out)["status"] == "ok"
    for name in ("trajectory.csv", "pv_loop.csv", "pv_loop.svg", "pv_loop.png", "summary.json"):
        assert (tmp_path / name).exists()
    loop = PvLoop.from_csv((tmp_path / "pv_loop.csv").read_text())
    ee = ed_es_volumes(simulate_cycles(PatientParams.reference()))
    assert loop.volume.max() == pytest.approx(ee.v_ed, rel=1e-8)
    assert cio.read_json(tmp_path / "summary.json")["meta"]["config_hash"]
    assert (tmp_path / "trajectory.csv").read_text().startswith("# meta: ")


def test_simulate_with_params_and_lvad(tmp_path, capsys):
    p = PatientParams.reference(e_max=1.2)
    (tmp_path / "p.json").write_text(p.to_json())
    code, out, _ = run(capsys, "simulate", "--params", tmp_path / "p.json", "--omega", 13000, "--out", tmp_path)
    assert code == 0
    header = (tmp_path / "trajectory.csv").read_text().splitlines()[1]
    assert header == "t,x1,x2,x3,x4,x5,x6,p_lv,v_lv"


def test_gen_pretext_byte_identical(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "gen-pretext", "--n", 3840, "--seed", 7, "--out", tmp_path / d)[0] == 0
    assert (tmp_path / "a" / "pretext.csv").read_bytes() == (tmp_path / "b" / "pretext.csv").read_bytes()
    assert (tmp_path / "a" / "pretext.json").read_bytes() == (tmp_path / "b" / "pretext.json").read_bytes()


def test_training_flow(tmp_path, capsys):
    d = tmp_path
    assert run(capsys, "gen-pretext", "--n", 500, "--seed", 1, "--out", d)[0] == 0
    assert run(capsys, "gen-finetune", "--n", 40, "--seed", 2, "--out", d)[0] == 0
    assert run(capsys, "pretrain", "--data", d / "pretext.csv", "--epochs", 3, "--out", d)[0] == 0
    for name in ("surrogate.json", "pretrain_metrics.json", "pretrain_loss.csv"):
        assert (d / name).exists()
    _, hist, meta = cio.read_csv(d / "pretrain_loss.csv")
    assert hist.shape == (3, 2) and meta["options"]["seed"] == 0
    code, _, err = run(capsys, "finetune", "--data", d / "finetune.csv", "--surrogate", d / "surrogate.json",
                       "--epochs", 2, "--out", d)
    assert code == 0, err
    assert cio.read_json(d / "finetune_metrics.json")["theta_within_bounds"]
    code, _, err = run(capsys, "predict", "--backbone", d / "backbone.json", "--data", d / "finetune.csv",
                       "--row", 3, "--out", d)
    assert code == 0, err
    twin = cio.read_json(d / "twin.json")
    assert set(twin["theta_hat"]) >= {"r_m", "t_c"} and "label" in twin
    assert (d / "twin_pv_loop.svg").exists()
    (d / "m.json").write_text(json.dumps({"y": cio.load_finetune(d / "finetune.csv").ys[3].tolist()}))
    code, _, _ = run(capsys, "predict", "--backbone", d / "backbone.json", "--measurement", d / "m.json",
                     "--out", d / "again")
    assert code == 0
    assert cio.read_json(d / "again" / "twin.json")["ef"] == twin["ef"]


def test_trial_and_sweep(tmp_path, capsys):
    code, _, err = run(capsys, "trial", "--cohort-size", 8, "--omega", 13000, "--figures", "--out", tmp_path)
    assert code == 0, err
    header, table, meta = cio.read_csv(tmp_path / "trial.csv")
    assert header[:4] == ["patient_id", "ef_baseline", "ef_lvad", "delta_ef"] and len(table) == 8
    assert meta["omega"] == 13000
    summary = cio.read_json(tmp_path / "trial_summary.json")
    assert summary["omega"] == 13000 and (tmp_path / "trial_pv_loops.svg").exists()
    code, _, err = run(capsys, "sweep", "--levels", "13000,0", "--out", tmp_path)
    assert code == 0, err
    header, table, _ = cio.read_csv(tmp_path / "sweep.csv")
    assert header == ["omega", "v_ed", "v_es", "ef"] and table[:, 0].tolist() == [0, 13000]
    assert (tmp_path / "sweep_pv_loops.svg").read_text().count("<polyline") == 2


def test_trial_calibration(tmp_path, capsys):
    code, _, err = run(capsys, "trial", "--cohort-size", 6, "--levels", "0,13000,20000", "--out", tmp_path)
    assert code == 0, err
    header, table, _ = cio.read_csv(tmp_path / "calibration.csv")
    assert header[0] == "omega" and table[-1, 0] in (13000, 20000)


def test_identify_from_csv(tmp_path, capsys):
    (tmp_path / "p.json").write_text(PatientParams.reference().to_json())
    assert run(capsys, "simulate", "--cycles", 4, "--steps", 8000, "--out", tmp_path)[0] == 0
    code, _, err = run(capsys, "identify", "--trajectory", tmp_path / "trajectory.csv",
                       "--truth", tmp_path / "p.json", "--out", tmp_path)
    assert code == 0, err
    rec = cio.read_json(tmp_path / "recovered.json")
    assert max(rec["relative_errors"].values()) < 0.02


def test_verify_subset(tmp_path, capsys):
    code, out, _ = run(capsys, "verify", "--only", "2,4", "--out", tmp_path)
    assert code == 0
    lines = [ln for ln in out.splitlines() if ln.startswith("[")]
    assert len(lines) == 2 and all(ln.startswith("[PASS]") for ln in lines)
    assert len(cio.read_json(tmp_path / "verify.json")["results"]) == 2


def _one_line_error(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1
    return json.loads(lines[0])


def test_usage_errors(tmp_path, capsys):
    code, _, err = run(capsys, "frobnicate")
    assert code == 2 and _one_line_error(err)["type"] == "UsageError"
    code, _, err = run(capsys)
    assert code == 2
    code, _, err = run(capsys, "simulate", "--cycles", "three")
    assert code == 2 and _one_line_error(err)["status"] == "error"


def test_downstream_errors(tmp_path, capsys):
    code, _, err = run(capsys, "simulate", "--params", tmp_path / "missing.json", "--out", tmp_path)
    assert code == 1 and _one_line_error(err)["type"] == "FileNotFoundError"
    bad = PatientParams.reference().to_dict()
    bad["extra"] = 1
    (tmp_path / "bad.json").write_text(json.dumps(bad))
    code, _, err = run(capsys, "simulate", "--params", tmp_path / "bad.json", "--out", tmp_path)
    assert code == 1 and _one_line_error(err)["type"] == "ParameterError"


def test_run_config(tmp_path, capsys):
    (tmp_path / "cfg.json").write_text(json.dumps({"n": 12, "seed": 5}))
    code, _, err = run(capsys, "gen-pretext", "--config", tmp_path / "cfg.json", "--out", tmp_path)
    assert code == 0, err
    assert cio.read_json(tmp_path / "pretext.json")["meta"]["n"] == 12
    (tmp_path / "bad.json").write_text(json.dumps({"n": 12, "epochs": 5}))
    code, _, err = run(capsys, "gen-pretext", "--config", tmp_path / "bad.json", "--out", tmp_path)
    assert code == 2 and "epochs" in _one_line_error(err)["message"]


def test_bounds_override(tmp_path, capsys):
    (tmp_path / "b.json").write_text(json.dumps({"e_max": [1.0, 1.5]}))
    code, _, _ = run(capsys, "gen-pretext", "--n", 10, "--bounds", tmp_path / "b.json", "--out", tmp_path)
    assert code == 0
    assert cio.read_json(tmp_path / "pretext.json")["meta"]["bounds"]["ranges"]["e_max"] == [1.0, 1.5]
    (tmp_path / "bad.json").write_text(json.dumps({"e_max": [1.5, 1.0]}))
    code, _, err = run(capsys, "gen-pretext", "--n", 10, "--bounds", tmp_path / "bad.json", "--out", tmp_path)
    assert code == 1 and _one_line_error(err)["type"] == "ParameterError"
