import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from digeo.cli import main
from digeo.mesh import load_mesh

GOLDEN = Path(__file__).parent / "golden"


def _csv(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return lines[0], list(csv.DictReader(lines[1:]))


def _same_rows(a, b):
    assert len(a) == len(b)
    for ra, rb in zip(a, b):
        assert list(ra) == list(rb)
        for k in ra:
            try:
                x, y = float(ra[k]), float(rb[k])
            except ValueError:
                assert ra[k] == rb[k]
            else:
                assert x == pytest.approx(y, rel=1e-12, abs=1e-15)


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_gen_icosphere_face_count(tmp_path):
    out = tmp_path / "s.obj"
    assert main(["gen", "--shape", "icosphere", "--subdiv", "3", "--out", str(out)]) == 0
    assert load_mesh(out).n_faces == 1280


def test_gen_matches_golden(tmp_path):
    out = tmp_path / "s.obj"
    assert main(["gen", "--shape", "icosphere", "--subdiv", "1", "--out", str(out)]) == 0
    assert out.read_text() == (GOLDEN / "icosphere1.obj").read_text()


@pytest.mark.parametrize("shape", ["torus", "plane", "cylinder", "cone", "disk", "annulus"])
def test_gen_all_shapes(tmp_path, shape):
    out = tmp_path / "m.obj"
    assert main(["gen", "--shape", shape, "--n-alpha", "16", "--n-beta", "8", "--n", "4",
                 "--out", str(out)]) == 0
    assert load_mesh(out).n_faces > 0


def test_expmap_matches_golden(tmp_path):
    out = tmp_path / "e.csv"
    assert main(["--seed-rng", "7", "expmap", "--mesh", str(GOLDEN / "icosphere1.obj"), "--random", "5",
                 "--out", str(out)]) == 0
    h1, rows = _csv(out)
    h2, ref = _csv(GOLDEN / "expmap_icosphere1.csv")
    assert h1 == h2 == "# digeo.expmap/1"
    _same_rows(rows, ref)


def test_expmap_is_deterministic_across_worker_counts(tmp_path):
    outs = []
    for w in ("1", "4"):
        out = tmp_path / f"e{w}.csv"
        assert main(["--workers", w, "--seed-rng", "11", "expmap", "--mesh", str(GOLDEN / "icosphere1.obj"),
                     "--random", "50", "--out", str(out)]) == 0
        outs.append(out.read_text())
    assert outs[0] == outs[1]


def test_zero_length_vectors_end_at_the_start(tmp_path):
    inp = tmp_path / "in.csv"
    inp.write_text("face,b0,b1,b2,vx,vy,vz\n3,0.2,0.3,0.5,0,0,0\n10,1,0,0,0,0,0\n")
    out = tmp_path / "t.json"
    assert main(["trace", "--mesh", str(GOLDEN / "icosphere1.obj"), "--input", str(inp), "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "digeo.traces/1"
    for t in doc["traces"]:
        assert t["final_point"] == t["start"]
        assert t["traced_length"] == 0.0
        assert t["terminated_by"] == "LENGTH_REACHED"


def test_points_and_dirs_files_match_combined_input(tmp_path):
    mesh = str(GOLDEN / "icosphere1.obj")
    (tmp_path / "in.csv").write_text("face,b0,b1,b2,vx,vy,vz\n3,0.2,0.3,0.5,0.1,0.2,0.3\n7,0.6,0.2,0.2,-0.4,0.1,0\n")
    (tmp_path / "p.csv").write_text("face,b0,b1,b2\n3,0.2,0.3,0.5\n7,0.6,0.2,0.2\n")
    (tmp_path / "d.csv").write_text("vx,vy,vz\n0.1,0.2,0.3\n-0.4,0.1,0\n")
    assert main(["trace", "--mesh", mesh, "--input", str(tmp_path / "in.csv"), "--out", str(tmp_path / "a.json")]) == 0
    assert main(["trace", "--mesh", mesh, "--points", str(tmp_path / "p.csv"), "--dirs", str(tmp_path / "d.csv"),
                 "--out", str(tmp_path / "b.json")]) == 0
    assert (tmp_path / "a.json").read_text() == (tmp_path / "b.json").read_text()


def test_points_without_dirs_is_invalid(tmp_path, capsys):
    (tmp_path / "p.csv").write_text("face,b0,b1,b2\n3,0.2,0.3,0.5\n")
    (tmp_path / "d.csv").write_text("vx,vy,vz\n")
    mesh = str(GOLDEN / "icosphere1.obj")
    assert main(["trace", "--mesh", mesh, "--points", str(tmp_path / "p.csv")]) == 2
    assert main(["trace", "--mesh", mesh, "--points", str(tmp_path / "p.csv"), "--dirs", str(tmp_path / "d.csv")]) == 2
    assert json.loads(capsys.readouterr().err.strip().splitlines()[-1])["error"] == "InvalidArgs"


def test_trace_obj_polylines_match_json_points(tmp_path):
    out, obj = tmp_path / "t.json", tmp_path / "t.obj"
    assert main(["trace", "--mesh", str(GOLDEN / "icosphere1.obj"), "--random", "3", "--out", str(out),
                 "--obj", str(obj)]) == 0
    traces = json.loads(out.read_text())["traces"]
    rows = obj.read_text().splitlines()
    V = [[float(t) for t in r.split()[1:]] for r in rows if r.startswith("v ")]
    L = [[int(t) for t in r.split()[1:]] for r in rows if r.startswith("l ")]
    assert len(L) == len(traces)
    for line, t in zip(L, traces):
        assert len(line) == len(t["points"])
        ends = np.array(V[line[-1] - 1])
        assert np.linalg.norm(ends - np.array(V[line[0] - 1])) > 0
        assert np.isclose(np.linalg.norm(np.diff([V[k - 1] for k in line], axis=0), axis=1).sum(),
                          t["traced_length"], rtol=1e-12)


def test_trace_json_fields(tmp_path):
    out = tmp_path / "t.json"
    assert main(["trace", "--mesh", str(GOLDEN / "icosphere1.obj"), "--random", "2", "--out", str(out)]) == 0
    t = json.loads(out.read_text())["traces"][0]
    assert set(t) == {"points", "segment_lengths", "final_point", "final_dir", "traced_length",
                      "terminated_by", "payload", "start", "vector"}


def test_f32_precision_rounds_inputs(tmp_path):
    out = tmp_path / "e.csv"
    assert main(["--precision", "f32", "--seed-rng", "7", "expmap", "--mesh", str(GOLDEN / "icosphere1.obj"),
                 "--random", "5", "--out", str(out)]) == 0
    _, rows = _csv(out)
    _, ref = _csv(GOLDEN / "expmap_icosphere1.csv")
    d = [abs(float(a["x"]) - float(b["x"])) for a, b in zip(rows, ref)]
    assert 0 < max(d) < 1e-5


def test_gcvt_matches_golden(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["--seed-rng", "3", "gcvt", "--mesh", str(GOLDEN / "icosphere1.obj"), "--n", "4", "--iters", "2",
                 "--method", "lloyd", "--out", str(out)]) == 0
    h1, rows = _csv(out)
    h2, ref = _csv(GOLDEN / "gcvt_icosphere1.csv")
    assert h1 == h2 == "# digeo.gcvt/1"
    _same_rows(rows, ref)


def test_gcvt_lbfgs_runs(tmp_path):
    out = tmp_path / "g.csv"
    assert main(["gcvt", "--mesh", str(GOLDEN / "icosphere1.obj"), "--n", "4", "--iters", "3", "--runs", "2",
                 "--method", "lbfgs", "--seeds", "uniform", "--out", str(out)]) == 0
    _, rows = _csv(out)
    assert {r["run"] for r in rows} == {"0", "1"}
    assert list(rows[0]) == ["run", "method", "iteration", "energy", "calls"]


def test_gradcheck_reports_median_cosine(tmp_path):
    out = tmp_path / "g.json"
    assert main(["gradcheck", "--scheme", "gfd", "--subdiv", "3", "--n", "30", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "digeo.gradcheck/1"
    assert 0.9 < doc["median_cos_v"] <= 1.0
    assert "median_cos_p" in doc
    out2 = tmp_path / "e.json"
    assert main(["gradcheck", "--scheme", "ep", "--subdiv", "3", "--n", "30", "--out", str(out2)]) == 0
    assert json.loads(out2.read_text())["max_abs_grad_p"] == 0.0


def test_benchmark_csv(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["benchmark", "--subdivs", "1,2", "--batches", "10,50", "--reps", "3", "--pi-samples", "1",
                 "--out", str(out)]) == 0
    h, rows = _csv(out)
    assert h == "# digeo.benchmark/1"
    assert list(rows[0]) == ["mesh", "faces", "batch", "scheme", "median_s", "p25_s", "p75_s", "per_trace_s"]
    assert {r["scheme"] for r in rows} == {"straightest", "pi"}
    for r in rows:
        assert 0 < float(r["p25_s"]) <= float(r["median_s"]) <= float(r["p75_s"])


def test_oracle_compare_json(tmp_path):
    out = tmp_path / "o.json"
    assert main(["oracle-compare", "--n", "40", "--subdivs", "2,3", "--torus", "32x16", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    assert doc["schema"] == "digeo.oracle/1"
    assert doc["parallel_max_deviation"] == 0.0
    assert doc["sphere"][1]["mean_error"] < doc["sphere"][0]["mean_error"]
    assert {"n_alpha", "n_beta", "faces", "mean_error"} == set(doc["torus"][0])


@pytest.mark.parametrize("argv,kind,code", [
    (["gen", "--shape", "blob"], "InvalidArgs", 2),
    (["expmap", "--mesh", "missing.obj", "--random", "1"], "IOError", 3),
    (["expmap", "--mesh", str(GOLDEN / "icosphere1.obj")], "InvalidArgs", 2),
    (["--workers", "0", "gen", "--shape", "plane"], "InvalidArgs", 2),
    (["gradcheck", "--eps-rel", "0"], "InvalidArgs", 2),
    ([], "InvalidArgs", 2),
])
def test_errors_are_json_records(capsys, argv, kind, code):
    assert main(argv) == code
    rec = _err(capsys)
    assert rec["error"] == kind
    assert rec["message"]


def test_bad_input_csv(tmp_path, capsys):
    inp = tmp_path / "in.csv"
    inp.write_text("a,b\n1,2\n")
    assert main(["expmap", "--mesh", str(GOLDEN / "icosphere1.obj"), "--input", str(inp)]) == 2
    assert _err(capsys)["error"] == "InvalidArgs"
    inp.write_text("face,b0,b1,b2,vx,vy,vz\n999,1,0,0,0,0,0\n")
    assert main(["expmap", "--mesh", str(GOLDEN / "icosphere1.obj"), "--input", str(inp)]) == 2
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\n")
    assert main(["expmap", "--mesh", str(bad), "--random", "1"]) == 1
    assert _err(capsys)["error"] == "ParseError"


def test_console_script_entry_point(tmp_path):
    out = tmp_path / "s.obj"
    r = subprocess.run([sys.executable, "-m", "digeo.cli", "gen", "--shape", "icosphere", "--subdiv", "0",
                        "--out", str(out)], capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert load_mesh(out).n_faces == 20
    r = subprocess.run([sys.executable, "-m", "digeo.cli", "gen"], capture_output=True, text=True)
    assert r.returncode == 2
    assert json.loads(r.stderr)["error"] == "InvalidArgs"
