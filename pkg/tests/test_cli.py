import json
import re
import subprocess
import sys

import pytest

from fidmap.cli import main

PARAMS = {
    "tag_position_variance": 4e-4,
    "tag_orientation_variance": 3e-4,
    "linear_odometry_variance": 1e-4,
    "angular_odometry_variance": 1.2e-5,
}
SMALL_GRID = {
    "tag_position_variance": [1e-3, 1e-2],
    "tag_orientation_variance": [1e-4],
    "linear_odometry_variance": [1e-4, 1e-3],
    "angular_odometry_variance": [1e-4],
}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "params.json").write_text(json.dumps(PARAMS))
    (d / "grid.json").write_text(json.dumps(SMALL_GRID))
    assert run("simulate", "--scenario", "corridor", "--seed", 4, "--out-session", d / "s.json", "--out-gt", d / "gt.json") == 0
    assert run("build", "--session", d / "s.json", "--params", d / "params.json", "--out", d / "map.json") == 0
    return d


def _outputs(d, tag):
    """Run every command once, writing outputs with suffix ``tag``; return their bytes."""
    s, gt, p = d / "s.json", d / "gt.json", d / "params.json"
    files = {
        "session": d / f"s{tag}.json",
        "gt": d / f"gt{tag}.json",
        "map": d / f"map{tag}.json",
        "csv": d / f"sweep{tag}.csv",
        "loc": d / f"loc{tag}.jsonl",
        "plan": d / f"plan{tag}.json",
        "svg": d / f"plot{tag}.svg",
    }
    assert run("simulate", "--scenario", "corridor", "--seed", 4, "--out-session", files["session"], "--out-gt", files["gt"]) == 0
    assert run("build", "--session", s, "--params", p, "--out", files["map"]) == 0
    assert run("sweep", "--session", s, "--grid", d / "grid.json", "--gt", gt, "--out", files["csv"]) == 0
    assert run("localize", "--map", files["map"], "--session", s, "--out", files["loc"]) == 0
    assert run("plan", "--map", files["map"], "--from", "0,0,1.2", "--to", "northeast", "--out", files["plan"]) == 0
    assert run("plot", "--sweep", files["csv"], "--out", files["svg"]) == 0
    return {k: v.read_bytes() for k, v in files.items()}


def test_every_command_is_byte_identical_on_rerun(work, capsys):
    first = _outputs(work, "a")
    second = _outputs(work, "b")
    for key in first:
        assert first[key] == second[key], key
    assert first["session"] == (work / "s.json").read_bytes()


def test_build_summary_and_pre_optimized(work, capsys):
    capsys.readouterr()
    assert run("build", "--session", work / "s.json", "--params", work / "params.json", "--pre-optimized", "--out", work / "pre.json") == 0
    assert json.loads(capsys.readouterr().out) == {"optimized": False}
    assert run("build", "--session", work / "s.json", "--params", work / "params.json", "--out", work / "m2.json") == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["optimized"] is True and summary["iterations"] >= 1


def test_eval_reports_both_metrics(work, capsys):
    capsys.readouterr()
    assert run("eval", "--map", work / "map.json", "--session", work / "s.json", "--gt", work / "gt.json") == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"gt_metric", "shift_metric", "pairs_used", "anchors_used"}
    assert out["gt_metric"] > 0 and out["shift_metric"] > 0
    assert run("eval", "--map", work / "map.json", "--session", work / "s.json") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["gt_metric"] is None and out["anchors_used"] is None


def test_eval_exact_value_on_fixture(tmp_path, capsys):
    # two tags 10 m apart along a straight 10 m walk; the map has tag 1 off by 1 m
    odo = [{"t": float(k), "p": [float(k), 0.0, 0.0], "q": [0, 0, 0, 1]} for k in range(11)]
    ident = {"p": [0.0, 0.0, 0.0], "q": [0, 0, 0, 1]}
    session = {"version": 1, "odometry": odo,
               "tag_observations": [{"pose_index": 0, "tag_id": 0, **ident}, {"pose_index": 10, "tag_id": 1, **ident}]}
    gt = {"version": 1, "tags": [{"tag_id": 0, **ident}, {"tag_id": 1, "p": [10.0, 0.0, 0.0], "q": [0, 0, 0, 1]}]}
    traj = [{"p": [float(k), 0.0, 0.0], "q": [0, 0, 0, 1]} for k in range(11)]
    mp = {"version": 1, "hyperparams": PARAMS, "trajectory": traj,
          "tags": [{"tag_id": 0, **ident}, {"tag_id": 1, "p": [11.0, 0.0, 0.0], "q": [0, 0, 0, 1]}],
          "path_graph": {"nodes": [t["p"] for t in traj], "edges": [[k, k + 1, 1.0] for k in range(10)]}}
    for name, doc in (("s", session), ("gt", gt), ("m", mp)):
        (tmp_path / f"{name}.json").write_text(json.dumps(doc))
    capsys.readouterr()
    assert run("eval", "--map", tmp_path / "m.json", "--session", tmp_path / "s.json", "--gt", tmp_path / "gt.json") == 0
    out = json.loads(capsys.readouterr().out)
    assert out["gt_metric"] == pytest.approx(0.1, abs=1e-12)


def test_sweep_prints_selections(work, capsys):
    capsys.readouterr()
    assert run("sweep", "--session", work / "s.json", "--grid", work / "grid.json", "--gt", work / "gt.json", "--out", work / "sw.csv") == 0
    out = json.loads(capsys.readouterr().out)
    assert set(out) == {"shift_selected", "gt_selected"}
    rows = (work / "sw.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + 4


def test_plan_output(work):
    assert run("plan", "--map", work / "map.json", "--from", "0,0,1.2", "--to", "2,0,1.2", "--out", work / "p.json") == 0
    doc = json.loads((work / "p.json").read_text())
    assert set(doc) == {"path", "length_m"}
    assert doc["path"][0] == [0.0, 0.0, 1.2] and doc["path"][-1] == [2.0, 0.0, 1.2]
    assert doc["length_m"] >= 2.0


def _svg_points(text):
    group = re.search(r'<g id="points">(.*?)</g>', text, re.S)
    return len(re.findall(r"<use ", group.group(1)))


def test_plot_marker_count_and_title(tmp_path):
    csv = tmp_path / "s.csv"
    csv.write_text(
        "theta_tagpos,theta_tagori,theta_lin,theta_ang,shift_metric,gt_metric,converged,iterations\n"
        "0.1,0.1,0.1,0.1,1.0,2.0,true,3\n0.1,0.1,0.1,0.01,2.0,3.0,true,3\n0.1,0.1,0.1,0.001,3.0,5.0,true,4\n"
    )
    assert run("plot", "--sweep", csv, "--out", tmp_path / "p.svg") == 0
    text = (tmp_path / "p.svg").read_text()
    assert _svg_points(text) == 3
    assert "spearman=1.000" in text


def test_plot_rejects_bad_csv(tmp_path, capsys):
    header = "theta_tagpos,theta_tagori,theta_lin,theta_ang,shift_metric,gt_metric,converged,iterations\n"
    (tmp_path / "empty.csv").write_text(header)
    assert run("plot", "--sweep", tmp_path / "empty.csv", "--out", tmp_path / "a.svg") == 1
    (tmp_path / "nogt.csv").write_text(header + "0.1,0.1,0.1,0.1,1.0,,true,3\n")
    assert run("plot", "--sweep", tmp_path / "nogt.csv", "--out", tmp_path / "b.svg") == 1
    assert "error" in capsys.readouterr().err


def test_exit_codes(work, tmp_path, capsys):
    assert run("build", "--session", tmp_path / "missing.json", "--params", work / "params.json", "--out", tmp_path / "m.json") == 1
    (tmp_path / "bad.json").write_text("{not json")
    assert run("build", "--session", tmp_path / "bad.json", "--params", work / "params.json", "--out", tmp_path / "m.json") == 1
    assert run("frobnicate") == 1
    assert run("plan", "--map", work / "map.json", "--from", "0,0", "--to", "start", "--out", tmp_path / "p.json") == 1
    assert run("plan", "--map", work / "map.json", "--from", "0,0,0", "--to", "nowhere", "--out", tmp_path / "p.json") == 1
    tiny = dict(PARAMS, tag_position_variance=5e-324)
    (tmp_path / "tiny.json").write_text(json.dumps(tiny))
    with pytest.warns(RuntimeWarning):
        code = run("build", "--session", work / "s.json", "--params", tmp_path / "tiny.json", "--out", tmp_path / "m.json")
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err


def test_console_entry_point(work):
    proc = subprocess.run(
        [sys.executable, "-m", "fidmap.cli", "eval", "--map", str(work / "map.json"), "--session", str(work / "s.json")],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["shift_metric"] > 0
