import json
import re
import xml.etree.ElementTree as ET

import pytest
from conftest import DATA_DIR, TOY_OPTIMUM

from dtrl import cli
from dtrl.sweep import SWEEP_COLUMNS, read_metrics, read_sweep_csv
from dtrl.tree import load_tree


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def toy_csv(tmp_path, capsys):
    assert run(capsys, "gen-toy", "--seed", 0, "--out-dir", tmp_path)[0] == 0
    return tmp_path / "toy-0" / "toy.csv"


def _without_wall_clock(text):
    return re.sub(r"(runtime_s=|,)[0-9.e-]+\n", r"\1\n", text)


def test_gen_toy_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        assert run(capsys, "gen-toy", "--seed", 3, "--out-dir", tmp_path / d)[0] == 0
    for name in ("toy.csv", "truth.tree"):
        assert (tmp_path / "a/toy-3" / name).read_bytes() == (tmp_path / "b/toy-3" / name).read_bytes()


def test_gen_toy_requires_seed(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-toy"])
    assert exc.value.code == 2
    assert "--seed" in capsys.readouterr().err


def test_solve_toy(tmp_path, toy_csv, capsys):
    code, out, _ = run(capsys, "solve", "--data", toy_csv, "--algo", "policy-iteration", "--zeta", 0.5, "--gamma", 0.99,
                       "--p", 1, "--max-depth", 3, "--out", tmp_path / "s")
    assert code == 0
    assert out.startswith("if ")
    m = read_metrics(tmp_path / "s/metrics.txt")
    assert float(m["accuracy"]) == 1.0 and int(m["decision_nodes"]) == 3
    assert abs(float(m["J"]) - TOY_OPTIMUM) < 1e-6
    assert load_tree(tmp_path / "s/policy.tree").decision_node_count == 3
    assert (tmp_path / "s/trace.csv").read_text().startswith("# dtrl-trace v1\niteration,J,wall_clock_s\n")
    # rerun: identical files apart from wall-clock fields
    run(capsys, "solve", "--data", toy_csv, "--max-depth", 3, "--out", tmp_path / "t", "--dump-model", tmp_path / "m.txt")
    assert (tmp_path / "s/policy.tree").read_text() == (tmp_path / "t/policy.tree").read_text()
    assert _without_wall_clock((tmp_path / "s/metrics.txt").read_text()) == _without_wall_clock((tmp_path / "t/metrics.txt").read_text())
    assert (tmp_path / "m.txt").read_text().startswith("# dtrl-model v1\n")


def test_solve_zeta_one_warns(tmp_path, toy_csv, capsys):
    code, _, err = run(capsys, "solve", "--data", toy_csv, "--zeta", 1, "--max-depth", 2, "--out", tmp_path / "s")
    assert code == 0
    assert "warning: zeta >= R_max: degenerate without depth cap" in err


def test_exact_pg_gate(tmp_path, toy_csv, capsys):
    code, _, err = run(capsys, "solve", "--data", toy_csv, "--max-depth", 3, "--algo", "exact-pg", "--exact-pg-limit", 100,
                       "--out", tmp_path / "s")
    assert code == cli.EXIT_TOO_LARGE
    assert "exact-pg" in err and "--exact-pg-limit" in err
    code, *_ = run(capsys, "solve", "--data", toy_csv, "--max-depth", 2, "--algo", "exact-pg", "--iterations", 20,
                   "--out", tmp_path / "s")
    assert code == 0


def test_missing_depth_for_unknown_dataset(tmp_path, toy_csv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["solve", "--data", str(toy_csv), "--out", str(tmp_path / "s")])
    assert exc.value.code == 2
    assert "--max-depth" in capsys.readouterr().err


def test_default_depths():
    assert cli.default_max_depth("data/wine.csv") == 4
    assert cli.default_max_depth("Banknote.csv") == 5
    assert cli.default_max_depth("diabetes_risk.csv") == 5


@pytest.mark.parametrize(
    "argv, code",
    [
        (["--data", "absent.csv", "--max-depth", "2"], cli.EXIT_DATASET),
        (["--label-col", "nope", "--max-depth", "2"], cli.EXIT_DATASET),
        (["--p", "3", "--max-depth", "2"], cli.EXIT_USAGE),
        (["--gamma", "1.5", "--max-depth", "2"], cli.EXIT_USAGE),
        (["--iterations", "1", "--max-depth", "3"], cli.EXIT_CONVERGENCE),
    ],
)
def test_solve_exit_codes(tmp_path, toy_csv, capsys, argv, code):
    base = ["solve", "--data", str(toy_csv), "--out", str(tmp_path / "s")]
    assert cli.main(base + argv) == code


def test_sweep_outputs(tmp_path, toy_csv, capsys):
    out_csv = tmp_path / "sw/toy.csv"
    code, _out, _ = run(capsys, "sweep", "--data", toy_csv, "--max-depth", 3, "--zetas=-1,0.2,0.6",
                       "--out-csv", out_csv, "--out-svg", tmp_path / "sw/toy.svg", "--workers", 1)
    assert code == 0
    lines = out_csv.read_text().splitlines()
    assert lines[0] == "# dtrl-sweep v1" and lines[1] == ",".join(SWEEP_COLUMNS)
    rows = read_sweep_csv(out_csv)
    assert [r.zeta for r in rows] == [-1.0, 0.2, 0.6]
    front = read_sweep_csv(tmp_path / "sw/toy.pareto.csv")
    assert {(r.accuracy, r.decision_nodes) for r in front} == {(0.5, 0), (1.0, 3)}
    svg = ET.parse(tmp_path / "sw/toy.svg").getroot()
    assert sum(1 for c in svg.iter("{http://www.w3.org/2000/svg}circle") if c.get("class") == "marker") == 3


def test_sweep_empty_zetas(tmp_path, toy_csv):
    with pytest.raises(SystemExit) as exc:
        cli.main(["sweep", "--data", str(toy_csv), "--max-depth", "2", "--zetas", "", "--out-csv", str(tmp_path / "x.csv")])
    assert exc.value.code == 2


def test_eval(tmp_path, toy_csv, capsys):
    tree = toy_csv.parent / "truth.tree"
    code, out, _ = run(capsys, "eval", "--tree", tree, "--data", toy_csv, "--zeta", 0.5, "--max-depth", 3)
    assert code == 0
    assert "accuracy=1.000000 decision_nodes=3" in out
    J = float(re.search(r"J=([0-9.e+-]+)", out).group(1))
    assert abs(J - TOY_OPTIMUM) < 1e-9


def test_eval_bad_tree_file(tmp_path, toy_csv, capsys):
    bad = tmp_path / "bad.tree"
    bad.write_text("# dtrl-tree v1\nroot 0\nleaf 0 class=x\n")
    assert run(capsys, "eval", "--tree", bad, "--data", toy_csv)[0] == cli.EXIT_TREE_PARSE
    assert run(capsys, "eval", "--tree", tmp_path / "none.tree", "--data", toy_csv)[0] == cli.EXIT_IO


def test_eval_off_grid_tree(tmp_path, toy_csv, capsys):
    text = (toy_csv.parent / "truth.tree").read_text().replace("threshold=1/2", "threshold=1/3")
    path = tmp_path / "off.tree"
    path.write_text(text)
    code, _, err = run(capsys, "eval", "--tree", path, "--data", toy_csv, "--zeta", 0.5, "--max-depth", 3)
    assert code == cli.EXIT_BAD_TREE and "off the split grid" in err


def test_verify_pass_and_fail(tmp_path, capsys, monkeypatch):
    code, out, _ = run(capsys, "verify", "prop1", "--seed", 0)
    assert code == 0 and "PASS prop1" in out

    def failing(seed):
        from dtrl.verify import check_theorem1

        return check_theorem1(seed=seed, policies_per_task=1, tasks=(0,), tolerance=-1.0)

    monkeypatch.setitem(cli.CHECKS, "theorem1", failing)
    replay = tmp_path / "case.json"
    code, out, _ = run(capsys, "verify", "theorem1", "--replay-out", replay)
    assert code == cli.EXIT_CHECK_FAILED and "FAIL theorem1" in out
    assert json.loads(replay.read_text())["case"]["task"] == 0


def test_wine_default_depth(tmp_path, capsys):
    path = DATA_DIR / "wine.csv"
    if not path.exists():
        pytest.skip("wine.csv not present")
    code, _out, _ = run(capsys, "solve", "--data", path, "--label-col", "class", "--zeta", 0.2, "--out", tmp_path / "w")
    assert code == 0
    assert read_metrics(tmp_path / "w/metrics.txt")["max_depth"] == "4"
