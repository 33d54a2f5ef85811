import json
import subprocess
import sys

import pytest

from cn2lab.cli import run

SUBCOMMANDS = ["analyze", "classify", "geodesic", "transport", "holonomy", "riccati",
               "splitting", "detect-graph", "volume", "builtin", "verify"]


def _json(capsys, argv):
    assert run(argv) == 0
    return json.loads(capsys.readouterr().out)


def test_analyze_flat(capsys):
    d = _json(capsys, ["analyze", "--builtin", "flat3", "--point", "0,0,0"])
    assert d["scal"] == 0.0
    assert d["nullity_dim"] == 3
    assert d["class"] == "Flat"


def test_riccati_nilpotent(capsys):
    d = _json(capsys, ["riccati", "--c0", "0,1,0,0", "--t", "5"])
    assert d["samples"][0]["C"] == [[0.0, 1.0], [0.0, 0.0]]
    assert d["samples"][0]["class"] == "nilpotent"


def test_detect_graph_ex1(tmp_path):
    out = tmp_path / "r.json"
    cells = tmp_path / "cells.csv"
    assert run(["detect-graph", "--builtin", "ex1", "--res", "8", "--out", str(out),
                "--cells", str(cells)]) == 0
    d = json.loads(out.read_text())
    assert d["verdict"] == "GeometricGraphManifold"
    assert len(d["nodes"]) == 2 and len(d["edges"]) == 2
    assert cells.read_text().splitlines()[0].startswith("cell")


def test_same_seed_same_bytes(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        assert run(["--seed", "5", "verify", "--suite", "riccati", "--count", "3", "--out",
                    str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_classify_not_cn2_exits_2(capsys):
    assert run(["classify", "--builtin", "round_sphere", "--point", "1,1,1"]) == 2


def test_splitting_not_cn2_exits_2(capsys):
    assert run(["splitting", "--builtin", "flat3", "--point", "0,0,0"]) == 2


def test_unknown_flag_exits_1(capsys):
    assert run(["analyze", "--builtin", "flat3", "--point", "0,0,0", "--bogus"]) == 1
    assert "--bogus" in capsys.readouterr().err


def test_unknown_suite_exits_1(capsys):
    assert run(["verify", "--suite", "nope"]) == 1


def test_bad_point_exits_1(capsys):
    assert run(["analyze", "--builtin", "flat3", "--point", "0,0"]) == 1


def test_negative_threads_rejected(capsys):
    assert run(["--threads", "-1", "builtin", "--list"]) == 1


def test_builtin_list(capsys):
    assert run(["builtin", "--list"]) == 0
    text = capsys.readouterr().out
    for name in ("flat", "cone", "ex1", "ex4"):
        assert name + "(" in text


def test_verify_suite_passes(capsys):
    assert run(["verify", "--suite", "riccati", "--count", "3"]) == 0
    assert "0 failed" in capsys.readouterr().out


def test_fd_flag_agrees(capsys):
    ad = _json(capsys, ["analyze", "--builtin", "cone", "--point", "1,1,1"])
    fd = _json(capsys, ["--fd", "analyze", "--builtin", "cone", "--point", "1,1,1"])
    assert fd["scal"] == pytest.approx(ad["scal"], rel=1e-4)


@pytest.mark.parametrize("name", SUBCOMMANDS)
def test_every_subcommand_has_help(name, capsys):
    assert run([name, "--help"]) == 0
    assert "--" in capsys.readouterr().out


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "cn2lab", "riccati", "--c0", "1,0,0,1",
                          "--t", "0.5"], capture_output=True, text=True)
    assert res.returncode == 0
    assert json.loads(res.stdout)["samples"][0]["trace"] == pytest.approx(4.0)
