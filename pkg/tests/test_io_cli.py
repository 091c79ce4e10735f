import json

import numpy as np
import pytest

from sqforge.cli import RunManifest, main, manifest_path
from sqforge.errors import DatasetFormatError
from sqforge.instance import InstanceParams, LabeledDataset, planted_direction, sample_null
from sqforge.io import format_dataset, format_list, parse_dataset, parse_list, write_dataset


def test_dataset_round_trip_exact():
    ds = sample_null(InstanceParams(alpha=0.1, rho=0.5, d=3), 50, 1)
    ds.provenance = np.arange(50) % 3 == 0
    back = parse_dataset(format_dataset(ds))
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.y, ds.y)
    np.testing.assert_array_equal(back.provenance, ds.provenance)
    assert back.manifest["alpha"] == 0.1 and back.manifest["n"] == 50


def test_empty_dataset_round_trip():
    ds = LabeledDataset(np.zeros((0, 2)), np.zeros(0), manifest={"d": 2})
    assert parse_dataset(format_dataset(ds)).n == 0


@pytest.mark.parametrize(
    "text,line",
    [
        ("1 2 3\n", 1),
        ('#manifest {"d": 2}\n1 2 3\n1 2\n', 3),
        ('#manifest {"d": 2}\n1 2 x\n', 2),
        ('#manifest {"d": 2}\n1 2 nan\n', 2),
        ('#manifest {"d": 2, "n": 3}\n1 2 3\n', 2),
        ('#manifest {"d": 2}\n1 2 3\n#provenance iz\n', 3),
        ("#manifest {bad\n", 1),
    ],
)
def test_parse_errors_carry_line(text, line):
    with pytest.raises(DatasetFormatError) as info:
        parse_dataset(text)
    assert info.value.line == line


def test_list_round_trip():
    betas = [np.array([0.1, -0.2]), np.array([1 / 3, 2.0])]
    got, summary = parse_list(format_list(betas, {"list_size": 2}))
    assert summary == {"list_size": 2}
    for a, b in zip(got, betas):
        np.testing.assert_array_equal(a, b)


# -- CLI -------------------------------------------------------------------


def run(*args):
    return main([str(a) for a in args])


def test_generate_null(tmp_path):
    out = tmp_path / "null.ds"
    assert run("generate", "--null", "--alpha", 0.1, "--d", 8, "--n", 1000, "--seed", 1, "--out", out) == 0
    ds = parse_dataset(out.read_text())
    assert ds.n == 1000 and ds.manifest["planted"] is False
    man = RunManifest.from_json(manifest_path(out).read_text())
    assert man.subcommand == "generate" and man.seed == 1 and man.duration_s >= 0


def test_generate_infeasible(tmp_path, capsys):
    code = run("generate", "--planted", "--alpha", 0.25, "--m", 50, "--d", 4, "--n", 10, "--out", tmp_path / "x")
    assert code == 2
    assert "residual" in capsys.readouterr().err


def test_usage_and_io_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        main(["generate", "--alpha", "0.1"])
    assert info.value.code == 1
    assert run("decode", "--in", tmp_path / "missing.ds") == 1
    assert run("generate", "--null", "--alpha", 0.7, "--n", 5) == 1


def test_verify_round_trip(tmp_path):
    ds = tmp_path / "p.ds"
    rep = tmp_path / "p.report"
    assert run("generate", "--planted", "--alpha", 0.1, "--d", 4, "--n", 5000, "--seed", 2, "--provenance", "--out", ds) == 0
    assert run("verify", "--in", ds, "--cert-trials", 100, "--y-grid", 9, "--out", rep) == 0
    text = rep.read_text()
    assert "result PASS" in text and "planted direction" in text


def test_verify_null_and_flags(tmp_path):
    ds = tmp_path / "n.ds"
    run("generate", "--null", "--alpha", 0.1, "--d", 4, "--n", 500, "--out", ds)
    assert run("verify", "--in", ds, "--cert-trials", 50, "--y-grid", 5, "--out", tmp_path / "r") == 0
    assert run("verify", "--alpha", 0.25, "--cert-trials", 50, "--y-grid", 5, "--kmax", 60, "--out", tmp_path / "r2") == 0
    assert run("verify") == 1


def test_verify_failure_exit(tmp_path, capsys):
    src = tmp_path / "p.ds"
    run("generate", "--planted", "--alpha", 0.1, "--d", 4, "--n", 5000, "--seed", 5, "--out", src)
    ds = parse_dataset(src.read_text())
    v = planted_direction(4, 0.3, 5, 0)
    # leak the label into the planted coordinate: the order-1 audit must flag it
    ds.x = ds.x + 0.2 * np.outer(ds.y, v)
    bad = tmp_path / "leaky.ds"
    write_dataset(ds, bad)
    capsys.readouterr()
    assert run("verify", "--in", bad, "--cert-trials", 20, "--y-grid", 5) == 3
    assert "verification failed at: audit 1," in capsys.readouterr().err


def test_verify_infeasible_exit(tmp_path):
    assert run("verify", "--alpha", 0.25, "--m", 2, "--cert-trials", 20, "--y-grid", 9) == 2


def test_verify_parse_error(tmp_path, capsys):
    bad = tmp_path / "bad.ds"
    bad.write_text('#manifest {"d": 2, "alpha": 0.1, "rho": 0.5}\n1 2 3\n1 2\n')
    assert run("verify", "--in", bad) == 1
    assert "line 3" in capsys.readouterr().err


def test_decode_limits_and_success(tmp_path, capsys):
    d8 = tmp_path / "d8.ds"
    run("generate", "--null", "--alpha", 0.1, "--d", 8, "--n", 100, "--out", d8)
    assert run("decode", "--in", d8, "--sigma", 0.05) == 4
    empty = tmp_path / "e.ds"
    empty.write_text('#manifest {"d": 2}\n')
    assert run("decode", "--in", empty, "--alpha", 0.3, "--sigma", 0.05) == 4
    p2 = tmp_path / "p2.ds"
    run("generate", "--planted", "--alpha", 0.3, "--rho", 0.99874921777190895, "--d", 2, "--n", 2000, "--seed", 3, "--out", p2)
    out = tmp_path / "p2.list"
    capsys.readouterr()
    assert run("decode", "--in", p2, "--out", out) == 0
    betas, summary = parse_list(out.read_text())
    assert summary["min_distance_to_planted"] <= summary["gamma"]
    assert "min distance to planted beta" in capsys.readouterr().err


def test_test_subcommand(tmp_path):
    out = tmp_path / "t.csv"
    assert run("test", "--alpha", 0.1, "--d", 64, "--n", 200, "--trials", 4, "--decoder", "oracle", "--out", out) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 5 and all(l.split(",")[3] == "1" for l in lines[1:])
    assert run("test", "--alpha", 0.1, "--d", 8, "--n", 100, "--trials", 2, "--decoder", "empty") == 0


@pytest.mark.parametrize("cmd", [
    ["generate", "--planted", "--alpha", "0.1", "--d", "5", "--n", "3000", "--seed", "4", "--provenance"],
    ["verify", "--alpha", "0.1", "--y-grid", "5", "--cert-trials", "30"],
    ["test", "--alpha", "0.1", "--d", "16", "--n", "100", "--trials", "4"],
])
def test_replay_byte_identical(tmp_path, cmd):
    out = tmp_path / "out"
    assert main(cmd + ["--out", str(out)]) == 0
    again = tmp_path / "again"
    assert main(["replay", str(manifest_path(out)), "--out", str(again)]) == 0
    assert out.read_bytes() == again.read_bytes()
    assert json.loads(manifest_path(out).read_text())["version"]


def test_replay_bad_manifest(tmp_path):
    m = tmp_path / "m.json"
    m.write_text('{"subcommand": "nope", "params": {}, "seed": 0, "version": "x"}')
    assert run("replay", m) == 1
    m.write_text("not json")
    assert run("replay", m) == 1
