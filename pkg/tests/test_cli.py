import csv
import io
import json
from pathlib import Path

import numpy as np
import pytest

from orthomerge.checkpoint_io import RECIPE_SCHEMA, load_tensor_file, store_tensor_file
from orthomerge.cli import build_parser, main
from orthomerge.errors import EXIT_FORMAT, EXIT_NUMERIC, EXIT_OK, EXIT_RECIPE, EXIT_SHAPE

DOCS = Path(__file__).resolve().parent.parent / "docs"


@pytest.fixture
def fx(tmp_path):
    out = tmp_path / "fx"
    assert main(["synth", "--out-dir", str(out), "--tasks", "3", "--d-in", "8",
                 "--d-out", "12", "--noise", "0.01", "--adapters"]) == EXIT_OK
    return json.loads((out / "fixture.json").read_text())["files"]


def merge_args(files, out, *extra, experts=None):
    args = ["--base", files["base"], "--output", str(out)]
    for e in experts or files["experts"]:
        args += ["--expert", e]
    return args + list(extra)


def write_recipe(path, **doc):
    path.write_text(json.dumps(doc))
    return str(path)


def test_schema_file_matches_code():
    assert json.loads((DOCS / "recipe.schema.json").read_text()) == RECIPE_SCHEMA


def test_help_documents_exit_codes(capsys):
    with pytest.raises(SystemExit):
        build_parser().parse_args(["merge", "--help"])
    out = capsys.readouterr().out
    for code in ("RECIPE_INVALID", "MALFORMED_HEADER", "SHAPE_MISMATCH", "CAYLEY_DOMAIN"):
        assert code in out


def test_validate_recipe(tmp_path, capsys):
    good = write_recipe(tmp_path / "g.json", method="dare", base="b", experts=["e"],
                        output="o", residual_backend={"dare_drop_prob": 0.5})
    assert main(["validate-recipe", good]) == EXIT_OK
    bad = write_recipe(tmp_path / "b.json", method="dare", base="b", experts=["e"],
                       output="o", residual_backend={"dare_drop_prob": 1.0})
    assert main(["validate-recipe", bad]) == EXIT_RECIPE
    err = capsys.readouterr().err
    assert "RECIPE_INVALID" in err and "dare_drop_prob" in err


@pytest.mark.parametrize("doc", [
    {"method": "ta", "base": "b", "experts": [], "output": "o"},
    {"method": "nope", "base": "b", "experts": ["e"], "output": "o"},
    {"method": "ta", "base": "b", "experts": ["e"], "output": "o", "unknown": 1},
    {"method": "ta", "base": "b", "experts": ["e"], "output": "o", "block_size": 0},
    {"method": "ta", "base": "b", "experts": ["e"]},
])
def test_schema_rejections(tmp_path, doc):
    assert main(["validate-recipe", write_recipe(tmp_path / "r.json", **doc)]) == EXIT_RECIPE


def test_json_output_is_pure(tmp_path, capsys):
    p = write_recipe(tmp_path / "g.json", method="ta", base="b", experts=["e"], output="o")
    assert main(["validate-recipe", p, "--json"]) == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    assert doc["valid"] and doc["recipe"]["residual_backend"]["lambda"] is None


def test_flags_override_recipe(fx, tmp_path, capsys):
    p = write_recipe(tmp_path / "r.json", method="ties", base="missing", experts=["missing"],
                     output="elsewhere", residual_backend={"ties_keep_fraction": 0.5})
    out = tmp_path / "o.st"
    rc = main(["merge", "--recipe", p, "--method", "ta", "--lambda", "0.5", "--dry-run",
               "--json"] + merge_args(fx, out))
    assert rc == EXIT_OK
    doc = json.loads(capsys.readouterr().out)
    r = doc["recipe"]
    assert r["method"] == "ta" and r["base"] == fx["base"] and r["output"] == str(out)
    assert r["residual_backend"] == {"kind": "ta", "lambda": 0.5, "ties_keep_fraction": 0.5,
                                     "dare_drop_prob": 0.9}
    assert not out.exists()


def test_single_expert_decouple_merge(fx, tmp_path):
    out = tmp_path / "one.st"
    rc = main(["decouple-merge"] + merge_args(fx, out, "--output-dtype", "F64",
                                              experts=fx["experts"][:1]))
    assert rc == EXIT_OK
    merged = load_tensor_file(out)
    expert = load_tensor_file(fx["experts"][0])
    for name, w in expert.items():
        a, b = merged[name].astype(np.float64), w.astype(np.float64)
        assert np.linalg.norm(a - b) <= 1e-6 * np.linalg.norm(b)
    diag = json.loads(Path(str(out) + ".diagnostics.json").read_text())
    assert diag["recipe"]["method"] == "decouple"
    factors = [t["correction_factor"] for t in diag["tensors"].values() if "correction_factor" in t]
    assert factors and all(c == 1.0 for c in factors)


def test_end_to_end_ortho_merge_then_inspect(fx, tmp_path, capsys):
    out = tmp_path / "m.st"
    assert main(["merge", "--method", "ortho_merge_oft"] + merge_args(fx, out)) == EXIT_OK
    capsys.readouterr()
    assert main(["inspect", str(out), "--base", fx["base"], "--json"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    merged = [t for t in rep["tensors"] if t["name"].endswith(".weight")]
    assert len(merged) == 2
    for t in merged:
        assert t["implied_rotation_orthogonality_error"] < 1e-6
        assert abs(t["spectral_ratio_to_base"] - 1) < 1e-6
    diag = json.loads(Path(str(out) + ".diagnostics.json").read_text())
    assert diag["summary"]["max_orthogonality_error"] < 1e-6


def test_adapter_merge_and_inspect(fx, tmp_path, capsys):
    out = tmp_path / "a.st"
    rc = main(["merge", "--method", "ortho_merge_oft"]
              + merge_args(fx, out, experts=fx["adapters"]))
    assert rc == EXIT_OK
    capsys.readouterr()
    assert main(["inspect", fx["adapters"][0], "--json"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["kind"] == "oft_adapter"
    assert all(t["orthogonality_error"] < 1e-12 for t in rep["tensors"])


@pytest.mark.parametrize("method", ["ta", "ties", "dare", "simple_avg", "decouple",
                                    "ablation_simple_avg_r", "ablation_seq_product_r",
                                    "ablation_simple_avg_q"])
def test_every_method_runs(fx, tmp_path, method):
    out = tmp_path / f"{method}.st"
    assert main(["merge", "--method", method] + merge_args(fx, out)) == EXIT_OK
    assert set(load_tensor_file(out)) == set(load_tensor_file(fx["base"]))


def test_stats_csv(fx, tmp_path, capsys):
    out = tmp_path / "norms.csv"
    rc = main(["stats", "--base", fx["base"], "--expert", fx["experts"][0],
               "--expert", fx["experts"][1], "--output", str(out)])
    assert rc == EXIT_OK
    rows = list(csv.DictReader(io.StringIO(out.read_text())))
    assert len(rows) == 4
    assert [r["checkpoint"] for r in rows[:2]] == ["expert_0", "expert_1"]
    for r in rows:
        assert r["module_tag"] == "up_proj"
        # noise is small, so most of each update is the rotation
        assert float(r["ortho_norm"]) > float(r["residual_norm"])


def test_landscape_csv(fx, tmp_path, capsys):
    merged = tmp_path / "m.st"
    assert main(["merge", "--method", "decouple"] + merge_args(fx, merged)) == EXIT_OK
    grid = tmp_path / "grid.csv"
    args = ["landscape", "--base", fx["base"], "--nx", "5", "--ny", "4", "--output", str(grid),
            "--model", fx["experts"][0], "--model", str(merged)]
    for e in fx["experts"]:
        args += ["--expert", e]
    assert main(args) == EXIT_OK
    lines = grid.read_text().splitlines()
    assert lines[0] == "x,y,loss" and len(lines) == 21
    points = Path(str(grid) + ".points.csv").read_text().splitlines()
    assert points[0] == "model,x,y,off_plane,loss" and len(points) == 3


def test_format_and_shape_errors(fx, tmp_path, capsys):
    junk = tmp_path / "junk.st"
    junk.write_bytes(b"\x00" * 3)
    assert main(["merge", "--method", "ta"] + merge_args(fx, tmp_path / "o.st",
                                                          experts=[str(junk)])) == EXIT_FORMAT
    data = load_tensor_file(fx["experts"][0])
    data["model.layers.0.mlp.up_proj.weight"] = np.zeros((8, 5), np.float32)
    bad = tmp_path / "bad.st"
    store_tensor_file(bad, data)
    capsys.readouterr()
    rc = main(["merge", "--method", "decouple", "--json"]
              + merge_args(fx, tmp_path / "o.st", experts=[fx["experts"][1], str(bad)]))
    assert rc == EXIT_SHAPE
    cap = capsys.readouterr()
    err = json.loads(cap.out)["error"]
    assert err["code"] == "SHAPE_MISMATCH" and err["task"] == 1
    assert err["tensor"] == "model.layers.0.mlp.up_proj.weight"
    assert "hint" in cap.err
    assert not (tmp_path / "o.st").exists()


def test_missing_required_inputs(tmp_path):
    assert main(["merge", "--method", "ta", "--output", str(tmp_path / "o")]) == EXIT_RECIPE


def test_missing_file_is_a_format_error(fx, tmp_path):
    rc = main(["merge", "--method", "ta"] + merge_args(fx, tmp_path / "o.st",
                                                        experts=[str(tmp_path / "nope.st")]))
    assert rc == EXIT_FORMAT


def test_half_turn_is_a_numeric_error(tmp_path, capsys):
    w0 = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    store_tensor_file(tmp_path / "b.st", {"w": w0})
    store_tensor_file(tmp_path / "e.st", {"w": -w0})
    rc = main(["merge", "--method", "ortho_merge_oft", "--base", str(tmp_path / "b.st"),
               "--expert", str(tmp_path / "e.st"), "--output", str(tmp_path / "o.st")])
    assert rc == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "CAYLEY_DOMAIN" in err and "tensor=w" in err and "task=0" in err
    assert not (tmp_path / "o.st").exists()
