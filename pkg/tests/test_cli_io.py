import csv
import json
import math
import os
import pickle
import subprocess
import sys

import numpy as np
import pytest

from newton_sic.cli_io import (DEFAULT_OUT, ENV_OUT, EXIT_CONSTRUCTION, EXIT_IO, EXIT_OK, EXIT_RESOURCE, EXIT_USAGE,
                               EXIT_VERIFY, SceneConfig, build_object, exit_code, export_mesh_obj, fmt, out_dir,
                               parse_scene_config, read_obj, run_command, scene_meshes)
from newton_sic.errors import (ConstructionError, DicViolation, ParseError, ResourceError, ValidationError,
                               VerificationError)

PAIR = {"O": [0, 0], "A": [1, -0.25], "B": [1, 0.25], "inner_fraction": 0.5}


def write_cfg(tmp_path, name="cfg.json", **kw):
    base = {"mode": "Elementary", "pair": PAIR, "M": 1.0, "seed": 3, "n_rays": 5000, "n_samples": 1000,
            "out_dir": str(tmp_path / "out")}
    base.update(kw)
    path = tmp_path / name
    path.write_text(json.dumps(base))
    return str(path)


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# ---------------------------------------------------------------- parsing

def test_minimal_config_defaults():
    cfg = parse_scene_config('{"mode": "Composite"}')
    assert cfg.delta == pytest.approx(0.03) and cfg.cap == 64 and cfg.seed is None
    assert cfg.domain == {"disc": {"center": [0.0, 0.0], "radius": 1.0}}


def test_seed_required_for_mc():
    with pytest.raises(ValidationError) as e:
        parse_scene_config('{"mode": "Composite"}', stochastic=True)
    assert e.value.field == "seed"


def test_budget_m30():
    with pytest.raises(ValidationError) as e:
        parse_scene_config('{"mode": "Composite", "m": 30}')
    assert e.value.field == "m"


@pytest.mark.parametrize("text", ['{"mode": "Composite", "colour": 1}', "[1, 2]", "{not json",
                                  '{"inner": {"bogus": 1}, "mode": "DicBody"}'])
def test_parse_errors(text):
    with pytest.raises(ParseError):
        parse_scene_config(text)


@pytest.mark.parametrize("field, value", [("M", 0), ("epsilon", -1), ("n", 0), ("n", 100), ("cap", 0),
                                          ("mode", "Sphere"), ("domain", {"disc": {"radius": -1}}),
                                          ("seed", -2), ("M", True), ("m", 2.5)])
def test_validation_names_field(field, value):
    with pytest.raises(ValidationError) as e:
        parse_scene_config(json.dumps({field: value}))
    assert e.value.field == field


def test_elementary_needs_pair_fields():
    with pytest.raises(ValidationError) as e:
        parse_scene_config('{"mode": "Elementary", "pair": {"O": [0, 0]}}')
    assert e.value.field == "pair"


def test_config_digest_stable():
    a = parse_scene_config('{"M": 1.0, "epsilon": 0.3}')
    b = parse_scene_config('{"epsilon": 0.3, "M": 1.0}')
    assert a.digest == b.digest and a.digest != parse_scene_config('{"M": 2.0}').digest


def test_fmt_round_trip():
    for x in (0.1, math.pi, 1e-300, 123456789.123456789):
        assert float(fmt(x)) == x
    assert fmt(3) == "3" and fmt(np.bool_(True)) == "True"


# ---------------------------------------------------------------- exit codes

@pytest.mark.parametrize("exc, code", [(ConstructionError("x"), EXIT_CONSTRUCTION), (VerificationError("x"), EXIT_VERIFY),
                                       (DicViolation("x"), EXIT_VERIFY), (ResourceError("x"), EXIT_RESOURCE),
                                       (OSError("x"), EXIT_IO), (ParseError("x"), EXIT_USAGE),
                                       (ValidationError("x"), EXIT_USAGE)])
def test_exit_code_mapping(exc, code):
    assert exit_code(exc) == code


def test_usage_errors(tmp_path):
    assert run_command([]) == EXIT_USAGE
    assert run_command(["frobnicate"]) == EXIT_USAGE
    assert run_command(["resist", "--config", write_cfg(tmp_path, seed=None)]) == EXIT_USAGE
    assert run_command(["build", "--config", str(tmp_path / "missing.json")]) == EXIT_IO


def test_doubling_over_budget_is_resource():
    assert run_command(["doubling-demo", "--m", "30", "--out", "/tmp/unused"]) == EXIT_RESOURCE


def test_unwritable_output_is_io(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert run_command(["table", "--out", str(blocker / "sub")]) == EXIT_IO


def test_non_nonnegative_pair_is_construction(tmp_path):
    bad = dict(PAIR, inner_fraction=0.05)
    assert run_command(["build", "--config", write_cfg(tmp_path, pair=bad)]) == EXIT_CONSTRUCTION


# ---------------------------------------------------------------- commands

def test_phi_prints_value(capsys):
    assert run_command(["phi", "--disc", "1", "--M", "1"]) == EXIT_OK
    line = capsys.readouterr().out.strip()
    assert line.startswith("phi = 0.103") and "±" in line


def test_table_csv(tmp_path):
    assert run_command(["table", "--out", str(tmp_path)]) == EXIT_OK
    rows = read_csv(tmp_path / "table.csv")
    assert rows[0] == ["M", "P_SC", "P_C", "phi"] and len(rows) == 5
    want = {1.5: 0.05, 1.0: 0.10, 0.7: 0.18, 0.4: 0.35}
    for r in rows[1:]:
        assert abs(float(r[3]) - want[float(r[0])]) <= 0.01
    assert rows[2][1:3] == ["1.1799999999999999", "1.1399999999999999"]


def test_doubling_demo(tmp_path, capsys):
    assert run_command(["doubling-demo", "--m", "8", "--out", str(tmp_path)]) == EXIT_OK
    assert "PASS 256 triangles" in capsys.readouterr().out
    assert len(read_csv(tmp_path / "doubling.csv")) == 10


def test_pipeline_elementary(tmp_path, capsys):
    cfg = write_cfg(tmp_path)
    out = tmp_path / "out"
    assert run_command(["build", "--config", cfg, "--record"]) == EXIT_OK
    assert (out / "scene.pkl").exists() and (out / "build_record.json").exists()
    scene = str(out / "scene.pkl")
    assert run_command(["resist", "--config", cfg, "--scene", scene]) == EXIT_OK
    rows = {r[0]: r for r in read_csv(out / "resist.csv")[1:]}
    F, eF, R, eR = float(rows["F"][2]), float(rows["F"][3]), float(rows["R"][2]), float(rows["R"][3])
    assert abs(F - R) <= eF + eR
    assert run_command(["trace", "--config", cfg, "--scene", scene, "--dump"]) == EXIT_OK
    assert "histogram = {1: 5000}" in capsys.readouterr().out
    rays = read_csv(out / "rays.csv")
    assert len(rays) == 5001 and all(float(r[6]) >= -1e-9 for r in rays[1:])
    assert run_command(["verify-sic", "--config", cfg, "--scene", scene]) == EXIT_OK
    assert capsys.readouterr().out.startswith("PASS")


def test_reproducible_csv(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        cfg = write_cfg(tmp_path, name=f"{d.name}.json", out_dir=str(d))
        assert run_command(["resist", "--config", cfg]) == EXIT_OK
        assert run_command(["trace", "--config", cfg, "--dump"]) == EXIT_OK
    for f in ("resist.csv", "rays.csv"):
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_output_dir_precedence(tmp_path, monkeypatch):
    cfg = SceneConfig(out_dir="from_cfg")
    monkeypatch.delenv(ENV_OUT, raising=False)
    assert out_dir(None, None) == DEFAULT_OUT
    assert out_dir(cfg, None) == "from_cfg"
    monkeypatch.setenv(ENV_OUT, str(tmp_path / "env"))
    assert out_dir(cfg, None) == str(tmp_path / "env")
    assert out_dir(cfg, "flag") == "flag"
    assert run_command(["table"]) == EXIT_OK
    assert (tmp_path / "env" / "table.csv").exists()


def test_verify_dic_exit_codes(tmp_path, dic_bodies):
    """Verification failures never exit 0: the body keeps the double impact condition but not the bound."""
    body = dic_bodies(0.2)
    path = tmp_path / "dic.pkl"
    path.write_bytes(pickle.dumps(body))
    cfg = write_cfg(tmp_path, mode="DicBody", pair=None, epsilon=0.2)
    args = ["verify-dic", "--config", cfg, "--scene", str(path), "--n", "3000"]
    assert run_command(args) == EXIT_VERIFY
    assert run_command(args + ["--no-bound"]) == EXIT_OK


def test_verify_sic_fails_on_dic_scene(tmp_path, dic_bodies):
    path = tmp_path / "dic.pkl"
    path.write_bytes(pickle.dumps(dic_bodies(0.2)))
    cfg = write_cfg(tmp_path, mode="DicBody", pair=None, epsilon=0.2)
    assert run_command(["verify-sic", "--config", cfg, "--scene", str(path)]) == EXIT_USAGE


def test_entry_point_subprocess(tmp_path):
    r = subprocess.run([sys.executable, "-m", "newton_sic.cli_io", "phi", "--M", "0.4"],
                       capture_output=True, text=True, timeout=60)
    assert r.returncode == 0 and r.stdout.startswith("phi = 0.35")


# ---------------------------------------------------------------- OBJ export

def _edges(T):
    e = np.sort(np.concatenate([T[:, [0, 1]], T[:, [1, 2]], T[:, [2, 0]]]), axis=1)
    _, cnt = np.unique(e, axis=0, return_counts=True)
    return cnt


def test_obj_pair_mesh(tmp_path):
    obj = build_object(parse_scene_config(json.dumps({"mode": "Elementary", "pair": PAIR})))
    path = tmp_path / "pair.obj"
    assert export_mesh_obj(obj, str(path), resolution=16) == 1
    text = path.read_text().splitlines()
    faces = [list(map(int, l.split()[1:])) for l in text if l.startswith("f ")]
    nv = sum(l.startswith("v ") for l in text)
    assert min(map(min, faces)) == 1 and max(map(max, faces)) == nv
    (V, T), = read_obj(str(path)).values()
    # no edge is shared by more than two triangles, and the mesh is connected along shared edges
    assert _edges(T).max() <= 2
    # vertices off the MN wall (where u jumps) lie on the graph: paraboloid beyond MN, zero in the valley
    P, p = obj.pairs, obj.p[0]
    e = P.N[0] - P.M[0]
    side = (e[0] * (V[:, 1] - P.M[0][1]) - e[1] * (V[:, 0] - P.M[0][0])) / np.linalg.norm(e)
    side *= np.sign(e[0] * (P.O[0][1] - P.M[0][1]) - e[1] * (P.O[0][0] - P.M[0][0]))
    r2 = ((V[:, :2] - P.O[0]) ** 2).sum(1)
    mirror, valley = side < -1e-9, side > 1e-9
    assert mirror.sum() > 0.5 * len(V) and valley.any()
    assert np.allclose(V[mirror, 2], (r2[mirror] - p * p) / (2 * p), atol=1e-12)
    assert np.allclose(V[valley, 2], 0, atol=1e-12)
    # faces point up (counterclockwise seen from above) off the vertical wall
    n = np.cross(V[T[:, 1]] - V[T[:, 0]], V[T[:, 2]] - V[T[:, 0]])
    horiz = np.abs(n[:, 2]) > 1e-12 * np.linalg.norm(n, axis=1)
    assert np.all(n[horiz, 2] > 0)


def test_obj_flat_square_two_triangles(tmp_path):
    cfg = parse_scene_config(json.dumps({"mode": "Flat", "domain": {"polygon": [[0, 0], [1, 0], [1, 1], [0, 1]]}}))
    path = tmp_path / "flat.obj"
    assert export_mesh_obj(build_object(cfg), str(path)) == 1
    (V, T), = read_obj(str(path)).values()
    assert len(T) == 2 and np.allclose(V[:, 2], 0)
    n = np.cross(V[T[:, 1]] - V[T[:, 0]], V[T[:, 2]] - V[T[:, 0]])
    assert np.all(n[:, 2] > 0)


def test_obj_dic_object_count(tmp_path, dic_bodies):
    body = dic_bodies(0.2)
    k = export_mesh_obj(body, str(tmp_path / "dic.obj"), resolution=2, max_objects=10 ** 7)
    assert k == len(body.scene.patch_list())
    assert len(read_obj(str(tmp_path / "dic.obj"))) == k


def test_obj_object_cap(dic_bodies):
    with pytest.raises(ResourceError):
        scene_meshes(dic_bodies(0.2), resolution=2, max_objects=10)


def test_obj_unwritable(tmp_path):
    obj = build_object(parse_scene_config(json.dumps({"mode": "Elementary", "pair": PAIR})))
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        export_mesh_obj(obj, str(blocker / "x.obj"))
