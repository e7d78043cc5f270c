import json

import numpy as np
import pytest

from refmap.cli import main
from refmap.formats import decode_png, encode_png, read_tensor, read_tensors, write_tensor


def square(x0, y0, x1, y1):
    return [[x0, y0], [x1, y0], [x1, y1], [x0, y1]]


def write_ann(path, queries, w=64, h=48):
    doc = {"image": {"width": w, "height": h},
           "queries": [{"text": f"q{i}", "regions": r, "multi_hop": False, "multi_ref": len(r) > 1}
                       for i, r in enumerate(queries)]}
    path.write_text(json.dumps(doc))
    return path


@pytest.fixture
def ann2(tmp_path):
    return write_ann(tmp_path / "scene.json", [[square(4, 4, 30, 20)], [square(40, 10, 60, 40), square(2, 30, 10, 44)]])


@pytest.fixture
def synth(tmp_path):
    d = tmp_path / "synth"
    assert main(["synth", str(d), "--dims", "seq=3,dim=8,height=8,width=8,levels=3,heads=2,points=2"]) == 0
    return d


def tree_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_mcmg_writes_maps_and_sidecar(tmp_path, ann2):
    out = tmp_path / "maps"
    assert main(["mcmg", str(ann2), str(out)]) == 0
    assert sorted(tree_bytes(out)) == ["scene.mcmg.json", "scene_0.png", "scene_1.png"]
    m = decode_png((out / "scene_0.png").read_bytes())
    assert m.shape == (48, 64) and m.max() > 200
    side = json.loads((out / "scene.mcmg.json").read_text())
    assert side["config"]["levels"] == [1, 3, 6] and side["queries"] == 2


def test_mcmg_flags(tmp_path, ann2):
    out = tmp_path / "maps"
    args = ["mcmg", str(ann2), str(out), "--levels", "4,8", "--sigma", "1.5", "--size", "32x24",
            "--format", "xten", "--image-id", "img"]
    assert main(args) == 0
    t = read_tensor((out / "img_1.xten").read_bytes())
    assert t.dtype == np.uint8 and t.shape == (24, 32)


def test_mcmg_missing_input(tmp_path, capsys):
    out = tmp_path / "maps"
    assert main(["mcmg", str(tmp_path / "nope.json"), str(out)]) == 2
    assert not out.exists()
    assert "not found" in capsys.readouterr().err


def test_mcmg_bad_annotation(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"image": {"width": 4}}')
    assert main(["mcmg", str(p), str(tmp_path / "o")]) == 2


def test_mcmg_manifest(tmp_path, ann2):
    write_ann(tmp_path / "other.json", [[square(0, 0, 10, 10)]], 32, 32)
    (tmp_path / "m.json").write_text(json.dumps([{"id": "a", "annotations": "scene.json"},
                                                  {"id": "b", "annotations": "other.json"}]))
    out = tmp_path / "maps"
    assert main(["mcmg", str(tmp_path / "m.json"), str(out)]) == 0
    assert sorted(tree_bytes(out)) == ["a.mcmg.json", "a_0.png", "a_1.png", "b.mcmg.json", "b_0.png"]


def test_write_failure_when_target_is_a_file(tmp_path, ann2):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["mcmg", str(ann2), str(blocker / "sub")]) == 3
    assert main(["synth", str(blocker / "sub")]) == 3


def test_synth_fixture_layout(synth):
    files = tree_bytes(synth)
    assert sorted(files) == ["features.xten", "manifest.json", "synth.json", "text.xten", "weights.json",
                             "weights.xten"]
    feats = read_tensors(files["features.xten"])
    assert [f.shape for f in feats] == [(8, 8, 8), (4, 4, 8), (2, 2, 8)]


def test_synth_defaults_four_levels(tmp_path):
    assert main(["synth", str(tmp_path / "s")]) == 0
    feats = read_tensors((tmp_path / "s" / "features.xten").read_bytes())
    assert len(feats) == 4 and feats[0].shape == (64, 64, 16)


def test_synth_seeded(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", str(tmp_path / name), "--seed", "3"]) == 0
    assert main(["synth", str(tmp_path / "c"), "--seed", "4"]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")
    assert tree_bytes(tmp_path / "a") != tree_bytes(tmp_path / "c")


def test_synth_bad_dims(tmp_path, capsys):
    assert main(["synth", str(tmp_path / "s"), "--dims", "dim=10"]) == 2
    assert "divisible" in capsys.readouterr().err
    assert main(["synth", str(tmp_path / "s"), "--dims", "colour=3"]) == 2
    assert not (tmp_path / "s").exists()


def test_infer_range(tmp_path, synth):
    out = tmp_path / "map.xten"
    png = tmp_path / "map.png"
    args = ["infer", str(synth / "features.xten"), str(synth / "text.xten"), str(out),
            "--weights", str(synth / "weights.json"), "--png", str(png), "--heads", "2", "--points", "2"]
    assert main(args) == 0
    m = read_tensor(out.read_bytes())
    assert m.dtype == np.float32 and m.shape == (32, 32)
    assert m.min() >= 0.0 and m.max() <= 1.0
    assert decode_png(png.read_bytes()).shape == (32, 32)


def test_infer_seeded_weights_match_file(tmp_path, synth):
    a, b = tmp_path / "a.xten", tmp_path / "b.xten"
    base = ["infer", str(synth / "features.xten"), str(synth / "text.xten")]
    assert main(base + [str(a), "--weights", str(synth / "weights.json")]) == 0
    assert main(base + [str(b), "--heads", "2", "--points", "2"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_infer_pool_modes_agree_for_one_token(tmp_path, synth):
    text = read_tensors((synth / "text.xten").read_bytes())[0][:1]
    one = tmp_path / "one.xten"
    one.write_bytes(write_tensor(text))
    outs = []
    for pool in ("first", "avg", "max"):
        o = tmp_path / f"{pool}.xten"
        assert main(["infer", str(synth / "features.xten"), str(one), str(o), "--pool", pool,
                     "--weights", str(synth / "weights.json")]) == 0
        outs.append(o.read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_infer_dim_mismatch(tmp_path, synth):
    bad = tmp_path / "t.xten"
    bad.write_bytes(write_tensor(np.ones((2, 5), np.float32)))
    assert main(["infer", str(synth / "features.xten"), str(bad), str(tmp_path / "o.xten")]) == 2
    junk = tmp_path / "j.xten"
    junk.write_bytes(b"XTEN\x01")
    assert main(["infer", str(junk), str(synth / "text.xten"), str(tmp_path / "o.xten")]) == 2
    assert not (tmp_path / "o.xten").exists()


def test_eval_self_and_errors(tmp_path, ann2, capsys):
    maps = tmp_path / "maps"
    assert main(["mcmg", str(ann2), str(maps)]) == 0
    capsys.readouterr()
    report = tmp_path / "r.json"
    assert main(["eval", str(maps), str(ann2), str(report)]) == 0
    lines = capsys.readouterr().out.split("\n")
    assert [ln.split()[0] for ln in lines if ln] == ["r_su", "r_as", "r_da", "r_mi"]
    doc = json.loads(report.read_text())
    assert doc["weights"] == [0.4, 0.35, 0.25]
    assert doc["aggregate"]["count"] == 2 and len(doc["queries"]) == 2
    assert main(["eval", str(maps), str(ann2), str(report), "--weights", "1,1,1"]) == 4
    assert main(["eval", str(maps), str(ann2), str(report), "--weights", "a,b"]) == 4
    (maps / "scene_1.png").unlink()
    assert main(["eval", str(maps), str(ann2), str(report)]) == 2


def test_validate(tmp_path, capsys):
    a = write_ann(tmp_path / "a.json", [[square(0, 0, 20, 20)], [square(0, 0, 20, 20)]])
    assert main(["validate", str(a), str(a)]) == 0
    assert capsys.readouterr().out.strip().endswith("2/2 passed")
    b = write_ann(tmp_path / "b.json", [[square(0, 0, 20, 20)], [square(0, 10, 20, 30)]])
    assert main(["validate", str(a), str(b)]) == 1
    out = capsys.readouterr().out
    assert "query 1\tfail" in out and "1/2 passed" in out
    c = write_ann(tmp_path / "c.json", [[square(0, 0, 20, 20)]])
    assert main(["validate", str(a), str(c)]) == 2


@pytest.mark.parametrize("value,rgb", [(0, (0, 0, 255)), (255, (255, 0, 0))])
def test_render_endpoints(tmp_path, value, rgb):
    m = tmp_path / "m.png"
    m.write_bytes(encode_png(np.full((5, 7), value, np.uint8)))
    out = tmp_path / "o.png"
    assert main(["render", str(m), str(out)]) == 0
    img = decode_png(out.read_bytes(), "RGB")
    assert img.shape == (5, 7, 3) and (img == rgb).all()


def test_render_blend(tmp_path):
    m = tmp_path / "m.png"
    m.write_bytes(encode_png(np.full((4, 4), 255, np.uint8)))
    base = tmp_path / "b.png"
    base.write_bytes(encode_png(np.zeros((8, 8, 3), np.uint8)))
    out = tmp_path / "o.png"
    assert main(["render", str(m), str(out), "--image", str(base), "--alpha", "0.5"]) == 0
    img = decode_png(out.read_bytes(), "RGB")
    assert img.shape == (8, 8, 3) and (img[..., 0] == 128).all() and (img[..., 2] == 0).all()
    again = tmp_path / "o2.png"
    assert main(["render", str(m), str(again), "--image", str(base), "--alpha", "0.5"]) == 0
    assert again.read_bytes() == out.read_bytes()


def test_render_bad_input(tmp_path):
    assert main(["render", str(tmp_path / "none.png"), str(tmp_path / "o.png")]) == 2
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not an image")
    assert main(["render", str(bad), str(tmp_path / "o.png")]) == 2


def test_unknown_flag_rejected(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["synth", str(tmp_path), "--bogus"])
    assert exc.value.code == 2


def test_threads_do_not_change_outputs(tmp_path, ann2):
    for t in ("1", "4"):
        assert main(["mcmg", str(ann2), str(tmp_path / t), "--threads", t]) == 0
    assert tree_bytes(tmp_path / "1") == tree_bytes(tmp_path / "4")
    assert not list(tmp_path.rglob("*.partial"))
