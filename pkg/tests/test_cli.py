import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from figforge.cli import main
from figforge.curation import CompoundRecord, write_records
from figforge.formats import (
    DetectionSet,
    Detection,
    EmbeddingMatrix,
    read_manifest,
    write_detections,
    write_embeddings,
)


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def error_json(err):
    return json.loads(err.strip().splitlines()[-1])


@pytest.fixture
def config(tmp_path, pool):
    doc = {
        "layout": [{"grid_rows": 2, "grid_cols": 2, "h_margin_range": [0, 10], "v_margin_range": [0, 10]},
                   {"grid_rows": 1, "grid_cols": 3}],
        "pool_index": str(pool.root / "pool.jsonl"),
        "generation": {"count": 6, "master_seed": 5, "out_dir": "corpus"},
        "eval": {"iou_thresholds": [0.5, 0.75], "f1_iou": 0.5},
        "filters": {"min_score": 0.5, "nms_iou": 0.45, "score_threshold": 0.6},
        "mmd": {"permutations": 30, "seed": 1},
    }
    path = tmp_path / "run.json"
    path.write_text(json.dumps(doc))
    return path


def test_generate_from_config(capsys, config, tmp_path):
    code, out, err = run(capsys, "generate", "--config", config)
    assert code == 0, err
    corpus = tmp_path / "corpus"
    manifests = list(read_manifest(corpus / "manifest.jsonl"))
    assert len(manifests) == 6
    eff = json.loads((corpus / "effective_config.json").read_text())
    assert eff["command"] == "generate" and eff["generation"]["master_seed"] == 5
    # flags win over the config
    code, _, err = run(capsys, "generate", "--config", config, "--count", "2", "--out", tmp_path / "c2", "--workers", "2")
    assert code == 0, err
    assert len(list(read_manifest(tmp_path / "c2" / "manifest.jsonl"))) == 2
    assert (tmp_path / "c2" / "manifest.jsonl").read_bytes().splitlines()[:2] == \
        (corpus / "manifest.jsonl").read_bytes().splitlines()[:2]


def test_generate_count_zero(capsys, pool, tmp_path):
    code, _, err = run(capsys, "generate", "--pool", pool.root / "pool.jsonl", "--out", tmp_path / "o", "--count", "0")
    assert code == 0, err
    assert (tmp_path / "o" / "manifest.jsonl").read_bytes() == b""


def test_workers_from_environment(capsys, pool, tmp_path, monkeypatch):
    monkeypatch.setenv("FIGFORGE_WORKERS", "2")
    args = ["generate", "--pool", pool.root / "pool.jsonl", "--count", "4", "--seed", "9"]
    assert run(capsys, *args, "--out", tmp_path / "a")[0] == 0
    monkeypatch.setenv("FIGFORGE_WORKERS", "1")
    assert run(capsys, *args, "--out", tmp_path / "b")[0] == 0
    for name in ("manifest.jsonl", "effective_config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_export_and_eval_perfect(capsys, config, tmp_path):
    assert run(capsys, "generate", "--config", config)[0] == 0
    corpus = tmp_path / "corpus"
    code, _, err = run(capsys, "export-coco", "--manifest", corpus / "manifest.jsonl", "--out", tmp_path / "coco.json")
    assert code == 0, err
    coco = json.loads((tmp_path / "coco.json").read_text())
    assert len(coco["images"]) == 6
    manifests = list(read_manifest(corpus / "manifest.jsonl"))
    write_detections(tmp_path / "dets.jsonl", [
        DetectionSet(m.figure_id, tuple(Detection(p.bbox, 1.0) for p in m.panels)) for m in manifests])
    code, _, err = run(capsys, "eval-detect", "--config", config, "--manifest", corpus / "manifest.jsonl",
                       "--detections", tmp_path / "dets.jsonl", "--out", tmp_path / "rep" / "report.json")
    assert code == 0, err
    rep = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert rep["map"] == 1.0 and rep["f1"] == 1.0
    assert sorted(rep["ap_per_threshold"]) == ["0.50", "0.75"]
    text = (tmp_path / "rep" / "report.json").read_text()
    assert text == json.dumps(json.loads(text), sort_keys=True, indent=2) + "\n"
    assert (tmp_path / "rep" / "effective_config.json").exists()


def test_eval_detect_unknown_image(capsys, config, tmp_path):
    assert run(capsys, "generate", "--config", config)[0] == 0
    write_detections(tmp_path / "dets.jsonl", [DetectionSet("nope", ())])
    code, _, err = run(capsys, "eval-detect", "--manifest", tmp_path / "corpus" / "manifest.jsonl",
                       "--detections", tmp_path / "dets.jsonl", "--out", tmp_path / "r.json")
    assert code == 1
    assert "nope" in error_json(err)["message"]


def test_error_codes(capsys, tmp_path):
    code, _, err = run(capsys, "export-coco", "--manifest", tmp_path / "missing.jsonl", "--out", tmp_path / "c.json")
    assert code == 2
    assert error_json(err)["code"] == "io_error"

    (tmp_path / "bad.jsonl").write_text('{"figure_id": 1}\n')
    code, _, err = run(capsys, "export-coco", "--manifest", tmp_path / "bad.jsonl", "--out", tmp_path / "c.json")
    assert code == 1
    e = error_json(err)
    assert e["code"] == "invalid_input" and e["context"]["line"] == 1
    assert not (tmp_path / "c.json").exists()

    code, _, err = run(capsys, "eval-detect", "--manifest", "x")
    assert code == 1 and error_json(err)["code"] == "usage"

    (tmp_path / "cfg.json").write_text('{"layout": {"grid_rows": 1}, "bogus": 1}')
    code, _, err = run(capsys, "generate", "--config", tmp_path / "cfg.json")
    assert code == 1 and "bogus" in error_json(err)["message"]


def write_records_and_images(tmp_path):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    recs = []
    for i, labels in enumerate([["Microscopy"], ["Plot"], ["Clinical Image", "Plot"]]):
        Image.fromarray(rng.integers(0, 256, (80, 100, 3), dtype=np.uint8)).save(imgs / f"f{i}.png")
        recs.append(CompoundRecord(f"f{i}", f"f{i}.png", f"caption number {i}", tuple(labels)))
    write_records(tmp_path / "records.jsonl", recs)
    from figforge.layout import BBox
    write_detections(tmp_path / "dets.jsonl", [
        DetectionSet("f0", (Detection(BBox(0, 0, 50, 80), 0.9), Detection(BBox(50, 0, 50, 80), 0.55))),
        DetectionSet("f1", (Detection(BBox(0, 0, 50, 80), 0.9),)),
        DetectionSet("f2", (Detection(BBox(0, 0, 50, 80), 0.2),)),
    ])
    return imgs


def test_decompose_filter_stats(capsys, config, tmp_path):
    imgs = write_records_and_images(tmp_path)
    out = tmp_path / "dec"
    code, _, err = run(capsys, "decompose", "--config", config, "--records", tmp_path / "records.jsonl",
                       "--detections", tmp_path / "dets.jsonl", "--images", imgs, "--out", out)
    assert code == 0, err
    pairs = [json.loads(l) for l in (out / "pairs.jsonl").read_text().splitlines()]
    assert [p["subfigure_id"] for p in pairs] == ["f0_00", "f0_01", "f1_00", "f2_00"]
    assert pairs[3]["score"] is None and pairs[3]["bbox"] == {"x": 0, "y": 0, "w": 100, "h": 80}
    assert all((out / p["file"]).exists() for p in pairs)

    code, _, err = run(capsys, "filter", "--config", config, "--pairs", out / "pairs.jsonl",
                       "--labels", tmp_path / "records.jsonl", "--out", tmp_path / "flt" / "pairs.jsonl")
    assert code == 0, err
    kept = [json.loads(l)["subfigure_id"] for l in (tmp_path / "flt" / "pairs.jsonl").read_text().splitlines()]
    assert kept == ["f0_00"]
    rep = json.loads((tmp_path / "flt" / "filter_report.json").read_text())
    assert rep == {"input_pairs": 4, "dropped_metadata": 1, "kept": 1,
                   "dropped_below_threshold": 1, "dropped_missing_score": 1, "output_pairs": 1}

    code, _, err = run(capsys, "stats", "--pairs", out / "pairs.jsonl", "--records", tmp_path / "records.jsonl",
                       "--out", tmp_path / "stats.json")
    assert code == 0, err
    s = json.loads((tmp_path / "stats.json").read_text())
    assert s["mean_tokens"] == 3 and s["n_pairs"] == 4
    assert s["modality_shares"] == {"clinical image": 0.25, "microscopy": 0.5, "plot": 0.25}


def test_decompose_unreadable_image(capsys, tmp_path):
    imgs = write_records_and_images(tmp_path)
    (imgs / "f1.png").unlink()
    code, _, err = run(capsys, "decompose", "--records", tmp_path / "records.jsonl",
                       "--detections", tmp_path / "dets.jsonl", "--images", imgs, "--out", tmp_path / "dec")
    assert code == 2
    assert error_json(err)["context"]["failures"][0]["figure_id"] == "f1"
    assert len((tmp_path / "dec" / "pairs.jsonl").read_text().splitlines()) == 3


def test_embedding_commands(capsys, config, tmp_path):
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 8)).astype(np.float32)
    ids = [f"i{i}" for i in range(20)]
    write_embeddings(tmp_path / "img.embf", EmbeddingMatrix(x, ids))
    write_embeddings(tmp_path / "txt.embf", EmbeddingMatrix(x.copy(), ids))
    code, _, err = run(capsys, "eval-retrieval", "--image-emb", tmp_path / "img.embf", "--text-emb", tmp_path / "txt.embf",
                       "--k", "1,5", "--out", tmp_path / "ret.json")
    assert code == 0, err
    rep = json.loads((tmp_path / "ret.json").read_text())
    assert rep["image_to_text"] == {"1": 1.0, "5": 1.0}

    code, _, err = run(capsys, "eval-retrieval", "--image-emb", tmp_path / "img.embf", "--text-emb", tmp_path / "txt.embf",
                       "--k", "50", "--out", tmp_path / "ret.json")
    assert code == 1

    write_embeddings(tmp_path / "cls.embf", EmbeddingMatrix(np.eye(2, dtype=np.float32), ["c0", "c1"]))
    write_embeddings(tmp_path / "z.embf", EmbeddingMatrix(np.eye(2, dtype=np.float32), ["a", "b"]))
    (tmp_path / "labels.json").write_text("[0, 1]")
    code, _, err = run(capsys, "eval-zeroshot", "--image-emb", tmp_path / "z.embf", "--class-emb", tmp_path / "cls.embf",
                       "--labels", tmp_path / "labels.json", "--out", tmp_path / "zs.json")
    assert code == 0, err
    assert json.loads((tmp_path / "zs.json").read_text())["macro_f1"] == 1.0

    code, _, err = run(capsys, "mmd", "--config", config, "--x", tmp_path / "img.embf", "--y", tmp_path / "txt.embf",
                       "--out", tmp_path / "mmd.json")
    assert code == 0, err
    m = json.loads((tmp_path / "mmd.json").read_text())
    assert m["statistic"] == 0.0 and m["p_value"] == 1.0 and m["details"]["permutations"] == 30


def test_stat_commands(capsys, tmp_path):
    (tmp_path / "a.json").write_text("[2, 3, 4, 5, 6]")
    (tmp_path / "b.json").write_text("[1, 1, 1, 1, 1]")
    code, _, err = run(capsys, "wilcoxon", "--a", tmp_path / "a.json", "--b", tmp_path / "b.json", "--out", tmp_path / "w.json")
    assert code == 0, err
    assert json.loads((tmp_path / "w.json").read_text())["p_value"] == 0.0625
    code, _, err = run(capsys, "wilcoxon", "--a", tmp_path / "a.json", "--b", tmp_path / "a.json", "--out", tmp_path / "w.json")
    assert code == 1

    code, _, err = run(capsys, "robustness", "--clean", "0.2", "--perturbed", "zoom=0.15", "--perturbed", "hflip=0.2",
                       "--out", tmp_path / "r.json")
    assert code == 0, err
    r = json.loads((tmp_path / "r.json").read_text())
    assert r["ratios"]["hflip"] == 1.0 and r["mean_ratio"] == pytest.approx(0.875)
    assert run(capsys, "robustness", "--clean", "0", "--perturbed", "a=1", "--out", tmp_path / "r.json")[0] == 1


def test_perturb_command(capsys, tmp_path):
    src = tmp_path / "src"
    src.mkdir()
    a = np.random.default_rng(2).integers(0, 256, (10, 10, 3), dtype=np.uint8)
    Image.fromarray(a).save(src / "x.png")
    code, _, err = run(capsys, "perturb", "--images", src, "--spec", "hflip", "--spec", "shift:0.2", "--out", tmp_path / "p")
    assert code == 0, err
    assert np.array_equal(np.asarray(Image.open(tmp_path / "p" / "hflip" / "x.png")), a[:, ::-1])
    assert (tmp_path / "p" / "shift_0.2" / "x.png").exists()
    assert run(capsys, "perturb", "--images", src, "--spec", "zoom:0.5", "--out", tmp_path / "q")[0] == 1
    assert run(capsys, "perturb", "--images", tmp_path / "none", "--spec", "hflip", "--out", tmp_path / "q")[0] == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "figforge", "wilcoxon", "--a", tmp_path / "missing.json",
                          "--b", tmp_path / "missing.json", "--out", tmp_path / "w.json"], capture_output=True, text=True)
    assert res.returncode == 2
    assert json.loads(res.stderr)["code"] == "io_error"
