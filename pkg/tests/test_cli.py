"""End-to-end command tests on the bundled synthetic corpus and hand-built files.

Commands run in-process through main(argv); one module-scoped pipeline keeps
the suite fast while every byte-stability claim is still re-executed.
"""

import json
import os

import pytest

from tsikit.analysis import grouped_tsi_table
from tsikit.cli import EXIT_INPUT, EXIT_OK, EXIT_SCHEMA, main, render_gray_levels
from tsikit.grid import build_grid
from tsikit.influence import InfluenceMap

GRID4 = build_grid(16, 16, 8)


def run(*argv):
    return main([str(a) for a in argv])


def read_lines(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """synth -> influence(+attention) -> tsi, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("pipeline")
    corpus = root / "corpus"
    scores = root / "scores.jsonl"
    tsi = root / "tsi.jsonl"
    common = ("--seed", 7, "--count", 6)
    assert run("synth", "--out", corpus, *common) == EXIT_OK
    assert run("influence", "--annotations", corpus / "manifest.jsonl", "--attention",
               "--out", scores, *common) == EXIT_OK
    assert run("tsi", "--scores", scores, "--annotations", corpus / "manifest.jsonl",
               "--out", tsi, *common) == EXIT_OK
    return {"root": root, "corpus": corpus, "scores": scores, "tsi": tsi, "common": common}


def write_tiny_inputs(tmp_path, scores, boxes=((0, 0, 8, 8),), confidence=0.9):
    """One 2x2-token image with inline boxes and a single-model prediction."""
    manifest = tmp_path / "manifest.jsonl"
    record = {
        "image_id": "i1",
        "true_class": "1",
        "width": 16,
        "height": 16,
        "boxes": [list(b) for b in boxes],
        "predictions": [
            {"model_id": "m", "predicted_class": "1", "confidence": confidence}
        ],
    }
    manifest.write_text(
        json.dumps({"model_ids": ["m"]}) + "\n" + json.dumps(record) + "\n"
    )
    scores_path = tmp_path / "scores.jsonl"
    scores_path.write_text(json.dumps({
        "image_id": "i1",
        "model_id": "m",
        "kind": "influence",
        "target_class": 1,
        "base_confidence": confidence,
        "grid": {"w": 16, "h": 16, "patch": 8},
        "scores": list(scores),
    }) + "\n")
    return manifest, scores_path


class TestSynth:
    def test_rerun_byte_identical(self, tmp_path):
        for sub in ("a", "b"):
            assert run("synth", "--out", tmp_path / sub, "--seed", 3, "--count", 3) == EXIT_OK
        a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
        assert a == (tmp_path / "b" / "manifest.jsonl").read_bytes()

    def test_annotations_written(self, pipeline):
        listed = sorted(os.listdir(pipeline["corpus"] / "annotations"))
        assert listed == [f"synth-{i:04d}.xml" for i in range(6)]

    def test_meta_carries_hash(self, pipeline):
        meta = read_lines(pipeline["corpus"] / "manifest.jsonl")[0]["_meta"]
        assert meta["tool"] == "tsikit"
        assert len(meta["config_hash"]) == 16
        assert "workers" not in meta["config"]


class TestInfluence:
    def test_one_record_per_image_model_kind(self, pipeline):
        rows = [r for r in read_lines(pipeline["scores"]) if "_meta" not in r]
        assert len(rows) == 6 * 3 * 2
        keys = {(r["image_id"], r["model_id"], r["kind"]) for r in rows}
        assert len(keys) == len(rows)

    def test_workers_do_not_change_bytes(self, pipeline, tmp_path):
        out = tmp_path / "scores8.jsonl"
        assert run("influence", "--annotations", pipeline["corpus"] / "manifest.jsonl",
                   "--attention", "--workers", 4, "--out", out,
                   *pipeline["common"]) == EXIT_OK
        assert out.read_bytes() == pipeline["scores"].read_bytes()

    def test_offline_passthrough(self, pipeline, tmp_path):
        out = tmp_path / "offline.jsonl"
        assert run("influence", "--predictor", "offline",
                   "--annotations", pipeline["corpus"] / "manifest.jsonl",
                   "--scores", pipeline["scores"], "--out", out,
                   *pipeline["common"]) == EXIT_OK
        ours = [r for r in read_lines(out) if "_meta" not in r]
        theirs = [r for r in read_lines(pipeline["scores"]) if "_meta" not in r]
        assert len(ours) == len(theirs)
        assert {json.dumps(r, sort_keys=True) for r in ours} == {
            json.dumps(r, sort_keys=True) for r in theirs
        }

    def test_offline_missing_record_exit3(self, pipeline, tmp_path, capsys):
        partial = tmp_path / "partial.jsonl"
        kept = [r for r in read_lines(pipeline["scores"])
                if r.get("image_id") != "synth-0002"]
        partial.write_text("".join(json.dumps(r) + "\n" for r in kept))
        code = run("influence", "--predictor", "offline",
                   "--annotations", pipeline["corpus"] / "manifest.jsonl",
                   "--scores", partial, "--out", tmp_path / "out.jsonl",
                   *pipeline["common"])
        assert code == EXIT_SCHEMA
        assert "synth-0002" in capsys.readouterr().err

    def test_empty_corpus(self, tmp_path):
        manifest = tmp_path / "manifest.jsonl"
        manifest.write_text(json.dumps({"model_ids": ["m"]}) + "\n")
        out = tmp_path / "out.jsonl"
        assert run("influence", "--annotations", manifest, "--out", out) == EXIT_OK
        rows = read_lines(out)
        assert len(rows) == 1 and "_meta" in rows[0]


class TestTsi:
    def test_hand_oracle(self, tmp_path):
        manifest, scores = write_tiny_inputs(tmp_path, scores=[0.1, 0.2, 0.3, 0.4])
        out = tmp_path / "tsi.jsonl"
        assert run("tsi", "--scores", scores, "--annotations", manifest,
                   "--out", out) == EXIT_OK
        row = read_lines(out)[1]
        assert row["a_tsi"] == pytest.approx(3.0, rel=1e-12)
        assert row["m_tsi"] == pytest.approx(4.0, rel=1e-12)
        assert row["a_flag"] == row["m_flag"] == "finite"
        assert row["subset"] == "D_C"
        assert row["coverage"] == 1
        assert row["confidence"] == 0.9
        assert row["true_class"] == "1"

    def test_full_image_box_undefined(self, tmp_path):
        manifest, scores = write_tiny_inputs(
            tmp_path, scores=[0.1, 0.2, 0.3, 0.4], boxes=((0, 0, 16, 16),)
        )
        out = tmp_path / "tsi.jsonl"
        assert run("tsi", "--scores", scores, "--annotations", manifest,
                   "--out", out) == EXIT_OK
        row = read_lines(out)[1]
        assert row["a_tsi"] is None and row["m_tsi"] is None
        assert row["a_flag"] == row["m_flag"] == "undefined"

    def test_disjoint_join_exit2(self, pipeline, tmp_path, capsys):
        manifest, scores = write_tiny_inputs(tmp_path, scores=[0.1, 0.2, 0.3, 0.4])
        code = run("tsi", "--scores", pipeline["scores"], "--annotations", manifest,
                   "--out", tmp_path / "out.jsonl", *pipeline["common"])
        assert code == EXIT_INPUT
        err = capsys.readouterr().err
        assert "synth-0000" in err and "i1" in err

    def test_row_count(self, pipeline):
        rows = [r for r in read_lines(pipeline["tsi"]) if "_meta" not in r]
        assert len(rows) == 6 * 3 * 2


class TestAggregate:
    def test_rerun_byte_identical(self, pipeline, tmp_path):
        for sub in ("a", "b"):
            assert run("aggregate", "--scores", pipeline["tsi"],
                       "--out", tmp_path / sub, *pipeline["common"]) == EXIT_OK
        for name in ("coverage_table.csv", "confidence_table.csv", "class_ranking.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_matches_regroup_oracle(self, pipeline, tmp_path):
        assert run("aggregate", "--scores", pipeline["tsi"], "--out", tmp_path,
                   *pipeline["common"]) == EXIT_OK
        from tsikit.cli import _load_tsi_rows, _samples_from_rows
        samples = _samples_from_rows(_load_tsi_rows(str(pipeline["tsi"])))["influence"]
        table = grouped_tsi_table([s for s in samples if s.subset.value != "D_L"], "m_tsi")
        want = {(str(row.group[0]), row.group[1], row.group[2]): row for row in table.rows}
        with open(tmp_path / "coverage_table.csv", "r", encoding="utf-8") as fh:
            got = [line.strip().split(",") for line in fh
                   if line.startswith("influence,M-TSI,")]
        assert len(got) == len(want)
        for cells in got:
            row = want[(cells[2], cells[3], cells[4])]
            assert cells[5] == str(row.n)
            assert cells[6] == f"{row.mean:.6g}"

    def test_single_row_input(self, tmp_path):
        path = tmp_path / "tsi.jsonl"
        path.write_text(json.dumps({
            "image_id": "i1", "model_id": "m", "kind": "influence", "target_class": 1,
            "subset": "D_C", "coverage": 30, "confidence": 0.8, "true_class": "cat",
            "a_tsi": 0.5, "a_flag": "finite", "m_tsi": 0.7, "m_flag": "finite",
        }) + "\n")
        assert run("aggregate", "--scores", path, "--out", tmp_path) == EXIT_OK
        lines = (tmp_path / "coverage_table.csv").read_text().splitlines()
        assert lines[2] == "influence,M-TSI,D_C,m,All,1,0.7,0,0,0"
        assert lines[3] == "influence,M-TSI,D_C,m,1-40,1,0.7,0,0,0"

    def test_malformed_row_exit3(self, tmp_path):
        path = tmp_path / "tsi.jsonl"
        path.write_text('{"image_id": "i1"}\n')
        assert run("aggregate", "--scores", path, "--out", tmp_path) == EXIT_SCHEMA


class TestHist:
    def test_undefined_tallied(self, tmp_path):
        path = tmp_path / "tsi.jsonl"
        rows = [
            {"image_id": "i1", "model_id": "m", "kind": "influence", "target_class": 1,
             "subset": "D_I", "coverage": 3, "confidence": 0.8, "true_class": "c",
             "a_tsi": 0.5, "a_flag": "finite", "m_tsi": None, "m_flag": "undefined"},
            {"image_id": "i2", "model_id": "m", "kind": "influence", "target_class": 1,
             "subset": "D_I", "coverage": 3, "confidence": 0.8, "true_class": "c",
             "a_tsi": None, "a_flag": "infinite", "m_tsi": 2.5, "m_flag": "finite"},
        ]
        path.write_text("".join(json.dumps(r) + "\n" for r in rows))
        out = tmp_path / "hist.csv"
        assert run("hist", "--scores", path, "--out", out) == EXIT_OK
        text = out.read_text()
        assert 'influence,M-TSI,D_I,m,"[2,2+]",1' in text  # 2.5 clamps up
        assert "influence,M-TSI,D_I,m,undefined,1" in text
        assert 'influence,A-TSI,D_I,m,"[2,2+]",1' in text  # infinite clamps up

    def test_bad_bin_spec_exit2(self, pipeline, tmp_path):
        code = run("hist", "--scores", pipeline["tsi"], "--bin-width", 0.3,
                   "--clamp", 1.0, "--out", tmp_path / "hist.csv", *pipeline["common"])
        assert code == EXIT_INPUT

    def test_counts_cover_rows(self, pipeline, tmp_path):
        out = tmp_path / "hist.csv"
        assert run("hist", "--scores", pipeline["tsi"], "--out", out,
                   *pipeline["common"]) == EXIT_OK
        rows = [r for r in read_lines(pipeline["tsi"]) if "_meta" not in r]
        eligible = sum(1 for r in rows
                       if r["kind"] == "influence" and r["subset"] in ("D_C", "D_I"))
        total = 0
        for line in out.read_text().splitlines():
            if line.startswith("influence,M-TSI,"):
                total += int(line.rsplit(",", 1)[1])
        assert total == eligible


class TestCompare:
    def test_proxy_columns(self, pipeline, tmp_path):
        out = tmp_path / "proxy.csv"
        assert run("compare", "--mode", "proxy", "--scores", pipeline["scores"],
                   "--annotations", pipeline["corpus"] / "manifest.jsonl",
                   "--out", out, *pipeline["common"]) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[1] == ("comparison,subset,metric,model,n_pairs,n_dropped,"
                            "pearson_r,r_squared")
        assert any(line.startswith("attention-vs-influence,") for line in lines)
        assert any(line.startswith("top5-attention-vs-box,") for line in lines)

    def test_masking_closed_form_for_planted(self, tmp_path):
        corpus = tmp_path / "corpus"
        scores = tmp_path / "scores.jsonl"
        common = ("--seed", 5, "--count", 3)
        assert run("synth", "--predictor", "planted", "--out", corpus, *common) == EXIT_OK
        assert run("influence", "--predictor", "planted",
                   "--annotations", corpus / "manifest.jsonl",
                   "--out", scores, *common) == EXIT_OK
        out = tmp_path / "masking.csv"
        assert run("compare", "--mode", "masking", "--predictor", "planted",
                   "--scores", scores, "--annotations", corpus / "manifest.jsonl",
                   "--ns", "1,3", "--out", out, *common) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[1] == "source,n,images,mean,std"
        assert lines[2].startswith("influence,1,3,")
        assert lines[3].startswith("influence,3,3,")
        # discarding top influence tokens of a planted model must cut confidence
        assert float(lines[3].split(",")[3]) > 0.0

    def test_rerun_byte_identical(self, pipeline, tmp_path):
        outs = []
        for sub in ("a.csv", "b.csv"):
            out = tmp_path / sub
            assert run("compare", "--mode", "proxy", "--scores", pipeline["scores"],
                       "--annotations", pipeline["corpus"] / "manifest.jsonl",
                       "--out", out, *pipeline["common"]) == EXIT_OK
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]


class TestRender:
    def test_gray_level_oracle(self):
        m = InfluenceMap(image_id="i1", model_id="m", kind="influence", target_class=0,
                         base_confidence=0.5, scores=(0.1, 0.2, 0.3, 0.4), grid=GRID4)
        assert render_gray_levels(m) == [64, 128, 191, 255]

    def test_pgm_bytes(self, tmp_path):
        _, scores = write_tiny_inputs(tmp_path, scores=[0.1, 0.2, 0.3, 0.4])
        out = tmp_path / "map.pgm"
        assert run("render", "--scores", scores, "--out", out) == EXIT_OK
        data = out.read_bytes()
        header, _, pixels = data.partition(b"255\n")
        assert header.startswith(b"P5\n# config_hash=")
        assert header.endswith(b"\n16 16\n")
        assert len(pixels) == 256
        assert pixels[0] == 64 and pixels[15] == 128  # top row: tokens 0 and 1
        assert pixels[240] == 191 and pixels[255] == 255  # bottom row: 2 and 3
        assert set(pixels) == {64, 128, 191, 255}

    def test_all_zero_scores_black(self, tmp_path):
        _, scores = write_tiny_inputs(tmp_path, scores=[0.0, 0.0, 0.0, 0.0])
        out = tmp_path / "map.pgm"
        assert run("render", "--scores", scores, "--out", out) == EXIT_OK
        pixels = out.read_bytes().rpartition(b"255\n")[2]
        assert pixels == b"\x00" * 256

    def test_single_nonzero_is_single_white_patch(self, tmp_path):
        _, scores = write_tiny_inputs(tmp_path, scores=[0.0, 0.0, 0.5, 0.0])
        out = tmp_path / "map.pgm"
        assert run("render", "--scores", scores, "--out", out) == EXIT_OK
        pixels = out.read_bytes().rpartition(b"255\n")[2]
        assert pixels.count(255) == 64 and pixels.count(0) == 192

    def test_ppm_overlay_green_box(self, tmp_path):
        manifest, scores = write_tiny_inputs(tmp_path, scores=[0.1, 0.2, 0.3, 0.4])
        out = tmp_path / "map.ppm"
        assert run("render", "--scores", scores, "--annotations", manifest,
                   "--out", out) == EXIT_OK
        data = out.read_bytes()
        assert data.startswith(b"P6\n")
        pixels = data.rpartition(b"255\n")[2]
        assert len(pixels) == 256 * 3
        green = b"\x00\xff\x00"
        assert pixels[0:3] == green  # box corner (0, 0)
        assert pixels[(7 * 16 + 7) * 3 : (7 * 16 + 7) * 3 + 3] == green
        assert pixels[(8 * 16 + 8) * 3 : (8 * 16 + 8) * 3 + 3] != green
        # gray interior stays achromatic
        inside = pixels[(3 * 16 + 3) * 3 : (3 * 16 + 3) * 3 + 3]
        assert inside[0] == inside[1] == inside[2] == 64

    def test_filters(self, pipeline, tmp_path):
        out = tmp_path / "map.pgm"
        assert run("render", "--scores", pipeline["scores"], "--image-id", "synth-0003",
                   "--model-id", "mini-vit-s209", "--kind", "attention",
                   "--out", out, *pipeline["common"]) == EXIT_OK
        assert out.read_bytes().startswith(b"P5\n")

    def test_no_match_exit2(self, pipeline, tmp_path):
        code = run("render", "--scores", pipeline["scores"], "--image-id", "nope",
                   "--out", tmp_path / "map.pgm", *pipeline["common"])
        assert code == EXIT_INPUT


class TestConfigPlumbing:
    def test_config_file_round_trip(self, pipeline, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"seed": 7, "count": 6}))
        out = tmp_path / "hist.csv"
        assert run("hist", "--config", config, "--scores", pipeline["tsi"],
                   "--out", out) == EXIT_OK
        from tsikit.config import load_config
        want = load_config(str(config)).config_hash()
        assert out.read_text().splitlines()[0] == f"# config_hash={want}"

    def test_same_hash_across_pipeline(self, pipeline, tmp_path):
        hashes = set()
        for path in (pipeline["corpus"] / "manifest.jsonl", pipeline["scores"],
                     pipeline["tsi"]):
            meta = read_lines(path)[0]["_meta"]
            hashes.add(meta["config_hash"])
        assert len(hashes) == 1

    def test_unknown_config_key_exit2(self, pipeline, tmp_path):
        config = tmp_path / "config.json"
        config.write_text(json.dumps({"speed": 11}))
        code = run("hist", "--config", config, "--scores", pipeline["tsi"],
                   "--out", tmp_path / "hist.csv")
        assert code == EXIT_INPUT
