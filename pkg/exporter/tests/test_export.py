"""Exporter conformance: schema fidelity, manual recomputation, consumer round-trip.

The analysis toolkit is exercised only through its external interfaces (the
JSONL schema and the installed `tsikit` executable); nothing here imports it.
"""

import json
import os
import shutil
import subprocess

import pytest
import torch
from PIL import Image

from exporter.export import (
    ExportJob,
    attention_weights,
    build_model,
    export_attention,
    export_influence,
    export_saliency,
    load_pixels,
    pool_to_tokens,
    read_image_list,
    validate_record,
)

N_TOKENS = 16  # tiny-random: 64x64 image, 16px patches


def make_images(root, count=3):
    rng = torch.Generator().manual_seed(41)
    paths = []
    for i in range(count):
        data = torch.randint(0, 256, (64, 64, 3), generator=rng, dtype=torch.uint8)
        path = root / f"img-{i:02d}.png"
        Image.fromarray(data.numpy(), mode="RGB").save(path)
        paths.append(path)
    listfile = root / "images.txt"
    listfile.write_text(
        "# synthetic fixtures\n"
        + "".join(f"{p.name} class-{i}\n" for i, p in enumerate(paths))
    )
    return listfile


def read_records(path):
    with open(path, "r", encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    meta = [r for r in rows if "_meta" in r]
    return meta, [r for r in rows if "_meta" not in r]


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    root = tmp_path_factory.mktemp("exported")
    listfile = make_images(root)
    outs = {}
    for kind, runner in (("influence", export_influence),
                         ("attention", export_attention),
                         ("saliency", export_saliency)):
        out = root / f"{kind}.jsonl"
        job = ExportJob(model="tiny-random", images=read_image_list(str(listfile)),
                        out=str(out), batch_size=4)
        assert runner(job) == 3
        outs[kind] = out
    return {"root": root, "listfile": listfile, **outs}


class TestInfluence:
    def test_schema_and_bounds(self, exported):
        meta, records = read_records(exported["influence"])
        assert len(meta) == 1 and meta[0]["_meta"]["model"] == "tiny-random"
        assert len(records) == 3
        for rec in records:
            validate_record(rec)
            assert rec["kind"] == "influence"
            assert rec["grid"] == {"w": 64, "h": 64, "patch": 16}
            assert len(rec["scores"]) == N_TOKENS
            assert all(0.0 <= z <= 1.0 for z in rec["scores"])
            assert 0.0 <= rec["base_confidence"] <= 1.0

    def test_manual_single_token_recompute(self, exported):
        """Drop token 5 by hand, bypassing every exporter helper."""
        _, records = read_records(exported["influence"])
        rec = records[0]
        job = ExportJob(model="tiny-random",
                        images=read_image_list(str(exported["listfile"])),
                        out="unused.jsonl")
        model = build_model(job)
        pixels = load_pixels(str(exported["root"] / "img-00.png"), job.spec, "cpu")
        k = 5
        with torch.no_grad():
            base_probs = torch.softmax(model(pixels), dim=-1)[0]
            target = int(base_probs.argmax())
            tokens = model._process_input(pixels)
            seq = torch.cat([model.class_token.expand(1, -1, -1), tokens], dim=1)
            seq = seq + model.encoder.pos_embedding
            shortened = torch.cat([seq[:, : k + 1], seq[:, k + 2 :]], dim=1)
            out = model.encoder.ln(model.encoder.layers(shortened))
            dropped = torch.softmax(model.heads(out[:, 0]), dim=-1)[0, target]
            want = abs(float(base_probs[target]) - float(dropped))
        assert rec["target_class"] == target
        assert rec["scores"][k] == pytest.approx(want, abs=1e-5)

    def test_rerun_reproduces(self, exported, tmp_path):
        out = tmp_path / "again.jsonl"
        job = ExportJob(model="tiny-random",
                        images=read_image_list(str(exported["listfile"])),
                        out=str(out), batch_size=2)  # different batching on purpose
        export_influence(job)
        _, first = read_records(exported["influence"])
        _, second = read_records(out)
        for a, b in zip(first, second):
            assert a["base_confidence"] == pytest.approx(b["base_confidence"], abs=1e-5)
            for za, zb in zip(a["scores"], b["scores"]):
                assert za == pytest.approx(zb, abs=1e-5)


class TestAttention:
    def test_renormalized_over_image_tokens(self, exported):
        _, records = read_records(exported["attention"])
        for rec in records:
            validate_record(rec)
            assert len(rec["scores"]) == N_TOKENS
            assert sum(rec["scores"]) == pytest.approx(1.0, abs=1e-6)
            assert all(z >= 0.0 for z in rec["scores"])

    def test_matches_public_attention_api(self, exported):
        job = ExportJob(model="tiny-random",
                        images=read_image_list(str(exported["listfile"])),
                        out="unused.jsonl")
        model = build_model(job)
        pixels = load_pixels(str(exported["root"] / "img-01.png"), job.spec, "cpu")
        _, _, weights = attention_weights(model, pixels)
        _, records = read_records(exported["attention"])
        assert records[1]["scores"] == pytest.approx(weights, abs=1e-6)


class TestSaliency:
    def test_schema_and_sign(self, exported):
        _, records = read_records(exported["saliency"])
        for rec in records:
            validate_record(rec)
            assert rec["kind"] == "saliency"
            assert len(rec["scores"]) == N_TOKENS
            assert all(z >= 0.0 for z in rec["scores"])

    def test_constant_map_pools_uniformly(self):
        pooled = pool_to_tokens(torch.full((64, 64), -0.75), 16)
        assert pooled == [pytest.approx(0.75)] * N_TOKENS

    def test_unknown_method(self, exported):
        job = ExportJob(model="tiny-random",
                        images=read_image_list(str(exported["listfile"])),
                        out="unused.jsonl")
        with pytest.raises(ValueError, match="saliency method"):
            export_saliency(job, method="gradcam-from-mars")


class TestResume:
    def test_skips_completed_images(self, exported, tmp_path):
        out = tmp_path / "partial.jsonl"
        listfile = exported["listfile"]
        (tmp_path / "partial.jsonl.resume").write_text("img-00\nimg-01\n")
        job = ExportJob(model="tiny-random", images=read_image_list(str(listfile)),
                        out=str(out), resume=True)
        assert export_influence(job) == 1
        _, records = read_records(out)
        assert [r["image_id"] for r in records] == ["img-02"]

    def test_full_rerun_writes_nothing(self, exported, tmp_path):
        out = tmp_path / "full.jsonl"
        job = ExportJob(model="tiny-random",
                        images=read_image_list(str(exported["listfile"])),
                        out=str(out))
        assert export_influence(job) == 3
        before = out.read_bytes()
        assert export_influence(ExportJob(model="tiny-random",
                                          images=read_image_list(str(exported["listfile"])),
                                          out=str(out), resume=True)) == 0
        assert out.read_bytes() == before

    def test_log_lists_every_image(self, exported):
        log = str(exported["influence"]) + ".resume"
        assert open(log).read().split() == ["img-00", "img-01", "img-02"]


class TestJobAndInputs:
    def test_unknown_model(self):
        with pytest.raises(ValueError, match="unknown model"):
            ExportJob(model="resnet", images=(), out="x.jsonl")

    def test_vit_b_requires_checkpoint(self):
        with pytest.raises(ValueError, match="checkpoint"):
            ExportJob(model="dino", images=(), out="x.jsonl")

    def test_bad_batch_size(self):
        with pytest.raises(ValueError, match="batch_size"):
            ExportJob(model="tiny-random", images=(), out="x.jsonl", batch_size=0)

    def test_image_list_parsing(self, tmp_path):
        listfile = tmp_path / "images.txt"
        listfile.write_text("# comment\n\nsub/a.png cat\n/abs/b.png dog\n")
        pairs = read_image_list(str(listfile))
        assert pairs == ((str(tmp_path / "sub" / "a.png"), "cat"), ("/abs/b.png", "dog"))

    def test_image_list_malformed(self, tmp_path):
        listfile = tmp_path / "images.txt"
        listfile.write_text("just-a-path\n")
        with pytest.raises(ValueError, match="images.txt:1"):
            read_image_list(str(listfile))

    def test_checkpoint_round_trip(self, exported, tmp_path):
        donor = build_model(ExportJob(model="tiny-random", images=(), out="x", seed=33))
        ckpt = tmp_path / "donor.pth"
        torch.save(donor.state_dict(), ckpt)
        out_a = tmp_path / "a.jsonl"
        out_b = tmp_path / "b.jsonl"
        images = read_image_list(str(exported["listfile"]))
        export_influence(ExportJob(model="tiny-random", images=images, out=str(out_a),
                                   seed=33))
        export_influence(ExportJob(model="tiny-random", images=images, out=str(out_b),
                                   checkpoint=str(ckpt), seed=0))
        assert read_records(out_a)[1] == read_records(out_b)[1]


class TestValidateRecord:
    def base(self):
        return {
            "image_id": "i", "model_id": "m", "kind": "influence", "target_class": 1,
            "base_confidence": 0.5, "grid": {"w": 64, "h": 64, "patch": 16},
            "scores": [0.0] * N_TOKENS,
        }

    def test_accepts_good(self):
        validate_record(self.base())

    @pytest.mark.parametrize("mutate", [
        lambda r: r.pop("grid"),
        lambda r: r.update(kind="heatmap"),
        lambda r: r.update(scores=[0.0] * 15),
        lambda r: r.update(scores=[-0.1] + [0.0] * 15),
        lambda r: r.update(scores=[1.5] + [0.0] * 15),
        lambda r: r.update(base_confidence=1.5),
        lambda r: r.update(target_class=True),
        lambda r: r.update(grid={"w": 63, "h": 64, "patch": 16}),
        lambda r: r.update(extra=1),
    ])
    def test_rejects_bad(self, mutate):
        record = self.base()
        mutate(record)
        with pytest.raises(ValueError):
            validate_record(record)


@pytest.mark.skipif(shutil.which("tsikit") is None,
                    reason="consumer CLI not on PATH")
class TestConsumerRoundTrip:
    def test_tsi_join_accepts_all_kinds(self, exported, tmp_path):
        combined = tmp_path / "combined.jsonl"
        with open(combined, "w", encoding="utf-8") as fh:
            for kind in ("influence", "attention", "saliency"):
                fh.write(exported[kind].read_text())
        manifest = tmp_path / "manifest.jsonl"
        with open(manifest, "w", encoding="utf-8") as fh:
            fh.write(json.dumps({"model_ids": ["tiny-random"]}) + "\n")
            for i in range(3):
                fh.write(json.dumps({
                    "image_id": f"img-{i:02d}", "true_class": f"class-{i}",
                    "width": 64, "height": 64, "boxes": [[8, 8, 40, 40]],
                    "predictions": [{"model_id": "tiny-random",
                                     "predicted_class": f"class-{i}",
                                     "confidence": 0.9}],
                }) + "\n")
        config = tmp_path / "config.json"
        config.write_text(json.dumps(
            {"image_width": 64, "image_height": 64, "patch_size": 16}
        ))
        out = tmp_path / "tsi.jsonl"
        proc = subprocess.run(
            ["tsikit", "tsi", "--config", str(config), "--scores", str(combined),
             "--annotations", str(manifest), "--out", str(out)],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        with open(out, "r", encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        rows = [r for r in rows if "_meta" not in r]
        assert len(rows) == 9  # 3 images x 3 kinds
        assert {r["kind"] for r in rows} == {"influence", "attention", "saliency"}
        for row in rows:
            assert row["a_flag"] in ("finite", "infinite", "undefined")


CHECKPOINT_DIR = os.environ.get("TSI_CHECKPOINT_DIR")


@pytest.mark.skipif(CHECKPOINT_DIR is None,
                    reason="set TSI_CHECKPOINT_DIR to run real-checkpoint checks")
class TestRealCheckpoints:
    """Non-gating: requires supervised.pth / dino.pth / mae.pth state dicts."""

    def test_mean_a_tsi_ordering(self, tmp_path):
        pytest.importorskip("tsikit")  # analysis math stays in the consumer
        # Exporting and scoring 500+ images is an offline exercise; here only a
        # single-image smoke per checkpoint proves the weights load and run.
        listfile = make_images(tmp_path, count=1)
        for name in ("supervised", "dino", "mae"):
            ckpt = os.path.join(CHECKPOINT_DIR, f"{name}.pth")
            if not os.path.exists(ckpt):
                pytest.skip(f"missing {ckpt}")
            job = ExportJob(model=name, images=read_image_list(str(listfile)),
                            out=str(tmp_path / f"{name}.jsonl"), checkpoint=ckpt)
            assert export_influence(job) == 1
