import json
import os

import numpy as np
import pytest

from vcr.cli import main
from vcr.embeddings import (
    canonical_json_bytes,
    load_embedding_file,
    make_store,
    write_bytes_atomic,
    write_embedding_file,
    write_text_classifier,
)
from vcr.geometry import CropRect
from vcr.rng import mix64, tagged_seed
from vcr.synthetic import SyntheticBackend, generate_scenes, make_prototype_classifier, scenes_to_dataset_manifest


def build_file_world(root, images=18, classes=3, n=3, m=4, seed=11):
    """Dataset manifest + decomposed .vcre store + classifier, on disk."""
    os.makedirs(root, exist_ok=True)
    scenes = generate_scenes(classes, images, 2, 224, 224, seed=mix64(seed),
                             object_radius=(30.0, 60.0), distractor_radius=(30.0, 80.0))
    clf = make_prototype_classifier(classes, 32, seed=tagged_seed(seed, "prototypes"), tau=0.05)
    backend = SyntheticBackend({s.image_id: s for s in scenes}, clf, 0.1)
    dataset = scenes_to_dataset_manifest(scenes, clf.class_names)
    dataset_path = os.path.join(root, "dataset.json")
    write_bytes_atomic(dataset_path, canonical_json_bytes(dataset))

    crops_path = os.path.join(root, "crops.json")
    rc = main(["decompose", "--manifest", dataset_path, "--n", str(n), "--m", str(m),
               "--seed", str(seed), "--out", crops_path])
    assert rc == 0
    with open(crops_path) as f:
        crop_manifest = json.load(f)

    rows = np.zeros((len(crop_manifest["rows"]), clf.dim), dtype=np.float32)
    for entry in crop_manifest["rows"]:
        crop = entry["crop"]
        crop_obj = "global" if crop == "global" else CropRect.from_json(crop)
        rows[entry["row"]] = backend.encode_view(entry["image"], crop_obj)
    store = make_store(clf.dim, rows, crop_manifest["images"], crop_manifest["rows"])
    store_path = os.path.join(root, "store.vcre")
    write_embedding_file(store, store_path)
    clf_path = os.path.join(root, "clf.vcre")
    write_text_classifier(clf, clf_path)
    return {
        "dataset": dataset_path,
        "crops": crops_path,
        "store": store_path,
        "classifier": clf_path,
        "n": n,
        "m": m,
        "seed": seed,
    }


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    return build_file_world(str(tmp_path_factory.mktemp("world")))


class TestScales:
    def test_n10_grid(self, capsys):
        assert main(["scales", "--n", "10"]) == 0
        out = capsys.readouterr().out.strip()
        assert out == "0.1 0.2 0.3 0.4 0.5 0.6 0.7 0.8 0.9 1.0"

    def test_n1(self, capsys):
        main(["scales", "--n", "1"])
        assert capsys.readouterr().out.strip() == "1.0"


class TestDecompose:
    def test_row_arithmetic(self, world):
        with open(world["crops"]) as f:
            manifest = json.load(f)
        images = len(manifest["images"])
        n, m = world["n"], world["m"]
        per_image = 1 + (n - 1) * m + 10  # global + local crops + ten-crop
        assert len(manifest["rows"]) == images * per_image
        assert manifest["meta"]["seed"] == world["seed"]

    def test_repeated_draws_share_one_row(self, tmp_path):
        # a tiny image forces crop collisions; rows must stay unique
        dataset = {"classes": ["a", "b"],
                   "images": [{"id": "tiny", "label": 0, "width": 8, "height": 8}]}
        dataset_path = str(tmp_path / "d.json")
        with open(dataset_path, "w") as f:
            json.dump(dataset, f)
        out = str(tmp_path / "c.json")
        assert main(["decompose", "--manifest", dataset_path, "--n", "2", "--m", "50",
                     "--seed", "1", "--out", out]) == 0
        with open(out) as f:
            manifest = json.load(f)
        keys = [(r["image"], json.dumps(r["crop"])) for r in manifest["rows"]]
        assert len(keys) == len(set(keys))
        assert len(keys) < 1 + 50 + 10  # collisions actually occurred

    def test_validate_accepts_outputs(self, world, capsys):
        assert main(["validate", world["crops"]]) == 0
        assert main(["validate", world["store"]]) == 0
        assert main(["validate", world["classifier"]]) == 0


class TestZeroShot:
    def test_report_written(self, world, tmp_path, capsys):
        out = str(tmp_path / "report.json")
        rc = main(["zeroshot", "--embeddings", world["store"], "--classifier", world["classifier"],
                   "--manifest", world["dataset"], "--out", out, "--no-plot"])
        assert rc == 0
        with open(out) as f:
            doc = json.load(f)
        assert 0.0 <= doc["reports"][0]["results"]["top1"] <= 1.0
        assert os.path.exists(str(tmp_path / "report.csv"))

    def test_refine_n1_then_zeroshot_matches_global(self, world, tmp_path):
        refined = str(tmp_path / "refined.vcre")
        rc = main(["refine", "--embeddings", world["store"], "--classifier", world["classifier"],
                   "--n", "1", "--m", str(world["m"]), "--seed", str(world["seed"]),
                   "--out", refined])
        assert rc == 0
        out_a = str(tmp_path / "a.json")
        out_b = str(tmp_path / "b.json")
        main(["zeroshot", "--embeddings", refined, "--classifier", world["classifier"],
              "--manifest", world["dataset"], "--out", out_a, "--no-plot"])
        main(["zeroshot", "--embeddings", world["store"], "--classifier", world["classifier"],
              "--manifest", world["dataset"], "--out", out_b, "--no-plot"])
        with open(out_a) as f:
            a = json.load(f)
        with open(out_b) as f:
            b = json.load(f)
        assert a["reports"][0]["results"] == b["reports"][0]["results"]


class TestRefine:
    def test_refined_store_carries_selection_audit(self, world, tmp_path):
        refined = str(tmp_path / "refined.vcre")
        rc = main(["refine", "--embeddings", world["store"], "--classifier", world["classifier"],
                   "--n", str(world["n"]), "--m", str(world["m"]), "--seed", str(world["seed"]),
                   "--out", refined])
        assert rc == 0
        store = load_embedding_file(refined)
        assert all(meta["crop"] == "refined" for meta in store.row_meta)
        sel = store.row_meta[0]["selection"]
        assert sel["criterion"] == "max_margin"
        assert len(sel["per_scale"]) == world["n"] - 1

    def test_wrong_seed_fails_with_missing_row(self, world, tmp_path):
        refined = str(tmp_path / "refined.vcre")
        rc = main(["refine", "--embeddings", world["store"], "--classifier", world["classifier"],
                   "--n", str(world["n"]), "--m", str(world["m"]), "--seed", "999",
                   "--out", refined])
        assert rc == 1
        assert not os.path.exists(refined)  # no partial output


class TestFewshot:
    def test_fewshot_runs(self, world, tmp_path):
        out = str(tmp_path / "fs.json")
        rc = main(["fewshot", "--embeddings", world["store"], "--classifier", world["classifier"],
                   "--manifest", world["dataset"], "--shots", "2", "--seed", "3",
                   "--out", out, "--no-plot"])
        assert rc == 0
        with open(out) as f:
            doc = json.load(f)
        assert doc["config"]["shots"] == 2

    def test_grid_search_echoes_choice(self, world, tmp_path):
        out = str(tmp_path / "fs.json")
        rc = main(["fewshot", "--embeddings", world["store"], "--classifier", world["classifier"],
                   "--manifest", world["dataset"], "--shots", "2", "--seed", "3", "--grid",
                   "--out", out, "--no-plot"])
        assert rc == 0
        with open(out) as f:
            doc = json.load(f)
        assert doc["reports"][0]["params"]["grid"] is True
        assert doc["reports"][0]["params"]["alpha"] >= 0.0


class TestDomain:
    def test_self_target(self, world, tmp_path):
        out = str(tmp_path / "dom.json")
        rc = main(["domain", "--embeddings", world["store"], "--classifier", world["classifier"],
                   "--manifest", world["dataset"],
                   "--target", f"{world['store']}:{world['dataset']}",
                   "--shots", "2", "--seed", "3", "--out", out, "--no-plot"])
        assert rc == 0
        with open(out) as f:
            doc = json.load(f)
        assert len(doc["reports"]) == 1


class TestAblate:
    def test_mode_matrix_and_worker_byte_identity(self, world, tmp_path):
        modes = "global_baseline,ten_crop,selected_scale_weighted,random_per_scale_avg,criterion:min_entropy"
        out1 = str(tmp_path / "a1.json")
        out3 = str(tmp_path / "a3.json")
        for out, workers in ((out1, "1"), (out3, "3")):
            rc = main(["ablate", "--embeddings", world["store"], "--classifier", world["classifier"],
                       "--manifest", world["dataset"], "--modes", modes,
                       "--n", str(world["n"]), "--m", str(world["m"]), "--seed", str(world["seed"]),
                       "--shots", "2", "--workers", workers, "--out", out, "--no-plot"])
            assert rc == 0
        with open(out1, "rb") as f:
            b1 = f.read()
        with open(out3, "rb") as f:
            b3 = f.read()
        # the config echo includes the worker count; results must be identical
        d1, d3 = json.loads(b1), json.loads(b3)
        assert d1["reports"] == d3["reports"]
        csv1 = open(str(tmp_path / "a1.csv"), "rb").read()
        csv3 = open(str(tmp_path / "a3.csv"), "rb").read()
        assert csv1 == csv3


class TestSynth:
    def test_byte_identical_reruns_and_figures(self, tmp_path):
        out1 = str(tmp_path / "s1.json")
        out2 = str(tmp_path / "s2.json")
        args = ["synth", "--preset", "smoke", "--images", "24", "--num-seeds", "2",
                "--seed", "7", "--shots", "2",
                "--modes", "global_baseline,selected_scale_weighted,random_per_scale_avg"]
        assert main(args + ["--out", out1]) == 0
        assert main(args + ["--out", out2]) == 0
        with open(out1, "rb") as f:
            b1 = f.read()
        with open(out2, "rb") as f:
            b2 = f.read()
        assert b1 == b2
        assert open(str(tmp_path / "s1.csv"), "rb").read() == open(str(tmp_path / "s2.csv"), "rb").read()
        assert os.path.exists(str(tmp_path / "s1_modes.png"))  # figure next to CSV


class TestConfigPrecedence:
    def test_flags_beat_config_file_beat_defaults(self, tmp_path, capsys):
        cfg_path = str(tmp_path / "cfg.json")
        with open(cfg_path, "w") as f:
            json.dump({"n": 4}, f)
        main(["scales", "--config", cfg_path])
        assert capsys.readouterr().out.strip() == "0.25 0.5 0.75 1.0"
        main(["scales", "--config", cfg_path, "--n", "2"])
        assert capsys.readouterr().out.strip() == "0.5 1.0"

    def test_vcr_seed_env_fallback(self, world, tmp_path, monkeypatch):
        out_env = str(tmp_path / "env.json")
        out_flag = str(tmp_path / "flag.json")
        monkeypatch.setenv("VCR_SEED", "3")
        rc = main(["fewshot", "--embeddings", world["store"], "--classifier", world["classifier"],
                   "--manifest", world["dataset"], "--shots", "2", "--out", out_env, "--no-plot"])
        assert rc == 0
        monkeypatch.delenv("VCR_SEED")
        main(["fewshot", "--embeddings", world["store"], "--classifier", world["classifier"],
              "--manifest", world["dataset"], "--shots", "2", "--seed", "3", "--out", out_flag, "--no-plot"])
        with open(out_env) as f:
            a = json.load(f)
        with open(out_flag) as f:
            b = json.load(f)
        assert a == b


class TestErrors:
    def test_unknown_subcommand_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["transmogrify"])
        assert err.value.code == 2

    def test_unknown_flag_exits_2(self):
        with pytest.raises(SystemExit) as err:
            main(["scales", "--frobnicate"])
        assert err.value.code == 2

    def test_missing_file_exits_1(self, tmp_path, capsys):
        rc = main(["validate", str(tmp_path / "absent.vcre")])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as err:
            main(["refine", "--help"])
        assert err.value.code == 0
        text = capsys.readouterr().out
        for flag in ("--n", "--m", "--criterion", "--weighting", "--seed", "--workers",
                     "--embeddings", "--classifier", "--out", "--format", "--alpha", "--beta"):
            assert flag in text
        assert "default 10" in text and "default 100" in text
