import json
import os

import numpy as np
import pytest

from vcr.errors import InvalidArgumentError
from vcr.evaluation import (
    AblationConfig,
    BenchmarkConfig,
    build_fewshot_episode,
    evaluate,
    parse_mode,
    run_ablation,
    run_domain_generalization,
    synthetic_benchmark,
)
from vcr.rng import mix64, tagged_seed
from vcr.synthetic import (
    SyntheticBackend,
    generate_scenes,
    make_prototype_classifier,
    scenes_to_dataset_manifest,
)

GOLDEN = os.path.join(os.path.dirname(__file__), "data", "golden_episode_shots2_seed7.json")


def tiny_manifest(per_class=4, classes=3):
    return {
        "classes": [f"c{i}" for i in range(classes)],
        "images": [
            {"id": f"im{i:02d}", "label": i % classes, "width": 64, "height": 64}
            for i in range(per_class * classes)
        ],
    }


def small_world(seed=0, classes=4, images=40, noise=0.1, **scene_kw):
    scenes = generate_scenes(classes, images, 2, 96, 96, seed=mix64(seed), **scene_kw)
    clf = make_prototype_classifier(classes, 32, seed=tagged_seed(seed, "prototypes"), tau=0.05)
    backend = SyntheticBackend({s.image_id: s for s in scenes}, clf, noise)
    manifest = scenes_to_dataset_manifest(scenes, clf.class_names)
    return manifest, backend, clf


class TestEpisodes:
    def test_basic_split(self):
        ep = build_fewshot_episode(tiny_manifest(per_class=2, classes=2), shots=1, seed=0)
        assert len(ep.train) == 2
        assert len(ep.test) == 2
        train_ids = {i for i, _ in ep.train}
        test_ids = {i for i, _ in ep.test}
        assert not train_ids & test_ids
        for c in range(2):
            assert sum(1 for _, l in ep.train if l == c) == 1

    def test_insufficient_instances_names_class(self):
        manifest = tiny_manifest(per_class=2, classes=3)
        with pytest.raises(InvalidArgumentError, match="'c0'"):
            build_fewshot_episode(manifest, shots=3, seed=0)

    def test_golden_episode(self):
        with open(GOLDEN) as f:
            golden = json.load(f)
        ep = build_fewshot_episode(tiny_manifest(per_class=4, classes=3), shots=2, seed=7)
        assert [list(t) for t in ep.train] == golden["train"]
        assert [list(t) for t in ep.test] == golden["test"]

    def test_seed_changes_split(self):
        m = tiny_manifest(per_class=6, classes=3)
        a = build_fewshot_episode(m, shots=2, seed=1)
        b = build_fewshot_episode(m, shots=2, seed=2)
        assert a.train != b.train


class TestEvaluate:
    def test_all_correct(self):
        r = evaluate([0, 1, 2], [0, 1, 2])
        assert r["top1"] == 1.0
        assert r["per_class"] == [1.0, 1.0, 1.0]

    def test_all_wrong(self):
        assert evaluate([0, 1], [1, 0])["top1"] == 0.0

    def test_against_counting_oracle(self):
        rng = np.random.default_rng(5)
        pred = rng.integers(0, 4, 200)
        labels = rng.integers(0, 4, 200)
        r = evaluate(pred, labels)
        correct = sum(1 for p, l in zip(pred, labels) if p == l)
        assert r["top1"] == pytest.approx(correct / 200)
        for c in range(4):
            subset = [(p, l) for p, l in zip(pred, labels) if l == c]
            want = sum(1 for p, l in subset if p == l) / len(subset)
            assert r["per_class"][c] == pytest.approx(want)

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            evaluate([], [])


class TestModeParsing:
    def test_known_modes(self):
        assert parse_mode("global_baseline").kind == "global_baseline"
        assert parse_mode("per_scale:0.4").scale == 0.4
        assert parse_mode("criterion:min_entropy").criterion == "min_entropy"
        assert parse_mode("n:7").n_override == 7

    def test_random_flags(self):
        assert parse_mode("multi_crop_avg").is_random
        assert parse_mode("random_per_scale_avg").is_random
        assert parse_mode("criterion:random").is_random
        assert parse_mode("per_scale:0.4").is_random
        assert not parse_mode("per_scale:1.0").is_random
        assert not parse_mode("selected_scale_weighted").is_random

    def test_unknown_mode_rejected(self):
        with pytest.raises(InvalidArgumentError):
            parse_mode("finest_vibes")
        with pytest.raises(InvalidArgumentError):
            parse_mode("criterion:best")
        with pytest.raises(InvalidArgumentError):
            parse_mode("per_scale:1.5")


class TestRunAblation:
    def test_global_baseline_matches_direct_computation(self):
        manifest, backend, clf = small_world()
        episode = build_fewshot_episode(manifest, shots=2, seed=3)
        cfg = AblationConfig(n=4, m=6, seed=3, repeats=2)
        (report,) = run_ablation(episode, backend, clf, ["global_baseline"], cfg)

        from vcr.adapter import adapter_logits, build_cache, cache_logits
        from vcr.geometry import GLOBAL
        from vcr.refine import zero_shot_logits

        cache = build_cache(
            [backend.encode_views(i, [GLOBAL])[0] for i, _ in episode.train],
            [l for _, l in episode.train],
            clf.num_classes,
        )
        feats = np.stack([backend.encode_views(i, [GLOBAL])[0] for i, _ in episode.test])
        pred = np.argmax(
            adapter_logits(zero_shot_logits(feats, clf), cache_logits(feats, cache, cfg.beta), cfg.alpha),
            axis=1,
        )
        want = evaluate(pred, [l for _, l in episode.test])
        assert report.top1 == pytest.approx(want["top1"])
        assert report.repeats == 1

    def test_n1_variant_equals_global_baseline(self):
        manifest, backend, clf = small_world(seed=4)
        episode = build_fewshot_episode(manifest, shots=2, seed=3)
        cfg = AblationConfig(n=1, m=6, seed=3)
        reports = run_ablation(
            episode, backend, clf, ["global_baseline", "selected_scale_weighted"], cfg
        )
        assert reports[0].results_payload() == reports[1].results_payload()

    def test_random_modes_report_mean_of_repeats(self):
        manifest, backend, clf = small_world(seed=5)
        episode = build_fewshot_episode(manifest, shots=2, seed=1)
        cfg = AblationConfig(n=3, m=5, seed=1, repeats=10)
        (report,) = run_ablation(episode, backend, clf, ["random_per_scale_avg"], cfg)
        assert report.repeats == 10

    def test_worker_count_does_not_change_results(self):
        manifest, backend, clf = small_world(seed=6)
        episode = build_fewshot_episode(manifest, shots=2, seed=2)
        modes = ["global_baseline", "selected_scale_weighted", "random_per_scale_avg", "ten_crop"]
        r1 = run_ablation(episode, backend, clf, modes, AblationConfig(n=3, m=5, seed=2, workers=1))
        r3 = run_ablation(episode, backend, clf, modes, AblationConfig(n=3, m=5, seed=2, workers=3))
        for a, b in zip(r1, r3):
            assert a.results_payload() == b.results_payload()

    def test_unknown_mode_rejected(self):
        manifest, backend, clf = small_world()
        episode = build_fewshot_episode(manifest, shots=1, seed=0)
        with pytest.raises(InvalidArgumentError):
            run_ablation(episode, backend, clf, ["mystery"], AblationConfig())

    def test_full_mode_matrix_runs(self):
        manifest, backend, clf = small_world(seed=7, images=24)
        episode = build_fewshot_episode(manifest, shots=2, seed=1)
        modes = [
            "global_baseline",
            "ten_crop",
            "multi_crop_avg",
            "random_per_scale_avg",
            "per_scale:0.5",
            "per_scale:1.0",
            "selected_uniform_avg",
            "selected_scale_weighted",
            "criterion:min_margin",
            "criterion:min_entropy",
            "criterion:random",
            "n:2",
        ]
        reports = run_ablation(episode, backend, clf, modes, AblationConfig(n=4, m=5, seed=1, repeats=3))
        assert [r.mode for r in reports] == modes
        for r in reports:
            assert 0.0 <= r.top1 <= 1.0
            assert r.counts["test"] == len(episode.test)


class TestDomainGeneralization:
    def test_target_equals_source_reproduces_in_domain(self):
        manifest, backend, clf = small_world(seed=8)
        episode = build_fewshot_episode(manifest, shots=2, seed=5)
        cfg = AblationConfig(n=3, m=5, seed=5)
        test_manifest = {
            "classes": manifest["classes"],
            "images": [img for img in manifest["images"] if img["id"] in {i for i, _ in episode.test}],
        }
        (domain_report,) = run_domain_generalization(
            episode, manifest, backend, [("self", test_manifest, backend)], clf, cfg
        )
        (ablate_report,) = run_ablation(episode, backend, clf, ["selected_scale_weighted"], cfg)
        assert domain_report.top1 == pytest.approx(ablate_report.top1)

    def test_noise_shift_degrades_monotonically(self):
        manifest, backend, clf = small_world(seed=9, images=48)
        episode = build_fewshot_episode(manifest, shots=2, seed=5)
        cfg = AblationConfig(n=3, m=8, seed=5)
        test_ids = {i for i, _ in episode.test}
        test_manifest = {
            "classes": manifest["classes"],
            "images": [img for img in manifest["images"] if img["id"] in test_ids],
        }
        targets = []
        for noise in (0.05, 0.45, 1.4):
            shifted = SyntheticBackend(backend.scenes, clf, noise)
            targets.append((f"noise{noise}", test_manifest, shifted))
        reports = run_domain_generalization(episode, manifest, backend, targets, clf, cfg)
        accs = [r.top1 for r in reports]
        assert accs[0] >= accs[1] >= accs[2]
        assert accs[0] > accs[2]

    def test_permuted_class_list_rejected(self):
        manifest, backend, clf = small_world(seed=10)
        episode = build_fewshot_episode(manifest, shots=2, seed=5)
        permuted = dict(manifest)
        permuted["classes"] = list(reversed(manifest["classes"]))
        with pytest.raises(InvalidArgumentError, match="index 0"):
            run_domain_generalization(
                episode, manifest, backend, [("bad", permuted, backend)], clf, AblationConfig()
            )


class TestSyntheticBenchmark:
    def test_trivial_world_scores_perfectly(self):
        # objects covering the whole image, no distractors, no noise: every
        # crop sees the pure prototype, every mode must score 1.0
        cfg = BenchmarkConfig(
            classes=4,
            images=16,
            distractors=0,
            n=3,
            m=4,
            noise_amp=0.0,
            seeds=(0,),
            width=64,
            height=64,
            dim=16,
            shots=1,
            repeats=2,
            object_radius=(64.0, 64.0),
            core_distractors=0,
            outer_ratio=None,
            modes=("global_baseline", "selected_scale_weighted", "random_per_scale_avg"),
        )
        agg = synthetic_benchmark(cfg)
        for row in agg["modes"]:
            assert row["mean"] == 1.0, row

    def test_aggregate_deterministic(self):
        cfg = BenchmarkConfig(
            classes=4, images=20, n=3, m=5, seeds=(0, 1), dim=32, repeats=2,
            modes=("global_baseline", "selected_scale_weighted"),
        )
        from vcr.embeddings import canonical_json_bytes

        a = synthetic_benchmark(cfg)
        b = synthetic_benchmark(cfg)
        a.pop("wall_time_per_image")
        b.pop("wall_time_per_image")
        assert canonical_json_bytes(a) == canonical_json_bytes(b)

    def test_invalid_config_rejected(self):
        with pytest.raises(InvalidArgumentError):
            synthetic_benchmark(BenchmarkConfig(classes=1))
        with pytest.raises(InvalidArgumentError):
            synthetic_benchmark(BenchmarkConfig(classes=8, dim=8))
