import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vcr.embeddings import build_text_classifier, normalize
from vcr.errors import InvalidArgumentError
from vcr.geometry import GLOBAL, build_scale_set, sample_crops
from vcr.refine import (
    merge_features,
    prediction_margin,
    prediction_margins,
    refine_image,
    select_view,
    softmax_entropies,
    zero_shot_logits,
)
from vcr.rng import image_seed, substream_seed
from vcr.synthetic import Disc, SyntheticBackend, SyntheticScene, generate_scenes, make_prototype_classifier


# ---------------------------------------------------------------- oracles


def naive_cosine(u, v):
    num = sum(float(a) * float(b) for a, b in zip(u, v))
    nu = math.sqrt(sum(float(a) ** 2 for a in u))
    nv = math.sqrt(sum(float(b) ** 2 for b in v))
    return num / (nu * nv)


def naive_entropy(logits):
    vals = [float(v) for v in logits]
    mx = max(vals)
    exps = [math.exp(v - mx) for v in vals]
    z = sum(exps)
    probs = [e / z for e in exps]
    return -sum(p * math.log(p) for p in probs if p > 0)


def naive_margin(logits):
    top = sorted(float(v) for v in logits)
    return top[-1] - top[-2]


def brute_force_refine(backend, clf, image_id, dims, scale_set, m, weighting, seed):
    """Independent pipeline reimplementation: plain loops, max-margin only."""
    width, height = dims
    seed_i = image_seed(seed, image_id)
    selected = []
    for i, scale in enumerate(scale_set.scales[:-1]):
        crops = sample_crops(width, height, scale, m, substream_seed(seed_i, i))
        best_k, best_margin = 0, -1.0
        feats = []
        for k, crop in enumerate(crops):
            f = backend.encode_view(image_id, crop)
            feats.append(f)
            logits = [naive_cosine(f, row) / clf.tau for row in clf.weights]
            margin = naive_margin(logits)
            if margin > best_margin:
                best_k, best_margin = k, margin
        selected.append((scale, feats[best_k]))
    selected.append((1.0, backend.encode_view(image_id, GLOBAL)))

    if weighting == "uniform":
        weights = [1.0] * len(selected)
    else:
        weights = [s for s, _ in selected]
    dim = len(selected[0][1])
    acc = [0.0] * dim
    for w, (_, f) in zip(weights, selected):
        for j in range(dim):
            acc[j] += w * float(f[j])
    total = sum(weights)
    acc = [a / total for a in acc]
    norm = math.sqrt(sum(a * a for a in acc))
    return np.array([a / norm for a in acc], dtype=np.float64)


# ---------------------------------------------------------------- logits


def orthonormal_clf(C=4, d=8, tau=1.0):
    w = np.zeros((C, d))
    for i in range(C):
        w[i, i] = 1.0
    return build_text_classifier([f"c{i}" for i in range(C)], w, tau)


class TestZeroShotLogits:
    def test_cosine_identity(self):
        clf = orthonormal_clf()
        logits = zero_shot_logits(clf.weights[0], clf)
        np.testing.assert_allclose(logits, [1.0, 0.0, 0.0, 0.0], atol=1e-6)

    def test_temperature_scaling(self):
        rng = np.random.default_rng(0)
        f = normalize(rng.standard_normal(8))
        c1 = orthonormal_clf(tau=1.0)
        c2 = orthonormal_clf(tau=0.5)
        np.testing.assert_allclose(zero_shot_logits(f, c2), 2.0 * zero_shot_logits(f, c1), atol=1e-9)

    def test_against_double_precision_cosine_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(20):
            raw = rng.standard_normal((5, 16))
            clf = build_text_classifier([f"c{i}" for i in range(5)], raw, tau=0.37)
            f = normalize(rng.standard_normal(16))
            got = zero_shot_logits(f, clf)
            want = [naive_cosine(f, row) / clf.tau for row in clf.weights]
            np.testing.assert_allclose(got, want, atol=1e-5)

    def test_dimension_mismatch(self):
        clf = orthonormal_clf(d=8)
        with pytest.raises(InvalidArgumentError):
            zero_shot_logits(np.ones(4, dtype=np.float32) / 2.0, clf)

    def test_argmax_invariant_under_prenorm_rescaling(self):
        rng = np.random.default_rng(7)
        clf = build_text_classifier(["a", "b", "c"], rng.standard_normal((3, 8)), tau=0.1)
        raw = rng.standard_normal(8)
        for c in (1e-3, 1.0, 1e4):
            f = normalize(c * raw)
            assert np.argmax(zero_shot_logits(f, clf)) == np.argmax(
                zero_shot_logits(normalize(raw), clf)
            )


class TestPredictionMargin:
    def test_examples(self):
        assert prediction_margin([3.0, 1.0, 0.5]) == pytest.approx(2.0)
        assert prediction_margin([4.0, 4.0, 4.0]) == 0.0

    def test_needs_two_classes(self):
        with pytest.raises(InvalidArgumentError):
            prediction_margin([1.0])

    @settings(max_examples=200, deadline=None)
    @given(
        st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=20),
        st.floats(-1e6, 1e6),
        st.floats(1e-6, 1e6),
    )
    def test_shift_and_scale_laws(self, logits, k, c):
        # the laws are exact in real arithmetic; tolerances cover only the
        # f64 representation error of the shifted/scaled logits themselves
        v = np.asarray(logits, dtype=np.float64)
        eps = np.finfo(np.float64).eps
        base = prediction_margin(v)
        mag = float(np.max(np.abs(v))) if v.size else 0.0
        assert base >= 0.0
        shift_tol = 4 * eps * (mag + abs(k) + 1.0)
        assert prediction_margin(v + k) == pytest.approx(base, abs=shift_tol)
        scale_tol = 4 * eps * c * (mag + 1.0)
        assert prediction_margin(c * v) == pytest.approx(c * base, abs=scale_tol)

    def test_matches_naive_oracle(self):
        rng = np.random.default_rng(3)
        batch = rng.standard_normal((50, 7))
        got = prediction_margins(batch)
        want = [naive_margin(row) for row in batch]
        np.testing.assert_allclose(got, want, atol=1e-12)


class TestSelectView:
    def test_max_margin_example(self):
        logits = np.array([[1.0, 0.5, 0.0], [3.0, 1.0, 0.0], [2.0, 1.0, 0.0]])
        k, score = select_view(logits, "max_margin")
        assert k == 1 and score == pytest.approx(2.0)

    def test_tie_break_lowest_index(self):
        logits = np.array([[1.0, 0.0], [2.0, 1.0], [3.0, 2.0]])  # all margins 1.0
        k, _ = select_view(logits, "max_margin")
        assert k == 0

    def test_min_margin(self):
        logits = np.array([[1.0, 0.5], [3.0, 0.0], [2.0, 1.9]])
        k, _ = select_view(logits, "min_margin")
        assert k == 2

    def test_min_entropy_matches_brute_force(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            logits = rng.standard_normal((12, 6)) * rng.uniform(0.1, 5.0)
            k, _ = select_view(logits, "min_entropy")
            oracle = int(np.argmin([naive_entropy(row) for row in logits]))
            assert k == oracle

    def test_min_entropy_and_max_margin_can_disagree(self):
        # one view with a clear peak but big second logit, another flat-ish
        # view with a slightly larger top-2 gap
        a = [5.0, 4.0, 0.0, 0.0]  # margin 1.0, low entropy
        b = [1.2, 0.0, 0.0, 0.0]  # margin 1.2, higher entropy
        logits = np.array([a, b])
        k_margin, _ = select_view(logits, "max_margin")
        k_entropy, _ = select_view(logits, "min_entropy")
        assert k_margin == 1 and k_entropy == 0

    def test_random_is_seeded(self):
        logits = np.zeros((10, 3))
        k1, _ = select_view(logits, "random", tie_seed=5)
        k2, _ = select_view(logits, "random", tie_seed=5)
        k3s = {select_view(logits, "random", tie_seed=s)[0] for s in range(30)}
        assert k1 == k2
        assert len(k3s) > 1

    def test_empty_rejected(self):
        with pytest.raises(InvalidArgumentError):
            select_view(np.zeros((0, 3)), "max_margin")

    def test_unknown_criterion(self):
        with pytest.raises(InvalidArgumentError):
            select_view(np.zeros((2, 3)), "best_vibes")

    def test_raw_logits_beat_f32_softmax_margins_at_C1000(self):
        # rationale guard: at C=1000, logit gaps of ~1e-8 survive in f64
        # while softmax probabilities collapse to uniform at f32 resolution
        C = 1000
        a = np.zeros(C)
        a[0], a[1] = 2e-8, 1e-8  # margin 1e-8
        b = np.zeros(C)
        b[0], b[1] = 4e-8, 2e-8  # margin 2e-8  -> raw argmax picks view 1
        logits = np.stack([a, b])
        k_raw, _ = select_view(logits, "max_margin")
        assert k_raw == 1

        def f32_softmax_margin(v):
            e = np.exp(v - v.max())
            p = (e / e.sum()).astype(np.float32)
            top = np.sort(p)[-2:]
            return float(top[1] - top[0])

        softmax_margins = [f32_softmax_margin(v) for v in logits]
        assert softmax_margins[0] == softmax_margins[1] == 0.0  # indistinguishable
        k_prob = int(np.argmax(softmax_margins))
        assert k_prob != k_raw  # probability route loses the real winner


class TestSoftmaxEntropy:
    def test_uniform_is_log_c(self):
        ent = softmax_entropies(np.zeros((1, 8)))[0]
        assert ent == pytest.approx(math.log(8))

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((20, 5)) * 3
        got = softmax_entropies(logits)
        want = [naive_entropy(row) for row in logits]
        np.testing.assert_allclose(got, want, atol=1e-10)


class TestMergeFeatures:
    def test_identical_vectors_pass_through(self):
        v = normalize(np.array([1.0, 2.0, 3.0, 4.0]))
        out = merge_features([(0.5, v), (1.0, v)], "scale_weighted")
        np.testing.assert_allclose(out, v, atol=1e-6)

    def test_two_scale_arithmetic(self):
        e1 = np.array([1.0, 0.0], dtype=np.float32)
        e2 = np.array([0.0, 1.0], dtype=np.float32)
        out = merge_features([(0.5, e1), (1.0, e2)], "scale_weighted")
        want = np.array([1 / 3, 2 / 3])
        want /= np.linalg.norm(want)
        np.testing.assert_allclose(out, want, atol=1e-6)

    def test_single_entry_exact(self):
        v = normalize(np.array([0.3, -0.2, 0.9, 0.1]))
        out = merge_features([(1.0, v)], "scale_weighted")
        np.testing.assert_array_equal(out, v)  # bitwise

    def test_global_only_returns_global_exactly(self):
        rng = np.random.default_rng(0)
        v1 = normalize(rng.standard_normal(6))
        v2 = normalize(rng.standard_normal(6))
        out = merge_features([(0.5, v1), (1.0, v2)], "global_only")
        np.testing.assert_array_equal(out, v2)

    def test_uniform_average(self):
        e1 = np.array([1.0, 0.0], dtype=np.float32)
        e2 = np.array([0.0, 1.0], dtype=np.float32)
        out = merge_features([(0.5, e1), (1.0, e2)], "uniform")
        np.testing.assert_allclose(out, np.array([1, 1]) / math.sqrt(2), atol=1e-6)

    def test_errors(self):
        v = normalize(np.ones(4))
        with pytest.raises(InvalidArgumentError):
            merge_features([], "uniform")
        with pytest.raises(InvalidArgumentError):
            merge_features([(0.5, v), (0.5, v)], "uniform")  # duplicate scales
        with pytest.raises(InvalidArgumentError):
            merge_features([(0.5, v), (1.0, normalize(np.ones(6)))], "uniform")
        with pytest.raises(InvalidArgumentError):
            merge_features([(0.5, v)], "global_only")

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=2, max_value=6), st.integers(0, 2**32 - 1))
    def test_convex_hull_and_norm_bound(self, count, seed):
        rng = np.random.default_rng(seed)
        scales = sorted(rng.choice(np.arange(1, 11), size=count, replace=False) / 10.0)
        feats = [normalize(rng.standard_normal(8)) for _ in scales]
        entries = list(zip(scales, feats))
        # pre-normalization combination lies in the convex hull: its
        # coefficients are the normalized weights
        w = np.array(scales) / np.sum(scales)
        pre = np.sum(w[:, None] * np.stack(feats).astype(np.float64), axis=0)
        assert np.linalg.norm(pre) <= 1.0 + 1e-9
        out = merge_features(entries, "scale_weighted")
        np.testing.assert_allclose(np.linalg.norm(out.astype(np.float64)), 1.0, atol=1e-4)
        np.testing.assert_allclose(out, pre / np.linalg.norm(pre), atol=1e-6)


# ---------------------------------------------------------------- pipeline


def scene_backend(seed=0, C=4, d=16, tau=0.05, noise=0.1, n_images=3):
    scenes = generate_scenes(C, n_images, 2, 96, 96, seed=seed)
    clf = make_prototype_classifier(C, d, seed=seed + 1, tau=tau)
    backend = SyntheticBackend({s.image_id: s for s in scenes}, clf, noise)
    return scenes, clf, backend


class TestRefineImage:
    def test_n1_reduces_to_global_bitwise(self):
        scenes, clf, backend = scene_backend()
        scale_set = build_scale_set(1)
        for s in scenes:
            rf = refine_image(
                backend, clf, s.image_id, (s.width, s.height), scale_set, m=5, seed=3
            )
            global_feat = backend.encode_views(s.image_id, [GLOBAL])[0]
            np.testing.assert_array_equal(rf.vector, global_feat)
            assert rf.selection.per_scale == ()

    def test_global_only_weighting_reduces_for_any_n(self):
        scenes, clf, backend = scene_backend()
        scale_set = build_scale_set(6)
        for s in scenes:
            rf = refine_image(
                backend,
                clf,
                s.image_id,
                (s.width, s.height),
                scale_set,
                m=4,
                weighting="global_only",
                seed=3,
            )
            np.testing.assert_array_equal(
                rf.vector, backend.encode_views(s.image_id, [GLOBAL])[0]
            )

    def test_matches_brute_force_oracle(self):
        scenes, clf, backend = scene_backend(seed=5)
        scale_set = build_scale_set(5)
        for s in scenes:
            rf = refine_image(
                backend, clf, s.image_id, (s.width, s.height), scale_set, m=8, seed=11
            )
            oracle = brute_force_refine(
                backend, clf, s.image_id, (s.width, s.height), scale_set, 8, "scale_weighted", 11
            )
            cos = float(rf.vector.astype(np.float64) @ oracle)
            assert 1.0 - cos < 1e-6

    def test_selection_records_max_margin(self):
        scenes, clf, backend = scene_backend(seed=2)
        scale_set = build_scale_set(4)
        s = scenes[0]
        rf = refine_image(backend, clf, s.image_id, (s.width, s.height), scale_set, m=6, seed=9)
        assert len(rf.selection.per_scale) == 3
        seed_i = image_seed(9, s.image_id)
        for i, sel in enumerate(rf.selection.per_scale):
            crops = sample_crops(s.width, s.height, scale_set.scales[i], 6, substream_seed(seed_i, i))
            feats = backend.encode_views(s.image_id, crops)
            margins = prediction_margins(zero_shot_logits(feats, clf))
            assert sel.margin == pytest.approx(float(margins.max()))
            assert sel.index == int(np.argmax(margins))
            assert sel.crop == crops[sel.index]

    def test_deterministic_across_calls(self):
        scenes, clf, backend = scene_backend(seed=8)
        scale_set = build_scale_set(5)
        s = scenes[0]
        a = refine_image(backend, clf, s.image_id, (s.width, s.height), scale_set, m=6, seed=1)
        b = refine_image(backend, clf, s.image_id, (s.width, s.height), scale_set, m=6, seed=1)
        np.testing.assert_array_equal(a.vector, b.vector)
        assert a.selection == b.selection

    def test_criterion_changes_nothing_at_n1(self):
        scenes, clf, backend = scene_backend()
        scale_set = build_scale_set(1)
        s = scenes[0]
        outs = [
            refine_image(
                backend, clf, s.image_id, (s.width, s.height), scale_set, m=4,
                criterion=c, weighting=w, seed=2,
            ).vector
            for c in ("max_margin", "min_margin", "min_entropy", "random")
            for w in ("scale_weighted", "uniform", "global_only")
        ]
        for v in outs[1:]:
            np.testing.assert_array_equal(outs[0], v)

    def test_tau_rescaling_never_changes_selection(self):
        scenes, _, _ = scene_backend(seed=4)
        s = scenes[0]
        C, d = 4, 16
        clf1 = make_prototype_classifier(C, d, seed=5, tau=0.05)
        clf2 = make_prototype_classifier(C, d, seed=5, tau=0.05 / 7.0)
        b1 = SyntheticBackend({s.image_id: s}, clf1, 0.1)
        scale_set = build_scale_set(5)
        r1 = refine_image(b1, clf1, s.image_id, (s.width, s.height), scale_set, m=6, seed=1)
        r2 = refine_image(b1, clf2, s.image_id, (s.width, s.height), scale_set, m=6, seed=1)
        assert [x.index for x in r1.selection.per_scale] == [
            x.index for x in r2.selection.per_scale
        ]
        np.testing.assert_array_equal(r1.vector, r2.vector)

    def test_refined_closer_to_prototype_than_global(self):
        # an object small enough that the global view dilutes it: the merged
        # feature must sit closer to the class prototype than the global one
        C, d = 4, 16
        clf = make_prototype_classifier(C, d, seed=5, tau=0.05)
        scene = SyntheticScene(
            image_id="t",
            width=96,
            height=96,
            object_class=1,
            object_disc=Disc(40.0, 40.0, 12.0),
            distractors=(),
            noise_seed=3,
        )
        backend = SyntheticBackend({"t": scene}, clf, noise_amp=0.0)
        scale_set = build_scale_set(5)
        rf = refine_image(backend, clf, "t", (96, 96), scale_set, m=24, seed=0)
        proto = clf.weights[1].astype(np.float64)
        cos_refined = float(rf.vector.astype(np.float64) @ proto)
        cos_global = float(backend.encode_view("t", GLOBAL).astype(np.float64) @ proto)
        assert cos_refined > cos_global
