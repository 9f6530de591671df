import itertools

import numpy as np
import pytest

from eclip.encoders import EncoderSpec
from eclip.errors import CapacityError, DegenerateError, DimensionError, ParameterError
from eclip.evaluation import (
    LabeledEmbeddings,
    build_report,
    cluster_products,
    embed_dataset,
    clustering_metrics,
    f1_score,
    fine_tune,
    kmeans,
    linear_probe,
    numerical_rank,
    pca_fit,
    pca_project,
    top1_matching_accuracy,
    zero_shot_classify,
)
from eclip.oracles import brute_force_acc, pair_counting_ari, set_partitions
from eclip.synth import SynthSpec, generate, split_by_catalog
from eclip.training import TrainConfig, train


class TestZeroShot:
    def setup_method(self):
        self.classes = np.eye(3)

    def test_image_self_match(self):
        assert zero_shot_classify(self.classes[[2]], None, self.classes, "image")[0] == 2

    def test_multimodal_agreement(self):
        assert zero_shot_classify(self.classes[[0]], self.classes[[0]], self.classes)[0] == 0

    def test_multimodal_orthogonal_image(self):
        x = np.array([[0.0, 0.0, 0.0, 1.0]])
        classes = np.hstack([self.classes, np.zeros((3, 1))])
        y = classes[[1]]
        # mean of x and y is (0, .5, 0, .5): cosine .707 with class 1, 0 with the others
        assert zero_shot_classify(x, y, classes)[0] == 1

    def test_missing_modality(self):
        with pytest.raises(ParameterError):
            zero_shot_classify(None, self.classes, self.classes, "multimodal")
        with pytest.raises(ParameterError):
            zero_shot_classify(self.classes, None, self.classes, "text")

    def test_scale_invariance(self, rng):
        x, y, c = rng.normal(size=(20, 4)), rng.normal(size=(20, 4)), rng.normal(size=(5, 4))
        for mode in ("image", "text", "multimodal"):
            base = zero_shot_classify(x, y, c, mode)
            np.testing.assert_array_equal(base, zero_shot_classify(3.7 * x, 0.2 * y, c, mode))


class TestMatching:
    def test_no_positives(self, rng):
        q = LabeledEmbeddings(rng.normal(size=(5, 3)), list("abcde"))
        assert top1_matching_accuracy(q) == 0.0

    def test_exact_duplicates(self, rng):
        e = rng.normal(size=(4, 3))
        q = LabeledEmbeddings(np.vstack([e, e]), list("abcdabcd"))
        assert top1_matching_accuracy(q) == 1.0

    def test_hand_placed_against_brute_force(self):
        emb = np.array([[1.0, 0.0], [0.9, 0.1], [0.0, 1.0]])
        labels = ["x", "x", "y"]
        hits = 0
        for i in range(3):
            best = max((j for j in range(3) if j != i), key=lambda j: emb[i] @ emb[j] / np.linalg.norm(emb[j]))
            hits += labels[best] == labels[i]
        assert top1_matching_accuracy(LabeledEmbeddings(emb, labels)) == hits / 3

    def test_separate_pool(self):
        q = LabeledEmbeddings(np.array([[1.0, 0.0]]), ["a"])
        pool = LabeledEmbeddings(np.array([[0.0, 1.0], [1.0, 0.1]]), ["b", "a"])
        assert top1_matching_accuracy(q, pool) == 1.0

    def test_empty_pool(self):
        with pytest.raises(CapacityError):
            top1_matching_accuracy(LabeledEmbeddings(np.ones((1, 2)), ["a"]), LabeledEmbeddings(np.zeros((0, 2)), []))


class TestLinearProbe:
    def test_separable(self, rng):
        a = rng.normal(size=(30, 2)) + [5, 0]
        b = rng.normal(size=(30, 2)) - [5, 0]
        emb = np.vstack([a, b])
        labels = [0] * 30 + [1] * 30
        data = LabeledEmbeddings(emb, labels)
        assert linear_probe(data, data) == 1.0

    def test_dominates_fixed_baseline(self, rng):
        emb = rng.normal(size=(80, 3))
        labels = (emb[:, 0] + 0.5 * emb[:, 1] > 0).astype(int).tolist()
        data = LabeledEmbeddings(emb, labels)
        majority = max(np.mean(labels), 1 - np.mean(labels))
        axis = np.mean((emb[:, 0] > 0).astype(int) == labels)
        assert linear_probe(data, data) >= max(majority, axis)

    def test_permuted_labels_are_chance(self):
        rng = np.random.default_rng(0)
        emb = rng.normal(size=(2000, 4))
        labels = rng.permutation([0, 1] * 1000).tolist()
        train_set = LabeledEmbeddings(emb[:1000], labels[:1000])
        test_set = LabeledEmbeddings(emb[1000:], labels[1000:])
        assert abs(linear_probe(train_set, test_set) - 0.5) <= 0.1

    def test_single_class(self, rng):
        data = LabeledEmbeddings(rng.normal(size=(5, 2)), [1] * 5)
        with pytest.raises(DegenerateError):
            linear_probe(data, data)


class TestPCA:
    def test_line_preserves_distances(self, rng):
        t = rng.normal(size=20)
        X = np.stack([t, 2 * t], axis=1)
        Z = pca_project(X, 1)
        d = lambda A: np.linalg.norm(A[:, None] - A[None], axis=2)
        np.testing.assert_allclose(d(Z), d(X), atol=1e-12)

    def test_full_dim_preserves_variance(self, rng):
        X = rng.normal(size=(30, 5))
        Z = pca_project(X, 5)
        assert abs(Z.var(axis=0).sum() - X.var(axis=0).sum()) < 1e-10

    def test_against_covariance_eigh(self, rng):
        X = rng.normal(size=(50, 8))
        p = pca_fit(X, 3)
        w, v = np.linalg.eigh(np.cov(X, rowvar=False))
        top = v[:, np.argsort(w)[::-1][:3]]
        np.testing.assert_allclose(p.components.T @ p.components, top @ top.T, atol=1e-8)
        np.testing.assert_allclose(p.explained_variance, np.sort(w)[::-1][:3], rtol=1e-10)

    def test_reconstruction_at_rank(self, rng):
        X = rng.normal(size=(25, 3)) @ rng.normal(size=(3, 7))
        assert numerical_rank(X) == 3
        p = pca_fit(X, 3)
        np.testing.assert_allclose(p.inverse_transform(p.transform(X)), X, atol=1e-8)

    def test_sign_convention_deterministic(self, rng):
        X = rng.normal(size=(20, 4))
        np.testing.assert_array_equal(pca_project(X, 2), pca_project(X.copy(), 2))
        comps = pca_fit(X, 4).components
        assert all(row[np.argmax(np.abs(row))] > 0 for row in comps)

    def test_out_dim_too_large(self, rng):
        with pytest.raises(ParameterError):
            pca_project(rng.normal(size=(5, 3)), 4)


class TestKMeans:
    def test_two_pairs(self):
        X = np.array([[0.0, 0.0], [0.1, 0.0], [10.0, 10.0], [10.1, 10.0]])
        a = kmeans(X, 2, seed=0).assignments
        assert a[0] == a[1] and a[2] == a[3] and a[0] != a[2]

    def test_k_equals_n(self, rng):
        X = rng.normal(size=(6, 2))
        res = kmeans(X, 6, seed=1)
        assert len(set(res.assignments.tolist())) == 6 and res.inertia == 0.0

    def test_seeded(self, rng):
        X = rng.normal(size=(40, 3))
        a, b = kmeans(X, 4, seed=9), kmeans(X, 4, seed=9)
        np.testing.assert_array_equal(a.assignments, b.assignments)
        assert a.inertia == b.inertia

    def test_duplicate_points(self):
        X = np.zeros((5, 2))
        res = kmeans(X, 3, seed=0)
        assert res.inertia == 0.0 and len(res.assignments) == 5

    def test_k_too_large(self, rng):
        with pytest.raises(ParameterError):
            kmeans(rng.normal(size=(3, 2)), 4)

    def test_n_init_never_worse(self, rng):
        X = np.vstack([rng.normal(size=(15, 2)) + c for c in ([0, 0], [6, 0], [0, 6], [6, 6])])
        single = kmeans(X, 4, seed=3).inertia
        assert kmeans(X, 4, seed=3, n_init=5).inertia <= single


class TestClusteringMetrics:
    def test_relabeling(self):
        assert clustering_metrics([0, 0, 1, 1], [1, 1, 0, 0]) == (1.0, 1.0, 1.0)

    def test_single_cluster(self):
        assert clustering_metrics([0, 0, 0, 0], [0, 0, 1, 1]) == (0.5, 0.0, 0.0)

    def test_six_point_oracles(self, rng):
        for _ in range(20):
            u = rng.integers(0, 3, size=6).tolist()
            v = rng.integers(0, 4, size=6).tolist()
            acc, _, ari = clustering_metrics(u, v)
            assert abs(acc - brute_force_acc(u, v)) < 1e-12
            assert abs(ari - pair_counting_ari(u, v)) < 1e-12

    def test_unity_iff_same_partition(self):
        parts = list(set_partitions(5))
        for u, v in itertools.product(parts, parts):
            _, nmi, ari = clustering_metrics(u, v)
            same = u == v  # restricted-growth strings are canonical labelings
            assert (nmi == 1.0) == same and (ari == 1.0) == same

    def test_acc_dominates_simple_mappings(self, rng):
        for _ in range(50):
            u = rng.integers(0, 3, size=12)
            v = rng.integers(0, 4, size=12)
            acc, _, _ = clustering_metrics(u, v)
            table = np.zeros((3, 4), int)
            np.add.at(table, (u, v), 1)
            # mapping just the best cluster to its majority label
            assert acc >= table.max() / 12
            # greedy one-to-one mapping
            t, greedy = table.copy(), 0
            for _ in range(3):
                r, c = np.unravel_index(np.argmax(t), t.shape)
                greedy += t[r, c]
                t[r, :] = -1
                t[:, c] = -1
            assert acc >= greedy / 12

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            clustering_metrics([0, 1], [0])


class TestF1:
    def test_perfect(self):
        assert f1_score([1, 0, 1], [1, 0, 1]) == 1.0

    def test_all_negative(self):
        assert f1_score([0, 0, 0], [1, 0, 1]) == 0.0

    def test_formula(self):
        assert f1_score([1, 1, 0], [1, 0, 1]) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            f1_score([1], [1, 0])


class TestClusterProducts:
    def test_orthogonal_classes(self, rng):
        labels = np.repeat(np.arange(4), 5)
        emb = np.eye(8)[labels] + 0.01 * rng.normal(size=(20, 8))
        res = cluster_products(emb, emb, 4, out_dim=128, seed=0)
        assert clustering_metrics(res.assignments, labels)[0] == 1.0

    def test_rank_clamp(self, rng):
        emb = np.eye(3)[np.repeat(np.arange(3), 4)]
        res = cluster_products(emb, emb, 3, out_dim=50, seed=0)
        assert res.centroids.shape[1] == 2  # three centered points span a plane

    def test_equals_manual_composition(self, rng):
        t, i = rng.normal(size=(30, 4)), rng.normal(size=(30, 3))
        res = cluster_products(t, i, 3, out_dim=5, seed=2)
        manual = kmeans(pca_project(np.hstack([t, i]), 5), 3, seed=2)
        np.testing.assert_array_equal(res.assignments, manual.assignments)

    def test_row_mismatch(self, rng):
        with pytest.raises(DimensionError):
            cluster_products(rng.normal(size=(3, 2)), rng.normal(size=(4, 2)), 2)


def _trained(seed, steps=150):
    data = generate(SynthSpec(n_classes=8, n_catalogs_per_class=6, seed=seed))
    pd = data.pair_dataset()
    train_set, test_set = split_by_catalog(pd, 1, seed)
    cfg = TrainConfig(
        EncoderSpec(pd.text.shape[1], (32,), 16),
        EncoderSpec(pd.image.shape[1], (32,), 16),
        B0=16,
        Bmax=64,
        total_steps=steps,
        micro_batch=16,
        lr=1e-3,
        eval_interval=steps,
        seed=seed,
    )
    model, _ = train(cfg, train_set)
    return data, model, train_set, test_set


class TestReport:
    def test_structure(self):
        data, model, train_set, test_set = _trained(0, steps=60)
        report = build_report(model, train_set, test_set, data.class_prompts, adult_prefixes=["L0g01"], pca_dim=8, probe_epochs=50)
        assert list(report) == ["zero_shot", "matching", "clustering", "attribute", "category", "adult"]
        for task in report.values():
            assert set(task) == {"text", "image", "multimodal"}
        assert set(report["clustering"]["text"]) == {"acc", "nmi", "ari"}
        assert set(report["adult"]["image"]) == {"f1"}

    def test_task_selection(self):
        data, model, train_set, test_set = _trained(0, steps=20)
        report = build_report(model, train_set, test_set, data.class_prompts, tasks=["matching"])
        assert list(report) == ["matching"]

    def test_fine_tune_not_worse_than_probe(self):
        gaps = []
        for seed in range(5):
            data, model, train_set, test_set = _trained(seed)
            tr = [">".join(c) for c in train_set.categories]
            te = [">".join(c) for c in test_set.categories]
            e_tr, e_te = embed_dataset(model, train_set), embed_dataset(model, test_set)
            probe = linear_probe(LabeledEmbeddings(e_tr["multimodal"], tr), LabeledEmbeddings(e_te["multimodal"], te))
            tuned = fine_tune(model, train_set, tr, test_set, te, "multimodal", epochs=50)
            gaps.append(tuned - probe)
        assert np.median(gaps) >= -0.02

    def test_fine_tune_leaves_model_untouched(self):
        data, model, train_set, test_set = _trained(1, steps=10)
        before = model.params.copy()
        labels = [">".join(c) for c in train_set.categories]
        fine_tune(model, train_set, labels, train_set, labels, "text", epochs=3)
        assert model.params.equals(before)
