"""Metric and protocol mechanics: retrieval ranks, AUROC, prototypes, probes."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from probalign.data import CorpusConfig, generate
from probalign.encoders import AlignmentModel, Modality
from probalign.evaluation import (
    EvalReport,
    PromptSet,
    RocCurve,
    UncertaintyProbe,
    auroc,
    class_prototype,
    few_shot,
    filtered_zero_shot,
    logistic_probe,
    macro_ovr_auroc,
    mean_uncertainty_by_noise,
    multimodal_classify,
    permutation_pvalue,
    probe_scores,
    prompt_uncertainty,
    recall_at_k,
    roc_curve,
    spearman,
    tied_ranks,
    uncertainty_noise_probe,
    zero_shot,
)
from probalign.gaussians import GaussianEmbedding, SimilarityKind


@pytest.fixture(scope="module")
def model():
    dims = {Modality.MOD_A: 6, Modality.MOD_B: 5, Modality.MOD_C: 7, Modality.TEXT: 4}
    return AlignmentModel.build(9, dims, hidden_dim=16, embed_dim=8, bn_enabled=False)


def emb(mu, log_var):
    return GaussianEmbedding(np.asarray(mu, dtype=float), np.asarray(log_var, dtype=float))


class TestRecallAtK:
    def test_identity_matrix_perfect(self):
        result = recall_at_k(np.eye(5), list(range(5)), [1, 5])
        assert result.recall_at == {1: 100.0, 5: 100.0}
        assert result.rsum == 200.0

    def test_reversed_ranking_zero(self):
        sim = -np.eye(10)
        result = recall_at_k(sim + 0.5, list(range(10)), [5])
        assert result.recall_at[5] == 0.0

    def test_hand_counted_swap(self):
        # Query 0 ranks its ground truth second; the rest rank first.
        sim = np.array(
            [
                [0.2, 0.9, 0.1],
                [0.0, 1.0, 0.0],
                [0.1, 0.2, 0.8],
            ]
        )
        result = recall_at_k(sim, [0, 1, 2], [1, 2])
        assert result.recall_at[1] == pytest.approx(100 * 2 / 3)
        assert result.recall_at[2] == pytest.approx(100.0)

    def test_tie_broken_by_lower_gallery_index(self):
        sim = np.array([[0.5, 0.5]])
        assert recall_at_k(sim, [0], [1]).recall_at[1] == 100.0
        assert recall_at_k(sim, [1], [1]).recall_at[1] == 0.0

    def test_k_exceeding_gallery_rejected(self):
        with pytest.raises(ValueError, match="K must lie"):
            recall_at_k(np.eye(3), [0, 1, 2], [4])

    def test_monotone_in_k(self):
        rng = np.random.default_rng(0)
        sim = rng.normal(size=(20, 30))
        gt = rng.integers(0, 30, size=20)
        result = recall_at_k(sim, list(gt), [1, 2, 5, 10, 30])
        values = [result.recall_at[k] for k in (1, 2, 5, 10, 30)]
        assert all(b >= a for a, b in zip(values, values[1:]))
        assert result.recall_at[30] == 100.0
        assert result.rsum == pytest.approx(sum(values))


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_all_ties_give_half(self):
        assert auroc([0.5] * 6, [0, 1, 0, 1, 0, 1]) == 0.5

    def test_hand_enumeration(self):
        assert auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75)

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="both classes"):
            auroc([0.1, 0.2], [1, 1])

    def test_roc_curve_sorted_desc(self):
        curve = roc_curve([0.3, 0.9, 0.1], [1, 1, 0])
        assert isinstance(curve, RocCurve)
        assert [p[0] for p in curve.points] == [0.9, 0.3, 0.1]
        assert curve.auroc == 1.0

    @settings(max_examples=100, deadline=None)
    @given(st.integers(min_value=0, max_value=2**31 - 1))
    def test_invariant_under_monotone_transforms(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 40))
        scores = rng.normal(size=n)
        labels = rng.integers(0, 2, size=n)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        base = auroc(scores, labels)
        for transform in (np.exp, lambda s: 3 * s + 7, np.arctan):
            assert auroc(transform(scores), labels) == pytest.approx(base, abs=1e-12)

    def test_tied_ranks_average(self):
        np.testing.assert_allclose(tied_ranks([1.0, 2.0, 2.0, 3.0]), [1.0, 2.5, 2.5, 4.0])


class TestSpearman:
    def test_perfect_monotone(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)
        assert spearman([1, 2, 3, 4], [5, 4, 3, 2]) == pytest.approx(-1.0)

    def test_constant_series_is_zero(self):
        assert spearman([1, 2, 3], [5, 5, 5]) == 0.0

    def test_matches_scipy(self):
        from scipy import stats

        rng = np.random.default_rng(1)
        for _ in range(20):
            x = rng.normal(size=15)
            y = rng.normal(size=15) + 0.5 * x
            expected = stats.spearmanr(x, y).statistic
            assert spearman(x, y) == pytest.approx(expected, abs=1e-12)


class TestPermutation:
    def test_informative_scores_give_small_p(self):
        rng = np.random.default_rng(2)
        labels = np.array([0] * 50 + [1] * 50)
        scores = labels + 0.3 * rng.normal(size=100)
        out = permutation_pvalue(scores, labels, np.random.default_rng(3), n_permutations=200)
        assert out["p_value"] < 0.01
        assert out["null_mean"] == pytest.approx(0.5, abs=0.05)

    def test_random_scores_give_large_p(self):
        rng = np.random.default_rng(4)
        labels = np.array([0] * 40 + [1] * 40)
        scores = rng.normal(size=80)
        out = permutation_pvalue(scores, labels, np.random.default_rng(5), n_permutations=200)
        assert out["p_value"] > 0.05


class TestPromptsAndPrototypes:
    def test_uncertainty_values(self):
        assert prompt_uncertainty(emb([0.0], [0.0])) == 1.0
        assert prompt_uncertainty(emb([0.0], [2 * np.log(2.0)])) == pytest.approx(2.0)
        mixed = emb([0.0, 0.0], [0.0, 2 * np.log(2.0)])
        assert prompt_uncertainty(mixed) == pytest.approx(1.5)

    def test_prototype_of_identical_prompts_is_exact(self):
        e = emb([0.1, 0.2, 0.3], [-0.5, 0.1, 0.4])
        proto = class_prototype([e, e, e])
        np.testing.assert_array_equal(proto.mu, e.mu)
        np.testing.assert_array_equal(proto.log_var, e.log_var)

    def test_single_prompt_prototype_is_that_prompt(self):
        e = emb([0.7, -0.1], [0.3, -0.2])
        proto = class_prototype([e])
        np.testing.assert_array_equal(proto.mu, e.mu)
        np.testing.assert_array_equal(proto.log_var, e.log_var)

    def test_prototype_averages_mu_and_var(self):
        a = emb([0.0], [np.log(1.0)])
        b = emb([2.0], [np.log(3.0)])
        proto = class_prototype([a, b])
        assert proto.mu[0] == pytest.approx(1.0)
        assert np.exp(proto.log_var[0]) == pytest.approx(2.0)

    def test_prompt_set_validation(self):
        with pytest.raises(ValueError, match="no prompts"):
            PromptSet({0: []})


class TestZeroShot:
    def _prompts(self, rng, n_per_class=4):
        return PromptSet(
            {
                0: [rng.normal(size=4) for _ in range(n_per_class)],
                1: [rng.normal(loc=2.0, size=4) for _ in range(n_per_class)],
            }
        )

    def test_scores_shape_and_classes(self, model):
        rng = np.random.default_rng(6)
        prompts = self._prompts(rng)
        items = model.encode(Modality.MOD_A, rng.normal(size=(5, 6)))
        result = zero_shot(model, items, prompts, SimilarityKind.HELLINGER)
        assert result.scores.shape == (5, 2)
        assert result.classes == [0, 1]
        assert set(result.prompt_uncertainties) == {0, 1}

    def test_item_matching_prototype_scores_highest(self, model):
        rng = np.random.default_rng(7)
        prompts = PromptSet({0: [np.zeros(4)], 1: [np.full(4, 3.0)]})
        result = zero_shot(
            model,
            model.encode(Modality.TEXT, np.zeros((1, 4))),
            prompts,
            SimilarityKind.HELLINGER,
        )
        # The item IS the class-0 prompt (same encoder): exact similarity 1.
        assert result.scores[0, 0] == pytest.approx(1.0)
        assert result.scores[0, 0] > result.scores[0, 1]

    def test_full_k_filter_reproduces_zero_shot_bitwise(self, model):
        rng = np.random.default_rng(8)
        prompts = self._prompts(rng)
        items = model.encode(Modality.MOD_A, rng.normal(size=(6, 6)))
        base = zero_shot(model, items, prompts, SimilarityKind.HELLINGER)
        filtered = filtered_zero_shot(model, items, prompts, 4, SimilarityKind.HELLINGER)
        np.testing.assert_array_equal(base.scores, filtered.scores)

    def test_k_one_selects_lowest_uncertainty_prompt(self, model):
        rng = np.random.default_rng(9)
        prompts = self._prompts(rng)
        items = model.encode(Modality.MOD_A, rng.normal(size=(3, 6)))
        result = filtered_zero_shot(model, items, prompts, 1, SimilarityKind.HELLINGER)
        base = zero_shot(model, items, prompts, SimilarityKind.HELLINGER)
        for cls in (0, 1):
            chosen = result.prototypes[cls]
            idx = int(np.argmin(base.prompt_uncertainties[cls]))
            encoded = model.encode(
                Modality.TEXT, np.stack(prompts.class_prompts[cls])
            ).to_embeddings()[idx]
            np.testing.assert_array_equal(chosen.mu, encoded.mu)

    def test_k_out_of_range(self, model):
        rng = np.random.default_rng(10)
        prompts = self._prompts(rng)
        items = model.encode(Modality.MOD_A, rng.normal(size=(2, 6)))
        with pytest.raises(ValueError, match="k must lie"):
            filtered_zero_shot(model, items, prompts, 5, SimilarityKind.HELLINGER)


class TestFewShot:
    def _separable(self, rng, n=40, d=6, gap=4.0):
        labels = np.array([0] * (n // 2) + [1] * (n // 2))
        mu = rng.normal(size=(n, d)) + gap * labels[:, None]
        lv = np.full((n, d), -2.0)
        return [GaussianEmbedding(m, l) for m, l in zip(mu, lv)], labels

    def test_separable_support_perfect_train_accuracy(self):
        rng = np.random.default_rng(11)
        items, labels = self._separable(rng)
        w = logistic_probe(np.stack([e.mu for e in items]), labels, 2)
        predictions = probe_scores(w, np.stack([e.mu for e in items])).argmax(axis=1)
        assert np.array_equal(predictions, labels)

    def test_modes_agree_under_degenerate_sampling(self):
        rng = np.random.default_rng(12)
        items, labels = self._separable(rng)
        frozen = [GaussianEmbedding(e.mu, np.full_like(e.log_var, -40.0)) for e in items]
        test_items, test_labels = self._separable(np.random.default_rng(13))
        base = few_shot(frozen, labels, test_items, test_labels, 4, mode="mu_only",
                        rng=np.random.default_rng(0))
        sampled = few_shot(frozen, labels, test_items, test_labels, 4, mode="sampled",
                           n_samples=1, rng=np.random.default_rng(0))
        assert abs(base - sampled) < 1e-6

    def test_missing_class_rejected(self):
        rng = np.random.default_rng(14)
        items, labels = self._separable(rng, n=10)
        with pytest.raises(ValueError, match="only"):
            few_shot(items, labels, items, labels, 8, rng=np.random.default_rng(0))

    def test_deterministic_given_seed(self):
        rng = np.random.default_rng(15)
        items, labels = self._separable(rng)
        test_items, test_labels = self._separable(np.random.default_rng(16))
        a = few_shot(items, labels, test_items, test_labels, 4, mode="sampled",
                     n_samples=8, rng=np.random.default_rng(42))
        b = few_shot(items, labels, test_items, test_labels, 4, mode="sampled",
                     n_samples=8, rng=np.random.default_rng(42))
        assert a == b

    def test_unknown_mode(self):
        with pytest.raises(ValueError, match="unknown mode"):
            few_shot([], [], [], [], 1, mode="typo")


class TestMultimodal:
    def test_redundant_modalities_keep_concat_competitive(self, model):
        # Both views carry the same signal: the concatenation must not lose it.
        rng = np.random.default_rng(17)
        n = 120
        labels = np.array([0, 1] * (n // 2))
        signal = labels[:, None] * 2.0
        x_a = np.hstack([signal + 0.1 * rng.normal(size=(n, 1))] * 6)
        x_b = np.hstack([signal + 0.1 * rng.normal(size=(n, 1))] * 5)
        prompts = PromptSet({0: [np.zeros(4)], 1: [np.ones(4)]})
        out = multimodal_classify(
            model,
            (x_a[: n // 2], x_b[: n // 2]),
            labels[: n // 2],
            (x_a[n // 2 :], x_b[n // 2 :]),
            labels[n // 2 :],
            8,
            prompts,
            SimilarityKind.HELLINGER,
            np.random.default_rng(18),
        )
        assert set(out["fs"]) == {"mod_a", "mod_b", "both"}
        assert out["fs"]["both"] >= max(out["fs"]["mod_a"], out["fs"]["mod_b"]) - 0.01

    def test_fusion_validation(self, model):
        with pytest.raises(ValueError, match="unknown fusion"):
            multimodal_classify(
                model,
                (np.zeros((4, 6)), np.zeros((4, 5))),
                [0, 0, 1, 1],
                (np.zeros((4, 6)), np.zeros((4, 5))),
                [0, 0, 1, 1],
                2,
                PromptSet({0: [np.zeros(4)], 1: [np.ones(4)]}),
                SimilarityKind.HELLINGER,
                np.random.default_rng(0),
                fusion="typo",
            )


class TestNoiseProbe:
    def test_level_zero_matches_clean_encoding(self, model):
        rng = np.random.default_rng(19)
        x = rng.normal(size=6)
        probe = uncertainty_noise_probe(
            model, Modality.MOD_A, x, [0.0, 0.5, 1.0], np.random.default_rng(20)
        )
        clean = model.encode(Modality.MOD_A, x[None, :]).to_embeddings()[0]
        assert probe.series[0][1] == pytest.approx(prompt_uncertainty(clean))

    def test_deterministic_given_seed(self, model):
        rng = np.random.default_rng(21)
        x = rng.normal(size=6)
        p1 = uncertainty_noise_probe(model, Modality.MOD_A, x, [0.0, 1.0], np.random.default_rng(7))
        p2 = uncertainty_noise_probe(model, Modality.MOD_A, x, [0.0, 1.0], np.random.default_rng(7))
        assert p1.series == p2.series

    def test_levels_must_ascend_from_zero(self, model):
        with pytest.raises(ValueError, match="ascend"):
            uncertainty_noise_probe(
                model, Modality.MOD_A, np.zeros(6), [0.5, 1.0], np.random.default_rng(0)
            )

    def test_batch_version_returns_probe(self, model):
        rng = np.random.default_rng(22)
        items = rng.normal(size=(10, 6))
        probe = mean_uncertainty_by_noise(
            model, Modality.MOD_A, items, [0.0, 1.0, 2.0], np.random.default_rng(1)
        )
        assert isinstance(probe, UncertaintyProbe)
        assert len(probe.series) == 3


class TestEvalReport:
    def test_round_trip(self, tmp_path):
        report = EvalReport("retrieval", {"rsum": 123.4}, {"tasks": {"a": 1}})
        report.save(tmp_path / "r.json")
        again = EvalReport.load(tmp_path / "r.json")
        assert again.protocol == "retrieval"
        assert again.metrics == {"rsum": 123.4}
        assert again.details == {"tasks": {"a": 1}}

    def test_numpy_values_serialize(self, tmp_path):
        report = EvalReport("x", {"v": np.float64(1.5)}, {"arr": np.arange(3)})
        report.save(tmp_path / "n.json")
        again = EvalReport.load(tmp_path / "n.json")
        assert again.metrics["v"] == 1.5
        assert again.details["arr"] == [0, 1, 2]


def test_macro_ovr_matches_binary_auroc():
    rng = np.random.default_rng(23)
    labels = rng.integers(0, 2, size=50)
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    scores1 = rng.normal(size=50)
    matrix = np.stack([-scores1, scores1], axis=1)
    macro = macro_ovr_auroc(matrix, labels, [0, 1])
    assert macro == pytest.approx(
        0.5 * (auroc(-scores1, (labels == 0).astype(int)) + auroc(scores1, labels))
    )
