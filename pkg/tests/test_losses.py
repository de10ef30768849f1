import math

import numpy as np
import pytest
import torch

from tgdistill.losses import (
    LossTerms,
    LossWeights,
    PseudoLabelSet,
    TrainingFaultError,
    cross_modal_infonce,
    dense_alignment_loss,
    fuse_pseudo_labels,
    pseudo_labels_for_modalities,
    supervised_ce,
    total_loss,
    unsupervised_ce,
)

from oracles import (
    alignment_loop,
    ce_loss_loop,
    fuse_loop,
    infonce_loop,
    masked_ce_loop,
    random_simplex,
    random_unit_rows,
)


def t(a):
    return torch.as_tensor(np.asarray(a), dtype=torch.float64)


class TestSupervisedCE:
    def test_perfect_prediction_is_zero(self):
        probs = t([[1.0, 0.0, 0.0]])
        labels = t([[1.0, 0.0, 0.0]])
        assert float(supervised_ce(probs, labels)) == pytest.approx(0.0, abs=1e-10)

    def test_uniform_prediction_k10(self):
        probs = t(np.full((3, 10), 0.1))
        labels = t(np.eye(10)[:3])
        assert float(supervised_ce(probs, labels)) == pytest.approx(math.log(10), abs=1e-9)

    def test_single_row_closed_form(self):
        probs = t([[0.7, 0.3]])
        labels = t([[1.0, 0.0]])
        assert float(supervised_ce(probs, labels)) == pytest.approx(-math.log(0.7), abs=1e-9)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(7)
        for b, k in [(1, 2), (4, 5), (8, 16)]:
            probs = random_simplex(rng, b, k)
            labels = np.eye(k)[rng.integers(0, k, size=b)]
            expected = ce_loss_loop(probs, labels)
            got = float(supervised_ce(t(probs), t(labels)))
            assert got == pytest.approx(expected, abs=1e-6)

    def test_rejects_non_simplex(self):
        with pytest.raises(ValueError):
            supervised_ce(t([[0.9, 0.9]]), t([[1.0, 0.0]]))


class TestFusePseudoLabels:
    def test_average_and_threshold(self):
        res = fuse_pseudo_labels(t([[0.9, 0.1]]), t([[0.5, 0.5]]), gamma=0.3)
        assert np.allclose(res.fused_probs.numpy(), [[0.7, 0.3]])
        assert bool(res.mask[0]) is True
        assert int(res.labels[0]) == 0

    def test_uniform_rows_below_threshold(self):
        k = 101
        probs = t(np.full((2, k), 1.0 / k))
        res = fuse_pseudo_labels(probs, probs, gamma=0.3)
        assert not bool(res.mask.any())

    def test_degenerate_threshold_accepts_all(self):
        rng = np.random.default_rng(0)
        p, q = random_simplex(rng, 5, 4), random_simplex(rng, 5, 4)
        res = fuse_pseudo_labels(t(p), t(q), gamma=1e-9)
        assert bool(res.mask.all())

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        p, q = random_simplex(rng, 8, 6), random_simplex(rng, 8, 6)
        mask, labels = fuse_loop(p, q, 0.3)
        res = fuse_pseudo_labels(t(p), t(q), gamma=0.3)
        assert np.array_equal(res.mask.numpy(), mask)
        assert np.array_equal(res.labels.numpy()[mask], labels[mask])

    def test_idempotent_fusion(self):
        rng = np.random.default_rng(4)
        p = random_simplex(rng, 6, 5)
        fused = fuse_pseudo_labels(t(p), t(p), gamma=0.3)
        direct_mask = p.max(axis=1) >= 0.3
        assert np.array_equal(fused.mask.numpy(), direct_mask)
        assert np.array_equal(fused.labels.numpy(), p.argmax(axis=1))

    def test_alternate_metrics(self):
        rng = np.random.default_rng(5)
        p, q = random_simplex(rng, 4, 3), random_simplex(rng, 4, 3)
        assert np.allclose(fuse_pseudo_labels(t(p), t(q), 0.3, "rgb_only").fused_probs, p)
        assert np.allclose(fuse_pseudo_labels(t(p), t(q), 0.3, "tg_only").fused_probs, q)
        for_rgb, for_tg = pseudo_labels_for_modalities(t(p), t(q), 0.3, "self")
        assert np.allclose(for_rgb.fused_probs, p)
        assert np.allclose(for_tg.fused_probs, q)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            fuse_pseudo_labels(t([[0.5, 0.5]]), t([[0.3, 0.3, 0.4]]), 0.3)


class TestUnsupervisedCE:
    def test_all_masked_out_is_zero(self):
        probs = t([[0.5, 0.5], [0.2, 0.8]])
        pseudo = PseudoLabelSet(torch.zeros(2, dtype=torch.bool),
                                torch.zeros(2, dtype=torch.long), probs)
        assert float(unsupervised_ce(probs, pseudo)) == 0.0

    def test_single_confident_sample_divides_by_batch(self):
        probs = t(np.full((5, 2), 0.5))
        mask = torch.tensor([True, False, False, False, False])
        labels = torch.zeros(5, dtype=torch.long)
        pseudo = PseudoLabelSet(mask, labels, probs)
        expected = math.log(2) / 5
        assert float(unsupervised_ce(probs, pseudo)) == pytest.approx(expected, abs=1e-9)

    def test_perfect_confident_predictions(self):
        probs = t(np.eye(3))
        pseudo = PseudoLabelSet(torch.ones(3, dtype=torch.bool),
                                torch.arange(3), probs)
        assert float(unsupervised_ce(probs, pseudo)) == pytest.approx(0.0, abs=1e-10)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        probs = random_simplex(rng, 8, 7)
        mask = rng.random(8) < 0.6
        labels = rng.integers(0, 7, size=8)
        pseudo = PseudoLabelSet(torch.from_numpy(mask), torch.from_numpy(labels),
                                t(random_simplex(rng, 8, 7)))
        expected = masked_ce_loop(probs, labels, mask)
        assert float(unsupervised_ce(t(probs), pseudo)) == pytest.approx(expected, abs=1e-6)

    def test_matches_supervised_when_all_true_labels(self):
        rng = np.random.default_rng(12)
        probs = random_simplex(rng, 6, 4)
        labels = rng.integers(0, 4, size=6)
        pseudo = PseudoLabelSet(torch.ones(6, dtype=torch.bool),
                                torch.from_numpy(labels), t(probs))
        sup = supervised_ce(t(probs), t(np.eye(4)[labels]))
        unsup = unsupervised_ce(t(probs), pseudo)
        assert float(sup) == pytest.approx(float(unsup), abs=1e-10)


def _feature_sets(rng, shape=(2, 4, 2, 3, 3)):
    a = [rng.normal(size=shape) for _ in range(4)]
    b = [rng.normal(size=shape) for _ in range(4)]
    return a, b


class TestDenseAlignment:
    @pytest.mark.parametrize("kind,expected", [("l1", 0.0), ("l2", 0.0), ("cosine", -1.0)])
    def test_identical_features(self, kind, expected):
        rng = np.random.default_rng(1)
        feats = [t(rng.normal(size=(2, 4, 2, 3, 3))) for _ in range(4)]
        w = LossWeights(alignment_kind=kind)
        assert float(dense_alignment_loss(feats, feats, w)) == expected

    def test_orthogonal_location_vectors_cosine(self):
        a = [torch.zeros(1, 2, 1, 1, 1) for _ in range(4)]
        b = [torch.zeros(1, 2, 1, 1, 1) for _ in range(4)]
        for blk in range(4):
            a[blk][0, 0] = 1.0
            b[blk][0, 1] = 1.0
        w = LossWeights(alignment_kind="cosine")
        assert float(dense_alignment_loss(a, b, w)) == pytest.approx(0.0, abs=1e-12)

    @pytest.mark.parametrize("kind", ["l1", "l2", "cosine"])
    def test_matches_loop_oracle(self, kind):
        rng = np.random.default_rng(2)
        a, b = _feature_sets(rng)
        for blocks in [(4,), (3, 4), (1, 2, 3, 4)]:
            w = LossWeights(alignment_kind=kind, aligned_blocks=blocks)
            expected = alignment_loop(a, b, blocks, kind)
            got = float(dense_alignment_loss([t(x) for x in a], [t(x) for x in b], w))
            assert got == pytest.approx(expected, abs=1e-9)

    def test_cosine_scale_invariant_l1_l2_not(self):
        rng = np.random.default_rng(9)
        a, b = _feature_sets(rng, shape=(1, 3, 2, 2, 2))
        scale_a = rng.uniform(0.5, 3.0, size=(1, 1, 2, 2, 2))
        scale_b = rng.uniform(0.5, 3.0, size=(1, 1, 2, 2, 2))
        a_s = [t(x * scale_a) for x in a]
        b_s = [t(x * scale_b) for x in b]
        a_t, b_t = [t(x) for x in a], [t(x) for x in b]
        w_cos = LossWeights(alignment_kind="cosine")
        assert float(dense_alignment_loss(a_s, b_s, w_cos)) == pytest.approx(
            float(dense_alignment_loss(a_t, b_t, w_cos)), abs=1e-9)
        for kind in ("l1", "l2"):
            w = LossWeights(alignment_kind=kind)
            assert float(dense_alignment_loss(a_s, b_s, w)) != pytest.approx(
                float(dense_alignment_loss(a_t, b_t, w)), abs=1e-6)

    def test_shape_mismatch_raises(self):
        a = [torch.zeros(1, 2, 1, 2, 2)] * 4
        b = [torch.zeros(1, 2, 1, 3, 3)] * 4
        with pytest.raises(ValueError):
            dense_alignment_loss(a, b, LossWeights())

    def test_empty_blocks_rejected_when_kd_active(self):
        with pytest.raises(ValueError):
            LossWeights(w_kd=1.0, aligned_blocks=())


class TestInfoNCE:
    def test_identity_rows_closed_form(self):
        eye = torch.eye(2, dtype=torch.float64)
        loss = cross_modal_infonce(eye, eye.clone(), tau=0.5)
        expected = -math.log(math.exp(2.0) / (math.exp(2.0) + 1.0))
        assert float(loss) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(0.126928, abs=1e-6)

    def test_high_temperature_limit(self):
        eye = torch.eye(2, dtype=torch.float64)
        loss = cross_modal_infonce(eye, eye.clone(), tau=1e9)
        assert float(loss) == pytest.approx(math.log(2), abs=1e-6)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(21)
        a, b = random_unit_rows(rng, 6, 8), random_unit_rows(rng, 6, 8)
        perm = rng.permutation(6)
        base = float(cross_modal_infonce(t(a), t(b), 0.5))
        permuted = float(cross_modal_infonce(t(a[perm]), t(b[perm]), 0.5))
        assert base == pytest.approx(permuted, abs=1e-10)

    @pytest.mark.parametrize("symmetric", [True, False])
    def test_matches_pairwise_oracle(self, symmetric):
        rng = np.random.default_rng(22)
        for b in (2, 4, 8):
            a, c = random_unit_rows(rng, b, 16), random_unit_rows(rng, b, 16)
            expected = infonce_loop(a, c, 0.5, symmetric=symmetric)
            got = float(cross_modal_infonce(t(a), t(c), 0.5, symmetric=symmetric))
            assert got == pytest.approx(expected, abs=1e-6)

    def test_rejects_single_sample(self):
        one = torch.ones(1, 4) / 2.0
        with pytest.raises(ValueError):
            cross_modal_infonce(one, one, 0.5)

    def test_rejects_unnormalized(self):
        bad = torch.full((3, 4), 2.0)
        with pytest.raises(ValueError):
            cross_modal_infonce(bad, bad, 0.5)


class TestTotalLoss:
    def test_all_zero(self):
        z = torch.zeros(())
        terms = LossTerms(z, z, z, z, z, z)
        assert float(total_loss(terms, LossWeights())) == 0.0

    def test_paper_weights_arithmetic(self):
        s = lambda v: torch.tensor(float(v), dtype=torch.float64)
        # L_fm^RGB = 1, L_fm^TG = 1 via l_l only; kd = -1; clr = 0.2
        terms = LossTerms(s(1.0), s(0.0), s(1.0), s(0.0), s(-1.0), s(0.2))
        w = LossWeights(w_fm=0.5, w_kd=1.0, w_clr=1.0)
        assert float(total_loss(terms, w)) == pytest.approx(0.2, abs=1e-9)

    def test_reduces_to_fixmatch_when_extras_off(self):
        s = lambda v: torch.tensor(float(v))
        terms = LossTerms(s(0.5), s(0.25), s(0.75), s(0.5), s(123.0), s(-55.0))
        w = LossWeights(w_fm=1.0, w_kd=0.0, w_clr=0.0, lambda_u=1.0)
        assert float(total_loss(terms, w)) == pytest.approx(0.5 + 0.25 + 0.75 + 0.5)

    def test_nan_identifies_term(self):
        s = lambda v: torch.tensor(float(v))
        terms = LossTerms(s(1.0), s(float("nan")), s(0.0), s(0.0), s(0.0), s(0.0))
        with pytest.raises(TrainingFaultError) as err:
            total_loss(terms, LossWeights())
        assert err.value.term == "l_u_rgb"

    def test_lambda_u_scales_unlabeled(self):
        s = lambda v: torch.tensor(float(v))
        terms = LossTerms(s(0.0), s(1.0), s(0.0), s(1.0), s(0.0), s(0.0))
        w = LossWeights(w_fm=1.0, w_kd=0.0, w_clr=0.0, lambda_u=0.5)
        assert float(total_loss(terms, w)) == pytest.approx(1.0)


class TestLossWeightsValidation:
    def test_gamma_range(self):
        with pytest.raises(ValueError):
            LossWeights(gamma=0.0)
        with pytest.raises(ValueError):
            LossWeights(gamma=1.5)

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            LossWeights(w_kd=-0.1)

    def test_bad_alignment_kind(self):
        with pytest.raises(ValueError):
            LossWeights(alignment_kind="huber")

    def test_bad_metric(self):
        with pytest.raises(ValueError):
            LossWeights(pseudo_label_metric="vote")
