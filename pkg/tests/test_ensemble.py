import itertools

import numpy as np
import pytest

from fiberwatch.errors import ConfigurationError
from fiberwatch.ensemble import (EnsembleModel, default_thresholds,
                                 fuse_l2, fuse_l2_batch, fuse_max_confidence,
                                 load_ensemble, predict_members, save_ensemble,
                                 threshold_decide, vote_two_of_three)
from fiberwatch.tensornet import DenseSpec, Network, NetworkSpec, forward


def random_prob_vector(rng):
    v = rng.dirichlet(np.ones(7))
    return v


def pair_agreement_oracle(c1, c2, c3):
    """Independent enumeration rule: any agreeing pair wins, else 0."""
    if c1 == c2 or c1 == c3:
        return c1
    if c2 == c3:
        return c2
    return 0


class TestThresholdDecide:
    def test_above_threshold_returns_argmax(self):
        probs = np.array([0.1, 0.1, 0.5, 0.1, 0.1, 0.05, 0.05])
        alpha = np.full(7, 0.4)
        assert threshold_decide(probs, alpha) == 2

    def test_below_threshold_falls_back_to_zero(self):
        probs = np.array([0.1, 0.35, 0.3, 0.05, 0.1, 0.05, 0.05])
        alpha = np.full(7, 0.4)
        assert threshold_decide(probs, alpha) == 0

    def test_uniform_scores_fall_back(self):
        probs = np.full(7, 1.0 / 7.0)
        assert threshold_decide(probs, np.full(7, 0.2)) == 0

    def test_tie_breaks_to_lowest_index(self):
        probs = np.array([0.0, 0.4, 0.4, 0.2, 0.0, 0.0, 0.0])
        assert threshold_decide(probs, np.full(7, 0.3)) == 1

    def test_raising_threshold_only_moves_to_zero(self, rng):
        for _ in range(2000):
            probs = random_prob_vector(rng)
            alpha = rng.uniform(0.05, 1.0, 7)
            d1 = threshold_decide(probs, alpha)
            bumped = alpha.copy()
            bumped[np.argmax(probs)] = min(1.0, bumped[np.argmax(probs)] + rng.uniform(0, 0.5))
            d2 = threshold_decide(probs, bumped)
            assert d2 in (d1, 0)


class TestVote:
    def test_agreeing_first_pair(self):
        assert vote_two_of_three(2, 2, 5) == 2

    def test_no_agreement_gives_zero(self):
        assert vote_two_of_three(1, 2, 3) == 0

    def test_agreeing_last_pair(self):
        assert vote_two_of_three(0, 5, 5) == 5

    def test_all_343_triples_match_oracle(self):
        for c1, c2, c3 in itertools.product(range(7), repeat=3):
            assert vote_two_of_three(c1, c2, c3) == pair_agreement_oracle(c1, c2, c3)

    def test_permutation_invariance(self):
        for triple in itertools.product(range(7), repeat=3):
            results = {vote_two_of_three(*perm) for perm in itertools.permutations(triple)}
            assert len(results) == 1

    def test_output_is_zero_or_an_input(self):
        for triple in itertools.product(range(7), repeat=3):
            assert vote_two_of_three(*triple) in {0, *triple}


class TestFuseL2:
    def test_three_identical_vectors(self, rng):
        v = random_prob_vector(rng)
        fused = fuse_l2([v, v, v])
        assert np.allclose(fused.vector, v / np.linalg.norm(v))

    def test_hand_computed_case(self):
        v1 = np.array([0.6, 0.4, 0, 0, 0, 0, 0])
        v2 = np.array([0.2, 0.8, 0, 0, 0, 0, 0])
        v3 = np.array([0.5, 0.5, 0, 0, 0, 0, 0])
        fused = fuse_l2([v1, v2, v3])
        # s = (1.3, 1.7, 0...), |s| = sqrt(4.58)
        norm = np.sqrt(4.58)
        assert fused.vector[0] == pytest.approx(1.3 / norm, abs=1e-12)
        assert fused.vector[1] == pytest.approx(1.7 / norm, abs=1e-12)
        assert fused.vector[0] == pytest.approx(0.6075, abs=5e-5)
        assert fused.vector[1] == pytest.approx(0.7944, abs=5e-5)

    def test_unit_norm_and_argmax_equals_mean_fusion(self, rng):
        for _ in range(3000):
            vecs = [random_prob_vector(rng) for _ in range(3)]
            fused = fuse_l2(vecs)
            assert abs(np.linalg.norm(fused.vector) - 1.0) < 1e-9
            assert np.argmax(fused.vector) == np.argmax(np.mean(vecs, axis=0))

    def test_batch_path_matches_scalar_path(self, rng):
        trip = np.stack([[random_prob_vector(rng) for _ in range(5)] for _ in range(3)])
        batch = fuse_l2_batch(trip)
        for i in range(5):
            assert np.allclose(batch[i], fuse_l2(trip[:, i]).vector)

    def test_fused_prediction_rules_agree_with_scalar_ops(self, rng):
        from fiberwatch.ensemble import predict_fused
        model = EnsembleModel(tiny_members(seed=3), default_thresholds())
        blobs = rng.normal(size=(6, 4, 4))
        for rule, scalar in (("l2", fuse_l2), ("max_confidence", fuse_max_confidence)):
            batch = predict_fused(model, blobs, rule, batch=2)
            for i in range(6):
                member_scores = predict_members(model, blobs[i])
                assert np.allclose(batch[i], scalar(member_scores).vector, atol=1e-12)


class TestFuseMaxConfidence:
    def test_most_confident_member_wins(self):
        v1 = np.array([0.9, 0.1, 0, 0, 0, 0, 0])
        v2 = np.array([0.6, 0.4, 0, 0, 0, 0, 0])
        v3 = np.array([0.7, 0.3, 0, 0, 0, 0, 0])
        fused = fuse_max_confidence([v1, v2, v3])
        assert np.array_equal(fused.vector, v1)

    def test_identical_members_return_that_vector(self, rng):
        v = random_prob_vector(rng)
        assert np.array_equal(fuse_max_confidence([v, v, v]).vector, v)

    def test_output_is_exactly_one_input(self, rng):
        for _ in range(1000):
            vecs = [random_prob_vector(rng) for _ in range(3)]
            fused = fuse_max_confidence(vecs)
            assert any(np.array_equal(fused.vector, v) for v in vecs)

    def test_tie_goes_to_lowest_member(self):
        v = np.array([0.5, 0.5, 0, 0, 0, 0, 0])
        w = np.array([0, 0, 0.5, 0.5, 0, 0, 0])
        fused = fuse_max_confidence([v, w, w])
        assert np.array_equal(fused.vector, v)


def tiny_members(seed=0):
    spec = NetworkSpec((4, 4), (DenseSpec(5),))
    return [Network(spec, seed=seed + j) for j in range(3)]


class TestEnsembleModel:
    def test_needs_three_members(self):
        with pytest.raises(ConfigurationError):
            EnsembleModel(tiny_members()[:2], default_thresholds()[:2])

    def test_threshold_range_enforced(self):
        bad = default_thresholds()
        bad[0, 0] = 0.0
        with pytest.raises(ConfigurationError):
            EnsembleModel(tiny_members(), bad)

    def test_predict_members_fixed_order_and_deterministic(self, rng):
        model = EnsembleModel(tiny_members(), default_thresholds())
        blob = rng.normal(size=(4, 4))
        out1 = predict_members(model, blob)
        out2 = predict_members(model, blob)
        for a, b in zip(out1, out2):
            assert np.array_equal(a.probs, b.probs)
        for net, scores in zip(model.members, out1):
            assert np.array_equal(scores.probs, forward(net, blob).probs)
        for scores in out1:
            assert abs(scores.probs.sum() - 1.0) < 1e-9
            assert np.all(scores.probs > 0)

    def test_identical_members_identical_scores(self, rng):
        net = tiny_members()[0]
        model = EnsembleModel([net, net, net], default_thresholds())
        out = predict_members(model, rng.normal(size=(4, 4)))
        assert np.array_equal(out[0].probs, out[1].probs)
        assert np.array_equal(out[1].probs, out[2].probs)

    def test_checkpoint_round_trip(self, tmp_path, rng):
        model = EnsembleModel(tiny_members(seed=5), default_thresholds())
        path = save_ensemble(model, tmp_path / "ens.json")
        back = load_ensemble(path)
        blob = rng.normal(size=(4, 4))
        for a, b in zip(predict_members(model, blob), predict_members(back, blob)):
            assert np.array_equal(a.probs, b.probs)
        assert np.array_equal(back.thresholds, model.thresholds)
