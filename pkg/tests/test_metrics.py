"""Metric checks including the exhaustive-assignment oracle for map matching."""

import itertools

import numpy as np
import pytest

from rfslam.metrics import (
    blocked_error_ratio,
    evaluate,
    map_error,
    position_rmse,
    visibility_scores,
)


class TestPositionRmse:
    def test_identical_tracks(self):
        xy = np.random.default_rng(0).normal(size=(20, 2))
        assert position_rmse(xy, xy) == (0.0, 0.0)

    def test_constant_offset(self):
        xy = np.zeros((10, 2))
        off = xy + [1.0, 0.0]
        assert position_rmse(xy, off) == (1.0, 1.0)

    def test_three_four_hand_value(self):
        truth = np.zeros((2, 2))
        est = np.array([[3.0, 0.0], [0.0, 4.0]])
        rmse, med = position_rmse(truth, est)
        assert rmse == pytest.approx(np.sqrt(12.5))
        assert med == pytest.approx(3.5)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            position_rmse(np.zeros((3, 2)), np.zeros((4, 2)))

    def test_rmse_upper_bounds_mae(self):
        rng = np.random.default_rng(1)
        truth = rng.normal(size=(50, 2))
        est = truth + rng.normal(size=(50, 2))
        rmse, _ = position_rmse(truth, est)
        mae = np.mean(np.linalg.norm(truth - est, axis=1))
        assert rmse >= mae >= 0.0


class TestVisibilityScores:
    def test_perfect(self):
        flags = np.ones((10, 2), dtype=int)
        p = np.ones((10, 2))
        for s in visibility_scores(flags, p):
            assert s == {"accuracy": 1.0, "precision": 1.0, "recall": 1.0}

    def test_threshold_edge(self):
        flags = np.ones((5, 1), dtype=int)
        p = np.full((5, 1), 0.49)
        s = visibility_scores(flags, p)[0]
        assert s["recall"] == 0.0

    def test_matches_recount_oracle(self):
        rng = np.random.default_rng(2)
        flags = (rng.uniform(size=(200, 3)) < 0.7).astype(int)
        p = rng.uniform(size=(200, 3))
        scores = visibility_scores(flags, p)
        for j in range(3):
            dec = p[:, j] >= 0.5
            tp = np.sum(dec & (flags[:, j] == 1))
            fp = np.sum(dec & (flags[:, j] == 0))
            fn = np.sum(~dec & (flags[:, j] == 1))
            tn = np.sum(~dec & (flags[:, j] == 0))
            assert scores[j]["accuracy"] == pytest.approx((tp + tn) / 200)
            if tp + fp:
                assert scores[j]["precision"] == pytest.approx(tp / (tp + fp))
            if tp + fn:
                assert scores[j]["recall"] == pytest.approx(tp / (tp + fn))


class TestMapError:
    def test_exact_recovery(self):
        pos = np.array([[1.0, 2.0], [-3.0, 0.5]])
        score = map_error(pos, pos, np.array([0.2, 0.1]))
        assert score.mean_matched_distance == 0.0
        assert score.unmatched_true == 0
        assert score.unmatched_learned == 0

    def test_empty_learned(self):
        score = map_error(np.ones((3, 2)), np.zeros((0, 2)), np.zeros(0))
        assert score.unmatched_true == 3
        assert np.isnan(score.mean_matched_distance)

    def test_matches_exhaustive_assignment(self):
        # Well-separated instances: every learned feature is within the match
        # radius of at most one anchor, so the exhaustive optimum is unique and
        # the greedy result must coincide with it.
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = int(rng.integers(1, 5))
            true_pos = rng.uniform(-40, 40, size=(n, 2))
            while n > 1 and np.min(
                    [np.linalg.norm(a - b) for a, b in
                     itertools.combinations(true_pos, 2)]) < 8.0:
                true_pos = rng.uniform(-40, 40, size=(n, 2))
            perm = rng.permutation(n)
            learned = true_pos[perm] + rng.uniform(-1.0, 1.0, size=(n, 2))
            gammas = rng.uniform(0.1, 1.0, size=n)
            score = map_error(true_pos, learned, gammas, radius=2.0)

            best = None
            for assign in itertools.permutations(range(n)):
                d = [np.linalg.norm(true_pos[assign[i]] - learned[i])
                     for i in range(n)]
                d = [x for x in d if x <= 2.0]
                total = (len(d), -sum(d))
                if best is None or total > best[0]:
                    best = (total, d)
            n_match, neg_sum = best[0]
            assert score.matched == n_match
            assert score.mean_matched_distance == pytest.approx(-neg_sum / n_match)

    def test_permutation_invariant(self):
        rng = np.random.default_rng(4)
        true_pos = rng.uniform(-10, 10, size=(4, 2))
        learned = true_pos + rng.normal(scale=0.3, size=(4, 2))
        gammas = rng.uniform(0.1, 1, size=4)
        a = map_error(true_pos, learned, gammas)
        perm = rng.permutation(4)
        b = map_error(true_pos[perm], learned, gammas)
        assert a == b


class TestBlockedRatio:
    def test_ratio(self):
        flags = np.ones((6, 1), dtype=int)
        flags[2:4, 0] = 0
        errors = np.array([1.0, 1.0, 3.0, 3.0, 1.0, 1.0])
        assert blocked_error_ratio(flags, errors) == pytest.approx(3.0)

    def test_none_without_blockage(self):
        assert blocked_error_ratio(np.ones((5, 2), dtype=int), np.ones(5)) is None


def test_evaluate_report_serializes():
    import json

    rng = np.random.default_rng(5)
    truth_xy = rng.normal(size=(10, 2))
    est_xy = truth_xy + 0.1
    flags = np.ones((10, 1), dtype=int)
    flags[4:6] = 0
    p = rng.uniform(size=(10, 1))
    report = evaluate(truth_xy, est_xy, flags, p)
    parsed = json.loads(json.dumps(report.to_dict()))
    assert parsed["rmse"] == pytest.approx(report.rmse)
    assert len(parsed["visibility"]) == 1
