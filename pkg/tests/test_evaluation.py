import json

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snipcl.errors import ConfigError, ContractError
from snipcl.evaluation import (REPORT_SCHEMA, Segment, average_precision, detect, knn_frame_classify,
                               map_report, nms, normalize_rows, threshold_segments, tiou)

from oracles import (ap_oracle, interval_iou, knn_oracle, nms_oracle, random_ground_truth,
                     random_segments, unit_rows)


def seg(start, end, score=1.0, class_id=1, video=0):
    return Segment(class_id, start, end, score, video)


segments = st.builds(lambda s, n, score, c: seg(s, s + n, score, c),
                     st.integers(0, 40), st.integers(1, 10), st.floats(0, 1), st.integers(1, 2))


class TestTiou:
    def test_examples(self):
        assert tiou(seg(0, 10), seg(0, 10)) == 1.0
        assert tiou(seg(0, 5), seg(5, 9)) == 0.0
        assert tiou(seg(0, 10), seg(5, 15)) == pytest.approx(1 / 3)

    @settings(max_examples=100, deadline=None)
    @given(segments, segments)
    def test_properties(self, a, b):
        v = tiou(a, b)
        assert v == tiou(b, a)
        assert 0.0 <= v <= 1.0
        assert (v == 1.0) == ((a.start, a.end) == (b.start, b.end))
        assert v == pytest.approx(interval_iou(a, b))

    def test_invalid_segment(self):
        with pytest.raises(ContractError):
            seg(3, 3)


class TestThreshold:
    def test_all_below(self):
        probs = np.tile([0.96, 0.04], (6, 1))
        assert threshold_segments(probs, [0.5]) == []

    def test_saturated(self):
        probs = np.tile([0.0, 1.0], (7, 1))
        assert threshold_segments(probs, [0.5]) == [seg(0, 7, 1.0)]

    def test_run_scan(self):
        p1 = np.array([0.9, 0.9, 0.1, 0.8])
        out = threshold_segments(np.stack([1 - p1, p1], axis=1), [0.5])
        assert [(s.start, s.end) for s in out] == [(0, 2), (3, 4)]
        assert [s.score for s in out] == pytest.approx([0.9, 0.8])

    def test_pools_thresholds(self):
        p1 = np.array([0.9, 0.6, 0.1])
        out = threshold_segments(np.stack([1 - p1, p1], axis=1), [0.5, 0.8])
        assert {(s.start, s.end) for s in out} == {(0, 2), (0, 1)}

    def test_empty_thresholds(self):
        with pytest.raises(ConfigError):
            threshold_segments(np.ones((3, 2)) / 2, [])

    def test_run_scan_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            p = rng.dirichlet(np.ones(3), size=30)
            got = threshold_segments(p, [0.3, 0.6])
            expect = []
            for k in (1, 2):
                for theta in (0.3, 0.6):
                    t = 0
                    while t < 30:
                        if p[t, k] >= theta:
                            u = t
                            while u < 30 and p[u, k] >= theta:
                                u += 1
                            expect.append((k, t, u, p[t:u, k].mean()))
                            t = u
                        else:
                            t += 1
            assert [(s.class_id, s.start, s.end) for s in got] == [e[:3] for e in expect]
            np.testing.assert_allclose([s.score for s in got], [e[3] for e in expect])


class TestNms:
    def test_single(self):
        assert nms([seg(0, 5, 0.3)]) == [seg(0, 5, 0.3)]

    def test_duplicates(self):
        assert nms([seg(0, 5, 0.8), seg(0, 5, 0.9)]) == [seg(0, 5, 0.9)]

    def test_other_class_untouched(self):
        out = nms([seg(0, 5, 0.9), seg(0, 5, 0.8, class_id=2)])
        assert len(out) == 2

    def test_tie_goes_to_earlier_then_longer(self):
        a, b, c = seg(2, 8, 0.5), seg(1, 7, 0.5), seg(1, 8, 0.5)
        assert nms([a, b, c], 0.4)[0] == c

    def test_bad_threshold(self):
        with pytest.raises(ConfigError):
            nms([], 1.0)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_greedy_oracle(self, seed):
        rng = np.random.default_rng(seed)
        cands = random_segments(rng, int(rng.integers(1, 11)), classes=2, videos=2, quantized=seed % 2 == 0)
        kept = nms(cands, 0.4)
        assert sorted(kept, key=repr) == sorted(nms_oracle(cands, 0.4), key=repr)
        assert set(kept) <= set(cands)
        for a in kept:
            for b in kept:
                if a is not b and (a.class_id, a.video) == (b.class_id, b.video):
                    assert tiou(a, b) <= 0.4


class TestAveragePrecision:
    def test_perfect(self):
        assert average_precision([seg(3, 9, 0.7)], [seg(3, 9)], 0.5) == 1.0

    def test_no_predictions(self):
        assert average_precision([], [seg(3, 9)], 0.5) == 0.0

    def test_false_positive_first(self):
        preds = [seg(20, 30, 0.9), seg(0, 10, 0.5)]
        assert average_precision(preds, [seg(0, 10)], 0.5) == pytest.approx(0.5)

    def test_absent_class(self):
        assert average_precision([seg(0, 3, 0.5)], [seg(0, 3, class_id=2)], 0.5, class_id=1) is None

    def test_mixed_classes_need_id(self):
        with pytest.raises(ContractError):
            average_precision([], [seg(0, 3), seg(0, 3, class_id=2)], 0.5)

    def test_prediction_in_other_video_misses(self):
        assert average_precision([seg(0, 10, 0.9, video=1)], [seg(0, 10)], 0.5) == 0.0

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(1000 + seed)
        preds = random_segments(rng, int(rng.integers(0, 11)), videos=2)
        gts = random_ground_truth(rng, int(rng.integers(1, 11)), videos=2)
        for c in (1, 2):
            for t in (0.1, 0.3, 0.5):
                got, expect = average_precision(preds, gts, t, class_id=c), ap_oracle(preds, gts, t, c)
                assert (got is None) == (expect is None)
                if got is not None:
                    assert got == pytest.approx(expect, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.01, 100))
    def test_rank_invariance_and_monotone(self, seed, factor):
        rng = np.random.default_rng(seed)
        preds = random_segments(rng, 8, classes=1)
        gts = random_ground_truth(rng, 4, classes=1)
        scaled = [Segment(p.class_id, p.start, p.end, p.score * factor, p.video) for p in preds]
        aps = [average_precision(preds, gts, t) for t in (0.1, 0.2, 0.3, 0.4, 0.5)]
        assert aps == [average_precision(scaled, gts, t) for t in (0.1, 0.2, 0.3, 0.4, 0.5)]
        assert all(a >= b for a, b in zip(aps, aps[1:]))


class TestReport:
    def test_perfect(self):
        gts = [seg(0, 10), seg(20, 30, class_id=2)]
        report = map_report([Segment(g.class_id, g.start, g.end, 0.9) for g in gts], gts)
        assert report.avg_map == 1.0
        assert all(v == 1.0 for row in report.per_class.values() for v in row.values())

    def test_empty(self):
        report = map_report([], [seg(0, 10), seg(20, 30, class_id=2)])
        assert report.avg_map == 0.0

    def test_absent_class_reported(self):
        report = map_report([], [seg(0, 10)], classes=[1, 2])
        assert report.absent_classes == [2]
        assert list(report.per_class) == [1]

    @pytest.mark.parametrize("seed", range(10))
    def test_two_class_fixture(self, seed):
        rng = np.random.default_rng(seed)
        preds, gts = random_segments(rng, 8), random_ground_truth(rng, 5)
        report = map_report(preds, gts, classes=[1, 2])
        present = sorted({g.class_id for g in gts})
        for t in (0.1, 0.2, 0.3, 0.4, 0.5):
            expect = np.mean([ap_oracle(preds, gts, t, c) for c in present])
            assert report.per_tiou_map[t] == pytest.approx(expect, abs=1e-12)
        assert abs(report.avg_map - np.mean(list(report.per_tiou_map.values()))) <= 1e-12
        jsonschema.validate(report.to_json(), REPORT_SCHEMA)

    def test_json_and_csv(self):
        report = map_report([seg(0, 10, 0.5)], [seg(0, 10)])
        assert json.loads(report.dumps())["avg_map"] == 1.0
        lines = report.to_csv().splitlines()
        assert lines[0] == "row,0.1,0.2,0.3,0.4,0.5,avg"
        assert lines[-1].startswith("mAP,1.000000")

    def test_detect_end_to_end(self):
        p1 = np.r_[np.zeros(5), np.full(10, 0.95), np.zeros(5)]
        probs = np.stack([1 - p1, p1], axis=1)
        preds = detect(probs)
        assert map_report(preds, [seg(5, 15)]).avg_map == 1.0


class TestKnn:
    def test_exact_match(self):
        train = unit_rows(np.random.default_rng(0), 6, 4)
        labels, _ = knn_frame_classify(train, [0, 1, 2, 3, 1, 0], train[2:3], k=1)
        assert labels.tolist() == [2]

    def test_constant_labels(self):
        rng = np.random.default_rng(1)
        labels, scores = knn_frame_classify(unit_rows(rng, 7, 3), [2] * 7, unit_rows(rng, 4, 3), k=3, num_classes=3)
        assert labels.tolist() == [2] * 4
        np.testing.assert_array_equal(scores[:, 2], 1.0)

    def test_clamps_k(self, caplog):
        rng = np.random.default_rng(2)
        labels, scores = knn_frame_classify(unit_rows(rng, 2, 3), [1, 1], unit_rows(rng, 1, 3), k=5)
        assert labels.tolist() == [1] and "clamping" in caplog.text
        assert scores.sum() == pytest.approx(1.0)

    def test_bad_k(self):
        with pytest.raises(ConfigError):
            knn_frame_classify(np.eye(2), [0, 1], np.eye(2), k=0)

    def test_vote_tie_goes_to_lower_class(self):
        train = np.array([[1.0, 0.0], [0.0, 1.0]])
        labels, _ = knn_frame_classify(train, [3, 1], normalize_rows(np.array([[1.0, 1.0]])), k=2, num_classes=4)
        assert labels.tolist() == [1]

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_oracle(self, seed):
        rng = np.random.default_rng(2000 + seed)
        n = int(rng.integers(1, 11))
        train = unit_rows(rng, n, 3)
        if n > 2:
            train[1] = train[0]  # neighbor tie
        labels = rng.integers(0, 3, size=n)
        test = unit_rows(rng, 5, 3)
        k = int(rng.integers(1, n + 1))
        got_l, got_s = knn_frame_classify(train, labels, test, k, num_classes=3)
        exp_l, exp_s = knn_oracle(train, labels, test, k, 3)
        np.testing.assert_array_equal(got_l, exp_l)
        np.testing.assert_array_equal(got_s, exp_s)
