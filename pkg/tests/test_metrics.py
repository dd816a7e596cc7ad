import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from tshap.attribution import PER_FEATURE, PER_GROUP, AttributionMap, shapley_full
from tshap.data import FeatureSequence, body_part_group_map
from tshap.errors import (
    DegenerateBaselineError,
    DegenerateVarianceError,
    InvalidArgumentError,
    UndefinedMetricError,
)
from tshap.metrics import (
    DEFAULT_FRACTIONS,
    RAW,
    REPORT_HEADER,
    MetricsReport,
    MetricsRow,
    PerturbationCurve,
    _n_masked,
    aup,
    classification_scores,
    compare_methods,
    confusion_counts,
    latency_profile,
    paired_ttest,
    per_joint_magnitude,
    perturbation_curve,
    rank_cells,
    read_report,
    temporal_variance,
    write_report,
)
from tshap.smoothing import SmoothingConfig

from .test_attribution import LinearSurrogate


def _feature_map(values, target=0):
    return AttributionMap(np.asarray(values, dtype=np.float64), PER_FEATURE, None, target, "shap")


class TestTemporalVariance:
    def test_hand_case(self):
        assert temporal_variance(np.array([[0.0, 0.0], [1.0, 1.0], [1.0, 3.0]])) == pytest.approx(3.0)

    def test_constant_is_zero(self):
        assert temporal_variance(np.ones((8, 6))) == 0.0

    def test_one_dim_input(self):
        assert temporal_variance(np.array([0.0, 2.0, 0.0])) == pytest.approx(4.0)

    def test_needs_two_frames(self):
        with pytest.raises(UndefinedMetricError):
            temporal_variance(np.ones((1, 6)))

    def test_accepts_map(self, rng):
        V = rng.normal(size=(9, 75))
        assert temporal_variance(_feature_map(V)) == temporal_variance(V)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 10_000), shift=st.floats(-100, 100), scale=st.floats(-10, 10))
    def test_shift_invariant_scale_quadratic(self, seed, shift, scale):
        V = np.random.default_rng(seed).normal(size=(12, 6))
        base = temporal_variance(V)
        assert temporal_variance(V + shift) == pytest.approx(base, rel=1e-9, abs=1e-9)
        assert temporal_variance(scale * V) == pytest.approx(scale ** 2 * base, rel=1e-9, abs=1e-12)


class TestRanking:
    def test_descending(self):
        assert rank_cells(np.array([[0.1, 0.5], [0.3, -0.9]])).tolist() == [1, 2, 0, 3]

    def test_abs_rank(self):
        assert rank_cells(np.array([[0.1, 0.5], [0.3, -0.9]]), abs_rank=True).tolist() == [3, 1, 2, 0]

    def test_ties_prefer_earlier_time_then_lower_feature(self):
        assert rank_cells(np.ones((2, 3))).tolist() == [0, 1, 2, 3, 4, 5]

    @pytest.mark.parametrize("f,n,k", [(0.05, 7500, 375), (0.1, 7500, 750), (0.5, 7500, 3750),
                                       (0.05, 10, 1), (0.01, 10, 1), (1.0, 10, 10), (0.0, 10, 0)])
    def test_n_masked(self, f, n, k):
        assert _n_masked(f, n) == k

    def test_n_masked_default_grid_at_full_size(self):
        assert [_n_masked(f, 7500) for f in DEFAULT_FRACTIONS] == [375 * k for k in range(1, 11)]


class TestPerturbationCurve:
    def _setup(self, rng, T=4):
        w = rng.uniform(-0.01, 0.01, size=(T, 75))
        x = FeatureSequence(rng.uniform(-1, 1, size=(T, 75)), 0, 0, 0)
        return LinearSurrogate(w), x, w

    def test_matches_additive_oracle(self, rng):
        model, x, w = self._setup(rng)
        contrib = (w * x.data).ravel()
        A = _feature_map(contrib.reshape(x.data.shape))
        fr = (0.1, 0.25, 0.5)
        curve = perturbation_curve(model, x, A, fr)
        p0 = 0.5 + contrib.sum()
        order = np.argsort(-contrib, kind="stable")
        for f, drop in zip(fr, curve.confidence_drop):
            k = math.ceil(f * contrib.size)
            pf = p0 - contrib[order[:k]].sum()
            assert drop == pytest.approx(max(0.0, (p0 - pf) / p0), abs=1e-12)
        assert curve.base_confidence == pytest.approx(p0, abs=1e-12)

    def test_fraction_one_equals_full_mask(self, small_model, small_sequence):
        A = shapley_full(small_model, small_sequence)
        curve = perturbation_curve(small_model, small_sequence, A, (1.0,))
        c = A.target_class
        p0 = small_model.predict_proba(small_sequence)[c]
        pz = small_model.predict_proba(np.zeros_like(small_sequence.data))[c]
        assert curve.confidence_drop[0] == pytest.approx(max(0.0, (p0 - pz) / p0), abs=1e-12)

    def test_grouped_map_masks_whole_groups(self, rng):
        model, x, w = self._setup(rng, T=2)
        gm = body_part_group_map()
        vals = np.zeros((2, 6))
        vals[1, 3] = 1.0  # a single top cell whose group has several features
        A = AttributionMap(vals, PER_GROUP, gm, 0, "shap")
        size = int(np.sum(gm == 3))
        f = size / 150
        curve = perturbation_curve(model, x, A, (f,))
        p0 = 0.5 + np.sum(w * x.data)
        removed = np.sum((w * x.data)[1, gm == 3])
        assert curve.confidence_drop[0] == pytest.approx(max(0.0, removed / p0), abs=1e-12)

    def test_drops_clamped_nonnegative(self, rng):
        model, x, w = self._setup(rng)
        contrib = w * x.data
        A = _feature_map(-contrib)  # ranks the most negative contributions first, so confidence rises
        curve = perturbation_curve(model, x, A, (0.05, 0.1))
        assert np.all(curve.confidence_drop == 0.0)

    def test_shape_mismatch(self, small_model, small_sequence):
        with pytest.raises(InvalidArgumentError):
            perturbation_curve(small_model, small_sequence, _feature_map(np.zeros((9, 75))))

    def test_zero_baseline_confidence(self):
        w = np.zeros((2, 75))
        w[0, 0] = 0.5
        x = FeatureSequence(np.zeros((2, 75)), 0, 0, 0)
        x.data[0, 0] = 1.0  # class 0 takes all the mass, class 1 gets none
        with np.errstate(divide="ignore"), pytest.raises(DegenerateBaselineError):
            perturbation_curve(LinearSurrogate(w), x, _feature_map(np.zeros((2, 75)), target=1), (0.5,))

    def test_model_untouched(self, small_model, small_sequence):
        before = small_sequence.data.copy()
        perturbation_curve(small_model, small_sequence, shapley_full(small_model, small_sequence))
        assert np.array_equal(before, small_sequence.data)

    @pytest.mark.parametrize("kwargs", [
        {"fractions": [0.2, 0.1], "confidence_drop": [0.0, 0.0]},
        {"fractions": [0.1], "confidence_drop": [1.5]},
        {"fractions": [0.1, 0.2], "confidence_drop": [0.1]},
        {"fractions": [1.2], "confidence_drop": [0.1]},
    ])
    def test_curve_validation(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            PerturbationCurve(base_confidence=0.5, target_class=0, **kwargs)


class TestAup:
    def test_mean_of_drops(self):
        assert aup(PerturbationCurve([0.1, 0.2, 0.3], [0.0, 0.3, 0.6], 0.9, 0)) == pytest.approx(0.3)

    def test_flat_curve(self):
        assert aup(PerturbationCurve(DEFAULT_FRACTIONS, np.full(10, 0.4), 0.5, 1)) == pytest.approx(0.4)

    def test_empty_grid(self):
        with pytest.raises(InvalidArgumentError):
            aup(PerturbationCurve([], [], 0.5, 0))

    def test_in_unit_interval_on_real_model(self, small_model, small_sequence):
        val = aup(perturbation_curve(small_model, small_sequence, shapley_full(small_model, small_sequence)))
        assert 0.0 <= val <= 1.0


class TestPerJoint:
    def test_group_share_split(self):
        gm = body_part_group_map()
        A = AttributionMap(np.ones((3, 6)), PER_GROUP, gm, 0, "shap")
        mag = per_joint_magnitude(A)
        sizes = np.bincount(gm)
        joint_group = gm[::3]
        assert np.allclose(mag, 3.0 / sizes[joint_group])
        assert mag.sum() == pytest.approx(6.0)

    def test_per_feature_abs_sum(self, rng):
        V = rng.normal(size=(5, 75))
        mag = per_joint_magnitude(_feature_map(V))
        assert np.allclose(mag, np.abs(V).reshape(5, 25, 3).sum(axis=2).mean(axis=0))


class TestLatency:
    def test_counts_calls(self):
        calls = []
        mean, sd, p95 = latency_profile(lambda: calls.append(1), n_runs=4, warmup=2)
        assert len(calls) == 6 and mean >= 0 and sd >= 0 and p95 >= 0

    def test_single_run_has_zero_sd(self):
        assert latency_profile(lambda: None, n_runs=1, warmup=0)[1] == 0.0

    @pytest.mark.parametrize("n_runs,warmup", [(0, 1), (2, -1)])
    def test_rejects(self, n_runs, warmup):
        with pytest.raises(InvalidArgumentError):
            latency_profile(lambda: None, n_runs, warmup)


class TestPairedTTest:
    def test_matches_scipy(self, rng):
        for _ in range(20):
            a, b = rng.normal(size=5), rng.normal(size=5)
            t, df = paired_ttest(a, b)
            ref = stats.ttest_rel(a, b)
            assert t == pytest.approx(ref.statistic, rel=1e-9) and df == 4

    def test_zero_variance(self):
        with pytest.raises(DegenerateVarianceError):
            paired_ttest([1.0, 2.0, 3.0], [0.0, 1.0, 2.0])

    @pytest.mark.parametrize("a,b", [([1.0], [2.0]), ([1.0, 2.0], [1.0]), ([[1.0, 2.0]], [[1.0, 3.0]])])
    def test_rejects(self, a, b):
        with pytest.raises(InvalidArgumentError):
            paired_ttest(a, b)


class TestClassification:
    def test_against_confusion_oracle(self, rng):
        yt = rng.integers(0, 4, 200)
        yp = rng.integers(0, 4, 200)
        M = np.zeros((4, 4), int)
        for t, p in zip(yt, yp):
            M[t, p] += 1
        scores = classification_scores(yt, yp, positive=0)
        tp, fp, fn = M[0, 0], M[1:, 0].sum(), M[0, 1:].sum()
        assert confusion_counts(yt, yp, 0) == (tp, fp, fn, M[1:, 1:].sum())
        assert scores["accuracy"] == pytest.approx(np.trace(M) / 200)
        assert scores["precision"] == pytest.approx(tp / (tp + fp))
        assert scores["recall"] == pytest.approx(tp / (tp + fn))
        p, r = scores["precision"], scores["recall"]
        assert scores["f1"] == pytest.approx(2 * p * r / (p + r))

    def test_no_positive_predictions(self):
        s = classification_scores([0, 1, 1], [1, 1, 1], positive=0)
        assert (s["precision"], s["recall"], s["f1"]) == (0.0, 0.0, 0.0)


class TestCompareMethods:
    @pytest.fixture
    def report(self, small_model, rng):
        seqs = [FeatureSequence(rng.normal(size=(10, 75)), i % 4, 0, i) for i in range(3)]
        cfgs = [None, SmoothingConfig("uniform", w=1), SmoothingConfig("ewma", alpha=0.5)]
        return compare_methods(small_model, seqs, ["shap", "saliency"], cfgs, fold=2), seqs

    def test_cardinality(self, report):
        rep, seqs = report
        assert len(rep.rows) == len(seqs) * 2 * 3
        assert len(rep.cells()) == 6 and (("shap", RAW) in rep.cells())

    def test_shared_correctness(self, report):
        rep, seqs = report
        for s in seqs:
            assert len({r.correct for r in rep.rows if r.seq_id == s.seq_id}) == 1

    def test_rows_in_range(self, report):
        rep, _ = report
        for r in rep.rows:
            assert 0 <= r.aup <= 1 and r.tv >= 0 and r.fold == 2 and r.per_joint.shape == (25,)

    def test_gradcam_needs_cnn(self, small_model, small_sequence):
        with pytest.raises(InvalidArgumentError):
            compare_methods(small_model, [small_sequence], ["gradcam"], [None])

    def test_unknown_method(self, small_model, small_sequence):
        with pytest.raises(InvalidArgumentError):
            compare_methods(small_model, [small_sequence], ["lime"], [None])


class TestReportIo:
    def _report(self):
        rows = [MetricsRow(f, s, "shap", sm, 0.1 * (f + 1) + 0.01 * s, 0.5 + s, 3.0, s % 2, np.zeros(25))
                for f in range(2) for s in range(3) for sm in (RAW, "tshap[w=2]")]
        return MetricsReport(rows)

    def test_round_trip(self, tmp_path):
        rep = self._report()
        write_report(rep, tmp_path / "r.csv", tmp_path / "s.json")
        back = read_report(tmp_path / "r.csv")
        assert [(r.fold, r.seq_id, r.method, r.smoothing, r.aup, r.tv, r.correct) for r in back.rows] == \
               [(r.fold, r.seq_id, r.method, r.smoothing, r.aup, r.tv, r.correct) for r in rep.rows]

    def test_header_and_no_latency_by_default(self, tmp_path):
        write_report(self._report(), tmp_path / "r.csv", tmp_path / "s.json")
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert tuple(lines[0].split(",")) == REPORT_HEADER
        assert not any("latency_ms" in line for line in lines)
        assert all("latency_ms" not in v for v in json.loads((tmp_path / "s.json").read_text()).values())

    def test_latency_opt_in(self, tmp_path):
        write_report(self._report(), tmp_path / "r.csv", include_latency=True)
        assert "latency_ms" in (tmp_path / "r.csv").read_text()

    def test_bad_header(self, tmp_path):
        (tmp_path / "r.csv").write_text("a,b\n")
        with pytest.raises(InvalidArgumentError):
            read_report(tmp_path / "r.csv")

    def test_summary_fold_statistics(self):
        s = self._report().summary()["shap|raw"]
        assert s["aup"]["folds"] == pytest.approx([0.11, 0.21])
        assert s["aup"]["mean"] == pytest.approx(0.16)
        assert s["aup"]["sd"] == pytest.approx(np.std([0.11, 0.21], ddof=1))
        assert s["accuracy"]["mean"] == pytest.approx(1 / 3)
