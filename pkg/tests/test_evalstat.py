"""Special functions, classification metrics, curves, and rank statistics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anteriseg.errors import ValidationError
from anteriseg.evalstat import (
    anova_oneway,
    betainc_reg,
    binary_pr,
    binary_roc,
    cdf_chi2,
    cdf_f,
    cdf_normal,
    classification_metrics,
    cohens_kappa,
    confusion_matrix,
    dunn_posthoc,
    gammainc_lower,
    kruskal_wallis,
    midranks,
    roc_pr_curves,
)

# Frozen reference CDF values (independent high-precision evaluation).
CDF_TABLE = [
    ("normal", (-3.0,), 0.0013498980316300933),
    ("normal", (-1.5,), 0.06680720126885807),
    ("normal", (-0.5,), 0.3085375387259869),
    ("normal", (0.0,), 0.5),
    ("normal", (0.7,), 0.758036347776927),
    ("normal", (1.96,), 0.9750021048517795),
    ("normal", (3.2,), 0.9993128620620841),
    ("chi2", (0.5, 1), 0.5204998778130466),
    ("chi2", (2.3, 2), 0.6833632306209467),
    ("chi2", (7.2, 2), 0.9726762775527075),
    ("chi2", (4.0, 3), 0.7385358700508888),
    ("chi2", (10.5, 5), 0.9377540719090941),
    ("chi2", (25.0, 10), 0.9946544945128659),
    ("chi2", (1.2, 7), 0.009073102194918739),
    ("f", (1.0, 2, 10), 0.5981224279835391),
    ("f", (3.5, 3, 20), 0.9655068961148756),
    ("f", (0.3, 5, 5), 0.10620909869618039),
    ("f", (7.9, 1, 30), 0.9913755944314616),
    ("f", (2.2, 4, 12), 0.86952661018666),
    ("f", (5.0, 6, 8), 0.9795889463734349),
]

_CDFS = {"normal": cdf_normal, "chi2": cdf_chi2, "f": cdf_f}


class TestSpecialFunctions:
    def test_reference_table_to_1e8(self):
        for name, args, want in CDF_TABLE:
            got = _CDFS[name](*args)
            assert abs(got - want) <= 1e-8, f"{name}{args}: {got} vs {want}"

    def test_gamma_unit_shape_closed_form(self):
        for x in (0.1, 0.5, 1.0, 3.0, 10.0):
            assert gammainc_lower(1.0, x) == pytest.approx(1.0 - math.exp(-x), abs=1e-13)

    def test_beta_uniform_case_is_identity(self):
        for x in (0.0, 0.2, 0.5, 0.9, 1.0):
            assert betainc_reg(1.0, 1.0, x) == pytest.approx(x, abs=1e-13)

    def test_beta_reflection_identity(self):
        for a, b, x in ((2.0, 5.0, 0.3), (0.5, 0.5, 0.7), (4.0, 1.5, 0.1)):
            assert betainc_reg(a, b, x) + betainc_reg(b, a, 1.0 - x) == pytest.approx(1.0, abs=1e-12)

    def test_chi2_two_df_closed_form(self):
        for x in (0.5, 2.0, 7.2, 20.0):
            assert cdf_chi2(x, 2) == pytest.approx(1.0 - math.exp(-x / 2.0), abs=1e-12)

    def test_normal_symmetry(self):
        for x in (0.3, 1.0, 2.5):
            assert cdf_normal(x) + cdf_normal(-x) == pytest.approx(1.0, abs=1e-15)

    @given(st.floats(min_value=-6.0, max_value=6.0), st.floats(min_value=-6.0, max_value=6.0))
    def test_normal_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert cdf_normal(lo) <= cdf_normal(hi)

    @given(st.floats(min_value=0.0, max_value=40.0), st.floats(min_value=0.0, max_value=40.0),
           st.integers(min_value=1, max_value=20))
    def test_chi2_monotone_and_bounded(self, a, b, df):
        lo, hi = sorted((a, b))
        plo, phi = cdf_chi2(lo, df), cdf_chi2(hi, df)
        assert 0.0 <= plo <= phi <= 1.0

    def test_domain_validation(self):
        assert cdf_chi2(-1.0, 2) == 0.0  # below support
        assert cdf_f(-0.5, 2, 4) == 0.0
        with pytest.raises(ValidationError):
            cdf_chi2(1.0, 0)
        with pytest.raises(ValidationError):
            cdf_f(1.0, 0, 5)


class TestConfusion:
    def test_hand_matrix(self):
        y_true = [0, 0, 1, 1, 2, 2, 2]
        y_pred = [0, 1, 1, 1, 2, 0, 2]
        cm = confusion_matrix(y_true, y_pred, 3)
        assert np.array_equal(cm, [[1, 1, 0], [0, 2, 0], [1, 0, 2]])

    def test_rows_are_truth(self):
        cm = confusion_matrix([0, 0, 0], [1, 1, 2], 3)
        assert cm[0].sum() == 3
        assert cm[:, 0].sum() == 0

    def test_label_bounds(self):
        with pytest.raises(ValidationError):
            confusion_matrix([0, 3], [0, 0], 3)
        with pytest.raises(ValidationError):
            confusion_matrix([0], [0, 1], 2)


class TestMetrics:
    def test_all_ones_two_by_two(self):
        rep = classification_metrics(np.ones((2, 2), dtype=int))
        assert rep.accuracy == 0.5
        for cls in rep.per_class:
            assert cls["precision"] == 0.5
            assert cls["recall"] == 0.5
            assert cls["f1"] == 0.5
        assert rep.macro_f1 == 0.5

    def test_perfect_prediction(self):
        rep = classification_metrics(np.diag([4, 3, 2]))
        assert rep.accuracy == 1.0
        assert rep.macro_f1 == 1.0

    def test_three_class_hand_arithmetic(self):
        cm = np.array([[5, 2, 0], [1, 6, 1], [0, 2, 3]])
        rep = classification_metrics(cm, class_names=["a", "b", "c"])
        assert rep.accuracy == pytest.approx(14 / 20)
        by_name = {row["class"]: row for row in rep.per_class}
        # column sums give predicted counts, rows true counts
        assert by_name["a"]["precision"] == pytest.approx(5 / 6)
        assert by_name["a"]["recall"] == pytest.approx(5 / 7)
        p, r = 5 / 6, 5 / 7
        assert by_name["a"]["f1"] == pytest.approx(2 * p * r / (p + r))
        assert by_name["a"]["support"] == 7
        f1s = [by_name[c]["f1"] for c in ("a", "b", "c")]
        assert rep.macro_f1 == pytest.approx(sum(f1s) / 3)

    def test_absent_class_scores_zero(self):
        cm = np.array([[3, 0], [2, 0]])  # nothing ever predicted as class 1
        rep = classification_metrics(cm)
        assert rep.per_class[1]["precision"] == 0.0
        assert rep.per_class[1]["f1"] == 0.0
        assert any("precision undefined" in w for w in rep.warnings)

    def test_to_dict_round_trips_fields(self):
        rep = classification_metrics(np.ones((2, 2), dtype=int))
        d = rep.to_dict()
        assert set(d) >= {"accuracy", "macro_f1", "per_class", "confusion"}
        assert d["confusion"] == [[1, 1], [1, 1]]


class TestCurves:
    scores = np.array([0.1, 0.4, 0.35, 0.8])
    labels = np.array([0, 0, 1, 1])

    def test_four_sample_auc(self):
        roc = binary_roc(self.scores, self.labels)
        assert roc["auc"] == pytest.approx(0.75, abs=1e-12)

    def test_four_sample_average_precision(self):
        pr = binary_pr(self.scores, self.labels)
        # thresholds descending: hit at 0.8 (P=1, dR=1/2), miss at 0.4,
        # hit at 0.35 (P=2/3, dR=1/2)
        assert pr["ap"] == pytest.approx(0.5 * 1.0 + 0.5 * (2 / 3), abs=1e-12)
        assert pr["ap"] == pytest.approx(0.8333333333333333, abs=1e-12)

    def test_roc_endpoints(self):
        roc = binary_roc(self.scores, self.labels)
        assert roc["fpr"][0] == 0.0 and roc["tpr"][0] == 0.0
        assert roc["fpr"][-1] == 1.0 and roc["tpr"][-1] == 1.0

    def test_perfect_separation(self):
        roc = binary_roc(np.array([0.1, 0.2, 0.8, 0.9]), np.array([0, 0, 1, 1]))
        assert roc["auc"] == 1.0

    def test_auc_invariant_under_monotone_transform(self):
        rng = np.random.Generator(np.random.PCG64(0))
        for _ in range(25):
            n = int(rng.integers(8, 40))
            scores = rng.random(n)
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            base = binary_roc(scores, labels)["auc"]
            for f in (lambda s: 2 * s + 3, np.exp, lambda s: s ** 3):
                assert binary_roc(f(scores), labels)["auc"] == pytest.approx(base, abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ValidationError):
            binary_roc(np.array([0.1, 0.2]), np.array([1, 1]))

    def test_multiclass_curves_match_one_vs_rest(self):
        rng = np.random.Generator(np.random.PCG64(1))
        probs = rng.dirichlet(np.ones(3), size=30)
        labels = rng.integers(0, 3, size=30)
        labels[:3] = [0, 1, 2]  # every class present
        cs = roc_pr_curves(probs, labels, class_names=["x", "y", "z"])
        d = cs.to_dict()
        for i, name in enumerate(["x", "y", "z"]):
            want = binary_roc(probs[:, i], (labels == i).astype(int))["auc"]
            assert d["per_class"][name]["auc"] == pytest.approx(want, abs=1e-15)
            assert len(d["per_class"][name]["precision"]) == len(d["per_class"][name]["recall"])
        assert d["macro_auc"] == pytest.approx(
            np.mean([d["per_class"][n]["auc"] for n in ("x", "y", "z")]))


class TestRankStats:
    def test_midranks_tie_fixture(self):
        assert np.array_equal(midranks(np.array([1.0, 2.0, 2.0, 3.0])), [1.0, 2.5, 2.5, 4.0])

    def test_midranks_sum_invariant(self):
        rng = np.random.Generator(np.random.PCG64(2))
        v = rng.integers(0, 5, size=17).astype(float)
        assert midranks(v).sum() == pytest.approx(17 * 18 / 2)

    def test_kruskal_wallis_fixture(self):
        res = kruskal_wallis([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        assert res.statistic == pytest.approx(7.2, abs=1e-9)
        assert res.p_value == pytest.approx(0.0273, abs=1e-4)
        assert res.p_value == pytest.approx(0.02732372244729253, abs=1e-12)
        assert res.df == (2,)

    def test_kruskal_wallis_tie_correction(self):
        res = kruskal_wallis([[1.0, 2.0, 2.0], [2.0, 3.0, 5.0], [4.0, 4.0, 6.0]])
        assert res.statistic == pytest.approx(5.286956521739127, abs=1e-12)
        assert res.p_value == pytest.approx(0.07111348761980443, abs=1e-10)
        assert res.details["tie_correction"] < 1.0

    def test_kruskal_wallis_identical_values(self):
        res = kruskal_wallis([[3.0, 3.0], [3.0, 3.0]])
        assert res.statistic == 0.0
        assert res.p_value == 1.0

    def test_anova_fixture(self):
        res = anova_oneway([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        assert res.statistic == pytest.approx(27.0, abs=1e-12)
        assert res.p_value == pytest.approx(0.001, abs=1e-9)
        assert res.df == (2, 6)

    def test_anova_equal_groups(self):
        res = anova_oneway([[5.0, 5.0], [5.0, 5.0]])
        assert res.statistic == 0.0
        assert res.p_value == 1.0

    def test_dunn_fixture(self):
        out = dunn_posthoc([[1, 2, 3], [4, 5, 6], [7, 8, 9]], group_names=["a", "b", "c"])
        assert [r.details["pair"] for r in out] == [["a", "b"], ["a", "c"], ["b", "c"]]
        assert abs(out[0].statistic) == pytest.approx(1.3416407864998738, abs=1e-12)
        assert abs(out[1].statistic) == pytest.approx(2.6832815729997477, abs=1e-12)
        assert out[0].details["p_raw"] == pytest.approx(0.17971249487899987, abs=1e-10)
        assert out[1].p_value == pytest.approx(0.02187107427460666, abs=1e-10)

    def test_dunn_bonferroni_is_three_times_raw(self):
        out = dunn_posthoc([[1, 2, 3], [4, 5, 6], [7, 8, 9]])
        for r in out:
            assert r.p_value == pytest.approx(min(1.0, 3.0 * r.details["p_raw"]), abs=1e-15)
            assert r.correction == "bonferroni"

    def test_dunn_cap_at_one(self):
        out = dunn_posthoc([[1, 2, 1.5], [1.2, 1.8, 1.4], [1.1, 1.6, 1.3]])
        assert all(r.p_value <= 1.0 for r in out)

    def test_group_validation(self):
        with pytest.raises(ValidationError):
            kruskal_wallis([[1, 2, 3]])
        with pytest.raises(ValidationError):
            anova_oneway([[1, 2], []])


class TestKappa:
    def test_perfect_agreement(self):
        res = cohens_kappa([0, 1, 2, 1], [0, 1, 2, 1])
        assert res.statistic == 1.0

    def test_perfect_disagreement_binary(self):
        res = cohens_kappa([0, 1, 0, 1], [1, 0, 1, 0])
        assert res.statistic == -1.0

    def test_constant_rater_scores_zero(self):
        res = cohens_kappa([0, 0, 0, 0], [0, 1, 0, 1])
        assert res.statistic == 0.0

    def test_textbook_arithmetic(self):
        # 20 yes-yes, 5 yes-no, 10 no-yes, 15 no-no
        a = [0] * 25 + [1] * 25
        b = [0] * 20 + [1] * 5 + [0] * 10 + [1] * 15
        po = (20 + 15) / 50
        pe = (25 / 50) * (30 / 50) + (25 / 50) * (20 / 50)
        res = cohens_kappa(a, b)
        assert res.statistic == pytest.approx((po - pe) / (1 - pe), abs=1e-12)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            cohens_kappa([0, 1], [0])
