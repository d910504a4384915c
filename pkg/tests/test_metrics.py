import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from b3kit import metrics as m
from b3kit.errors import ArityError, InputError, LabelError, ParameterError, ParseError

HB, LB = m.HIGHER_BETTER, m.LOWER_BETTER

# (task, direction, STL, MTL baseline, full model, mean bridge)
NYUD = [
    ("semseg", HB, 55.65, 53.75, 57.78, 57.59),
    ("depth", LB, 0.4794, 0.4805, 0.4587, 0.4594),
    ("normal", LB, 19.60, 19.96, 17.22, 17.37),
    ("edge", HB, 83.19, 80.60, 83.18, 83.03),
]


def table(column):
    return m.transfer_table([(t, d, stl, row[column]) for t, d, stl, *row in NYUD])


class TestTransferGain:
    def test_mtl_baseline_row(self):
        rep = table(0)
        np.testing.assert_allclose(rep.deltas, [-3.41, -0.23, -1.84, -3.11], atol=0.01)
        assert rep.delta_mtl == pytest.approx(-2.15, abs=0.01)

    def test_full_model_row(self):
        assert table(1).delta_mtl == pytest.approx(5.07, abs=0.01)

    def test_mean_bridge_row(self):
        assert table(2).delta_mtl == pytest.approx(4.71, abs=0.01)

    def test_single_values(self):
        assert m.delta_tau(m.TaskMetric("miou", 53.75), m.TaskMetric("miou", 55.65)) == pytest.approx(-3.41, abs=0.01)
        assert m.delta_tau(m.TaskMetric("rmse", 0.4805), m.TaskMetric("rmse", 0.4794)) == pytest.approx(-0.23, abs=0.01)
        assert m.delta_tau(m.TaskMetric("rmse", 0.3), m.TaskMetric("rmse", 0.3)) == 0

    def test_delta_mtl(self):
        assert m.delta_mtl([-3.41, -0.23, -1.84, -3.11]) == pytest.approx(-2.15, abs=0.01)
        assert m.delta_mtl([3.49, 4.17, 11.38, -0.19]) == pytest.approx(4.71, abs=0.01)
        assert m.delta_mtl([1.25]) == 1.25
        with pytest.raises(ArityError):
            m.delta_mtl([])

    def test_errors(self):
        with pytest.raises(ZeroDivisionError):
            m.delta_tau(m.TaskMetric("miou", 1.0), m.TaskMetric("miou", 0.0))
        with pytest.raises(ParameterError):
            m.delta_tau(m.TaskMetric("x", 1.0, HB), m.TaskMetric("x", 1.0, LB))
        with pytest.raises(ParameterError):
            m.TaskMetric("rmse", 1.0, HB)
        with pytest.raises(ParameterError):
            m.TaskMetric("custom", 1.0)

    def test_direction_flip(self):
        better_low = m.delta_tau(m.TaskMetric("e", 0.9, LB), m.TaskMetric("e", 1.0, LB))
        better_high = m.delta_tau(m.TaskMetric("s", 1.1, HB), m.TaskMetric("s", 1.0, HB))
        assert better_low > 0 and better_high > 0

    @given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100), st.sampled_from([HB, LB]))
    def test_scale_invariance(self, mt, stv, lam, d):
        a = m.delta_tau(m.TaskMetric("q", mt, d), m.TaskMetric("q", stv, d))
        b = m.delta_tau(m.TaskMetric("q", lam * mt, d), m.TaskMetric("q", lam * stv, d))
        assert b == pytest.approx(a, rel=1e-9, abs=1e-9)


class TestTransferCsv:
    def test_round_trip(self):
        text = "task,direction,st_value,mt_value\n" + "".join(
            f"{t},{d},{stl},{mtl}\n" for t, d, stl, mtl, *_ in NYUD
        )
        out = m.format_transfer(m.transfer_table(m.parse_transfer_csv(text)))
        assert out == "task,delta\nsemseg,-3.41\ndepth,-0.23\nnormal,-1.84\nedge,-3.11\ndelta_mtl,-2.15\n"

    @pytest.mark.parametrize(
        "body,line",
        [
            ("task,dir,st,mt\n", 1),
            ("task,direction,st_value,mt_value\nseg,higher_better,1.0\n", 2),
            ("task,direction,st_value,mt_value\nseg,higher_better,1,1\ndep,sideways,1,1\n", 3),
            ("task,direction,st_value,mt_value\nseg,higher_better,abc,1\n", 2),
        ],
    )
    def test_parse_errors(self, body, line):
        with pytest.raises(ParseError) as info:
            m.parse_transfer_csv(body)
        assert info.value.line == line
        assert f"line {line}" in str(info.value)

    def test_zero_names_task(self):
        with pytest.raises(ZeroDivisionError, match="depth"):
            m.transfer_table([("depth", LB, 0.0, 1.0)])


def brute_miou(pred, gt, k):
    ious = []
    for c in range(k):
        tp = sum(1 for p, g in zip(pred, gt) if p == c and g == c)
        fp = sum(1 for p, g in zip(pred, gt) if p == c and g != c)
        fn = sum(1 for p, g in zip(pred, gt) if p != c and g == c)
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


class TestMiou:
    def test_examples(self):
        assert m.miou([0, 0, 1, 1], [0, 0, 1, 1], 2) == 1.0
        assert m.miou([0, 1, 1, 1], [0, 0, 1, 1], 2) == pytest.approx(7 / 12)
        assert m.miou([2, 2, 3], [0, 1, 1], 4) == 0.0

    def test_label_range(self):
        with pytest.raises(LabelError):
            m.miou([0, 3], [0, 1], 3)

    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=30))
    def test_matches_brute_force(self, pairs):
        pred, gt = zip(*pairs)
        assert m.miou(np.array(pred), np.array(gt), 4) == pytest.approx(brute_miou(pred, gt, 4))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=25)
    def test_permutation_invariant(self, seed):
        gen = np.random.default_rng(seed)
        p, g = gen.integers(0, 3, 20), gen.integers(0, 3, 20)
        perm = gen.permutation(20)
        assert m.miou(p[perm], g[perm], 3) == pytest.approx(m.miou(p, g, 3), abs=1e-15)
        a, b = gen.normal(size=20), gen.normal(size=20)
        assert m.rmse(a[perm], b[perm]) == pytest.approx(m.rmse(a, b), rel=1e-14)


class TestRegression:
    def test_rmse(self):
        assert m.rmse(np.ones((2, 2)), np.ones((2, 2))) == 0
        assert m.rmse(np.full((3, 3), 1.5), np.ones((3, 3))) == 0.5
        assert m.rmse([3.0, 4.0], [0.0, 0.0]) == pytest.approx(np.sqrt(12.5))

    def test_angles(self):
        z = np.tile([0.0, 0.0, 1.0], (4, 1))
        x = np.tile([2.0, 0.0, 0.0], (4, 1))
        assert m.mean_angular_error(z, z) == 0
        assert m.mean_angular_error(z, x) == pytest.approx(90)
        assert m.mean_angular_error(z, -z) == pytest.approx(180)

    def test_zero_normal(self):
        with pytest.raises(InputError):
            m.mean_angular_error(np.zeros((1, 3)), np.ones((1, 3)))


def brute_edge_f(prob, gt, r, thr):
    pred = prob >= thr
    h, w = gt.shape

    def near(mask, y, x):
        return any(
            mask[yy, xx]
            for yy in range(max(0, y - r), min(h, y + r + 1))
            for xx in range(max(0, x - r), min(w, x + r + 1))
        )

    n_pred, n_gt = pred.sum(), gt.sum()
    if n_pred == 0 or n_gt == 0:
        return 0.0
    p = sum(near(gt, y, x) for y in range(h) for x in range(w) if pred[y, x]) / n_pred
    rc = sum(near(pred, y, x) for y in range(h) for x in range(w) if gt[y, x]) / n_gt
    return 0.0 if p + rc == 0 else 2 * p * rc / (p + rc)


class TestEdgeF:
    def test_perfect(self):
        gt = np.zeros((5, 5), dtype=bool)
        gt[2] = True
        assert m.edge_f_best(gt.astype(float), gt, 0) == (1.0, 0.01)

    def test_empty_prediction(self):
        gt = np.eye(5, dtype=bool)
        assert m.edge_f_best(np.zeros((5, 5)), gt, 1)[0] == 0.0

    def test_shifted_line(self):
        gt = np.zeros((5, 5), dtype=bool)
        gt[:, 2] = True
        prob = np.zeros((5, 5))
        prob[:, 3] = 1.0
        assert m.edge_f_best(prob, gt, 1)[0] == 1.0
        assert m.edge_f_best(prob, gt, 0)[0] == 0.0

    def test_range_check(self):
        with pytest.raises(InputError):
            m.edge_f_best(np.full((2, 2), 1.5), np.ones((2, 2)), 1)

    @given(st.integers(0, 2**32 - 1), st.integers(0, 2))
    @settings(max_examples=30, deadline=None)
    def test_matches_brute_force(self, seed, r):
        gen = np.random.default_rng(seed)
        prob = np.round(gen.uniform(size=(6, 6)), 2)
        gt = gen.uniform(size=(6, 6)) < 0.3
        f, thr = m.edge_f_best(prob, gt, r)
        scores = [brute_edge_f(prob, gt, r, t) for t in m.THRESHOLDS]
        assert f == pytest.approx(max(scores), abs=1e-12)
        if f > 0:
            first = next(i for i, s in enumerate(scores) if s >= max(scores) - 1e-12)
            assert thr == pytest.approx(m.THRESHOLDS[first])

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_monotone_in_radius(self, seed):
        gen = np.random.default_rng(seed)
        prob, gt = gen.uniform(size=(8, 8)), gen.uniform(size=(8, 8)) < 0.2
        fs = [m.edge_f_best(prob, gt, r)[0] for r in range(4)]
        assert all(a <= b + 1e-12 for a, b in zip(fs, fs[1:]))
