import math

import numpy as np
import pytest

from svbackend.calibration import (
    FEATURES,
    CalibrationModel,
    QmfTable,
    apply_calibration,
    compute_d_min,
    fit_calibration,
    load_model,
    qmf_features,
    qmf_table,
    save_model,
)
from svbackend.data import EmbeddingSet, Manifest, ScoreSet, Utterance
from svbackend.errors import DataError, SingleClassError
from svbackend.metrics import eer


def table(values, names=FEATURES):
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    return QmfTable(tuple(f"e{i}" for i in range(n)), tuple(f"t{i}" for i in range(n)),
                    tuple(names), values)


class TestFeatures:
    def test_d_min(self):
        assert compute_d_min([2.0, 1.5, 3.0], 0.01) == pytest.approx(1.49)
        with pytest.raises(DataError):
            compute_d_min([2.0], 0.0)
        with pytest.raises(DataError):
            compute_d_min([], 0.01)

    def test_example_trial(self):
        raw = EmbeddingSet(["e", "t"], [[2.0, 0.0], [0.0, 1.0]])
        m = Manifest([Utterance("e", "a", 1.5), Utterance("t", "b", 2.49)])
        f = qmf_features(("e", "t"), 0.3, raw, m, d_min=1.49)
        assert f.score == 0.3
        assert f.dur_e == pytest.approx(abs(math.log(0.01)), abs=1e-12)
        assert f.dur_t == pytest.approx(0.0, abs=1e-12)
        assert f.mag_rate == pytest.approx(math.log(2.0), abs=1e-12)

    def test_mag_rate_symmetric_and_zero_for_equal_norms(self):
        raw = EmbeddingSet(["a", "b", "c"], [[3.0, 4.0], [0.0, 5.0], [1.0, 0.0]])
        m = Manifest(Utterance(u, u, 2.0) for u in "abc")
        assert qmf_features(("a", "b"), 0.0, raw, m, 1.0).mag_rate == 0.0
        ac = qmf_features(("a", "c"), 0.0, raw, m, 1.0).mag_rate
        ca = qmf_features(("c", "a"), 0.0, raw, m, 1.0).mag_rate
        assert ac == ca == pytest.approx(math.log(5.0))

    def test_table_matches_scalar(self):
        rng = np.random.default_rng(0)
        ids = [f"u{i}" for i in range(10)]
        raw = EmbeddingSet(ids, rng.standard_normal((10, 4)) * rng.uniform(0.5, 3, (10, 1)))
        m = Manifest(Utterance(u, "s", float(d)) for u, d in zip(ids, rng.uniform(1, 10, 10)))
        d_min = compute_d_min(m.durations(ids))
        sc = ScoreSet(ids[:5], ids[5:], rng.normal(size=5))
        tab = qmf_table(sc, raw, m, d_min)
        for row, (e, t, s) in zip(tab.rows(), zip(sc.enroll, sc.test, sc.scores)):
            scalar = qmf_features((e, t), s, raw, m, d_min)
            np.testing.assert_allclose(row.as_array(), scalar.as_array(), rtol=0, atol=1e-12)

    def test_duration_at_d_min_rejected(self):
        raw = EmbeddingSet(["e", "t"], [[1.0, 0.0], [0.0, 1.0]])
        m = Manifest([Utterance("e", "a", 1.0), Utterance("t", "b", 2.0)])
        with pytest.raises(DataError):
            qmf_features(("e", "t"), 0.0, raw, m, d_min=1.0)


class TestFit:
    def test_separable(self):
        rng = np.random.default_rng(1)
        s = np.concatenate([rng.uniform(0.5, 1.0, 100), rng.uniform(-1.0, 0.4, 100)])
        y = np.r_[np.ones(100), np.zeros(100)]
        tab = table(np.column_stack([s, np.zeros((200, 3))]))
        model = fit_calibration(tab, y)
        assert model.weight("score") > 0
        held = np.concatenate([rng.uniform(0.5, 1.0, 50), rng.uniform(-1.0, 0.4, 50)])
        out = apply_calibration(model, table(np.column_stack([held, np.zeros((100, 3))])))
        np.testing.assert_array_equal(out.scores > 0, np.r_[np.ones(50), np.zeros(50)] > 0)

    def test_strong_l2_shrinks(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(300, 4))
        y = (X[:, 0] + 0.5 * rng.normal(size=300)) > 0
        model = fit_calibration(table(X), y, l2=1e3)
        assert np.abs(model.weights).max() <= 1e-2

    def test_informative_feature_dominates(self):
        rng = np.random.default_rng(3)
        n = 2000
        y = rng.integers(0, 2, n).astype(bool)
        score = rng.normal(size=n)  # uninformative
        mag = np.where(y, 0.2, 1.0) + 0.2 * rng.normal(size=n)
        X = np.column_stack([score, rng.uniform(0, 2, n), rng.uniform(0, 2, n), mag])
        model = fit_calibration(table(X), y)
        assert abs(model.weight("mag_rate")) > abs(model.weight("score"))

    def test_converges_and_iterations(self):
        rng = np.random.default_rng(4)
        X = rng.normal(size=(500, 4))
        y = (X @ [1.0, -0.5, 0.2, 0.0] + rng.normal(size=500)) > 0
        model = fit_calibration(table(X), y)
        assert model.converged and 0 < model.iterations < 100

    def test_basis_vectors_recover_weights(self):
        model = CalibrationModel(FEATURES, np.array([1.5, -0.2, 0.3, -0.7]), 0.25, 0.0)
        out = apply_calibration(model, table(np.vstack([np.zeros(4), np.eye(4)])))
        np.testing.assert_allclose(out.scores, [0.25, 1.75, 0.05, 0.55, -0.45], rtol=0, atol=1e-15)

    def test_constant_qmfs_keep_eer(self):
        rng = np.random.default_rng(5)
        s = np.concatenate([rng.normal(1, 1, 300), rng.normal(-1, 1, 300)])
        y = np.r_[np.ones(300), np.zeros(300)]
        tab = table(np.column_stack([s, np.full(600, 0.7), np.full(600, 1.3), np.zeros(600)]))
        model = fit_calibration(tab, y)
        assert eer(apply_calibration(model, tab).scores, y) == pytest.approx(eer(s, y), abs=1e-12)

    def test_single_class(self):
        with pytest.raises(SingleClassError):
            fit_calibration(table(np.zeros((3, 4))), [1, 1, 1])

    def test_feature_order_checked(self):
        model = CalibrationModel(("score", "mag_rate"), np.ones(2), 0.0, 0.0)
        with pytest.raises(DataError):
            apply_calibration(model, table(np.zeros((2, 2)), ("mag_rate", "score")))

    def test_model_file_round_trip(self, tmp_path):
        model = CalibrationModel(("score", "dur_t"), np.array([0.1 / 3, -2.0]), 1e-17, 1.49,
                                 converged=False, iterations=7)
        save_model(model, tmp_path / "m.txt")
        back = load_model(tmp_path / "m.txt")
        assert back.feature_names == model.feature_names
        assert back.weights.tobytes() == model.weights.tobytes()
        assert (back.bias, back.d_min, back.converged, back.iterations) == (1e-17, 1.49, False, 7)
