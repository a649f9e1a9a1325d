import numpy as np
import pytest
from sklearn.neighbors import NearestNeighbors

from src.data_utils import BeamDataset, Split
from src.dknn import (
    CalibrationScores,
    CosineLsh,
    CredibilityRecord,
    LshConfig,
    build_index,
    calibrate,
    calibrate_arrays,
    classify,
    classify_batch,
    hash_layout,
    nonconformity,
    nonconformity_matrix,
    p_values,
    p_values_from_scores,
    record_from_p_values,
    records_frame,
    reliability_diagram,
    reliability_from_scores,
    robustness_eval,
    robustness_summary,
)
from src.errors import BuildError, ConfigError
from src.mlp import MlpModel, TrainConfig, train


@pytest.fixture
def four_space_model():
    return MlpModel.initialize(6, n_classes=8, hidden=(16, 12, 10), seed=2)


@pytest.fixture
def trained_toy(split_toy_dataset):
    model = MlpModel.initialize(6, n_classes=3, hidden=(16, 16), seed=0)
    return train(model, split_toy_dataset, TrainConfig(learning_rate=1e-2, epochs=5, batch_size=64))


def test_hash_layout():
    assert hash_layout(64, 12) == (2, 16)
    assert hash_layout(16, 5) == (1, 16)


class TestCosineLsh:
    def test_recall_against_brute_force(self):
        rng = np.random.default_rng(0)
        centers = rng.standard_normal((20, 16))
        data = centers[rng.integers(0, 20, 2000)] + 0.05 * rng.standard_normal((2000, 16))
        queries = data[:500] + 0.01 * rng.standard_normal((500, 16))
        found = CosineLsh(data, n_tables=16, n_hash_bits=6, seed=1).query(queries, k=10)
        exact = NearestNeighbors(n_neighbors=10, metric="cosine", algorithm="brute").fit(data)
        truth = exact.kneighbors(queries, return_distance=False)
        recall = np.mean([len(set(a) & set(b)) / 10 for a, b in zip(found, truth)])
        assert recall >= 0.9

    def test_exact_mode_matches_brute_force(self):
        rng = np.random.default_rng(1)
        data, queries = rng.standard_normal((300, 5)), rng.standard_normal((20, 5))
        found = CosineLsh(data, n_tables=2, n_hash_bits=4, seed=0).query(queries, k=3, exact=True)
        truth = NearestNeighbors(n_neighbors=3, metric="cosine", algorithm="brute").fit(data)
        np.testing.assert_array_equal(found, truth.kneighbors(queries, return_distance=False))

    def test_zero_vectors_share_a_bucket(self):
        data = np.vstack([np.zeros((3, 4)), np.eye(4)])
        found = CosineLsh(data, n_tables=4, n_hash_bits=3, seed=0).query(np.zeros(4), k=3)
        np.testing.assert_array_equal(found[0], [0, 1, 2])

    def test_empty_data(self):
        with pytest.raises(BuildError):
            CosineLsh(np.zeros((0, 4)))


class TestLayerIndex:
    def test_train_rows_find_themselves(self, small_model):
        features = np.random.default_rng(3).standard_normal((200, 6))
        ds = BeamDataset.from_arrays(features, np.arange(200) % 8, n_classes=8)
        idx = build_index(small_model, ds, LshConfig(k=5))
        assert idx.n_spaces == 3
        for ids in idx.neighbors(features):
            assert all(i in row for i, row in enumerate(ids))

    def test_logits_can_be_left_out(self, small_model):
        ds = BeamDataset.from_arrays(np.ones((20, 6)), np.zeros(20), n_classes=8)
        assert build_index(small_model, ds, LshConfig(include_logits=False)).n_spaces == 2

    def test_no_training_rows(self, small_model):
        ds = BeamDataset.from_arrays(np.ones((5, 6)), np.zeros(5), split=np.full(5, Split.TEST), n_classes=8)
        with pytest.raises(BuildError):
            build_index(small_model, ds)


class TestNonconformity:
    def test_unanimous_and_absent_labels(self, four_space_model):
        features = np.random.default_rng(4).standard_normal((50, 6))
        ds = BeamDataset.from_arrays(features, np.full(50, 5), n_classes=8)
        idx = build_index(four_space_model, ds, LshConfig(k=10))
        x = np.random.default_rng(5).standard_normal(6)
        assert nonconformity(idx, x, 5) == 0
        assert nonconformity(idx, x, 6) == 40

    def test_row_sums(self, small_model):
        features = np.random.default_rng(6).standard_normal((60, 6))
        ds = BeamDataset.from_arrays(features, np.arange(60) % 8, n_classes=8)
        idx = build_index(small_model, ds, LshConfig(k=4))
        alpha = nonconformity_matrix(idx, features[:10])
        # every neighbour disagrees with all but one candidate label
        np.testing.assert_array_equal(alpha.sum(axis=1), 3 * 4 * 8 - 3 * 4)


class TestPValues:
    def test_counts_scores_at_least_alpha(self):
        cal = CalibrationScores(np.array([1, 2, 3, 4, 5]))
        np.testing.assert_allclose(p_values_from_scores(cal, np.array([3, 0, 6, 5])), [0.6, 1.0, 0.0, 0.2])

    def test_non_increasing_in_alpha(self):
        cal = CalibrationScores(np.sort(np.random.default_rng(7).integers(0, 40, 200)))
        pv = p_values_from_scores(cal, np.arange(41))
        assert np.all(np.diff(pv) <= 0)

    def test_empty_calibration(self):
        with pytest.raises(BuildError):
            CalibrationScores(np.array([]))

    def test_record_from_p_values(self):
        record = record_from_p_values(np.array([0.1, 0.7, 0.7, 0.2]))
        assert record.prediction == 1
        assert record.credibility == pytest.approx(0.7)
        assert record.confidence == pytest.approx(0.3)
        clear = record_from_p_values(np.array([0.0, 1.0, 0.0]))
        assert (clear.prediction, clear.confidence, clear.credibility) == (1, 1.0, 1.0)


class TestCalibration:
    def test_training_rows_calibrate_low(self, trained_toy, split_toy_dataset):
        idx = build_index(trained_toy, split_toy_dataset)
        features, labels = split_toy_dataset.rows(Split.TRAIN)
        cal = calibrate_arrays(idx, features, labels)
        assert np.median(cal.scores) < idx.n_spaces * idx.k / 2

    def test_empty_holdout(self, trained_toy, split_toy_dataset):
        idx = build_index(trained_toy, split_toy_dataset)
        with pytest.raises(BuildError):
            calibrate(idx, split_toy_dataset.subset(split_toy_dataset.split == Split.TRAIN))

    def test_true_label_p_values_are_valid(self, trained_toy, split_toy_dataset):
        idx = build_index(trained_toy, split_toy_dataset)
        cal = calibrate(idx, split_toy_dataset)
        features, labels = split_toy_dataset.rows(Split.TEST)
        p_true = p_values(idx, cal, features)[np.arange(len(labels)), labels]
        for t in (0.2, 0.5):
            assert np.mean(p_true <= t) <= t + 1.0 / len(cal) + 0.2 * t


class TestClassify:
    def test_batch_matches_single_rows_and_workers(self, trained_toy, split_toy_dataset):
        idx = build_index(trained_toy, split_toy_dataset)
        cal = calibrate(idx, split_toy_dataset)
        features, labels = split_toy_dataset.rows(Split.TEST)
        features = np.vstack([features, features])[:600]
        serial = classify_batch(idx, cal, features, n_jobs=1)
        threaded = classify_batch(idx, cal, features, n_jobs=2)
        assert [r.credibility for r in serial] == [r.credibility for r in threaded]
        single = classify(idx, cal, features[3])
        assert single.prediction == serial[3].prediction
        np.testing.assert_array_equal(single.p_values, serial[3].p_values)
        assert len(single.neighbor_labels) == idx.n_spaces

    def test_records_frame_columns(self, trained_toy, split_toy_dataset):
        idx = build_index(trained_toy, split_toy_dataset)
        cal = calibrate(idx, split_toy_dataset)
        features, labels = split_toy_dataset.rows(Split.TEST)
        frame = records_frame(classify_batch(idx, cal, features[:5]), labels[:5])
        assert list(frame.columns) == ["row_id", "prediction", "true_label", "confidence", "credibility"]


class TestReliability:
    def test_all_credible_and_correct(self):
        table = reliability_from_scores(np.ones(8), np.ones(8, bool))
        assert table["count"].tolist() == [0] * 9 + [8]
        assert table["accuracy"].iloc[-1] == 1.0
        assert table["accuracy"].iloc[:-1].isna().all()

    def test_single_bin_is_overall_accuracy(self):
        correct = np.array([1, 0, 1, 1], bool)
        table = reliability_from_scores(np.array([0.1, 0.5, 0.9, 0.0]), correct, n_bins=1)
        assert table["accuracy"].iloc[0] == pytest.approx(0.75)

    def test_bin_edges(self):
        table = reliability_from_scores(np.array([0.0, 0.1, 0.2, 0.21, 1.0]), np.ones(5, bool))
        assert table["count"].tolist() == [2, 1, 1, 0, 0, 0, 0, 0, 0, 1]

    def test_diagram_scores_record_predictions(self):
        records = [
            CredibilityRecord(prediction=p, confidence=1.0, credibility=c, p_values=np.zeros(3))
            for p, c in [(0, 0.95), (1, 0.92), (2, 0.15)]
        ]
        table = reliability_diagram(records, [0, 2, 2], n_bins=10)
        assert table.loc[9, "count"] == 2 and table.loc[9, "accuracy"] == 0.5
        assert table.loc[1, "count"] == 1 and table.loc[1, "accuracy"] == 1.0


class TestRobustness:
    def test_identical_sets(self):
        cred = np.random.default_rng(8).random(100)
        table = robustness_summary(cred, cred, [0.2, 0.4])
        np.testing.assert_allclose(table["clean_below"], table["adversarial_below"])

    def test_zero_threshold(self):
        table = robustness_summary(np.array([0.0, 0.5]), np.array([0.1, 0.9]), [0.0])
        assert table["clean_below"].iloc[0] == 0.0 and table["adversarial_below"].iloc[0] == 0.0
        assert np.isnan(table["ratio"].iloc[0])

    def test_adversarial_fraction(self):
        table = robustness_summary(np.array([0.1, 0.5, 0.6, 0.9]), np.array([0.05, 0.1, 0.3, 0.9]), [0.2])
        row = table.iloc[0]
        assert (row["clean_below"], row["adversarial_below"], row["ratio"]) == (0.25, 0.5, 2.0)

    def test_eval_on_identical_inputs(self, trained_toy, split_toy_dataset):
        idx = build_index(trained_toy, split_toy_dataset)
        cal = calibrate(idx, split_toy_dataset)
        features, _ = split_toy_dataset.rows(Split.TEST)
        table = robustness_eval(idx, cal, features[:20], features[:20], [0.2, 0.5])
        np.testing.assert_array_equal(table["clean_below"], table["adversarial_below"])
        assert table["threshold"].tolist() == [0.2, 0.5]

    def test_eval_needs_rows(self, trained_toy, split_toy_dataset):
        idx = build_index(trained_toy, split_toy_dataset)
        cal = calibrate(idx, split_toy_dataset)
        with pytest.raises(ConfigError):
            robustness_eval(idx, cal, np.empty((0, 6)), np.empty((0, 6)), [0.2])


def test_lsh_and_exact_neighbours_agree_on_predictions():
    rng = np.random.default_rng(21)
    labels = np.repeat(np.arange(16), 120)
    features = 5.0 * np.eye(16)[labels] + rng.standard_normal((len(labels), 16))
    split = rng.choice([Split.TRAIN, Split.HOLDOUT, Split.TEST], size=len(labels), p=[0.6, 0.2, 0.2])
    ds = BeamDataset.from_arrays(features, labels, split=split, n_classes=16)
    model = train(
        MlpModel.initialize(16, n_classes=16, hidden=(64, 64), seed=0),
        ds,
        TrainConfig(learning_rate=1e-2, epochs=10, batch_size=64),
    )
    queries, _ = ds.rows(Split.TEST)
    predictions = {}
    for exact in (False, True):
        idx = build_index(model, ds, LshConfig(exact=exact, seed=4))
        records = classify_batch(idx, calibrate(idx, ds), queries)
        predictions[exact] = np.array([r.prediction for r in records])
    assert np.mean(predictions[False] == predictions[True]) >= 0.95
