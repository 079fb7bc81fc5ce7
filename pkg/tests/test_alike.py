"""Tests for alike-part weights, masks and explanations."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.core.alike import (
    alike_mask,
    alike_weights,
    explain_all,
    explain_instance,
    explain_queries,
    nearest_prototype,
    prototype_table,
    write_explanations,
    write_frequencies,
    write_prototype_table,
)
from src.core.forest import ForestParams, train
from src.core.proximity import DistanceMatrix, distance_matrix
from src.core.selection import CostModel
from src.models.errors import ExplanationError
from src.models.records import PrototypeSet, SelectionConfig, Strategy
from src.utils.io import read_jsonl
from tests.factories import attributions, blobs, dataset

weights = st.lists(
    st.just(0.0) | st.floats(min_value=1e-6, max_value=1.0), min_size=1, max_size=10
)


def _prototypes(indices: list[int], labels: list[int] | None = None) -> PrototypeSet:
    return PrototypeSet(
        indices=indices,
        labels=labels if labels is not None else [0] * len(indices),
        objective_trace=[1.0] * len(indices),
        config=SelectionConfig(strategy=Strategy.SMA, k=max(len(indices), 1)),
    )


def _five_instances():
    """One uniform prototype row (instance 0) and four instances with known masks."""
    raw = [
        [1.0, 1.0, 1.0],
        [3.0, 0.0, 0.0],
        [2.0, 2.0, 0.0],
        [0.0, 0.0, 5.0],
        [1.0, 0.0, 1.0],
    ]
    D = DistanceMatrix(np.array([[0], [0], [1], [1], [2]]), n_trees=1)
    return dataset(np.zeros((5, 3)), [0] * 5), D, attributions(raw)


class TestAlikeWeights:
    """Tests for alike_weights."""

    def test_products(self) -> None:
        """(0.36, 0.64) x (0.64, 0.36) should give 0.2304 on both features."""
        np.testing.assert_allclose(
            alike_weights([0.36, 0.64], [0.64, 0.36]), [0.2304, 0.2304], atol=1e-15
        )

    def test_symmetric(self) -> None:
        """Swapping the vectors should not change the weights."""
        u, v = [0.1, 0.2, 0.7], [0.5, 0.25, 0.25]
        assert alike_weights(u, v).tolist() == alike_weights(v, u).tolist()

    def test_length_mismatch(self) -> None:
        """Vectors of different length should raise ExplanationError."""
        with pytest.raises(ExplanationError):
            alike_weights([1.0], [0.5, 0.5])


class TestAlikeMask:
    """Tests for alike_mask."""

    def test_above_mean_features(self) -> None:
        """Only weights strictly above the mean should be selected."""
        w = [0.18, 0.02, 0.27, 0.0, 0.0, 0.51, 0.0]
        assert alike_mask(w).tolist() == [1, 0, 1, 0, 0, 1, 0]

    def test_constant_weights_give_empty_mask(self) -> None:
        """A constant vector has no feature above the mean."""
        assert alike_mask([0.2304, 0.2304]).tolist() == [0, 0]
        assert alike_mask([0.25] * 4).tolist() == [0, 0, 0, 0]

    def test_single_dominant_feature(self) -> None:
        """(1, 0) should select the first feature only."""
        assert alike_mask([1.0, 0.0]).tolist() == [1, 0]

    def test_empty_vector(self) -> None:
        """An empty weight vector should raise."""
        with pytest.raises(ExplanationError):
            alike_mask([])

    @given(weights, st.integers(min_value=-10, max_value=10))
    def test_invariant_to_power_of_two_scaling(self, w: list[float], exponent: int) -> None:
        """Scaling by a power of two should not change the mask."""
        scaled = np.asarray(w) * 2.0**exponent
        assert alike_mask(scaled).tolist() == alike_mask(w).tolist()


class TestNearestPrototype:
    """Tests for nearest_prototype."""

    def test_ties_go_to_lowest_instance_index(self) -> None:
        """Equal costs should resolve to the prototype with the lowest index."""
        costs = np.array([[0.5, 0.5, 0.9]])
        cols, best = nearest_prototype(costs, np.array([7, 3, 1]))
        assert cols.tolist() == [1]
        assert best.tolist() == [0.5]


class TestExplainInstance:
    """Tests for explain_instance."""

    def test_prototype_explains_itself(self) -> None:
        """A prototype should be its own nearest prototype at cost zero."""
        D = DistanceMatrix(np.array([[0, 0], [1, 1], [2, 2], [0, 1]]), n_trees=2)
        A = attributions(np.ones((4, 2)))
        P = _prototypes([2, 0], labels=[1, 0])
        explanation = explain_instance(2, P, D, A, beta=0.0, metric="distance-only")
        assert explanation.prototype_index == 2
        assert explanation.prototype_label == 1
        assert explanation.assignment_cost == 0.0

    def test_nearest_by_distance(self) -> None:
        """Instance 3 is half-way to instance 0 and far from instance 2."""
        D = DistanceMatrix(np.array([[0, 0], [1, 1], [2, 2], [0, 1]]), n_trees=2)
        A = attributions(np.ones((4, 2)))
        explanation = explain_instance(3, _prototypes([2, 0]), D, A, beta=0.0)
        assert explanation.prototype_index == 0
        assert explanation.assignment_cost == 0.5

    def test_single_prototype(self) -> None:
        """With one prototype every instance is assigned to it."""
        ds, D, A = _five_instances()
        report = explain_all(ds, _prototypes([3]), D, A, beta=1.0)
        assert {e.prototype_index for e in report.explanations} == {3}

    @pytest.mark.parametrize("beta", [-0.5, 0.0, 0.7, 3.0])
    def test_combined_metric_minimizes_cost(self, beta: float) -> None:
        """The chosen prototype should minimize D + beta * fi, lowest index first."""
        ds = blobs(5, seed=2, separation=2.0)
        f = train(ds, ForestParams(n_trees=6, max_depth=2, seed=1))
        D = distance_matrix(f, ds)
        A = attributions(np.random.default_rng(4).normal(size=(ds.n_instances, 2)))
        P = _prototypes([8, 1, 5])
        cost = CostModel(D, A, beta)
        for i in range(ds.n_instances):
            expected = min(sorted(P.indices), key=lambda j: cost.pair_cost(i, j))
            assert explain_instance(i, P, D, A, beta).prototype_index == expected

    def test_empty_prototype_set(self) -> None:
        """No prototypes should raise ExplanationError."""
        ds, D, A = _five_instances()
        empty = PrototypeSet(
            indices=[],
            labels=[],
            objective_trace=[],
            config=SelectionConfig(strategy=Strategy.GKM, k_per_class=1),
        )
        with pytest.raises(ExplanationError, match="empty"):
            explain_instance(0, empty, D, A, beta=0.0)

    def test_missing_attribution_row(self) -> None:
        """An index without an attribution row should raise."""
        ds, D, A = _five_instances()
        with pytest.raises(ExplanationError):
            explain_instance(7, _prototypes([0]), D, A, beta=0.0)


class TestExplainAll:
    """Tests for explain_all and the report writers."""

    def test_masks_and_frequencies(self) -> None:
        """Hand-tallied masks should give per-feature highlight rates 0.6, 0.2, 0.4."""
        ds, D, A = _five_instances()
        report = explain_all(ds, _prototypes([0]), D, A, beta=0.0, metric="distance-only")
        masks = [e.mask for e in report.explanations]
        assert masks == [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 0, 1], [1, 0, 1]]
        assert report.frequencies == [0.6, 0.2, 0.4]
        assert report.mean_mask_length == pytest.approx(1.2)
        assert report.mean_alike_importance == pytest.approx(0.8)
        assert not report.explanations[0].has_alike_part

    def test_frequency_table(self) -> None:
        """The table should pair feature names with highlight rates."""
        ds, D, A = _five_instances()
        report = explain_all(ds, _prototypes([0]), D, A, beta=0.0, metric="distance-only")
        table = report.frequency_table()
        assert list(table.columns) == ["feature_name", "highlight_fraction"]
        assert table["feature_name"].tolist() == ["f0", "f1", "f2"]

    def test_row_count_mismatch(self) -> None:
        """A dataset that does not match the distance matrix should raise."""
        _, D, A = _five_instances()
        with pytest.raises(ExplanationError):
            explain_all(dataset([[0.0]], [0]), _prototypes([0]), D, A, beta=0.0)

    def test_writers(self, tmp_path: Path) -> None:
        """Explanations go to JSONL and frequencies to a two-column CSV."""
        ds, D, A = _five_instances()
        report = explain_all(ds, _prototypes([0]), D, A, beta=0.0, metric="distance-only")

        records = read_jsonl(write_explanations(report, tmp_path / "explanations.jsonl"))
        assert len(records) == 5
        assert records[2]["mask"] == [1, 1, 0]
        assert records[2]["metric_used"] == "distance-only"

        lines = write_frequencies(report, tmp_path / "frequencies.csv").read_text().splitlines()
        assert lines == ["feature_name,highlight_fraction", "f0,0.6", "f1,0.2", "f2,0.4"]


class TestExplainQueries:
    """Tests for explain_queries."""

    def test_training_rows_as_queries(self) -> None:
        """Querying with the training rows should reproduce explain_all."""
        ds = blobs(4, seed=6, separation=2.0)
        f = train(ds, ForestParams(n_trees=5, max_depth=2, seed=0))
        D = distance_matrix(f, ds)
        A = attributions(np.random.default_rng(1).normal(size=(ds.n_instances, 2)))
        P = _prototypes([1, 6])
        expected = explain_all(ds, P, D, A, beta=0.0)
        actual = explain_queries(D.values, P, A, A, 0.0, "combined", list(ds.feature_names))
        assert actual.explanations == expected.explanations
        assert actual.frequencies == expected.frequencies

    def test_nearest_by_query_distance(self) -> None:
        """Each query should go to the prototype it is closest to."""
        A_train = attributions(np.ones((3, 2)))
        A_query = attributions([[1.0, 0.0], [0.0, 1.0]])
        distances = np.array([[0.9, 0.1, 0.5], [0.2, 0.8, 0.2]])
        report = explain_queries(
            distances, _prototypes([2, 1, 0]), A_query, A_train, 0.0, "distance-only", ["a", "b"]
        )
        assert [e.prototype_index for e in report.explanations] == [1, 0]
        assert [e.instance_index for e in report.explanations] == [0, 1]

    def test_shape_mismatch(self) -> None:
        """Distances for another number of queries should raise."""
        A = attributions(np.ones((3, 2)))
        with pytest.raises(ExplanationError):
            explain_queries(np.zeros((2, 3)), _prototypes([0]), A, A, 0.0, "combined", ["a", "b"])


class TestPrototypeTable:
    """Tests for prototype_table and write_prototype_table."""

    def test_rows_follow_selection_order(self) -> None:
        """Each row should hold a prototype's class name and normalized attributions."""
        A = attributions([[3.0, 4.0], [1.0, 0.0], [0.0, 2.0]])
        table = prototype_table(_prototypes([2, 0], [1, 0]), A, ["a", "b"], ["no", "yes"])
        assert list(table.columns) == ["prototype_index", "label", "a", "b"]
        assert list(table["prototype_index"]) == [2, 0]
        assert list(table["label"]) == ["yes", "no"]
        np.testing.assert_allclose(table[["a", "b"]], [[0.0, 1.0], [0.36, 0.64]])

    def test_written_at_full_precision(self, tmp_path: Path) -> None:
        """The CSV should carry the shortest exact text of every attribution."""
        A = attributions([[1.0, 2.0]])
        table = prototype_table(_prototypes([0]), A, ["a", "b"], ["c0"])
        path = write_prototype_table(table, tmp_path / "cells" / "protos.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "prototype_index,label,a,b"
        assert lines[1] == f"0,c0,{float(A.normalized[0, 0])!r},{float(A.normalized[0, 1])!r}"

    def test_empty_set(self) -> None:
        """An empty prototype set should raise."""
        with pytest.raises(ExplanationError):
            prototype_table(_prototypes([]), attributions([[1.0]]), ["a"], ["c0"])

    def test_feature_name_mismatch(self) -> None:
        """Feature names must match the attribution columns."""
        with pytest.raises(ExplanationError):
            prototype_table(_prototypes([0]), attributions([[1.0, 2.0]]), ["a"], ["c0"])
