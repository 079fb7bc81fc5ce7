"""Tests for greedy prototype selection."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from src.core.attribution import AttributionMatrix, compute_attributions
from src.core.forest import ForestParams, train
from src.core.proximity import DistanceMatrix, distance_matrix
from src.core.selection import (
    CostModel,
    fi_score,
    load_prototypes,
    objective,
    pair_cost,
    save_prototypes,
    select,
    select_apete,
    select_gkm,
    select_sma,
)
from src.models.errors import SelectionError
from src.models.records import AssignmentMetric, SelectionConfig, Strategy
from tests.factories import attributions, blobs, dataset

leaf_matrices = st.integers(min_value=2, max_value=8).flatmap(
    lambda n: st.lists(
        st.lists(st.integers(0, 2), min_size=3, max_size=3), min_size=n, max_size=n
    )
)

BUDGET = {Strategy.GKM: "k_per_class", Strategy.SMA: "k", Strategy.APETE: "epsilon"}


def _setup(
    n_per_class: int = 6, seed: int = 0, max_materialized: int = 5000
) -> tuple[DistanceMatrix, AttributionMatrix, np.ndarray]:
    """Overlapping blobs with a small forest and random attributions."""
    ds = blobs(n_per_class, seed=seed, separation=2.0)
    f = train(ds, ForestParams(n_trees=10, max_depth=3, seed=seed))
    D = distance_matrix(f, ds, max_materialized=max_materialized)
    raw = np.random.default_rng(seed).normal(size=(ds.n_instances, 3))
    return D, attributions(raw), ds.labels


def _grid() -> tuple[DistanceMatrix, AttributionMatrix, np.ndarray]:
    """A 3 x 3 grid with three row classes."""
    points = [[float(x), float(y)] for y in range(3) for x in range(3)]
    labels = [y for y in range(3) for _ in range(3)]
    ds = dataset(points, labels)
    f = train(ds, ForestParams(n_trees=8, min_leaf=1, seed=2))
    raw = np.random.default_rng(5).normal(size=(9, 2))
    return distance_matrix(f, ds), attributions(raw), ds.labels


def _oracle(
    prototypes: list[int], D: DistanceMatrix, A: AttributionMatrix, beta: float
) -> float:
    """Objective written out as explicit loops."""
    values = D.values
    U = A.normalized
    total = []
    for i in range(D.instance_count):
        total.append(min(values[i, j] + beta * float(np.dot(U[i], U[j])) for j in prototypes))
    return math.fsum(total)


def _distance_greedy(
    values: np.ndarray, rows: list[int], pool: list[int], best: list[float]
) -> tuple[int, float]:
    """Lowest ``sum_i min(best_i, D[i, j])`` over *pool*, scanned in ascending order."""
    choice, choice_total = -1, math.inf
    for j in pool:
        total = math.fsum(min(b, values[i, j]) for i, b in zip(rows, best))
        if total < choice_total:
            choice, choice_total = j, total
    return choice, choice_total


def _distance_only_selection(
    strategy: Strategy, budget: float, D: DistanceMatrix, labels: np.ndarray
) -> list[int]:
    """Distance-only greedy k-medoids written out without the cost model."""
    values = D.values
    n = D.instance_count
    everyone = list(range(n))
    classes = sorted(set(labels.tolist()))
    chosen: list[int] = []
    best = [math.inf] * n

    def commit(j: int) -> None:
        chosen.append(j)
        for i in everyone:
            best[i] = min(best[i], values[i, j])

    if strategy is Strategy.SMA:
        for _ in range(int(budget)):
            pool = [c for c in everyone if c not in chosen]
            j, _ = _distance_greedy(values, everyone, pool, best)
            commit(j)
    elif strategy is Strategy.GKM:
        for cls in classes:
            members = [i for i in everyone if labels[i] == cls]
            local = [math.inf] * len(members)
            for _ in range(int(budget)):
                pool = [c for c in members if c not in chosen]
                j, _ = _distance_greedy(values, members, pool, local)
                local = [min(b, values[i, j]) for i, b in zip(members, local)]
                commit(j)
    else:
        for cls in classes:
            members = [i for i in everyone if labels[i] == cls]
            j, _ = _distance_greedy(values, everyone, members, best)
            commit(j)
        while len(chosen) < n:
            previous = math.fsum(best)
            if previous == 0.0:
                break
            j, total = _distance_greedy(
                values, everyone, [c for c in everyone if c not in chosen], best
            )
            gain = (previous - total) / abs(previous)
            if gain <= 0.0 or gain < budget:
                break
            commit(j)
    return chosen


class TestFiScore:
    """Tests for fi_score."""

    def test_inner_product(self) -> None:
        """(0.36, 0.64) . (0.64, 0.36) should be 0.4608."""
        assert fi_score([0.36, 0.64], [0.64, 0.36]) == pytest.approx(0.4608, abs=1e-15)

    def test_symmetric(self) -> None:
        """fi(u, v) should equal fi(v, u)."""
        u, v = [0.2, 0.3, 0.5], [0.6, 0.1, 0.3]
        assert fi_score(u, v) == fi_score(v, u)

    def test_length_mismatch(self) -> None:
        """Vectors of different length should raise SelectionError."""
        with pytest.raises(SelectionError):
            fi_score([1.0], [0.5, 0.5])

    def test_not_a_simplex(self) -> None:
        """Vectors that do not sum to one should raise SelectionError."""
        with pytest.raises(SelectionError, match="simplex"):
            fi_score([0.5, 0.6], [0.5, 0.5])


class TestCostModel:
    """Tests for pair_cost, objective and CostModel validation."""

    def test_pair_cost(self) -> None:
        """pair_cost should be distance plus beta times fi."""
        D, A, _ = _setup()
        expected = D[1, 4] + 0.5 * float(np.dot(A.normalized[1], A.normalized[4]))
        assert pair_cost(1, 4, D, A, 0.5) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("beta", [-1.0, 0.0, 0.5, 2.0])
    def test_objective_matches_loops(self, beta: float) -> None:
        """The vectorized objective should agree with an explicit loop."""
        D, A, _ = _setup()
        prototypes = [0, 3, 7, 10]
        assert objective(prototypes, D, A, beta) == pytest.approx(
            _oracle(prototypes, D, A, beta), abs=1e-9
        )

    def test_beta_zero_needs_no_attributions(self) -> None:
        """With beta = 0 the objective is pure tree distance."""
        D, A, _ = _setup()
        assert objective([2, 5], D, None, 0.0) == objective([2, 5], D, A, 0.0)

    def test_attributions_required_for_nonzero_beta(self) -> None:
        """beta != 0 without attributions should raise."""
        D, _, _ = _setup()
        with pytest.raises(SelectionError, match="attributions are required"):
            CostModel(D, None, 1.0)

    def test_non_finite_beta(self) -> None:
        """NaN beta should raise."""
        D, A, _ = _setup()
        with pytest.raises(SelectionError):
            CostModel(D, A, float("nan"))

    def test_size_mismatch(self) -> None:
        """Attributions for another number of instances should raise."""
        D, _, _ = _setup()
        with pytest.raises(SelectionError):
            CostModel(D, attributions([[1.0, 2.0]]), 1.0)

    def test_empty_prototype_set(self) -> None:
        """The objective of no prototypes is undefined."""
        D, A, _ = _setup()
        with pytest.raises(SelectionError):
            objective([], D, A, 1.0)

    def test_on_demand_rows_give_same_costs(self) -> None:
        """A non-materialized distance matrix should give identical costs."""
        D, A, _ = _setup()
        lazy, _, _ = _setup(max_materialized=0)
        rows = np.arange(D.instance_count)
        cols = np.array([1, 6, 9])
        np.testing.assert_allclose(
            CostModel(lazy, A, 0.8).block(rows, cols),
            CostModel(D, A, 0.8).block(rows, cols),
            atol=1e-12,
        )

    def test_on_demand_selection_keeps_no_fi_state(self) -> None:
        """Greedy steps above the materialization cap should not accumulate fi rows."""
        D, A, labels = _setup(n_per_class=30, max_materialized=0)
        assert not D.is_materialized
        result = select_sma(D, A, labels, k=2, beta=1.0)
        assert len(result) == 2
        assert set(vars(A)) == {"raw", "normalized", "provider", "target_classes"}


class TestSelectSma:
    """Tests for select_sma."""

    @pytest.mark.parametrize("seed", range(20))
    def test_single_prototype_is_the_medoid(self, seed: int) -> None:
        """k = 1 should pick the candidate with the lowest objective on 50 instances."""
        D, A, labels = _setup(n_per_class=25, seed=seed)
        for beta in (-1.0, 0.0, 1.0, 2.0):
            scores = [objective([j], D, A, beta) for j in range(D.instance_count)]
            result = select_sma(D, A, labels, k=1, beta=beta)
            assert result.indices == [int(np.argmin(scores))]
            assert result.objective_trace == [min(scores)]

    def test_identical_copies_prefer_lower_index(self) -> None:
        """Among identical candidates the lowest index should win."""
        leaves = np.array([[1, 1], [0, 0], [0, 1], [0, 0], [0, 0]])
        D = DistanceMatrix(leaves, n_trees=2)
        result = select_sma(D, None, [0, 0, 0, 0, 0], k=1, beta=0.0)
        assert result.indices == [1]

    def test_labels_follow_indices(self) -> None:
        """Each prototype should carry the label of its instance."""
        D, A, labels = _setup()
        result = select_sma(D, A, labels, k=4, beta=0.5)
        assert result.labels == [int(labels[j]) for j in result.indices]
        assert len(set(result.indices)) == 4

    def test_trace_matches_objective(self) -> None:
        """The trace should hold the objective of every selected prefix."""
        D, A, labels = _setup()
        result = select_sma(D, A, labels, k=3, beta=1.0)
        for step, value in enumerate(result.objective_trace, start=1):
            assert value == objective(result.indices[:step], D, A, 1.0)

    def test_pool_chunking_does_not_change_the_result(
        self, monkeypatch: pytest.MonkeyPatch
    ) -> None:
        """Evaluating candidates one at a time should give the same prototypes and trace."""
        D, A, labels = _setup()
        whole = select_sma(D, A, labels, k=4, beta=0.5)
        monkeypatch.setattr("src.core.selection.POOL_CHUNK", 1)
        assert select_sma(D, A, labels, k=4, beta=0.5) == whole

    def test_beta_zero_ignores_attributions(self) -> None:
        """beta = 0 with attributions should equal a distance-only run."""
        D, A, labels = _setup()
        assert (
            select_sma(D, A, labels, k=3, beta=0.0).indices
            == select_sma(D, None, labels, k=3, beta=0.0).indices
        )

    @pytest.mark.parametrize("k", [0, 13])
    def test_budget_out_of_range(self, k: int) -> None:
        """k outside [1, n] should raise SelectionError."""
        D, A, labels = _setup()
        with pytest.raises(SelectionError):
            select_sma(D, A, labels, k=k, beta=0.0)

    @given(leaf_matrices)
    def test_full_budget_reaches_zero(self, leaves: list[list[int]]) -> None:
        """Selecting every instance should end at objective zero on a non-increasing trace."""
        D = DistanceMatrix(np.array(leaves), n_trees=3)
        result = select_sma(D, None, [0] * len(leaves), k=len(leaves), beta=0.0)
        trace = result.objective_trace
        assert all(a >= b for a, b in zip(trace, trace[1:]))
        assert trace[-1] == 0.0


class TestSelectGkm:
    """Tests for select_gkm."""

    def test_equal_budget_per_class_in_class_order(self) -> None:
        """Every class should get k_per_class prototypes, grouped by class."""
        D, A, labels = _setup()
        result = select_gkm(D, A, labels, k_per_class=2, beta=0.5)
        assert result.labels == [0, 0, 1, 1]
        for j, label in zip(result.indices, result.labels):
            assert labels[j] == label

    @pytest.mark.parametrize("beta", [0.0, 1.0])
    def test_first_prototype_is_class_medoid(self, beta: float) -> None:
        """With one prototype per class, each is the medoid of its own class."""
        D, A, labels = _setup()
        cost = CostModel(D, A, beta)
        result = select_gkm(D, A, labels, k_per_class=1, beta=beta)
        for cls, chosen in zip([0, 1], result.indices):
            members = np.flatnonzero(labels == cls)
            block = cost.block(members, members)
            totals = [math.fsum(block[:, c]) for c in range(members.size)]
            assert chosen == int(members[int(np.argmin(totals))])

    def test_class_smaller_than_budget(self) -> None:
        """A class with fewer members than k_per_class should raise."""
        D, A, labels = _setup(n_per_class=3)
        with pytest.raises(SelectionError, match="fewer than k_per_class"):
            select_gkm(D, A, labels, k_per_class=4, beta=0.0)

    def test_invalid_budget(self) -> None:
        """k_per_class below one should raise."""
        D, A, labels = _setup()
        with pytest.raises(SelectionError):
            select_gkm(D, A, labels, k_per_class=0, beta=0.0)


class TestSelectApete:
    """Tests for select_apete."""

    def test_unreachable_threshold_keeps_one_per_class(self) -> None:
        """A threshold above any relative improvement should stop after seeding."""
        D, A, labels = _setup()
        result = select_apete(D, A, labels, epsilon=2.0, beta=0.0)
        assert sorted(result.labels) == [0, 1]

    def test_seeds_every_class_first(self) -> None:
        """The first prototypes should cover the classes in index order."""
        D, A, labels = _grid()
        result = select_apete(D, A, labels, epsilon=0.0, beta=0.0)
        assert result.labels[:3] == [0, 1, 2]

    def test_smaller_threshold_keeps_more(self) -> None:
        """Lowering epsilon should never shrink the prototype set."""
        D, A, labels = _setup()
        loose = select_apete(D, A, labels, epsilon=0.2, beta=0.0)
        tight = select_apete(D, A, labels, epsilon=0.001, beta=0.0)
        assert len(tight) >= len(loose)
        assert tight.indices[: len(loose)] == loose.indices

    def test_four_blobs_each_get_a_prototype(self) -> None:
        """Two separated blobs per class should all be represented at epsilon 0.05."""
        rng = np.random.default_rng(11)
        centers = [(0.0, 0.0), (20.0, 0.0), (40.0, 0.0), (60.0, 0.0)]
        points = np.vstack([rng.normal(c, 1.0, size=(15, 2)) for c in centers])
        blob_of = np.repeat(np.arange(4), 15)
        ds = dataset(points, blob_of % 2)
        f = train(ds, ForestParams(n_trees=20, seed=0))

        result = select_apete(distance_matrix(f, ds), None, ds.labels, epsilon=0.05, beta=0.0)
        assert set(blob_of[result.indices]) == {0, 1, 2, 3}

    def test_negative_epsilon(self) -> None:
        """Negative thresholds should raise."""
        D, A, labels = _setup()
        with pytest.raises(SelectionError):
            select_apete(D, A, labels, epsilon=-0.1, beta=0.0)


class TestDistanceOnlyReduction:
    """beta = 0 should reduce every strategy to plain distance-based greedy k-medoids."""

    @pytest.fixture(scope="class")
    def hundred(self) -> tuple[DistanceMatrix, AttributionMatrix, np.ndarray]:
        """100 overlapping instances with a trained forest and its path attributions."""
        ds = blobs(50, seed=3, separation=2.0)
        f = train(ds, ForestParams(n_trees=20, max_depth=4, seed=3))
        return distance_matrix(f, ds), compute_attributions(f, ds), f.predict_labels(ds.features)

    @pytest.mark.parametrize(
        ("strategy", "budget"),
        [(Strategy.GKM, 3), (Strategy.SMA, 6), (Strategy.APETE, 0.01)],
    )
    def test_matches_distance_only_greedy(
        self,
        hundred: tuple[DistanceMatrix, AttributionMatrix, np.ndarray],
        strategy: Strategy,
        budget: float,
    ) -> None:
        """Indices should equal the distance-only selection, order included."""
        D, A, labels = hundred
        config = SelectionConfig(strategy=strategy, beta=0.0, **{BUDGET[strategy]: budget})
        assert select(config, D, A, labels).indices == _distance_only_selection(
            strategy, budget, D, labels
        )


class TestSelect:
    """Tests for the select dispatcher and prototype files."""

    @pytest.mark.parametrize("beta", [0.0, 1.0, 2.0])
    @pytest.mark.parametrize(
        ("strategy", "values"),
        [
            (Strategy.GKM, [1, 2, 3]),
            (Strategy.SMA, [2, 5, 8]),
            (Strategy.APETE, [0.0, 0.01, 0.2]),
        ],
    )
    def test_traces_never_increase(
        self, strategy: Strategy, values: list[float], beta: float
    ) -> None:
        """Every strategy should produce a non-increasing trace across its budgets."""
        D, A, labels = _grid()
        for value in values:
            config = SelectionConfig(strategy=strategy, beta=beta, **{BUDGET[strategy]: value})
            trace = select(config, D, A, labels).objective_trace
            assert all(a >= b for a, b in zip(trace, trace[1:]))

    def test_result_carries_config(self) -> None:
        """The returned set should carry the requested configuration."""
        D, A, labels = _setup()
        config = SelectionConfig(
            strategy=Strategy.SMA,
            k=2,
            beta=0.5,
            assignment_metric=AssignmentMetric.DISTANCE_ONLY,
        )
        assert select(config, D, A, labels).config == config

    def test_save_and_load(self, tmp_path: Path) -> None:
        """A saved set should load back equal."""
        D, A, labels = _setup()
        result = select_gkm(D, A, labels, k_per_class=2, beta=0.5)
        path = save_prototypes(result, tmp_path / "prototypes.json")
        assert load_prototypes(path) == result

    def test_load_missing_file(self, tmp_path: Path) -> None:
        """A missing prototype file should raise SelectionError."""
        with pytest.raises(SelectionError, match="not found"):
            load_prototypes(tmp_path / "absent.json")

    def test_load_invalid_file(self, tmp_path: Path) -> None:
        """Duplicate indices should be rejected on load."""
        path = tmp_path / "prototypes.json"
        path.write_text(
            '{"indices": [1, 1], "labels": [0, 0], "objective_trace": [1.0, 0.5],'
            ' "config": {"strategy": "sma", "k": 2}}'
        )
        with pytest.raises(SelectionError, match="invalid prototype file"):
            load_prototypes(path)
