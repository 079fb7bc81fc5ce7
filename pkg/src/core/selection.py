"""Greedy k-medoids prototype selection in tree space, optionally informed by attributions.

The cost of representing instance ``i`` by prototype ``j`` is

    cost(i, j) = D[i, j] + beta * fi(i, j)

where ``fi`` is the inner product of the two normalized attribution rows. With
``beta = 0`` this is the plain tree-distance k-medoids objective. All objective
values are summed with :func:`math.fsum`, so they do not depend on evaluation order.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from src.core.attribution import AttributionMatrix
from src.core.proximity import DistanceMatrix
from src.models.errors import SelectionError
from src.models.records import PrototypeSet, SelectionConfig, Strategy

logger = logging.getLogger(__name__)

SIMPLEX_TOLERANCE = 1e-9
# Candidates whose cost columns are evaluated together in one greedy step.
POOL_CHUNK = 512


def _check_simplex(name: str, vector: np.ndarray) -> None:
    if (vector < 0).any() or abs(vector.sum() - 1.0) > SIMPLEX_TOLERANCE:
        raise SelectionError(f"{name} is not a simplex vector (sum={vector.sum()!r})")


def fi_score(u_hat: np.ndarray | list[float], v_hat: np.ndarray | list[float]) -> float:
    """Alignment of two normalized attribution vectors: ``sum_l u_l * v_l``.

    Raises:
        SelectionError: If lengths differ or either input is not a simplex vector.
    """
    u = np.asarray(u_hat, dtype=np.float64)
    v = np.asarray(v_hat, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1:
        raise SelectionError(f"fi_score needs equal-length vectors, got {u.shape} and {v.shape}")
    _check_simplex("u_hat", u)
    _check_simplex("v_hat", v)
    return float(np.dot(u, v))


class CostModel:
    """Combined assignment costs over one distance matrix and attribution matrix.

    fi values come from the attribution matrix's cache, so each pair is computed
    at most once however many selections reuse the same inputs.
    """

    def __init__(self, D: DistanceMatrix, A: AttributionMatrix | None, beta: float) -> None:
        """Bind the inputs.

        Args:
            D: Tree distances between training instances.
            A: Attributions for the same instances; may be ``None`` when ``beta == 0``.
            beta: Weight of the fi term.

        Raises:
            SelectionError: If shapes disagree or ``beta`` is not finite.
        """
        if not math.isfinite(beta):
            raise SelectionError(f"beta must be finite, got {beta}")
        if A is None and beta != 0.0:
            raise SelectionError("attributions are required when beta != 0")
        if A is not None and A.n_instances != D.instance_count:
            raise SelectionError(
                f"attributions cover {A.n_instances} instances, distances {D.instance_count}"
            )
        self.D = D
        self.A = A
        self.beta = beta

    @property
    def n(self) -> int:
        """Number of instances."""
        return self.D.instance_count

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.n:
            raise SelectionError(f"instance index {index} outside [0, {self.n})")

    def fi(self, i: int, j: int) -> float:
        """Cached fi value between instances *i* and *j*."""
        if self.A is None:
            raise SelectionError("no attributions bound to this cost model")
        if self.D.is_materialized:
            return float(self.A.fi_matrix[i, j])
        return float(self.A.fi_block([i], [j])[0, 0])

    def pair_cost(self, i: int, j: int) -> float:
        """``D[i, j] + beta * fi(i, j)``."""
        self._check_index(i)
        self._check_index(j)
        distance = self.D[i, j]
        if self.beta == 0.0:
            return distance
        return distance + self.beta * self.fi(i, j)

    def block(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Costs of representing each of *rows* by each of *cols*."""
        distances = self.D.block(rows, cols)
        if self.beta == 0.0:
            return distances
        if self.D.is_materialized:
            fi = self.A.fi_matrix[np.ix_(rows, cols)]
        else:
            fi = self.A.fi_block(rows, cols)
        return distances + self.beta * fi

    def objective(self, prototypes: list[int] | np.ndarray) -> float:
        """``sum_i min_{j in P} cost(i, j)`` over all instances."""
        protos = np.asarray(prototypes, dtype=np.int64)
        if protos.size == 0:
            raise SelectionError("objective is undefined for an empty prototype set")
        for j in protos:
            self._check_index(int(j))
        costs = self.block(np.arange(self.n), protos)
        return math.fsum(costs.min(axis=1))


def pair_cost(
    i: int, j: int, D: DistanceMatrix, A: AttributionMatrix | None, beta: float
) -> float:
    """Cost of assigning instance *i* to prototype *j*; see :class:`CostModel`."""
    return CostModel(D, A, beta).pair_cost(i, j)


def objective(
    prototypes: list[int] | np.ndarray,
    D: DistanceMatrix,
    A: AttributionMatrix | None,
    beta: float,
) -> float:
    """Combined k-medoids objective of *prototypes*; see :class:`CostModel`."""
    return CostModel(D, A, beta).objective(prototypes)


def _cheapest(
    current: np.ndarray, cost: CostModel, rows: np.ndarray, pool: np.ndarray
) -> tuple[int, float]:
    """Candidate in *pool* whose addition gives the lowest ``sum(min(current, cost))``.

    Costs are evaluated ``POOL_CHUNK`` candidates at a time; the lowest index wins ties.
    """
    totals: list[float] = []
    for start in range(0, pool.size, POOL_CHUNK):
        costs = cost.block(rows, pool[start : start + POOL_CHUNK])
        totals.extend(math.fsum(column) for column in np.minimum(current[:, None], costs).T)
    k = int(np.argmin(totals))
    return int(pool[k]), totals[k]

class _GreedyState:
    """Selected prototypes with the running per-instance minimum cost."""

    def __init__(self, cost: CostModel) -> None:
        self.cost = cost
        self.everyone = np.arange(cost.n)
        self.selected: list[int] = []
        self.trace: list[float] = []
        self.best = np.full(cost.n, np.inf)

    def pool(self, members: np.ndarray) -> np.ndarray:
        """Members not yet selected, ascending."""
        taken = np.asarray(self.selected, dtype=np.int64)
        return np.setdiff1d(members, taken)

    def best_candidate(self, pool: np.ndarray) -> tuple[int, float]:
        """Candidate in *pool* minimizing the global objective."""
        return _cheapest(self.best, self.cost, self.everyone, pool)

    def add(self, index: int) -> float:
        """Commit *index*; returns and records the global objective."""
        self.selected.append(index)
        column = self.cost.block(self.everyone, np.array([index]))[:, 0]
        self.best = np.minimum(self.best, column)
        value = math.fsum(self.best)
        self.trace.append(value)
        logger.debug("Added prototype %d, objective %.6f", index, value)
        return value


def _as_labels(labels: np.ndarray | list[int], n: int) -> np.ndarray:
    arr = np.asarray(labels, dtype=np.int64)
    if arr.shape != (n,):
        raise SelectionError(f"expected {n} labels, got shape {arr.shape}")
    return arr


def _result(state: _GreedyState, labels: np.ndarray, config: SelectionConfig) -> PrototypeSet:
    prototypes = PrototypeSet(
        indices=list(state.selected),
        labels=[int(labels[j]) for j in state.selected],
        objective_trace=list(state.trace),
        config=config,
    )
    logger.info(
        "Selected %d prototypes with %s (beta=%s); final objective %.6f",
        len(prototypes),
        config.strategy.value,
        config.beta,
        state.trace[-1] if state.trace else float("nan"),
    )
    return prototypes


def select_sma(
    D: DistanceMatrix,
    A: AttributionMatrix | None,
    labels: np.ndarray | list[int],
    k: int,
    beta: float,
) -> PrototypeSet:
    """Global greedy: add the candidate with the best objective until *k* are chosen.

    Raises:
        SelectionError: If ``k`` is outside ``[1, n]``.
    """
    cost = CostModel(D, A, beta)
    y = _as_labels(labels, cost.n)
    if not 1 <= k <= cost.n:
        raise SelectionError(f"k must lie in [1, {cost.n}], got {k}")
    state = _GreedyState(cost)
    for _ in range(k):
        candidate, _ = state.best_candidate(state.pool(state.everyone))
        state.add(candidate)
    return _result(state, y, SelectionConfig(strategy=Strategy.SMA, k=k, beta=beta))


def select_gkm(
    D: DistanceMatrix,
    A: AttributionMatrix | None,
    labels: np.ndarray | list[int],
    k_per_class: int,
    beta: float,
) -> PrototypeSet:
    """Greedy k-medoids inside every class with an equal budget per class.

    Each class only sees its own instances, both as the rows being covered and as
    candidates. Prototypes are ordered by (class, selection step).

    Raises:
        SelectionError: If ``k_per_class < 1`` or a class has fewer members.
    """
    cost = CostModel(D, A, beta)
    y = _as_labels(labels, cost.n)
    if k_per_class < 1:
        raise SelectionError(f"k_per_class must be >= 1, got {k_per_class}")
    classes = np.unique(y)
    for cls in classes:
        size = int((y == cls).sum())
        if size < k_per_class:
            raise SelectionError(
                f"class {int(cls)} has {size} members, fewer than k_per_class={k_per_class}"
            )

    state = _GreedyState(cost)
    for cls in classes:
        members = np.flatnonzero(y == cls)
        # Only this class's own prototypes count towards its objective.
        local = np.full(members.size, np.inf)
        for _ in range(k_per_class):
            pool = state.pool(members)
            candidate, _ = _cheapest(local, cost, members, pool)
            local = np.minimum(local, cost.block(members, np.array([candidate]))[:, 0])
            state.add(candidate)
    config = SelectionConfig(strategy=Strategy.GKM, k_per_class=k_per_class, beta=beta)
    return _result(state, y, config)


def select_apete(
    D: DistanceMatrix,
    A: AttributionMatrix | None,
    labels: np.ndarray | list[int],
    epsilon: float,
    beta: float,
) -> PrototypeSet:
    """Greedy selection that stops on small relative improvement.

    Every class is first seeded with its best greedy candidate (classes in index
    order). Afterwards the globally best candidate is added while its relative
    improvement ``(f_prev - f_cand) / |f_prev|`` is positive and at least *epsilon*;
    the loop also stops once the objective reaches zero.

    Raises:
        SelectionError: If ``epsilon`` is negative or not finite.
    """
    if not math.isfinite(epsilon) or epsilon < 0:
        raise SelectionError(f"epsilon must be a finite value >= 0, got {epsilon}")
    cost = CostModel(D, A, beta)
    y = _as_labels(labels, cost.n)
    state = _GreedyState(cost)

    for cls in np.unique(y):
        candidate, _ = state.best_candidate(np.flatnonzero(y == cls))
        state.add(candidate)

    while True:
        pool = state.pool(state.everyone)
        f_prev = state.trace[-1]
        if pool.size == 0 or f_prev == 0.0:
            break
        candidate, f_candidate = state.best_candidate(pool)
        improvement = (f_prev - f_candidate) / abs(f_prev)
        if improvement <= 0.0 or improvement < epsilon:
            logger.debug("Stopping: relative improvement %.6g < epsilon %.6g", improvement, epsilon)
            break
        state.add(candidate)

    config = SelectionConfig(strategy=Strategy.APETE, epsilon=epsilon, beta=beta)
    return _result(state, y, config)


def select(
    config: SelectionConfig,
    D: DistanceMatrix,
    A: AttributionMatrix | None,
    labels: np.ndarray | list[int],
) -> PrototypeSet:
    """Run the strategy named by *config*; the returned set carries *config*."""
    if config.strategy is Strategy.SMA:
        result = select_sma(D, A, labels, config.k, config.beta)
    elif config.strategy is Strategy.GKM:
        result = select_gkm(D, A, labels, config.k_per_class, config.beta)
    else:
        result = select_apete(D, A, labels, config.epsilon, config.beta)
    return result.model_copy(update={"config": config})


def save_prototypes(prototypes: PrototypeSet, path: str | Path) -> Path:
    """Write *prototypes* as canonical JSON."""
    path = Path(path)
    prototypes.save(path)
    logger.info("Saved %d prototypes to %s", len(prototypes), path)
    return path


def load_prototypes(path: str | Path) -> PrototypeSet:
    """Read a prototype set written by :func:`save_prototypes`.

    Raises:
        SelectionError: If the file is missing or does not describe a valid set.
    """
    path = Path(path)
    try:
        return PrototypeSet.load(path)
    except FileNotFoundError as e:
        raise SelectionError(f"prototype file not found: {path}") from e
    except ValidationError as e:
        logger.error("Invalid prototype file %s", path)
        raise SelectionError(f"invalid prototype file {path}: {e}") from e
