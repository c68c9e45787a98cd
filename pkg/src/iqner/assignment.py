"""Dynamic one-to-many label assignment between instance queries and entities.

The matching cost of query i and entity k is the negated sum of the query's
predicted probabilities at the entity's type, left boundary, and right
boundary. Each entity k receives an assignable quantity q_k of queries; the
optimal assignment replicates entity columns q_k times and solves the
resulting rectangular problem exactly with a shortest-augmenting-path
Hungarian kernel. Queries left unmatched take the None label through an
extra column.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .data import AnnotationError, EntityAnnotation
from .tensor import NumericError

BRUTE_FORCE_LIMIT = 8


class InfeasibleError(ValueError):
    """More assignments demanded than queries available."""


class CapacityError(ValueError):
    """Instance too large for exhaustive enumeration."""


@dataclass(frozen=True)
class QuantityVector:
    """Per-entity assignable quantities q_k with their total Q."""

    counts: np.ndarray
    overflow: bool = False

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=np.int64)
        object.__setattr__(self, "counts", counts)
        if counts.ndim != 1 or counts.size == 0 or np.any(counts < 1):
            raise ValueError("quantities must be a nonempty vector of positive integers")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __len__(self) -> int:
        return len(self.counts)


@dataclass
class AssignmentResult:
    """Binary assignment A, its None-extended form, and per-query label indices.

    ``labels[i]`` is the entity index assigned to query i, or G (the None
    column) when query i went unassigned.
    """

    matrix: np.ndarray
    extended: np.ndarray
    labels: np.ndarray
    total_cost: float


def compute_cost_matrix(scores, types, gold: list[EntityAnnotation]) -> np.ndarray:
    """Cost[i][k] = -(P_type + P_left + P_right) for query i and gold entity k."""
    if not gold:
        raise AnnotationError("cost matrix requires at least one gold entity")
    left = scores.left.data
    right = scores.right.data
    type_probs = types.probs
    n = left.shape[1]
    type_count = type_probs.shape[1] - 1
    for e in gold:
        if e.right >= n:
            raise AnnotationError(f"gold span ({e.left}, {e.right}) outside sentence of length {n}")
        if e.type_id >= type_count:
            raise AnnotationError(f"gold type {e.type_id} outside inventory of size {type_count}")
    lefts = np.array([e.left for e in gold])
    rights = np.array([e.right for e in gold])
    type_ids = np.array([e.type_id for e in gold])
    cost = -(type_probs[:, type_ids] + left[:, lefts] + right[:, rights])
    if not np.all(np.isfinite(cost)):
        raise NumericError("non-finite assignment costs")
    return cost


def allocate_quantities(
    entity_count: int,
    query_count: int,
    ratio: float,
    rng: np.random.Generator | int | None = None,
) -> QuantityVector:
    """Split the total assignable quantity Q = round(M * ratio) over entities.

    Every entity gets at least floor(Q / G); the remainder goes to a seeded
    random subset. When entities outnumber Q the total is raised to one per
    entity, flagged as overflow if that exceeds the query count.
    """
    if entity_count < 1 or query_count < 1:
        raise ValueError("entity and query counts must be positive")
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1], got {ratio}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    total = int(np.floor(query_count * ratio + 0.5))
    if entity_count > total:
        return QuantityVector(
            counts=np.ones(entity_count, dtype=np.int64),
            overflow=entity_count > query_count,
        )
    base, remainder = divmod(total, entity_count)
    counts = np.full(entity_count, base, dtype=np.int64)
    if remainder:
        bump = rng.choice(entity_count, size=remainder, replace=False)
        counts[bump] += 1
    return QuantityVector(counts=counts)


def _shortest_augmenting_path(cost: np.ndarray) -> np.ndarray:
    """Exact min-cost assignment of every row of an n x m (n <= m) matrix.

    Returns the matched column per row. Jonker-Volgenant style potentials;
    ties resolve to the lowest column index, so results are deterministic.
    """
    n, m = cost.shape
    u = np.zeros(n)
    v = np.zeros(m + 1)
    owner = np.full(m + 1, -1, dtype=np.int64)  # owner[m] is the virtual column
    for row in range(n):
        owner[m] = row
        j0 = m
        min_reduced = np.full(m, np.inf)
        prev_col = np.full(m, m, dtype=np.int64)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            active = owner[j0]
            reduced = cost[active] - u[active] - v[:m]
            unused = ~used[:m]
            improved = unused & (reduced < min_reduced)
            min_reduced[improved] = reduced[improved]
            prev_col[improved] = j0
            candidates = np.where(unused, min_reduced, np.inf)
            j1 = int(np.argmin(candidates))
            delta = candidates[j1]
            used_cols = np.flatnonzero(used)
            u[owner[used_cols]] += delta
            v[used_cols] -= delta
            min_reduced[unused] -= delta
            j0 = j1
            if owner[j0] < 0:
                break
        while j0 != m:
            j_prev = prev_col[j0]
            owner[j0] = owner[j_prev]
            j0 = j_prev
    col_for_row = np.empty(n, dtype=np.int64)
    col_for_row[owner[np.flatnonzero(owner[:m] >= 0)]] = np.flatnonzero(owner[:m] >= 0)
    return col_for_row


def _fold_matches(
    cost: np.ndarray, entity_of_column: np.ndarray, query_of_column: np.ndarray
) -> AssignmentResult:
    queries, entities = cost.shape
    matrix = np.zeros((queries, entities), dtype=np.int64)
    matrix[query_of_column, entity_of_column] = 1
    labels = np.full(queries, entities, dtype=np.int64)
    labels[query_of_column] = entity_of_column
    extended = np.zeros((queries, entities + 1), dtype=np.int64)
    extended[np.arange(queries), labels] = 1
    total = float(cost[query_of_column, entity_of_column].sum())
    return AssignmentResult(matrix=matrix, extended=extended, labels=labels, total_cost=total)


def solve_one_to_many_lap(cost: np.ndarray, quantities: QuantityVector) -> AssignmentResult:
    """Optimal assignment giving entity k exactly q_k distinct queries."""
    cost = np.asarray(cost, dtype=np.float64)
    queries, entities = cost.shape
    if len(quantities) != entities:
        raise ValueError(f"{len(quantities)} quantities for {entities} entities")
    if quantities.total > queries:
        raise InfeasibleError(
            f"total assignable quantity {quantities.total} exceeds {queries} queries"
        )
    entity_of_column = np.repeat(np.arange(entities), quantities.counts)
    replicated = cost[:, entity_of_column]
    query_of_column = _shortest_augmenting_path(replicated.T)
    return _fold_matches(cost, entity_of_column, query_of_column)


def brute_force_lap(cost: np.ndarray, quantities: QuantityVector) -> AssignmentResult:
    """Exhaustive-enumeration oracle for the one-to-many assignment."""
    cost = np.asarray(cost, dtype=np.float64)
    queries, entities = cost.shape
    if len(quantities) != entities:
        raise ValueError(f"{len(quantities)} quantities for {entities} entities")
    if quantities.total > queries:
        raise InfeasibleError(
            f"total assignable quantity {quantities.total} exceeds {queries} queries"
        )
    if queries > BRUTE_FORCE_LIMIT or quantities.total > BRUTE_FORCE_LIMIT:
        raise CapacityError(
            f"enumeration supports at most {BRUTE_FORCE_LIMIT} queries and columns"
        )
    entity_of_column = np.repeat(np.arange(entities), quantities.counts)
    replicated = cost[:, entity_of_column]
    best_cost = np.inf
    best = None
    for perm in permutations(range(queries), quantities.total):
        rows = np.array(perm)
        total = replicated[rows, np.arange(quantities.total)].sum()
        if total < best_cost:
            best_cost = total
            best = rows
    assert best is not None
    return _fold_matches(cost, entity_of_column, best)


def labels_from_assignment(
    result: AssignmentResult, gold: list[EntityAnnotation]
) -> list[EntityAnnotation | None]:
    """Per-query labels: the assigned gold entity, or None when unmatched."""
    entities = len(gold)
    return [gold[k] if k < entities else None for k in result.labels]
