"""Exact partition-function oracles.

Two independent routes to ln Z: direct enumeration of the joint state space
(streaming log-sum-exp over fixed-size blocks) and variable elimination in
the log domain.  Both treat genuinely zero potential entries as ``-inf``
rather than the clamped sentinel used by message passing, so inconsistent
instances report ``is_zero`` exactly.  A chunked CNF model counter provides a
third, graph-free route for satisfiability instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graphs import FactorGraph, FactorGraphError

# Enumeration refuses state spaces beyond this many joint assignments.
DEFAULT_STATE_CAP = 2 ** 24
# Block size for streaming enumeration and model counting.
_BLOCK_STATES = 2 ** 16


@dataclass(frozen=True)
class ExactResult:
    ln_z: float
    is_zero: bool


def _finish(ln_z: float) -> ExactResult:
    return ExactResult(float(ln_z), not math.isfinite(ln_z))


def _oracle_log_table(factor) -> np.ndarray:
    """Log potentials with true ``-inf`` at zero entries."""
    with np.errstate(divide="ignore"):
        table = np.log(factor.potential)
    return np.where(factor.potential > 0.0, table, -np.inf)


def _lse(values: np.ndarray, axis=None, keepdims: bool = False) -> np.ndarray:
    m = np.max(values, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.where(np.isfinite(m), safe + np.log(np.exp(values - safe).sum(axis=axis, keepdims=True)), m)
    if keepdims or axis is None and out.ndim == 0:
        return out
    return np.squeeze(out, axis=axis) if axis is not None else np.squeeze(out)


def brute_force_ln_z(graph: FactorGraph, cap: int = DEFAULT_STATE_CAP) -> ExactResult:
    """Enumerate every joint assignment and accumulate ln Z blockwise.

    The joint table is materialized over a suffix of the variables small
    enough to fit one block; the remaining prefix assignments are walked one
    at a time, so memory stays bounded regardless of the total count.
    """
    total_states = graph.state_space_size
    if total_states > cap:
        raise FactorGraphError(
            f"state space {total_states} exceeds enumeration cap {cap}")

    cards = [int(c) for c in graph.cardinalities]
    n = len(cards)
    split = n
    suffix_states = 1
    while split > 0 and suffix_states * cards[split - 1] <= _BLOCK_STATES:
        split -= 1
        suffix_states *= cards[split]
    suffix_shape = tuple(cards[split:])
    tables = [(f.scope, _oracle_log_table(f)) for f in graph.factors]

    block_lses: list[float] = []
    for prefix in np.ndindex(*cards[:split]):
        joint = np.zeros(suffix_shape, dtype=np.float64)
        for scope, table in tables:
            index = tuple(prefix[v] if v < split else slice(None) for v in scope)
            sliced = table[index]
            suffix_vars = [v for v in scope if v >= split]
            if suffix_vars:
                order = np.argsort(np.asarray(suffix_vars, dtype=np.intp), kind="stable")
                sliced = np.transpose(sliced, tuple(order))
                shape = [1] * (n - split)
                for v in suffix_vars:
                    shape[v - split] = cards[v]
                sliced = sliced.reshape(shape)
            joint = joint + sliced
        block_lses.append(float(_lse(joint)))
    return _finish(float(_lse(np.asarray(block_lses))))


def min_degree_order(graph: FactorGraph) -> list[int]:
    """Greedy elimination order: repeatedly take the variable with the
    fewest uneliminated neighbors (ties broken by smallest id)."""
    neighbors: list[set[int]] = [set() for _ in range(graph.n_vars)]
    for factor in graph.factors:
        for v in factor.scope:
            neighbors[v].update(u for u in factor.scope if u != v)
    remaining = set(range(graph.n_vars))
    order: list[int] = []
    while remaining:
        best = min(remaining, key=lambda v: (len(neighbors[v] & remaining), v))
        order.append(best)
        live = neighbors[best] & remaining
        for u in live:
            neighbors[u].update(w for w in live if w != u)
        remaining.remove(best)
    return order


def variable_elimination_ln_z(graph: FactorGraph, order: list[int] | None = None,
                              cap: int = DEFAULT_STATE_CAP) -> ExactResult:
    """Eliminate variables one at a time, summing each out of the combined
    log tables that mention it.  Intermediate tables larger than ``cap``
    entries abort with an error (the elimination width is too large)."""
    if order is None:
        order = min_degree_order(graph)
    if sorted(order) != list(range(graph.n_vars)):
        raise FactorGraphError("elimination order must be a permutation of the variables")

    cards = graph.cardinalities
    # Active tables normalized to ascending-variable axis order.
    active: list[tuple[tuple[int, ...], np.ndarray]] = []
    for factor in graph.factors:
        axis_order = np.argsort(np.asarray(factor.scope, dtype=np.intp), kind="stable")
        vars_sorted = tuple(factor.scope[i] for i in axis_order)
        active.append((vars_sorted, np.transpose(_oracle_log_table(factor), tuple(axis_order))))

    constant = 0.0
    for v in order:
        touching = [entry for entry in active if v in entry[0]]
        if not touching:
            constant += math.log(int(cards[v]))
            continue
        active = [entry for entry in active if v not in entry[0]]
        union = sorted({u for vars_, _ in touching for u in vars_})
        width = math.prod(int(cards[u]) for u in union)
        if width > cap:
            raise FactorGraphError(
                f"elimination produces a table of {width} entries, beyond cap {cap}")
        combined = np.full(tuple(int(cards[u]) for u in union), 0.0, dtype=np.float64)
        for vars_, table in touching:
            shape = [1] * len(union)
            for axis, u in enumerate(vars_):
                shape[union.index(u)] = int(cards[u])
            combined = combined + table.reshape(shape)
        axis = union.index(v)
        reduced = _lse(combined, axis=axis)
        rest = tuple(u for u in union if u != v)
        if rest:
            active.append((rest, np.asarray(reduced)))
        else:
            constant += float(reduced)
    for vars_, table in active:
        raise FactorGraphError(f"elimination left an unreduced table over {vars_}")
    return _finish(constant)


def brute_force_model_count(cnf, cap_vars: int = 24) -> int:
    """Count satisfying assignments of a CNF formula by chunked enumeration.

    ``cnf`` needs ``n_vars`` and ``clauses`` (tuples of signed DIMACS
    literals).  Variable ``i`` (1-based) maps to bit ``i - 1`` of the
    assignment index; bit value 1 means true.
    """
    n = int(cnf.n_vars)
    if n > cap_vars:
        raise FactorGraphError(f"model counting capped at {cap_vars} variables, got {n}")
    clauses = [tuple(int(l) for l in clause) for clause in cnf.clauses]
    total = 1 << n
    count = 0
    for start in range(0, total, _BLOCK_STATES):
        idx = np.arange(start, min(start + _BLOCK_STATES, total), dtype=np.uint64)
        sat = np.ones(idx.shape, dtype=bool)
        for clause in clauses:
            clause_sat = np.zeros(idx.shape, dtype=bool)
            for lit in clause:
                bit = (idx >> np.uint64(abs(lit) - 1)) & np.uint64(1)
                clause_sat |= (bit == 1) if lit > 0 else (bit == 0)
            sat &= clause_sat
        count += int(sat.sum())
    return count
