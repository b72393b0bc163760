"""Damped loopy belief propagation in the log domain, plus the Bethe free energy.

Messages live entirely in log space and are kept normalized so that
``logsumexp(message) == 0`` after every update; damping mixes the fresh
update with the previous message and renormalizes.  Updates are vectorized:
edges are grouped by variable cardinality and factors by table shape, so one
iteration is a fixed, deterministic sequence of batched array operations.

The same passes power the trainable layers: every array op routes through
:mod:`bpnn.autodiff`, so running with a tape attached yields gradients while
running untraced costs only the numpy work.  Factor-side damping is
pluggable -- plain BP injects the scalar convex-combination rule, learned
layers inject their own operators -- which makes "scalar-mode layer equals
the engine" an identity of code paths, not a numerical coincidence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import FactorGraph, FactorGraphError

DampRule = Callable[[Tensor, Tensor], Tensor]
MsgTransform = Callable[[Tensor], Tensor]


def logsumexp(values, axis=None) -> np.ndarray | float:
    """Max-shifted log-sum-exp; empty input errors, all ``-inf`` stays ``-inf``."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("logsumexp of empty input")
    m = np.max(arr, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.where(np.isfinite(m), safe + np.log(np.exp(arr - safe).sum(axis=axis, keepdims=True)), m)
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


# ---------------------------------------------------------------------------
# Batched message-passing layout
# ---------------------------------------------------------------------------

class _VarGroup:
    """All variables of one cardinality plus their incident edges."""

    __slots__ = ("card", "var_ids", "n_vars", "edge_ids", "edge_var_row", "excess_degree")

    def __init__(self, card: int, var_ids: np.ndarray, var_row: dict[int, int],
                 edge_ids: list[int], edge_vars: list[int], degrees: np.ndarray):
        self.card = card
        self.var_ids = var_ids
        self.n_vars = len(var_ids)
        self.edge_ids = np.asarray(edge_ids, dtype=np.intp)
        self.edge_var_row = np.asarray([var_row[v] for v in edge_vars], dtype=np.intp)
        self.excess_degree = (degrees[var_ids] - 1).astype(np.float64).reshape(-1, 1)


class _FacGroup:
    """All factors sharing one table shape, with per-position edge rows."""

    __slots__ = ("shape", "fac_ids", "log_tables", "rows_per_pos", "arity")

    def __init__(self, shape: tuple[int, ...], fac_ids: list[int],
                 log_tables: np.ndarray, rows_per_pos: list[np.ndarray]):
        self.shape = shape
        self.fac_ids = fac_ids
        self.log_tables = log_tables
        self.rows_per_pos = rows_per_pos
        self.arity = len(shape)


class EdgePlan:
    """Deterministic edge ordering and grouping for one graph."""

    def __init__(self, graph: FactorGraph):
        self.graph = graph
        edges: list[tuple[int, int, int]] = []
        for factor in graph.factors:
            for pos, var in enumerate(factor.scope):
                edges.append((factor.index, pos, var))
        self.edges = edges
        self.edge_lookup = {(fac, var): e for e, (fac, _pos, var) in enumerate(edges)}

        cards = graph.cardinalities
        self.edge_card = np.asarray([cards[var] for _f, _p, var in edges], dtype=np.intp)
        self.edge_row = np.zeros(len(edges), dtype=np.intp)

        group_cards = sorted({int(c) for c in cards})
        self.vgroups: dict[int, _VarGroup] = {}
        for card in group_cards:
            var_ids = np.asarray([i for i, c in enumerate(cards) if c == card], dtype=np.intp)
            var_row = {int(v): r for r, v in enumerate(var_ids)}
            edge_ids = [e for e in range(len(edges)) if self.edge_card[e] == card]
            for row, e in enumerate(edge_ids):
                self.edge_row[e] = row
            edge_vars = [edges[e][2] for e in edge_ids]
            self.vgroups[card] = _VarGroup(card, var_ids, var_row, edge_ids, edge_vars, graph.degrees)

        by_shape: dict[tuple[int, ...], list[int]] = {}
        for factor in graph.factors:
            by_shape.setdefault(factor.log_potential.shape, []).append(factor.index)
        self.fgroups: list[_FacGroup] = []
        for shape, fac_ids in by_shape.items():
            stacked = np.stack([graph.factors[a].log_potential for a in fac_ids])
            stacked.flags.writeable = False
            rows = []
            for pos in range(len(shape)):
                edge_ids = [self.edge_lookup[(a, graph.factors[a].scope[pos])] for a in fac_ids]
                rows.append(self.edge_row[np.asarray(edge_ids, dtype=np.intp)])
            self.fgroups.append(_FacGroup(shape, fac_ids, stacked, rows))

        self.n_edges = len(edges)
        self.fac_row = {}
        for group_index, group in enumerate(self.fgroups):
            for row, fac in enumerate(group.fac_ids):
                self.fac_row[fac] = (group_index, row)


def plan_for(graph: FactorGraph) -> EdgePlan:
    if graph._plan is None:
        graph._plan = EdgePlan(graph)
    return graph._plan


# ---------------------------------------------------------------------------
# Message state
# ---------------------------------------------------------------------------

class MessageState:
    """Normalized log-domain messages for both directions of every edge."""

    def __init__(self, plan: EdgePlan, var_to_fac: dict[int, Tensor],
                 fac_to_var: dict[int, Tensor], iteration: int):
        self.plan = plan
        self.var_to_fac_groups = var_to_fac
        self.fac_to_var_groups = fac_to_var
        self.iteration = iteration

    def _vector(self, groups: dict[int, Tensor], fac: int, var: int) -> np.ndarray:
        edge = self.plan.edge_lookup.get((fac, var))
        if edge is None:
            raise FactorGraphError(f"no edge between factor {fac} and variable {var}")
        card = int(self.plan.edge_card[edge])
        row = int(self.plan.edge_row[edge])
        return np.array(groups[card].value[row])

    def var_to_fac(self, var: int, fac: int) -> np.ndarray:
        return self._vector(self.var_to_fac_groups, fac, var)

    def fac_to_var(self, fac: int, var: int) -> np.ndarray:
        return self._vector(self.fac_to_var_groups, fac, var)


def init_messages(graph: FactorGraph) -> MessageState:
    """All-uniform normalized messages (every entry ``-ln c``)."""
    plan = plan_for(graph)
    v2f: dict[int, Tensor] = {}
    f2v: dict[int, Tensor] = {}
    for card, group in plan.vgroups.items():
        fill = np.full((len(group.edge_ids), card), -math.log(card))
        v2f[card] = Tensor(fill)
        f2v[card] = Tensor(fill.copy())
    return MessageState(plan, v2f, f2v, 0)


def scalar_damping(alpha: float) -> DampRule:
    """The convex-combination damping rule, renormalized after mixing."""
    alpha = float(alpha)

    def rule(tilde: Tensor, previous: Tensor) -> Tensor:
        if alpha == 0.0:
            return tilde
        mixed = ad.add(tilde, ad.scalar_multiply(ad.subtract(previous, tilde), alpha))
        return _renormalize(mixed)

    return rule


def _renormalize(messages: Tensor) -> Tensor:
    return ad.subtract(messages, ad.logsumexp_over(messages, axes=1, keepdims=True))


def var_to_fac_pass(plan: EdgePlan, state: MessageState, *, alpha: float,
                    double_count: bool = False,
                    msg_transform: MsgTransform | None = None) -> dict[int, Tensor]:
    """Variable-side update for every edge, damped by scalar ``alpha``."""
    damp = scalar_damping(alpha)
    out: dict[int, Tensor] = {}
    for card, group in plan.vgroups.items():
        incoming = state.fac_to_var_groups[card]
        if msg_transform is not None:
            incoming = msg_transform(incoming)
        if len(group.edge_ids) == 0:
            out[card] = incoming
            continue
        sums = ad.add_at_rows(np.zeros((group.n_vars, card)), group.edge_var_row, incoming)
        tilde = ad.take_rows(sums, group.edge_var_row)
        if not double_count:
            tilde = ad.subtract(tilde, incoming)
        tilde = _renormalize(tilde)
        out[card] = damp(tilde, state.var_to_fac_groups[card])
    return out


def fac_to_var_pass(plan: EdgePlan, fresh_v2f: dict[int, Tensor], state: MessageState, *,
                    damp: DampRule, double_count: bool = False,
                    msg_transform: MsgTransform | None = None) -> dict[int, Tensor]:
    """Factor-side update for every edge using the fresh variable messages."""
    out: dict[int, Tensor] = {
        card: Tensor(np.zeros((len(group.edge_ids), card)))
        for card, group in plan.vgroups.items()
    }
    for group in plan.fgroups:
        n_f = len(group.fac_ids)
        r = group.arity
        gathered = []
        for pos in range(r):
            card = group.shape[pos]
            msg = ad.take_rows(fresh_v2f[card], group.rows_per_pos[pos])
            if msg_transform is not None:
                msg = msg_transform(msg)
            gathered.append(msg)
        total = Tensor(group.log_tables)
        expanded = []
        for pos in range(r):
            shape = [n_f] + [1] * r
            shape[pos + 1] = group.shape[pos]
            wide = ad.reshape(gathered[pos], tuple(shape))
            expanded.append(wide)
            total = ad.add(total, wide)
        for pos in range(r):
            card = group.shape[pos]
            kept = total if double_count else ad.subtract(total, expanded[pos])
            if r == 1:
                reduced = ad.reshape(kept, (n_f, card))
            else:
                axes = tuple(j + 1 for j in range(r) if j != pos)
                reduced = ad.logsumexp_over(kept, axes=axes)
            tilde = _renormalize(reduced)
            previous = ad.take_rows(state.fac_to_var_groups[card], group.rows_per_pos[pos])
            updated = damp(tilde, previous)
            out[card] = ad.add_at_rows(out[card], group.rows_per_pos[pos], updated)
    return out


def message_delta(new: dict[int, Tensor], old: dict[int, Tensor]) -> float:
    """Max-abs entry change across all factor-to-variable messages."""
    delta = 0.0
    for card, tensor in new.items():
        if tensor.value.size == 0:
            continue
        delta = max(delta, float(np.max(np.abs(tensor.value - old[card].value))))
    return delta


def bp_iteration(graph: FactorGraph, state: MessageState, *, var_alpha: float,
                 fac_damp: DampRule, double_count: bool = False,
                 var_msg_transform: MsgTransform | None = None,
                 fac_msg_transform: MsgTransform | None = None) -> tuple[MessageState, float]:
    """One parallel sweep: all variable messages, then all factor messages."""
    plan = plan_for(graph)
    v2f = var_to_fac_pass(plan, state, alpha=var_alpha, double_count=double_count,
                          msg_transform=var_msg_transform)
    f2v = fac_to_var_pass(plan, v2f, state, damp=fac_damp, double_count=double_count,
                          msg_transform=fac_msg_transform)
    delta = message_delta(f2v, state.fac_to_var_groups)
    return MessageState(plan, v2f, f2v, state.iteration + 1), delta


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BpConfig:
    alpha: float = 0.5
    tol: float = 1e-5
    max_iters: int = 200
    schedule: str = "parallel"

    def validate(self) -> None:
        if not 0.0 <= self.alpha < 1.0:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.tol <= 0.0:
            raise ValueError("tol must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")
        if self.schedule not in ("parallel", "sequential"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


@dataclass
class BpResult:
    messages: MessageState
    converged: bool
    iterations_run: int
    delta_trace: list[float] = field(default_factory=list)


def run_bp(graph: FactorGraph, config: BpConfig = BpConfig(),
           init: MessageState | None = None) -> BpResult:
    """Iterate damped BP until the factor-message change drops to ``tol``."""
    config.validate()
    state = init if init is not None else init_messages(graph)
    if config.schedule == "sequential":
        return _run_sequential(graph, config, state)
    damp = scalar_damping(config.alpha)
    trace: list[float] = []
    converged = False
    iterations = 0
    for _ in range(config.max_iters):
        state, delta = bp_iteration(graph, state, var_alpha=config.alpha, fac_damp=damp)
        iterations += 1
        trace.append(delta)
        if delta <= config.tol:
            converged = True
            break
    return BpResult(state, converged, iterations, trace)


def _run_sequential(graph: FactorGraph, config: BpConfig, state: MessageState) -> BpResult:
    """In-place updates in edge-id order; the reference slow path."""
    plan = plan_for(graph)
    v2f = {card: np.array(t.value) for card, t in state.var_to_fac_groups.items()}
    f2v = {card: np.array(t.value) for card, t in state.fac_to_var_groups.items()}
    alpha = config.alpha

    def damped(tilde: np.ndarray, previous: np.ndarray) -> np.ndarray:
        if alpha == 0.0:
            return tilde
        mixed = tilde + alpha * (previous - tilde)
        return mixed - logsumexp(mixed)

    trace: list[float] = []
    converged = False
    iterations = 0
    for _ in range(config.max_iters):
        for e, (fac, _pos, var) in enumerate(plan.edges):
            card = int(plan.edge_card[e])
            row = int(plan.edge_row[e])
            tilde = np.zeros(card)
            for other_fac, other_pos in graph.adjacency[var]:
                if other_fac == fac:
                    continue
                oe = plan.edge_lookup[(other_fac, var)]
                tilde = tilde + f2v[int(plan.edge_card[oe])][int(plan.edge_row[oe])]
            tilde = tilde - logsumexp(tilde)
            v2f[card][row] = damped(tilde, v2f[card][row])
        delta = 0.0
        for e, (fac, pos, var) in enumerate(plan.edges):
            card = int(plan.edge_card[e])
            row = int(plan.edge_row[e])
            factor = graph.factors[fac]
            table = np.array(factor.log_potential)
            for other_pos, other_var in enumerate(factor.scope):
                if other_pos == pos:
                    continue
                oe = plan.edge_lookup[(fac, other_var)]
                vec = v2f[int(plan.edge_card[oe])][int(plan.edge_row[oe])]
                shape = [1] * factor.arity
                shape[other_pos] = len(vec)
                table = table + vec.reshape(shape)
            axes = tuple(j for j in range(factor.arity) if j != pos)
            reduced = logsumexp(table, axis=axes) if axes else table
            tilde = reduced - logsumexp(reduced)
            updated = damped(tilde, f2v[card][row])
            delta = max(delta, float(np.max(np.abs(updated - f2v[card][row]))))
            f2v[card][row] = updated
        iterations += 1
        trace.append(delta)
        if delta <= config.tol:
            converged = True
            break
    final = MessageState(plan,
                         {card: Tensor(arr) for card, arr in v2f.items()},
                         {card: Tensor(arr) for card, arr in f2v.items()},
                         iterations)
    return BpResult(final, converged, iterations, trace)


def export_delta_trace(result: BpResult, handle) -> None:
    """Write the per-iteration convergence trace as ``iteration,max_delta`` CSV."""
    handle.write("iteration,max_delta\n")
    for i, delta in enumerate(result.delta_trace, start=1):
        handle.write(f"{i},{delta!r}\n")


# ---------------------------------------------------------------------------
# Beliefs and the Bethe free energy
# ---------------------------------------------------------------------------

class BeliefSet:
    """Normalized log-domain variable and factor beliefs."""

    def __init__(self, plan: EdgePlan, var_groups: dict[int, Tensor],
                 fac_groups: list[Tensor]):
        self.plan = plan
        self.var_groups = var_groups
        self.fac_groups = fac_groups

    def variable_belief(self, var: int) -> np.ndarray:
        card = int(self.plan.graph.cardinalities[var])
        group = self.plan.vgroups[card]
        row = int(np.searchsorted(group.var_ids, var))
        return np.array(self.var_groups[card].value[row])

    def factor_belief(self, fac: int) -> np.ndarray:
        group_index, row = self.plan.fac_row[fac]
        return np.array(self.fac_groups[group_index].value[row])


def compute_beliefs(graph: FactorGraph, state: MessageState) -> BeliefSet:
    """Beliefs induced by a message state (Bethe marginals)."""
    plan = plan_for(graph)
    var_groups: dict[int, Tensor] = {}
    for card, group in plan.vgroups.items():
        sums = ad.add_at_rows(np.zeros((group.n_vars, card)), group.edge_var_row,
                              state.fac_to_var_groups[card])
        var_groups[card] = _renormalize(sums)
    fac_groups: list[Tensor] = []
    for group in plan.fgroups:
        n_f = len(group.fac_ids)
        r = group.arity
        total = Tensor(group.log_tables)
        for pos in range(r):
            card = group.shape[pos]
            msg = ad.take_rows(state.var_to_fac_groups[card], group.rows_per_pos[pos])
            shape = [n_f] + [1] * r
            shape[pos + 1] = card
            total = ad.add(total, ad.reshape(msg, tuple(shape)))
        axes = tuple(range(1, r + 1))
        norm = ad.logsumexp_over(total, axes=axes, keepdims=True)
        fac_groups.append(ad.subtract(total, norm))
    return BeliefSet(plan, var_groups, fac_groups)


@dataclass(frozen=True)
class BetheTerms:
    average_energy: float
    entropy: float
    free_energy: float
    ln_z_estimate: float


def bethe_terms_traced(graph: FactorGraph, beliefs: BeliefSet) -> tuple[Tensor, Tensor]:
    """Average energy and Bethe entropy as traced scalars.

    Beliefs are exponentiated from their logs, so a state excluded by a
    clamped-zero potential contributes exactly ``0 * LOG_ZERO == 0`` to both
    terms (the ``0 ln 0`` limit convention).
    """
    plan = plan_for(graph)
    energy_parts: list[Tensor] = []
    entropy_parts: list[Tensor] = []
    for group_index, group in enumerate(plan.fgroups):
        log_b = beliefs.fac_groups[group_index]
        b = ad.exp(log_b)
        energy_parts.append(ad.sum_over(ad.multiply(b, Tensor(group.log_tables))))
        entropy_parts.append(ad.sum_over(ad.multiply(b, log_b)))
    for card, group in plan.vgroups.items():
        log_b = beliefs.var_groups[card]
        b = ad.exp(log_b)
        weighted = ad.multiply(Tensor(group.excess_degree), ad.multiply(b, log_b))
        entropy_parts.append(ad.scalar_multiply(ad.sum_over(weighted), -1.0))
    zero = Tensor(np.zeros(()))
    energy = zero
    for part in energy_parts:
        energy = ad.add(energy, part)
    energy = ad.scalar_multiply(energy, -1.0)
    entropy = zero
    for part in entropy_parts:
        entropy = ad.add(entropy, part)
    entropy = ad.scalar_multiply(entropy, -1.0)
    return energy, entropy


def bethe_free_energy(graph: FactorGraph, beliefs: BeliefSet) -> BetheTerms:
    """``F = U - H``; the partition estimate is ``-F``."""
    energy, entropy = bethe_terms_traced(graph, beliefs)
    u = float(energy.value)
    h = float(entropy.value)
    return BetheTerms(u, h, u - h, h - u)


def bethe_ln_z(graph: FactorGraph, state: MessageState) -> float:
    return bethe_free_energy(graph, compute_beliefs(graph, state)).ln_z_estimate
