"""Problem-family generators: spin grids, community graphs, CNF formulas.

All sampling uses ``numpy.random.default_rng`` (PCG64) with explicit seeds,
and every random draw happens in a pinned, documented order so that a given
seed always produces byte-identical graphs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graphs import FactorDecl, FactorGraph, FactorGraphError, build_factor_graph

# SBM pairwise tables are probabilities; clamp them away from exact 0/1 so
# every potential entry stays strictly positive.
SBM_PROB_FLOOR = 1e-6


# ---------------------------------------------------------------------------
# Spin-glass grids
# ---------------------------------------------------------------------------

def grid_edges(n: int) -> list[tuple[int, int]]:
    """Edges of an n-by-n lattice, row-major, right neighbor before down."""
    edges = []
    for row in range(n):
        for col in range(n):
            node = row * n + col
            if col + 1 < n:
                edges.append((node, node + 1))
            if row + 1 < n:
                edges.append((node, node + n))
    return edges


def sample_ising_grid(n: int, f_max: float, c_max: float, seed: int) -> FactorGraph:
    """Random n-by-n spin grid with local fields and attractive couplings.

    State 0 of each variable is spin -1 and state 1 is spin +1.  Draw order:
    the coupling strength ``c ~ U(0, c_max)``, the field strength
    ``f ~ U(0, f_max)``, then per-node fields ``J_i ~ U(-f, f)`` in node
    order, then per-edge couplings ``J_ij ~ U(0, c)`` in ``grid_edges`` order.
    Unary factor ids are 0..n*n-1 (node order); pairwise factors follow in
    edge order.
    """
    if n < 2:
        raise ValueError("grid side must be at least 2")
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.0, c_max)
    f = rng.uniform(0.0, f_max)
    n_nodes = n * n
    fields = rng.uniform(-f, f, size=n_nodes)
    edges = grid_edges(n)
    couplings = rng.uniform(0.0, c, size=len(edges))

    factors = []
    for i in range(n_nodes):
        factors.append(FactorDecl(i, (i,), np.exp([-fields[i], fields[i]])))
    for k, (i, j) in enumerate(edges):
        j_ij = couplings[k]
        agree = math.exp(j_ij)
        disagree = math.exp(-j_ij)
        table = np.array([[agree, disagree], [disagree, agree]])
        factors.append(FactorDecl(n_nodes + k, (i, j), table))
    return build_factor_graph([2] * n_nodes, factors)


# ---------------------------------------------------------------------------
# Stochastic block model posteriors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SbmSample:
    """A sampled community graph and the factor graph over its posterior."""
    assignment: np.ndarray
    edges: frozenset[tuple[int, int]]
    graph: FactorGraph


def sample_sbm(n: int, class_probs, edge_probs, seed: int) -> SbmSample:
    """Sample community assignments and edges, then build their posterior.

    Draw order: class assignments (node order, via ``rng.choice``), then one
    uniform per node pair in lexicographic (i < j) order.  The factor graph
    has a unary prior per node and one pairwise factor per pair: entry
    (c, c') is ``edge_probs[c, c']`` when the pair is linked and
    ``1 - edge_probs[c, c']`` otherwise, clamped to
    [SBM_PROB_FLOOR, 1 - SBM_PROB_FLOOR].
    """
    class_probs = np.asarray(class_probs, dtype=np.float64)
    edge_probs = np.asarray(edge_probs, dtype=np.float64)
    n_classes = class_probs.shape[0]
    if n < 2 or n_classes < 2:
        raise ValueError("need at least 2 nodes and 2 classes")
    if not math.isclose(class_probs.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("class probabilities must sum to 1")
    if edge_probs.shape != (n_classes, n_classes) or not np.allclose(edge_probs, edge_probs.T):
        raise ValueError("edge_probs must be a symmetric n_classes^2 matrix")
    if np.any(edge_probs < 0.0) or np.any(edge_probs > 1.0):
        raise ValueError("edge probabilities must lie in [0, 1]")

    rng = np.random.default_rng(seed)
    assignment = rng.choice(n_classes, size=n, p=class_probs)
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.uniform() < edge_probs[assignment[i], assignment[j]]:
                edges.add((i, j))

    clamped = np.clip(edge_probs, SBM_PROB_FLOOR, 1.0 - SBM_PROB_FLOOR)
    clamped_absent = np.clip(1.0 - edge_probs, SBM_PROB_FLOOR, 1.0 - SBM_PROB_FLOOR)
    factors = [FactorDecl(i, (i,), class_probs.copy()) for i in range(n)]
    fid = n
    for i in range(n):
        for j in range(i + 1, n):
            table = clamped if (i, j) in edges else clamped_absent
            factors.append(FactorDecl(fid, (i, j), table.copy()))
            fid += 1
    graph = build_factor_graph([n_classes] * n, factors)
    return SbmSample(assignment, frozenset(edges), graph)


def fix_variable(graph: FactorGraph, var: int, value: int) -> FactorGraph:
    """Zero out every joint state where ``var`` differs from ``value``.

    Returns a new graph with identical structure; summing exp(ln Z) of the
    fixed graphs over all values recovers the original partition function.
    """
    if not 0 <= var < graph.n_vars:
        raise FactorGraphError(f"no variable {var}")
    card = graph.cardinalities[var]
    if not 0 <= value < card:
        raise FactorGraphError(f"value {value} out of range for cardinality {card}")
    decls = []
    for factor in graph.factors:
        table = factor.potential.copy()
        if var in factor.scope:
            keep = factor.scope.index(var)
            index = [slice(None)] * len(factor.scope)
            for state in range(card):
                if state != value:
                    index[keep] = state
                    table[tuple(index)] = 0.0
        decls.append(FactorDecl(factor.index, factor.scope, table))
    return build_factor_graph(list(graph.cardinalities), decls)


def marginals_from_partitions(ln_zs) -> np.ndarray:
    """Normalize per-value log partition functions into log marginals."""
    ln_zs = np.asarray(ln_zs, dtype=np.float64)
    finite = np.isfinite(ln_zs)
    if not finite.any():
        raise ValueError("all fixed-value partition functions are zero")
    shift = ln_zs[finite].max()
    total = shift + math.log(np.exp(ln_zs[finite] - shift).sum())
    return ln_zs - total


# ---------------------------------------------------------------------------
# CNF formulas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CnfFormula:
    n_vars: int
    clauses: tuple[tuple[int, ...], ...]
    n_tautologies_dropped: int = 0


class DimacsError(ValueError):
    """Raised on malformed DIMACS CNF input."""


def parse_dimacs(text: str) -> CnfFormula:
    """Parse DIMACS CNF: comments, a 'p cnf <vars> <clauses>' header, then
    zero-terminated clauses.  Tautological clauses (x and not-x together)
    are dropped with a count; the header clause count is checked before
    dropping.  Duplicate literals within a clause are collapsed.
    """
    n_vars = None
    declared_clauses = None
    clauses: list[tuple[int, ...]] = []
    current: list[int] = []
    dropped = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("c"):
            continue
        if line.startswith("p"):
            parts = line.split()
            if len(parts) != 4 or parts[1] != "cnf":
                raise DimacsError(f"line {line_no}: bad problem line {line!r}")
            try:
                n_vars, declared_clauses = int(parts[2]), int(parts[3])
            except ValueError as exc:
                raise DimacsError(f"line {line_no}: bad problem line {line!r}") from exc
            if n_vars < 1 or declared_clauses < 0:
                raise DimacsError(f"line {line_no}: bad problem sizes")
            continue
        if n_vars is None:
            raise DimacsError(f"line {line_no}: clause before problem line")
        for token in line.split():
            try:
                literal = int(token)
            except ValueError as exc:
                raise DimacsError(f"line {line_no}: bad literal {token!r}") from exc
            if literal == 0:
                seen = []
                for lit in current:
                    if lit not in seen:
                        seen.append(lit)
                if any(-lit in seen for lit in seen):
                    dropped += 1
                else:
                    clauses.append(tuple(seen))
                current = []
            else:
                if abs(literal) > n_vars:
                    raise DimacsError(f"line {line_no}: literal {literal} exceeds {n_vars} variables")
                current.append(literal)
    if current:
        raise DimacsError("unterminated clause at end of input")
    if n_vars is None:
        raise DimacsError("missing problem line")
    if declared_clauses != len(clauses) + dropped:
        raise DimacsError(
            f"header declares {declared_clauses} clauses, found {len(clauses) + dropped}")
    return CnfFormula(n_vars, tuple(clauses), dropped)


def cnf_to_factor_graph(cnf: CnfFormula, max_arity: int = 5) -> FactorGraph:
    """Encode a CNF as a factor graph whose partition function counts models.

    Variable v of the formula (1-based) becomes graph variable v-1 with
    state 0 = false, 1 = true.  Each clause becomes a factor of ones with a
    single zero at its unique falsifying assignment: coordinate 0 for a
    positive literal, 1 for a negated one.
    """
    decls = []
    for cid, clause in enumerate(cnf.clauses):
        if not clause:
            raise FactorGraphError(f"clause {cid} is empty")
        scope = tuple(abs(lit) - 1 for lit in clause)
        table = np.ones([2] * len(clause))
        table[tuple(0 if lit > 0 else 1 for lit in clause)] = 0.0
        decls.append(FactorDecl(cid, scope, table))
    return build_factor_graph([2] * cnf.n_vars, decls, max_arity=max_arity)


def random_cnf(n_vars: int, n_clauses: int, clause_width: int, seed: int) -> CnfFormula:
    """Random k-CNF: each clause draws distinct variables and random signs."""
    if clause_width > n_vars:
        raise ValueError("clause width exceeds variable count")
    rng = np.random.default_rng(seed)
    clauses = []
    for _ in range(n_clauses):
        variables = rng.choice(n_vars, size=clause_width, replace=False) + 1
        signs = rng.integers(0, 2, size=clause_width) * 2 - 1
        clauses.append(tuple(int(v * s) for v, s in zip(variables, signs)))
    return CnfFormula(n_vars, tuple(clauses))


def cnf_to_dimacs(cnf: CnfFormula) -> str:
    lines = [f"p cnf {cnf.n_vars} {len(cnf.clauses)}"]
    for clause in cnf.clauses:
        lines.append(" ".join(str(lit) for lit in clause) + " 0")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Structured random graphs for tests
# ---------------------------------------------------------------------------

def random_tree_graph(n_vars: int, seed: int, cards=(2, 3),
                      unary_prob: float = 0.7, scale: float = 1.0) -> FactorGraph:
    """Random connected tree-structured graph with positive potentials.

    Variable v >= 1 attaches by a pairwise factor to a uniform earlier
    variable, so the bipartite graph is a tree.  Unary factors are added
    per variable with probability ``unary_prob``; potentials are
    ``exp(scale * N(0, 1))``.  Pairwise factors get ids first, unaries after.
    """
    if n_vars < 1:
        raise ValueError("need at least one variable")
    rng = np.random.default_rng(seed)
    cardinalities = [int(rng.choice(cards)) for _ in range(n_vars)]
    decls = []
    for v in range(1, n_vars):
        u = int(rng.integers(0, v))
        shape = (cardinalities[u], cardinalities[v])
        decls.append(FactorDecl(len(decls), (u, v),
                                np.exp(scale * rng.standard_normal(shape))))
    for v in range(n_vars):
        if n_vars == 1 or rng.uniform() < unary_prob:
            decls.append(FactorDecl(len(decls), (v,),
                                    np.exp(scale * rng.standard_normal(cardinalities[v]))))
    if not decls:
        decls.append(FactorDecl(0, (0,), np.exp(scale * rng.standard_normal(cardinalities[0]))))
    return build_factor_graph(cardinalities, decls)


def random_factor_graph(n_vars: int, n_factors: int, max_arity: int, seed: int,
                        cards=(2, 3), scale: float = 1.0) -> FactorGraph:
    """Random (possibly loopy) graph with positive potentials, for tests."""
    rng = np.random.default_rng(seed)
    cardinalities = [int(rng.choice(cards)) for _ in range(n_vars)]
    decls = []
    for fid in range(n_factors):
        arity = int(rng.integers(1, min(max_arity, n_vars) + 1))
        scope = tuple(int(v) for v in rng.choice(n_vars, size=arity, replace=False))
        shape = tuple(cardinalities[v] for v in scope)
        decls.append(FactorDecl(fid, scope, np.exp(scale * rng.standard_normal(shape))))
    # every variable must touch at least one factor
    covered = {v for decl in decls for v in decl.scope}
    fid = n_factors
    for v in range(n_vars):
        if v not in covered:
            decls.append(FactorDecl(fid, (v,),
                                    np.exp(scale * rng.standard_normal(cardinalities[v]))))
            fid += 1
    return build_factor_graph(cardinalities, decls)
