"""Discrete factor graphs with dense log-domain potential tables.

A factor graph holds variables with explicit cardinalities and factors with
ordered scopes.  Potentials are supplied in the exponential domain (entries
``>= 0``); zero entries are clamped to the finite sentinel :data:`LOG_ZERO`
in the log-domain table so message passing never manufactures NaN, while the
original exponential-domain table is kept for exact-oracle zero detection and
value-exact serialization.

The module also implements structure-preserving relabelings (variable ids,
factor ids, and per-factor scope-position permutations) used to check that
inference treats isomorphic graphs identically.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

# Finite stand-in for ln(0).  exp(LOG_ZERO) underflows to exactly 0.0, and no
# strictly positive float64 has a logarithm below about -745, so the sentinel
# never collides with a real log-potential.
LOG_ZERO = -1.0e4


class FactorGraphError(ValueError):
    """Raised for structurally invalid graph declarations."""


@dataclass(frozen=True)
class VariableDecl:
    id: int
    cardinality: int


@dataclass(frozen=True)
class FactorDecl:
    id: int
    scope: tuple[int, ...]
    potentials: np.ndarray  # exp-domain table, shape = scope cardinalities


class Factor:
    """A validated factor: ordered scope plus exp- and log-domain tables."""

    __slots__ = ("index", "scope", "potential", "log_potential")

    def __init__(self, index: int, scope: tuple[int, ...], potential: np.ndarray):
        self.index = index
        self.scope = scope
        self.potential = potential
        with np.errstate(divide="ignore"):
            log_table = np.log(potential)
        log_table = np.where(potential > 0.0, log_table, LOG_ZERO)
        log_table.flags.writeable = False
        self.log_potential = log_table

    @property
    def arity(self) -> int:
        return len(self.scope)


class FactorGraph:
    """Immutable-by-convention graph; potential tables are read-only arrays."""

    def __init__(self, cardinalities: np.ndarray, factors: list[Factor]):
        self.cardinalities = cardinalities
        self.factors = factors
        adjacency: list[list[tuple[int, int]]] = [[] for _ in range(len(cardinalities))]
        for factor in factors:
            for pos, var in enumerate(factor.scope):
                adjacency[var].append((factor.index, pos))
        self.adjacency = adjacency
        self.degrees = np.array([len(entry) for entry in adjacency], dtype=np.intp)
        self.n_components = _count_components(len(cardinalities), factors)
        self._plan = None  # lazily built message-passing layout

    @property
    def n_vars(self) -> int:
        return len(self.cardinalities)

    @property
    def n_factors(self) -> int:
        return len(self.factors)

    @property
    def connected(self) -> bool:
        return self.n_components == 1

    @property
    def state_space_size(self) -> int:
        return math.prod(int(c) for c in self.cardinalities)

    def __eq__(self, other) -> bool:
        if not isinstance(other, FactorGraph):
            return NotImplemented
        if not np.array_equal(self.cardinalities, other.cardinalities):
            return False
        if len(self.factors) != len(other.factors):
            return False
        for mine, theirs in zip(self.factors, other.factors):
            if mine.scope != theirs.scope:
                return False
            if not np.array_equal(mine.potential, theirs.potential):
                return False
        return True

    def __repr__(self) -> str:
        return f"FactorGraph(n_vars={self.n_vars}, n_factors={self.n_factors})"


def _count_components(n_vars: int, factors: list[Factor]) -> int:
    parent = list(range(n_vars))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for factor in factors:
        root = find(factor.scope[0])
        for var in factor.scope[1:]:
            parent[find(var)] = root
    return len({find(i) for i in range(n_vars)})


def build_factor_graph(variables: Sequence, factors: Sequence,
                       max_arity: int = 5) -> FactorGraph:
    """Validate declarations and assemble a :class:`FactorGraph`.

    ``variables`` may be :class:`VariableDecl` objects or plain cardinalities
    (in id order).  ``factors`` may be :class:`FactorDecl` objects or
    ``(scope, potentials)`` pairs (in id order).  Ids must be contiguous from
    zero; cardinalities at least 2; scopes non-empty, duplicate-free, of
    length at most ``max_arity``; potential tables non-negative, finite, and
    shaped by the scope cardinalities.
    """
    cards: list[int] = []
    for slot, var in enumerate(variables):
        if isinstance(var, VariableDecl):
            if var.id != slot:
                raise FactorGraphError(f"variable ids must be contiguous from 0, got {var.id} at slot {slot}")
            card = var.cardinality
        else:
            card = int(var)
        if card < 2:
            raise FactorGraphError(f"variable {slot} has cardinality {card}; need >= 2")
        cards.append(int(card))
    if not cards:
        raise FactorGraphError("graph needs at least one variable")
    cardinalities = np.array(cards, dtype=np.intp)
    cardinalities.flags.writeable = False

    built: list[Factor] = []
    for slot, decl in enumerate(factors):
        if isinstance(decl, FactorDecl):
            if decl.id != slot:
                raise FactorGraphError(f"factor ids must be contiguous from 0, got {decl.id} at slot {slot}")
            scope, table = decl.scope, decl.potentials
        else:
            scope, table = decl
        scope = tuple(int(v) for v in scope)
        if not 1 <= len(scope) <= max_arity:
            raise FactorGraphError(f"factor {slot} has arity {len(scope)}; allowed range is [1, {max_arity}]")
        if len(set(scope)) != len(scope):
            raise FactorGraphError(f"factor {slot} repeats a variable in its scope {scope}")
        for var in scope:
            if not 0 <= var < len(cards):
                raise FactorGraphError(f"factor {slot} references unknown variable {var}")
        table = np.asarray(table, dtype=np.float64)
        expected = tuple(cards[v] for v in scope)
        if table.shape != expected:
            raise FactorGraphError(
                f"factor {slot} table shape {table.shape} does not match scope cardinalities {expected}")
        if not np.all(np.isfinite(table)):
            raise FactorGraphError(f"factor {slot} has non-finite potential entries")
        if np.any(table < 0.0):
            raise FactorGraphError(f"factor {slot} has negative potential entries")
        table = table.copy()
        table.flags.writeable = False
        built.append(Factor(slot, scope, table))

    return FactorGraph(cardinalities, built)


# ---------------------------------------------------------------------------
# Isomorphisms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Isomorphism:
    """A relabeling witness.

    ``var_perm[i]`` is the new id of variable ``i``; ``factor_perm[a]`` the
    new id of factor ``a``; ``local_perms[a][k]`` the new scope position of
    the variable at position ``k`` of factor ``a``.
    """

    var_perm: tuple[int, ...]
    factor_perm: tuple[int, ...]
    local_perms: tuple[tuple[int, ...], ...]


def _check_perm(perm: Sequence[int], size: int, label: str) -> None:
    if len(perm) != size or sorted(perm) != list(range(size)):
        raise FactorGraphError(f"{label} is not a permutation of 0..{size - 1}")


def apply_isomorphism(graph: FactorGraph, iso: Isomorphism) -> FactorGraph:
    """Return the relabeled graph; exact partition values are unchanged."""
    _check_perm(iso.var_perm, graph.n_vars, "var_perm")
    _check_perm(iso.factor_perm, graph.n_factors, "factor_perm")
    if len(iso.local_perms) != graph.n_factors:
        raise FactorGraphError("local_perms must list one permutation per factor")

    new_cards = np.empty(graph.n_vars, dtype=np.intp)
    for old, new in enumerate(iso.var_perm):
        new_cards[new] = graph.cardinalities[old]

    new_factors: list[FactorDecl | None] = [None] * graph.n_factors
    for factor in graph.factors:
        local = iso.local_perms[factor.index]
        _check_perm(local, factor.arity, f"local perm of factor {factor.index}")
        new_scope = [0] * factor.arity
        for pos, var in enumerate(factor.scope):
            new_scope[local[pos]] = iso.var_perm[var]
        # New axis l holds the old axis k with local[k] == l.
        inverse_local = tuple(int(i) for i in np.argsort(np.asarray(local)))
        table = np.transpose(factor.potential, inverse_local)
        new_id = iso.factor_perm[factor.index]
        new_factors[new_id] = FactorDecl(new_id, tuple(new_scope), table)

    return build_factor_graph([int(c) for c in new_cards], new_factors,
                              max_arity=max((f.arity for f in graph.factors), default=1))


def inverse_isomorphism(iso: Isomorphism) -> Isomorphism:
    n_vars = len(iso.var_perm)
    n_factors = len(iso.factor_perm)
    var_inv = [0] * n_vars
    for old, new in enumerate(iso.var_perm):
        var_inv[new] = old
    fac_inv = [0] * n_factors
    for old, new in enumerate(iso.factor_perm):
        fac_inv[new] = old
    locals_inv: list[tuple[int, ...]] = [()] * n_factors
    for old, new in enumerate(iso.factor_perm):
        local = iso.local_perms[old]
        inv = [0] * len(local)
        for pos, target in enumerate(local):
            inv[target] = pos
        locals_inv[new] = tuple(inv)
    return Isomorphism(tuple(var_inv), tuple(fac_inv), tuple(locals_inv))


def compose_isomorphisms(first: Isomorphism, second: Isomorphism) -> Isomorphism:
    """Relabeling equivalent to applying ``first`` and then ``second``."""
    var = tuple(second.var_perm[v] for v in first.var_perm)
    fac = tuple(second.factor_perm[f] for f in first.factor_perm)
    locals_: list[tuple[int, ...]] = []
    for old in range(len(first.factor_perm)):
        mid = first.factor_perm[old]
        inner = first.local_perms[old]
        outer = second.local_perms[mid]
        locals_.append(tuple(outer[inner[k]] for k in range(len(inner))))
    return Isomorphism(var, fac, tuple(locals_))


def identity_isomorphism(graph: FactorGraph) -> Isomorphism:
    return Isomorphism(
        tuple(range(graph.n_vars)),
        tuple(range(graph.n_factors)),
        tuple(tuple(range(f.arity)) for f in graph.factors),
    )


def random_isomorphism(graph: FactorGraph, seed: int) -> Isomorphism:
    """Draw a uniformly random relabeling witness (PCG64 stream)."""
    rng = np.random.default_rng(seed)
    var_perm = tuple(int(v) for v in rng.permutation(graph.n_vars))
    factor_perm = tuple(int(f) for f in rng.permutation(graph.n_factors))
    local_perms = tuple(tuple(int(p) for p in rng.permutation(f.arity)) for f in graph.factors)
    return Isomorphism(var_perm, factor_perm, local_perms)


# ---------------------------------------------------------------------------
# Tree structure helpers
# ---------------------------------------------------------------------------

def tree_height(graph: FactorGraph) -> int:
    """Height of a tree-structured graph, counting nodes along root-to-leaf paths.

    The bipartite graph over variable and factor nodes must be connected and
    acyclic.  The height is minimized over root choices; a single node has
    height 1.  Message passing settles within this many parallel iterations.
    """
    n = graph.n_vars + graph.n_factors
    neighbors: list[list[int]] = [[] for _ in range(n)]
    n_edges = 0
    for factor in graph.factors:
        fnode = graph.n_vars + factor.index
        for var in factor.scope:
            neighbors[var].append(fnode)
            neighbors[fnode].append(var)
            n_edges += 1
    if n_edges != n - 1 or not graph.connected:
        raise FactorGraphError("graph is not a tree")

    best = n
    for root in range(n):
        depth = [0] * n
        depth[root] = 1
        queue = deque([root])
        deepest = 1
        while queue:
            node = queue.popleft()
            for nxt in neighbors[node]:
                if depth[nxt] == 0:
                    depth[nxt] = depth[node] + 1
                    deepest = max(deepest, depth[nxt])
                    queue.append(nxt)
        best = min(best, deepest)
    return best


# ---------------------------------------------------------------------------
# JSON interchange
# ---------------------------------------------------------------------------

def graph_to_dict(graph: FactorGraph) -> dict:
    return {
        "variables": [
            {"id": i, "cardinality": int(c)} for i, c in enumerate(graph.cardinalities)
        ],
        "factors": [
            {
                "id": f.index,
                "scope": list(f.scope),
                "potentials": [float(x) for x in f.potential.ravel(order="C")],
            }
            for f in graph.factors
        ],
    }


def graph_from_dict(data: dict, max_arity: int = 5) -> FactorGraph:
    try:
        variable_entries = data["variables"]
        factor_entries = data["factors"]
    except (TypeError, KeyError) as err:
        raise FactorGraphError(f"graph document missing section: {err}") from err
    try:
        variables = [VariableDecl(int(v["id"]), int(v["cardinality"])) for v in variable_entries]
        variables.sort(key=lambda v: v.id)
        cards = {v.id: v.cardinality for v in variables}
        factors = []
        for entry in factor_entries:
            scope = tuple(int(v) for v in entry["scope"])
            shape = tuple(cards.get(v, 0) for v in scope)
            flat = np.asarray(entry["potentials"], dtype=np.float64)
            if 0 in shape or flat.size != math.prod(shape):
                raise FactorGraphError(
                    f"factor {entry.get('id')} potentials length {flat.size} does not match scope shape {shape}")
            factors.append(FactorDecl(int(entry["id"]), scope, flat.reshape(shape)))
        factors.sort(key=lambda f: f.id)
    except (TypeError, KeyError, ValueError) as err:
        if isinstance(err, FactorGraphError):
            raise
        raise FactorGraphError(f"malformed graph document: {err}") from err
    return build_factor_graph(variables, factors, max_arity=max_arity)


def save_graph_json(graph: FactorGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(graph_to_dict(graph), handle, indent=1)
        handle.write("\n")


def load_graph_json(path, max_arity: int = 5) -> FactorGraph:
    with open(path, "r", encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as err:
            raise FactorGraphError(f"malformed graph JSON in {path}: {err}") from err
    return graph_from_dict(data, max_arity=max_arity)
