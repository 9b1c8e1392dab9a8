"""Bipartite factor graph over Gaussian canonical potentials.

One robot owns one FactorGraph (single-owner mutable state).  Inference is
exact: cycles introduced by fusion are collapsed into cliques and the
resulting acyclic structure is solved with a two-pass sum-product sweep.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .canonical import (
    CanonicalDensity,
    CanonicalFactor,
    MomentGaussian,
    VariableKey,
    _scatter_add,
    as_density,
    canonical_order,
    factor_sum,
    marginalize,
    to_moments,
)
from .errors import DensityError, ScopeError


class FactorGraph:
    """Variables, factors, and the implicit adjacency between them."""

    __slots__ = ("variables", "factors", "_adj", "_next_id")

    def __init__(self):
        self.variables: dict[tuple[str, int], VariableKey] = {}
        self.factors: dict[int, CanonicalFactor] = {}
        self._adj: dict[VariableKey, set[int]] = {}
        self._next_id = 0

    # -- construction -------------------------------------------------------

    def add_variable(self, v: VariableKey) -> VariableKey:
        prev = self.variables.get((v.name, v.timestep))
        if prev is not None:
            if prev.dim != v.dim:
                raise ScopeError(
                    f"variable {v.name}@{v.timestep} exists with dim {prev.dim}, "
                    f"got {v.dim}"
                )
            return prev
        self.variables[(v.name, v.timestep)] = v
        self._adj[v] = set()
        return v

    def add_factor(self, f: CanonicalFactor) -> int:
        if not f.scope:
            raise ScopeError("zero-scope factors are not allowed in a graph")
        for k in f.scope:
            self.add_variable(k)
        fid = self._next_id
        self._next_id += 1
        self.factors[fid] = f
        for k in f.scope:
            self._adj[k].add(fid)
        return fid

    def remove_factor(self, fid: int) -> CanonicalFactor:
        f = self.factors.pop(fid)
        for k in f.scope:
            self._adj[k].discard(fid)
        return f

    def remove_variable(self, v: VariableKey) -> None:
        if self._adj.get(v):
            raise ScopeError(f"variable {v.name}@{v.timestep} still has factors")
        self._adj.pop(v, None)
        self.variables.pop((v.name, v.timestep), None)

    def adjacent(self, v: VariableKey) -> tuple[int, ...]:
        return tuple(sorted(self._adj.get(v, ())))

    def copy(self) -> "FactorGraph":
        g = FactorGraph()
        g.variables = dict(self.variables)
        g.factors = dict(self.factors)
        g._adj = {k: set(s) for k, s in self._adj.items()}
        g._next_id = self._next_id
        return g

    def replace_all_factors(self, factors: Iterable[CanonicalFactor]) -> None:
        """Drop every factor, keep the variables, insert the given factors."""
        self.factors.clear()
        for s in self._adj.values():
            s.clear()
        for f in factors:
            self.add_factor(f)

    def consolidate(self) -> None:
        """Merge factors that share an identical scope set (keeps graphs from
        accumulating one factor per measurement on static variables)."""
        groups: dict[frozenset, list[int]] = {}
        for fid in sorted(self.factors):
            groups.setdefault(frozenset(self.factors[fid].scope), []).append(fid)
        for fids in groups.values():
            if len(fids) < 2:
                continue
            merged = factor_sum([self.factors[i] for i in fids])
            for i in fids:
                self.remove_factor(i)
            self.add_factor(merged)

    # -- filtering-style operations ------------------------------------------

    def eliminate_variable(self, v: VariableKey) -> None:
        """Marginalize v out: sum its factors, Schur onto the Markov blanket."""
        if (v.name, v.timestep) not in self.variables:
            raise ScopeError(f"unknown variable {v.name}@{v.timestep}")
        fids = self.adjacent(v)
        if fids:
            summed = factor_sum([self.factors[i] for i in fids])
            blanket = tuple(k for k in summed.scope if k != v)
            for i in fids:
                self.remove_factor(i)
            if blanket:
                self.add_factor(marginalize(summed, blanket))
        self.remove_variable(v)

    def joint_factor(self) -> CanonicalFactor:
        """Sum of all factors over every graph variable, canonical order."""
        scope = canonical_order(self.variables.values())
        base = CanonicalFactor.zero(scope)
        if not self.factors:
            return base
        pos = base.offsets()
        n = base.dim
        zeta, lam = base.zeta, base.lam
        for fid in sorted(self.factors):
            f = self.factors[fid]
            if f.scope == scope:
                zeta += f.zeta
                lam += f.lam
            else:
                _scatter_add(zeta, lam, n, f, pos)
        return base

    def drop_variables(self, keys) -> None:
        """Forget variables that no factor references (after roll-up)."""
        for v in keys:
            self.remove_variable(v)

    def joint_density(self) -> CanonicalDensity:
        try:
            return as_density(self.joint_factor())
        except DensityError as exc:
            raise DensityError(
                "graph joint is not positive definite (unanchored variables?)"
            ) from exc

    # -- inference ------------------------------------------------------------

    def form_cliques(self) -> "CliqueGraph":
        return form_cliques(self)

    def infer_marginals(self) -> dict[VariableKey, MomentGaussian]:
        return infer_marginals(self)

    def dump(self) -> str:
        """Deterministic text dump (variables, factor scopes, zeta/lam)."""
        lines = [
            f"factor graph: {len(self.variables)} variables, {len(self.factors)} factors"
        ]
        for k in canonical_order(self.variables.values()):
            lines.append(f"var {k.name}@{k.timestep} dim={k.dim}")
        for fid in sorted(self.factors):
            f = self.factors[fid]
            names = " ".join(f"{k.name}@{k.timestep}" for k in f.scope)
            lines.append(f"factor {fid} scope=[{names}]")
            lines.append("  zeta " + " ".join(f"{x:.12g}" for x in f.zeta))
            for row in f.lam:
                lines.append("  lam  " + " ".join(f"{x:.12g}" for x in row))
        return "\n".join(lines) + "\n"


@dataclass
class CliqueGraph:
    """Acyclic clique-level view of a factor graph.

    Cliques partition the variables; factors whose scope spans several
    cliques become the (summed) connecting factors of the tree.  ``separators``
    records, per adjacent clique pair, the variable set their connecting
    factors couple.
    """

    cliques: list[frozenset[VariableKey]]
    clique_factors: list[CanonicalFactor]
    edge_factors: list[tuple[tuple[int, ...], CanonicalFactor]]
    separators: dict[tuple[int, int], frozenset[VariableKey]] = field(default_factory=dict)

    def is_tree(self) -> bool:
        """Edge count per connected component must be node count - 1."""
        n = len(self.cliques) + len(self.edge_factors)
        adj: dict[int, set[int]] = {i: set() for i in range(n)}
        nedges = 0
        for j, (cliques, _f) in enumerate(self.edge_factors):
            fnode = len(self.cliques) + j
            for c in cliques:
                adj[fnode].add(c)
                adj[c].add(fnode)
                nedges += 1
        seen = set()
        comps = 0
        for start in range(n):
            if start in seen:
                continue
            comps += 1
            stack = [start]
            seen.add(start)
            while stack:
                u = stack.pop()
                for w in adj[u]:
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
        return nedges == n - comps


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        p = self.parent
        while p[x] != x:
            p[x] = p[p[x]]
            x = p[x]
        return x

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic: smaller key wins
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def _fundamental_cycles(group_reps, factor_classes):
    """Fundamental cycles of the bipartite (group, factor-class) graph.

    Returns a list of sets of group reps lying on each cycle.  Factor classes
    are deduplicated adjacency sets, so parallel factors never create cycles.
    """
    nodes = [("v", r) for r in group_reps] + [("f", fc) for fc in factor_classes]
    adj: dict = {nd: [] for nd in nodes}
    for fc in factor_classes:
        for r in sorted(fc):
            adj[("f", fc)].append(("v", r))
            adj[("v", r)].append(("f", fc))
    parent: dict = {}
    depth: dict = {}
    cycles = []
    seen = set()
    for root in nodes:
        if root in seen:
            continue
        parent[root] = None
        depth[root] = 0
        seen.add(root)
        stack = [root]
        tree_edges = set()
        back_edges = []
        while stack:
            u = stack.pop()
            for w in adj[u]:
                if w not in seen:
                    seen.add(w)
                    parent[w] = u
                    depth[w] = depth[u] + 1
                    tree_edges.add((u, w))
                    tree_edges.add((w, u))
                    stack.append(w)
                elif (u, w) not in tree_edges and depth.get(w) is not None:
                    if (w, u) not in back_edges and (u, w) not in back_edges:
                        back_edges.append((u, w))
        for (u, w) in back_edges:
            # walk both endpoints up to their common ancestor
            path_u, path_w = [u], [w]
            a, b = u, w
            while depth[a] > depth[b]:
                a = parent[a]
                path_u.append(a)
            while depth[b] > depth[a]:
                b = parent[b]
                path_w.append(b)
            while a != b:
                a = parent[a]
                b = parent[b]
                path_u.append(a)
                path_w.append(b)
            groups = {nd[1] for nd in path_u + path_w if nd[0] == "v"}
            if len(groups) > 1:
                cycles.append(groups)
    return cycles


def form_cliques(g: FactorGraph) -> CliqueGraph:
    """Merge cycle variables into cliques until the clique-level graph is a tree.

    Greedy rule: when two fundamental cycles share two or more variable
    groups, merging just the shared groups is enough to break both (the
    parallel connecting factors get summed); otherwise a whole cycle is
    collapsed.  This keeps the merges minimal on fusion-style loop patterns.
    """
    variables = canonical_order(g.variables.values())
    if not variables:
        return CliqueGraph([], [], [])
    uf = _UnionFind(variables)
    while True:
        rep = {v: uf.find(v) for v in variables}
        classes = set()
        for f in g.factors.values():
            groups = frozenset(rep[k] for k in f.scope)
            if len(groups) > 1:
                classes.add(groups)
        reps = sorted(set(rep.values()))
        cycles = _fundamental_cycles(reps, sorted(classes, key=sorted))
        if not cycles:
            break
        merged = False
        for i in range(len(cycles)):
            for j in range(i + 1, len(cycles)):
                shared = cycles[i] & cycles[j]
                if len(shared) >= 2:
                    shared = sorted(shared)
                    for r in shared[1:]:
                        uf.union(shared[0], r)
                    merged = True
                    break
            if merged:
                break
        if not merged:
            cyc = sorted(cycles[0])
            for r in cyc[1:]:
                uf.union(cyc[0], r)

    groups: dict[VariableKey, set[VariableKey]] = {}
    for v in variables:
        groups.setdefault(uf.find(v), set()).add(v)
    cliques = [frozenset(groups[r]) for r in sorted(groups)]
    clique_of = {}
    for i, c in enumerate(cliques):
        for v in c:
            clique_of[v] = i

    per_clique: list[list[CanonicalFactor]] = [[] for _ in cliques]
    edge_groups: dict[tuple[int, ...], list[CanonicalFactor]] = {}
    for fid in sorted(g.factors):
        f = g.factors[fid]
        touched = tuple(sorted({clique_of[k] for k in f.scope}))
        if len(touched) == 1:
            per_clique[touched[0]].append(f)
        else:
            edge_groups.setdefault(touched, []).append(f)

    clique_factors = []
    for i, fs in enumerate(per_clique):
        scope = canonical_order(cliques[i])
        if fs:
            clique_factors.append(factor_sum(fs + [CanonicalFactor.zero(scope)]))
        else:
            clique_factors.append(CanonicalFactor.zero(scope))

    edge_factors = []
    separators: dict[tuple[int, int], frozenset] = {}
    for touched in sorted(edge_groups):
        f = factor_sum(edge_groups[touched])
        edge_factors.append((touched, f))
        coupling = frozenset(f.scope)
        for a in range(len(touched)):
            for b in range(a + 1, len(touched)):
                pair = (touched[a], touched[b])
                separators[pair] = separators.get(pair, frozenset()) | coupling
    return CliqueGraph(cliques, clique_factors, edge_factors, separators)


def infer_marginals(g: FactorGraph) -> dict[VariableKey, MomentGaussian]:
    """Exact per-variable marginals via two-pass sum-product on the clique tree."""
    if not g.variables:
        return {}
    cg = g.form_cliques()
    ncl = len(cg.cliques)
    # bipartite tree: clique nodes [0, ncl), factor nodes [ncl, ncl+nf)
    adj: dict[int, list[int]] = {i: [] for i in range(ncl + len(cg.edge_factors))}
    for j, (touched, _f) in enumerate(cg.edge_factors):
        fnode = ncl + j
        for c in touched:
            adj[fnode].append(c)
            adj[c].append(fnode)

    messages: dict[tuple[int, int], CanonicalFactor] = {}

    def clique_to_factor(c: int, fnode: int) -> CanonicalFactor:
        parts = [cg.clique_factors[c]]
        parts += [messages[(o, c)] for o in adj[c] if o != fnode]
        return factor_sum(parts)

    def factor_to_clique(fnode: int, c: int) -> CanonicalFactor:
        touched, pot = cg.edge_factors[fnode - ncl]
        parts = [pot]
        parts += [messages[(o, fnode)] for o in adj[fnode] if o != c]
        combined = factor_sum(parts)
        keep = [k for k in combined.scope if k in cg.cliques[c]]
        return marginalize(combined, keep)

    def send(src: int, dst: int) -> None:
        if src < ncl:
            messages[(src, dst)] = clique_to_factor(src, dst)
        else:
            messages[(src, dst)] = factor_to_clique(src, dst)

    # two passes per connected component: collect to root, then distribute
    visited = set()
    for root in range(ncl):
        if root in visited:
            continue
        order = []
        parent = {root: None}
        stack = [root]
        visited.add(root)
        while stack:
            u = stack.pop()
            order.append(u)
            for w in adj[u]:
                if w not in parent:
                    parent[w] = u
                    visited.add(w)
                    stack.append(w)
        for u in reversed(order):
            if parent[u] is not None:
                send(u, parent[u])
        for u in order:
            if parent[u] is not None:
                send(parent[u], u)

    out: dict[VariableKey, MomentGaussian] = {}
    for c in range(ncl):
        belief = factor_sum([cg.clique_factors[c]] + [messages[(o, c)] for o in adj[c]])
        for v in canonical_order(cg.cliques[c]):
            out[v] = to_moments(marginalize(belief, (v,)))
    return out
