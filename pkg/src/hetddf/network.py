"""Simulated communication layer: topology, synchronous rounds, dropout.

A round prepares every directed message from the pre-round agent state,
draws one Bernoulli per message, and only then applies the fusions, so
intra-round ordering cannot leak information.  Everything iterates in
sorted-edge order, which makes results a function of (seed, topology) only.
"""

from __future__ import annotations

import csv
import warnings
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .errors import ConfigError


class DropoutModel(NamedTuple):
    """Per-message independent Bernoulli delivery.

    ``stream`` labels the RNG stream the harness dedicates to dropout draws
    (draws happen on the generator passed to ``run_round``).
    """

    p_success: float
    stream: int = 0


class DeliveryRecord(NamedTuple):
    timestep: int
    sender: int
    recipient: int
    delivered: int
    nbytes: int


class Topology:
    """Undirected communication graph over agent ids."""

    def __init__(self, edges: Iterable[tuple[int, int]], warn_disconnected: bool = True):
        norm = set()
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise ConfigError(f"self edge {a}<->{b}")
            norm.add((min(a, b), max(a, b)))
        self.edges = tuple(sorted(norm))
        self._neighbors: dict[int, set[int]] = {}
        for a, b in self.edges:
            self._neighbors.setdefault(a, set()).add(b)
            self._neighbors.setdefault(b, set()).add(a)
        if warn_disconnected and self.agents() and not self.is_connected():
            warnings.warn("communication topology is not connected", stacklevel=2)

    def agents(self) -> tuple[int, ...]:
        return tuple(sorted(self._neighbors))

    def neighbors(self, i: int) -> tuple[int, ...]:
        return tuple(sorted(self._neighbors.get(i, ())))

    def is_connected(self) -> bool:
        nodes = self.agents()
        if not nodes:
            return True
        seen = {nodes[0]}
        stack = [nodes[0]]
        while stack:
            u = stack.pop()
            for w in self._neighbors[u]:
                if w not in seen:
                    seen.add(w)
                    stack.append(w)
        return len(seen) == len(nodes)

    @property
    def cyclic(self) -> bool:
        # edge count >= node count per component implies a cycle
        nodes = self.agents()
        comp = 0
        seen: set[int] = set()
        for n in nodes:
            if n in seen:
                continue
            comp += 1
            seen.add(n)
            stack = [n]
            while stack:
                u = stack.pop()
                for w in self._neighbors[u]:
                    if w not in seen:
                        seen.add(w)
                        stack.append(w)
        return len(self.edges) > len(nodes) - comp

    def diameter(self) -> int:
        nodes = self.agents()
        best = 0
        for s in nodes:
            dist = {s: 0}
            frontier = [s]
            while frontier:
                nxt = []
                for u in frontier:
                    for w in self._neighbors[u]:
                        if w not in dist:
                            dist[w] = dist[u] + 1
                            nxt.append(w)
                frontier = nxt
            best = max(best, max(dist.values()))
        return best


def run_round(
    agents: dict,
    topology: Topology,
    dropout: Optional[DropoutModel],
    rng: np.random.Generator,
    timestep: int = 0,
) -> list[DeliveryRecord]:
    """One synchronous exchange over every edge (both directions).

    All messages are prepared before any fusion is applied.  One Bernoulli is
    drawn per directed message even at p=1 so the RNG stream advances the
    same way regardless of outcomes.
    """
    p = 1.0 if dropout is None else float(dropout.p_success)
    if not 0.0 < p <= 1.0:
        raise ConfigError(f"p_success must be in (0, 1], got {p}")
    prepared = {}
    for a, b in topology.edges:
        for s, r in ((a, b), (b, a)):
            prepared[(s, r)] = agents[s].prepare_message(r)
    records = []
    for a, b in topology.edges:
        for s, r in ((a, b), (b, a)):
            msg = prepared[(s, r)]
            ok = bool(rng.random() < p)
            if ok:
                sender = agents[s]
                if getattr(sender, "algo", None) == "hscf" and not getattr(
                    sender, "cf_update_on_send", True
                ):
                    sender.commit_cf(r, msg)
                agents[r].fuse_message(msg, prepared[(r, s)])
            records.append(DeliveryRecord(timestep, s, r, int(ok), msg.nbytes))
    return records


def write_delivery_log(path, records: Iterable[DeliveryRecord]) -> None:
    """CSV log: timestep, sender, recipient, delivered(0/1), message bytes."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestep", "sender", "recipient", "delivered", "bytes"])
        for rec in records:
            w.writerow(list(rec))
