"""Per-slice bipartite invocation snapshots built from the training split.

Node ids are global integers: users occupy ``0..n_users-1`` and services
``n_users..n_users+n_services-1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .dataset import SplitDataset


@dataclass(frozen=True)
class Snapshot:
    """Adjacency of one time slice.

    ``user_adjacency[u]`` lists ``(service_id, weight)``;
    ``service_adjacency[s]`` lists ``(user_id, weight)``. ``raw`` keeps the
    unnormalised QoS keyed by ``(user_id, service_id)``.
    """

    t: int
    user_adjacency: tuple[tuple[tuple[int, float], ...], ...]
    service_adjacency: tuple[tuple[tuple[int, float], ...], ...]
    raw: dict

    @property
    def n_edges(self) -> int:
        return len(self.raw)


@dataclass(frozen=True)
class NeighborhoodSample:
    center: int
    hops: tuple[tuple[tuple[int, float], ...], ...]
    cap: int | None


class DynamicInvocationGraph:
    def __init__(self, n_users: int, n_services: int, snapshots: list[Snapshot],
                 value_min: float, value_max: float):
        self.n_users = n_users
        self.n_services = n_services
        self.snapshots = snapshots
        self.value_min = value_min
        self.value_max = value_max
        self._neighbors = lru_cache(maxsize=None)(self._neighbors_uncached)

    @property
    def n_slices(self) -> int:
        return len(self.snapshots)

    @property
    def n_nodes(self) -> int:
        return self.n_users + self.n_services

    def user_node(self, u: int) -> int:
        return int(u)

    def service_node(self, s: int) -> int:
        return self.n_users + int(s)

    def is_user(self, node: int) -> bool:
        return node < self.n_users

    def node_label(self, node: int) -> tuple[str, int]:
        return ("user", node) if self.is_user(node) else ("service", node - self.n_users)

    def normalize(self, value):
        span = self.value_max - self.value_min
        if span <= 0:
            return np.zeros_like(np.asarray(value, dtype=np.float64))
        return (np.asarray(value, dtype=np.float64) - self.value_min) / span

    def _check(self, node: int, t: int) -> None:
        if not 0 <= node < self.n_nodes:
            raise KeyError(f"unknown node id {node}")
        if not 0 <= t < self.n_slices:
            raise IndexError(f"time slice {t} outside [0, {self.n_slices})")

    def adjacency(self, node: int, t: int) -> tuple[tuple[int, float], ...]:
        """Full neighbour list of ``node`` in snapshot ``t`` as (global node id, weight)."""
        self._check(node, t)
        snap = self.snapshots[t]
        if self.is_user(node):
            return tuple((self.service_node(s), w) for s, w in snap.user_adjacency[node])
        return tuple((self.user_node(u), w) for u, w in snap.service_adjacency[node - self.n_users])

    def neighbors(self, node: int, t: int, cap: int | None, seed: int) -> tuple[tuple[int, float], ...]:
        """Neighbour list capped at ``cap`` by seeded uniform sampling without replacement.

        The subset depends only on (seed, t, node), so every expansion that
        reaches a node sees the same neighbours.
        """
        self._check(node, t)
        return self._neighbors(node, t, cap, seed)

    def _neighbors_uncached(self, node, t, cap, seed):
        adj = self.adjacency(node, t)
        if cap is None or len(adj) <= cap:
            return adj
        rng = np.random.default_rng([seed, t, node])
        pick = np.sort(rng.choice(len(adj), size=cap, replace=False))
        return tuple(adj[i] for i in pick)

    def edge_triples(self) -> set[tuple[int, int, int]]:
        return {(u, s, snap.t) for snap in self.snapshots for (u, s) in snap.raw}

    def dump(self) -> str:
        """Debug listing: ``t user service raw normalised`` per edge."""
        lines = []
        for snap in self.snapshots:
            for u, adj in enumerate(snap.user_adjacency):
                for s, w in adj:
                    lines.append(f"{snap.t} {u} {s} {snap.raw[(u, s)]!r} {w!r}")
        return "\n".join(lines) + ("\n" if lines else "")


def build_graph(split: SplitDataset, value_range: tuple[float, float] | None = None) -> DynamicInvocationGraph:
    """One snapshot per slice from train records only.

    Edge weights are min-max normalised QoS; the range defaults to the
    training split's own min and max.
    """
    train = split.train
    lo, hi = value_range if value_range is not None else (train.value_min, train.value_max)
    span = hi - lo
    n, m, T = split.n_users, split.n_services, split.n_slices
    user_adj = [[[] for _ in range(n)] for _ in range(T)]
    serv_adj = [[[] for _ in range(m)] for _ in range(T)]
    raws = [dict() for _ in range(T)]
    order = np.lexsort((train.services, train.users, train.slices))
    for i in order:
        u, s, t, r = int(train.users[i]), int(train.services[i]), int(train.slices[i]), float(train.values[i])
        w = (r - lo) / span if span > 0 else 0.0
        user_adj[t][u].append((s, w))
        serv_adj[t][s].append((u, w))
        raws[t][(u, s)] = r
    snaps = [
        Snapshot(t, tuple(tuple(a) for a in user_adj[t]), tuple(tuple(a) for a in serv_adj[t]), raws[t])
        for t in range(T)
    ]
    return DynamicInvocationGraph(n, m, snaps, lo, hi)


def sample_neighborhood(g: DynamicInvocationGraph, node: int, t: int, l_g: int, cap: int | None,
                        seed: int) -> NeighborhoodSample:
    """Breadth-first layered expansion of ``node`` in snapshot ``t``.

    ``hops[k]`` holds the nodes first reached at distance k+1 with the weight
    of the edge they were reached by.
    """
    if not 1 <= l_g <= 4:
        raise ValueError(f"l_g must be in 1..4, got {l_g}")
    if cap is not None and cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    g._check(node, t)
    seen = {node}
    frontier = [node]
    hops = []
    for _ in range(l_g):
        layer = []
        nxt = []
        for v in frontier:
            for nb, w in g.neighbors(v, t, cap, seed):
                if nb not in seen:
                    seen.add(nb)
                    layer.append((nb, w))
                    nxt.append(nb)
        hops.append(tuple(layer))
        frontier = nxt
    return NeighborhoodSample(node, tuple(hops), cap)
