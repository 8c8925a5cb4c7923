"""Groups NMS-free 3D detections into clusters of boxes on the same object.

Two detections are connected when their BEV footprint IoU strictly exceeds
tau_z; clusters are the maximal cliques of that graph. Because overlap is
not transitive a detection can sit in several cliques, so membership is
resolved by score (each detection stays in the clique whose best member
scores highest), which turns the clique cover into a partition.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .core import Detection3D
from .errors import CliqueExplosion
from .geometry import bev_params
from .geometry.backend import kernels


@dataclass(frozen=True)
class OverlapGraph:
    """Undirected overlap graph: node count plus sorted (i, j) edges, i < j."""

    num_nodes: int
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "edges", tuple(sorted(set(map(tuple, self.edges)))))
        for i, j in self.edges:
            if not (0 <= i < j < self.num_nodes):
                raise ValueError(f"edge ({i}, {j}) invalid for {self.num_nodes} nodes")

    def adjacency(self) -> list:
        adj = [set() for _ in range(self.num_nodes)]
        for i, j in self.edges:
            adj[i].add(j)
            adj[j].add(i)
        return adj


@dataclass(frozen=True)
class Cluster:
    """Indices of detections forming one physical-object hypothesis."""

    members: tuple[int, ...]

    def __post_init__(self):
        if not self.members:
            raise ValueError("Cluster must be non-empty")
        object.__setattr__(self, "members", tuple(sorted(self.members)))

    def __len__(self) -> int:
        return len(self.members)

    @property
    def lead(self) -> int:
        return self.members[0]


def build_overlap_graph(dets: Sequence[Detection3D], tau_z: float) -> OverlapGraph:
    """Edge (i, j) present iff the BEV IoU of the two boxes exceeds tau_z."""
    if not 0.0 <= tau_z < 1.0:
        raise ValueError(f"tau_z must be in [0, 1), got {tau_z}")
    if len(dets) < 2:
        return OverlapGraph(len(dets), ())
    edges = kernels.bev_overlap_edges(bev_params(dets), float(tau_z))
    return OverlapGraph(len(dets), tuple((int(i), int(j)) for i, j in edges))


def _degeneracy_order(adj: list) -> list:
    """Order nodes by repeatedly removing a minimum-degree node (ties: lowest id)."""
    n = len(adj)
    degree = [len(a) for a in adj]
    removed = [False] * n
    order = []
    for _ in range(n):
        v = min(
            (i for i in range(n) if not removed[i]),
            key=lambda i: (degree[i], i),
        )
        order.append(v)
        removed[v] = True
        for u in adj[v]:
            if not removed[u]:
                degree[u] -= 1
    return order


def maximal_cliques(graph: OverlapGraph, cap_factor: int = 10) -> list:
    """All maximal cliques, Bron-Kerbosch with degeneracy ordering and pivoting.

    Isolated nodes yield singleton cliques. Output is deterministic: each
    clique sorted, cliques ordered by smallest member. Raises CliqueExplosion
    once more than cap_factor * num_nodes cliques are found.
    """
    n = graph.num_nodes
    if n == 0:
        return []
    adj = graph.adjacency()
    cap = cap_factor * n
    cliques: list = []

    def expand(r: list, p: set, x: set):
        if not p and not x:
            cliques.append(tuple(sorted(r)))
            if len(cliques) > cap:
                raise CliqueExplosion(
                    f"more than {cap} maximal cliques on {n} nodes"
                )
            return
        pivot = max(p | x, key=lambda u: (len(p & adj[u]), -u))
        for v in sorted(p - adj[pivot]):
            expand(r + [v], p & adj[v], x & adj[v])
            p.remove(v)
            x.add(v)

    order = _degeneracy_order(adj)
    rank = {v: i for i, v in enumerate(order)}
    for v in order:
        later = {u for u in adj[v] if rank[u] > rank[v]}
        earlier = adj[v] - later
        expand([v], later, earlier)
    return sorted(cliques)


def cluster_detections(
    dets: Sequence[Detection3D], tau_z: float, cap_factor: int = 10
) -> list:
    """Cluster detections into a partition of single-object hypotheses.

    A detection appearing in several maximal cliques is kept only in the
    clique whose maximum member score is highest (ties broken toward the
    clique with the smaller lead index); emptied cliques vanish.
    """
    if not dets:
        return []
    cliques = maximal_cliques(build_overlap_graph(dets, tau_z), cap_factor)
    ranked = sorted(
        cliques, key=lambda c: (-max(dets[i].score for i in c), c[0])
    )
    assigned: set = set()
    clusters = []
    for clique in ranked:
        members = [i for i in clique if i not in assigned]
        if members:
            clusters.append(Cluster(tuple(members)))
            assigned.update(members)
    return sorted(clusters, key=lambda c: c.lead)
