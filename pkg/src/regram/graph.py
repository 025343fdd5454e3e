"""Transaction-level subgraph, communities, inter-community links and per-target contexts."""
from __future__ import annotations

import calendar
import json
from dataclasses import dataclass, field
from datetime import date
from typing import Collection, Iterable, Mapping

import numpy as np

from .errors import SchemaError
from .geo import GridIndex, build_grid, distance_m, radius_query
from .records import TransactionRecord

GRAPH_FORMAT_VERSION = 1
NEAR_M = 500.0
MAX_TRADE_GAP_DAYS = 365
MAX_AGE_GAP_YEARS = 10.0
INTER_COMM_FRACTION = 0.001


@dataclass
class GraphBundle:
    txn_adjacency: dict[str, list[str]] = field(default_factory=dict)
    community_of: dict[str, str | None] = field(default_factory=dict)
    community_members: dict[str, list[str]] = field(default_factory=dict)
    inter_comm_adjacency: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": GRAPH_FORMAT_VERSION,
            "txn_adjacency": self.txn_adjacency,
            "community_of": self.community_of,
            "community_members": self.community_members,
            "inter_comm_adjacency": self.inter_comm_adjacency,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "GraphBundle":
        if d.get("version") != GRAPH_FORMAT_VERSION:
            raise SchemaError(f"unsupported graph format version {d.get('version')!r}")
        return cls(
            txn_adjacency={k: list(v) for k, v in d["txn_adjacency"].items()},
            community_of=dict(d["community_of"]),
            community_members={k: list(v) for k, v in d["community_members"].items()},
            inter_comm_adjacency={k: list(v) for k, v in d["inter_comm_adjacency"].items()},
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class NeighborContext:
    target: str
    txn_neighbors: list[str]
    community_neighbor_ids: list[str]
    # usable (history- and window-filtered) members of each listed community
    community_members: dict[str, list[str]] = field(default_factory=dict)

    @property
    def is_empty(self) -> bool:
        return not self.txn_neighbors and not self.community_neighbor_ids


def _coords(r: TransactionRecord) -> tuple[float, float]:
    return (r.latitude, r.longitude)


def txn_edge_predicate(a: TransactionRecord, b: TransactionRecord) -> bool:
    if a.building_type != b.building_type or a.main_purpose != b.main_purpose:
        return False
    if a.flags != b.flags:
        return False
    if not abs(a.house_age - b.house_age) < MAX_AGE_GAP_YEARS:
        return False
    gap = abs((a.trade_date - b.trade_date).days)
    if not (gap <= MAX_TRADE_GAP_DAYS or a.trade_month == b.trade_month):
        return False
    return distance_m(_coords(a), _coords(b)) < NEAR_M


def build_txn_graph(records: Iterable[TransactionRecord], index: GridIndex) -> dict[str, list[str]]:
    by_id = {r.id: r for r in records}
    adj: dict[str, list[str]] = {i: [] for i in sorted(by_id)}
    for i in adj:
        a = by_id[i]
        for j in radius_query(index, _coords(a), NEAR_M, exclude=i):
            if j > i and j in by_id and txn_edge_predicate(a, by_id[j]):
                adj[i].append(j)
                adj[j].append(i)
    for v in adj.values():
        v.sort()
    return adj


class _UnionFind:
    def __init__(self, items):
        self.parent = {i: i for i in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller id as root so roots are deterministic
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def assign_communities(
    records: Iterable[TransactionRecord], index: GridIndex
) -> tuple[dict[str, str | None], dict[str, list[str]]]:
    """Connected components of the same-completion-month, under-500 m relation.

    Community ids are the smallest member id; singletons get ``None``.
    """
    by_id = {r.id: r for r in records}
    uf = _UnionFind(sorted(by_id))
    for i, a in by_id.items():
        for j in radius_query(index, _coords(a), NEAR_M, exclude=i):
            if j > i and j in by_id and by_id[j].completion_month == a.completion_month:
                uf.union(i, j)
    groups: dict[str, list[str]] = {}
    for i in sorted(by_id):
        groups.setdefault(uf.find(i), []).append(i)
    members = {min(g): g for g in groups.values() if len(g) > 1}
    community_of: dict[str, str | None] = {i: None for i in sorted(by_id)}
    for cid, g in members.items():
        for i in g:
            community_of[i] = cid
    return community_of, dict(sorted(members.items()))


def inter_comm_edge_count(n_communities: int) -> int:
    pairs = n_communities * (n_communities - 1) // 2
    return max(1, pairs // 1000)  # floor(0.001 * pairs), at least one


def build_inter_comm_edges(
    community_members: Mapping[str, list[str]], poi_vectors: Mapping[str, np.ndarray]
) -> dict[str, list[str]]:
    """Link the community pairs whose mean-PoI vectors are closest in L2.

    The number of links is ``max(1, floor(0.001 * C(C-1)/2))``; ties at the
    cutoff go to the lexicographically first ``(id, id)`` pair.
    """
    cids = sorted(community_members)
    adj: dict[str, list[str]] = {c: [] for c in cids}
    if len(cids) < 2:
        return adj
    vecs = np.stack([np.mean([poi_vectors[m] for m in community_members[c]], axis=0) for c in cids])
    ii, jj = np.triu_indices(len(cids), k=1)  # row-major, so already (i, j) lexicographic
    d = np.sqrt(((vecs[ii] - vecs[jj]) ** 2).sum(axis=1))
    m = inter_comm_edge_count(len(cids))
    order = np.lexsort((jj, ii, d))[:m]
    for k in order:
        a, b = cids[ii[k]], cids[jj[k]]
        adj[a].append(b)
        adj[b].append(a)
    for v in adj.values():
        v.sort()
    return adj


def build_bundle(
    records: Iterable[TransactionRecord], poi_vectors: Mapping[str, np.ndarray], cell_m: float = NEAR_M
) -> GraphBundle:
    records = list(records)
    index = build_grid(records, cell_m)
    adj = build_txn_graph(records, index)
    community_of, members = assign_communities(records, index)
    inter = build_inter_comm_edges(members, poi_vectors)
    return GraphBundle(adj, community_of, members, inter)


def months_before(d: date, months: int) -> date:
    """Same day ``months`` calendar months earlier, clamped to month end."""
    y, m = divmod(d.year * 12 + (d.month - 1) - months, 12)
    m += 1
    return date(y, m, min(d.day, calendar.monthrange(y, m)[1]))


def neighbor_context(
    target: TransactionRecord,
    bundle: GraphBundle,
    records: Mapping[str, TransactionRecord],
    history: Collection[str] | None = None,
    cap: int = 64,
    window_months: int = 2,
) -> NeighborContext:
    """Past-only transaction neighbors and usable neighbor communities of ``target``.

    ``history`` optionally restricts which ids may appear in the context (for
    example the training split when building validation contexts).
    """
    t_date = target.trade_date

    def usable(i: str) -> bool:
        return (history is None or i in history) and records[i].trade_date < t_date

    nbrs = [i for i in bundle.txn_adjacency.get(target.id, ()) if usable(i)]
    if len(nbrs) > cap:
        here = _coords(target)
        nbrs.sort(key=lambda i: (distance_m(here, _coords(records[i])), i))
        nbrs = sorted(nbrs[:cap])

    own = bundle.community_of.get(target.id)
    comm_ids: list[str] = []
    comm_members: dict[str, list[str]] = {}
    if own is not None:
        start = months_before(t_date, window_months)
        for cid in bundle.inter_comm_adjacency.get(own, ()):
            if cid == own:
                continue
            ms = [i for i in bundle.community_members[cid] if usable(i) and records[i].trade_date >= start]
            if ms:
                comm_ids.append(cid)
                comm_members[cid] = ms
    return NeighborContext(target.id, nbrs, comm_ids, comm_members)
