"""Range-based routing from (table, row index) to embedding server.

The routing table mirrors the shard placement exactly: per table an ordered
list of disjoint, covering [start, end) intervals. Resolution is an ordered
binary search over interval starts, O(log #shards) per index.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, LookupValidationError
from .requests import LookupRequest
from .store import ShardSpec, TableMeta, validate_placement


@dataclass
class _TableRoutes:
    starts: np.ndarray   # int64, sorted shard starts
    servers: np.ndarray  # int64, server per shard
    num_rows: int


@dataclass
class GroupItem:
    """One feature's indices routed to one server, with the positions they
    held in the feature's original index list (to restore output order)."""

    feature_pos: int
    table_id: int
    indices: list[int]
    positions: list[int]


@dataclass
class DestinationGroup:
    server_id: int
    items: list[GroupItem] = field(default_factory=list)

    def total_indices(self) -> int:
        return sum(len(it.indices) for it in self.items)


class RoutingTable:
    def __init__(self, tables: dict[int, _TableRoutes]):
        self._tables = tables

    def table_ids(self) -> list[int]:
        return sorted(self._tables)

    def entries(self, table_id: int) -> list[tuple[int, int, int]]:
        """(start, end, server) triples in range order, mirroring placement."""
        tr = self._routes(table_id)
        out = []
        for i, start in enumerate(tr.starts):
            end = tr.starts[i + 1] if i + 1 < len(tr.starts) else tr.num_rows
            out.append((int(start), int(end), int(tr.servers[i])))
        return out

    def _routes(self, table_id: int) -> _TableRoutes:
        try:
            return self._tables[table_id]
        except KeyError:
            raise LookupValidationError(f"unknown table {table_id}") from None

    def resolve(self, table_id: int, index: int, counter: list | None = None) -> int:
        """Server hosting ``index``. ``counter`` (a one-element list), when
        given, accumulates the number of index comparisons performed, so tests
        can assert the logarithmic bound."""
        tr = self._routes(table_id)
        if not (0 <= index < tr.num_rows):
            raise LookupValidationError(
                f"index {index} out of range [0,{tr.num_rows}) for table {table_id}"
            )
        starts = tr.starts
        lo, hi = 0, len(starts)  # find rightmost start <= index
        while lo < hi:
            mid = (lo + hi) // 2
            if counter is not None:
                counter[0] += 1
            if starts[mid] <= index:
                lo = mid + 1
            else:
                hi = mid
        return int(tr.servers[lo - 1])

    def resolve_many(self, table_id: int, indices) -> np.ndarray:
        """Vectorized resolve for an index array (same search, batched)."""
        tr = self._routes(table_id)
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= tr.num_rows):
            bad = int(idx[(idx < 0) | (idx >= tr.num_rows)][0])
            raise LookupValidationError(
                f"index {bad} out of range [0,{tr.num_rows}) for table {table_id}"
            )
        which = np.searchsorted(tr.starts, idx, side="right") - 1
        return tr.servers[which]


def build_routing(metas: list[TableMeta], placement: list[ShardSpec]) -> RoutingTable:
    """Build the immutable routing table from a valid placement."""
    meta_map = {m.table_id: m for m in metas}
    if len(meta_map) != len(metas):
        raise ConfigError("duplicate table_id in metas")
    validate_placement(meta_map, placement)
    tables: dict[int, _TableRoutes] = {}
    for table_id, meta in meta_map.items():
        shards = sorted((s for s in placement if s.table_id == table_id), key=lambda s: s.start)
        tables[table_id] = _TableRoutes(
            starts=np.array([s.start for s in shards], dtype=np.int64),
            servers=np.array([s.server_id for s in shards], dtype=np.int64),
            num_rows=meta.num_rows,
        )
    return RoutingTable(tables)


def group_by_server(rt: RoutingTable, lookup: LookupRequest) -> list[DestinationGroup]:
    """Partition a lookup's indices by destination server.

    Within a group, per-feature index order is preserved; the union of all
    groups is exactly the lookup's index multiset. Groups come back sorted by
    server id. Resolution errors carry the offending (table, index).
    """
    groups: dict[int, DestinationGroup] = {}
    for pos, feature in enumerate(lookup.features):
        try:
            servers = rt.resolve_many(feature.table_id, feature.indices)
        except LookupValidationError as exc:
            raise LookupValidationError(
                f"feature {pos} (table {feature.table_id}): {exc}"
            ) from exc
        items: dict[int, GroupItem] = {}
        for i, (index, server) in enumerate(zip(feature.indices, servers)):
            server = int(server)
            item = items.get(server)
            if item is None:
                item = GroupItem(feature_pos=pos, table_id=feature.table_id,
                                 indices=[], positions=[])
                items[server] = item
            item.indices.append(index)
            item.positions.append(i)
        for server, item in items.items():
            group = groups.get(server)
            if group is None:
                group = DestinationGroup(server_id=server)
                groups[server] = group
            group.items.append(item)
    return [groups[s] for s in sorted(groups)]
