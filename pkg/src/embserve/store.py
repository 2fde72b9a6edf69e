"""Embedding tables hosted as row-wise shards on embedding servers.

Row contents come from a counter-based pseudorandom function keyed by
(seed, table, row, column), so any oracle can recompute any row without
storing fixtures. Stores are read-only after init.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmbServeError, RoutingViolationError
from .pooling import PartialResult, PoolingOp, sum_rows_f64
from .wire import ELEMENT_WIDTH

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)
_TO_UNIT = 1.0 / float(1 << 53)


@dataclass(frozen=True)
class TableMeta:
    table_id: int
    num_rows: int
    dim: int
    element_width: int = ELEMENT_WIDTH

    def __post_init__(self):
        if self.num_rows < 1:
            raise ConfigError(f"table {self.table_id}: num_rows must be >= 1")
        if self.dim < 1:
            raise ConfigError(f"table {self.table_id}: dim must be >= 1")
        if self.element_width != ELEMENT_WIDTH:
            raise ConfigError(f"table {self.table_id}: element_width is fixed at {ELEMENT_WIDTH}")

    @property
    def row_bytes(self) -> int:
        return self.dim * self.element_width


@dataclass(frozen=True)
class ShardSpec:
    """Placement descriptor: rows [start, end) of one table on one server."""

    table_id: int
    start: int
    end: int
    server_id: int


@dataclass
class Shard:
    table_id: int
    start: int
    end: int
    host: int
    data: np.ndarray  # (end - start, dim) float32, immutable by convention


def _mix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer, vectorized over uint64 arrays."""
    x = (x + _GOLDEN).astype(_U64)
    x = (x ^ (x >> _U64(30))) * _MIX1
    x = (x ^ (x >> _U64(27))) * _MIX2
    return x ^ (x >> _U64(31))


def _table_base(seed: int, table_id: int) -> np.uint64:
    with np.errstate(over="ignore"):
        s = _mix64(np.array([seed], dtype=_U64))
        t = _mix64(np.array([table_id], dtype=_U64) ^ s)
    return t[0]


def row_values(seed: int, table_id: int, row: int, dim: int) -> np.ndarray:
    """Recompute one row's contents; uniform in [-1, 1), float32."""
    return table_block(seed, table_id, dim, row, row + 1)[0]


def table_block(seed: int, table_id: int, dim: int, start: int, end: int) -> np.ndarray:
    """Deterministic (end-start, dim) float32 block for rows [start, end)."""
    base = _table_base(seed, table_id)
    counters = np.arange(start * dim, end * dim, dtype=_U64).reshape(end - start, dim)
    with np.errstate(over="ignore"):
        bits = _mix64(counters + base)
    unit = (bits >> _U64(11)).astype(np.float64) * _TO_UNIT
    return (unit * 2.0 - 1.0).astype(np.float32)


def validate_placement(metas: dict[int, TableMeta], placement: list[ShardSpec]) -> None:
    """Check that shards of every table are disjoint and cover [0, num_rows)."""
    by_table: dict[int, list[ShardSpec]] = {}
    for spec in placement:
        if spec.table_id not in metas:
            raise ConfigError(f"placement references unknown table {spec.table_id}")
        if not (0 <= spec.start < spec.end):
            raise ConfigError(
                f"table {spec.table_id}: invalid shard range [{spec.start},{spec.end})"
            )
        by_table.setdefault(spec.table_id, []).append(spec)
    for table_id, meta in metas.items():
        shards = sorted(by_table.get(table_id, []), key=lambda s: s.start)
        if not shards:
            raise ConfigError(f"table {table_id}: no shards placed, gap [0,{meta.num_rows})")
        if shards[-1].end > meta.num_rows:
            raise ConfigError(
                f"table {table_id}: shard end {shards[-1].end} beyond {meta.num_rows} rows"
            )
        cursor = 0
        for spec in shards:
            if spec.start < cursor:
                raise ConfigError(f"table {table_id}: overlap at row {spec.start}")
            if spec.start > cursor:
                raise ConfigError(f"table {table_id}: gap [{cursor},{spec.start})")
            cursor = spec.end
        if cursor < meta.num_rows:
            raise ConfigError(f"table {table_id}: gap [{cursor},{meta.num_rows})")


class ServerStore:
    """Shards hosted by one embedding server, plus its partial-pooling CPU
    budget (max concurrent pooling tasks; queueing beyond that is modeled by
    the transport backend, not here)."""

    def __init__(self, server_id: int, cpu_budget: int):
        self.server_id = server_id
        self.cpu_budget = cpu_budget
        self._shards: dict[int, list[Shard]] = {}
        self._starts: dict[int, np.ndarray] = {}

    def add_shard(self, shard: Shard) -> None:
        if shard.host != self.server_id:
            raise ConfigError(
                f"shard of table {shard.table_id} hosted on {shard.host}, "
                f"not server {self.server_id}"
            )
        self._shards.setdefault(shard.table_id, []).append(shard)
        self._shards[shard.table_id].sort(key=lambda s: s.start)
        self._starts[shard.table_id] = np.array(
            [s.start for s in self._shards[shard.table_id]], dtype=np.int64
        )

    def hosted_tables(self) -> list[int]:
        return sorted(self._shards)

    def shards(self, table_id: int) -> list[Shard]:
        return self._shards.get(table_id, [])

    def lookup_rows(self, table_id: int, indices) -> np.ndarray:
        """Gather rows in input order; duplicates are returned per occurrence.

        Raises RoutingViolationError if any index is not hosted here.
        """
        shards = self._shards.get(table_id)
        if shards is None:
            raise RoutingViolationError(
                f"server {self.server_id} hosts no shard of table {table_id}"
            )
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size == 0:
            return np.empty((0, shards[0].data.shape[1]), dtype=np.float32)
        starts = self._starts[table_id]
        which = np.searchsorted(starts, idx, side="right") - 1
        out = np.empty((idx.size, shards[0].data.shape[1]), dtype=np.float32)
        for s in np.unique(which):
            mask = which == s
            if s < 0:
                bad = int(idx[mask][0])
                raise RoutingViolationError(
                    f"server {self.server_id}: row {bad} of table {table_id} not hosted here"
                )
            shard = shards[s]
            rows = idx[mask]
            if rows.max() >= shard.end:
                bad = int(rows[rows >= shard.end][0])
                raise RoutingViolationError(
                    f"server {self.server_id}: row {bad} of table {table_id} not hosted here"
                )
            out[mask] = shard.data[rows - shard.start]
        return out

    def partial_pool(self, table_id: int, indices, op: PoolingOp) -> PartialResult:
        """Server-side partial pooling: one (sum, count) regardless of how
        many rows were selected. Mean's division is deferred to the ranker."""
        if len(indices) == 0:
            raise EmbServeError("empty partial pool")
        rows = self.lookup_rows(table_id, indices)
        total = sum_rows_f64(rows)
        return PartialResult(
            vector=total.astype(np.float32), count=len(indices), source=self.server_id
        )


@dataclass
class Deployment:
    """All embedding servers of one run, immutable after init_store."""

    metas: dict[int, TableMeta]
    servers: dict[int, ServerStore]
    placement: list[ShardSpec]
    seed: int
    server_ids: list[int] = field(init=False)

    def __post_init__(self):
        self.server_ids = sorted(self.servers)

    def meta(self, table_id: int) -> TableMeta:
        try:
            return self.metas[table_id]
        except KeyError:
            raise ConfigError(f"unknown table {table_id}") from None

    def get_row(self, table_id: int, row: int) -> np.ndarray:
        """Direct row read regardless of placement, for oracles and admission
        fetches. Bit-identical to what the hosting server returns."""
        meta = self.meta(table_id)
        if not (0 <= row < meta.num_rows):
            raise EmbServeError(f"row {row} out of range for table {table_id}")
        for spec in self.placement:
            if spec.table_id == table_id and spec.start <= row < spec.end:
                server = self.servers[spec.server_id]
                return server.lookup_rows(table_id, [row])[0]
        raise ConfigError(f"table {table_id}: row {row} not covered by placement")


def init_store(
    metas: list[TableMeta],
    placement: list[ShardSpec],
    seed: int,
    cpu_budget: int = 16,
) -> Deployment:
    """Materialize every shard with deterministic contents.

    Same (metas, placement, seed) yields bit-identical stores.
    """
    meta_map = {m.table_id: m for m in metas}
    if len(meta_map) != len(metas):
        raise ConfigError("duplicate table_id in metas")
    validate_placement(meta_map, placement)
    servers: dict[int, ServerStore] = {}
    for spec in placement:
        meta = meta_map[spec.table_id]
        server = servers.setdefault(spec.server_id, ServerStore(spec.server_id, cpu_budget))
        data = table_block(seed, spec.table_id, meta.dim, spec.start, spec.end)
        server.add_shard(
            Shard(table_id=spec.table_id, start=spec.start, end=spec.end,
                  host=spec.server_id, data=data)
        )
    return Deployment(metas=meta_map, servers=servers, placement=list(placement), seed=seed)
