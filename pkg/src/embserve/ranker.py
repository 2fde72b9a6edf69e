"""End-to-end lookup pipeline per batch.

Order of operations per feature: probe the cache (fast path), group the
residual misses by destination server, plan pushdown vs raw fetch, fan out
over the transport with credits, then combine cache hits (as raw vectors),
partial results, and raw fetches into the final pooled vector. The cache
resize decision is driven by the batch-size tracker once per batch.

Optimizations are not allowed to change values: whatever the cache state,
pushdown threshold, engine assignment, or migration schedule, results must
match the flat no-cache computation within pooling tolerance. The batch
latency identity (completion = slowest subrequest + aggregation cost) is
asserted on every batch.
"""

from dataclasses import dataclass, field

import numpy as np

from . import wire
from .cache import AdaptiveCache, CachePolicy, LoadTracker, target_cache_bytes
from .errors import CapacityError, InvariantError, LookupValidationError
from .pooling import PartialResult, PlanMode, combine_partials, plan_hierarchical, pool_flat
from .requests import Batch, Feature, LookupRequest
from .routing import RoutingTable, group_by_server
from .store import Deployment
from .transport.virtual import Message, ServerWork, VirtualTransport


@dataclass
class RankerParams:
    pushdown_threshold: int | None = 2  # None disables pushdown entirely
    pipeline_depth: int = 1
    adaptive_cache: bool = True  # False freezes the budget (fixed-cache baseline)
    keep_results: bool = True
    admit_per_batch: int = 64  # hot-row swap-in trickle; 0 disables


@dataclass
class LookupResult:
    vectors: list = field(default_factory=list)  # one pooled vector per feature
    cache_hits: int = 0
    pushdown_groups: int = 0
    pushdown_rows: int = 0
    raw_rows: int = 0
    completed_at: float = 0.0

    @property
    def counters(self) -> tuple[int, int, int]:
        return (self.cache_hits, self.pushdown_groups, self.raw_rows)


@dataclass
class BatchMetrics:
    batch_id: int
    size: int
    started_at: float
    latency: float
    subrequests: int
    cache_hits: int
    cache_misses: int
    pushdown_groups: int
    pushdown_rows: int
    raw_rows: int
    load_level: str | None = None
    cache_budget: int | None = None
    cache_used: int | None = None

    @property
    def hit_rate(self) -> float:
        total = self.cache_hits + self.cache_misses
        return self.cache_hits / total if total else 0.0


class _SubrequestPayload:
    __slots__ = ("batch_id", "lookup_idx", "feature_pos", "server_id", "mode",
                 "table_id", "indices", "positions", "op")

    def __init__(self, batch_id, lookup_idx, feature_pos, server_id, mode,
                 table_id, indices, positions, op):
        self.batch_id = batch_id
        self.lookup_idx = lookup_idx
        self.feature_pos = feature_pos
        self.server_id = server_id
        self.mode = mode
        self.table_id = table_id
        self.indices = indices
        self.positions = positions
        self.op = op


class _FeatureState:
    __slots__ = ("feature", "cached", "partials", "raw", "covered")

    def __init__(self, feature):
        self.feature = feature
        self.cached: dict[int, np.ndarray] = {}  # position -> vector
        self.partials: list[PartialResult] = []
        self.raw: dict[int, np.ndarray] = {}     # position -> vector
        self.covered = 0


class _BatchState:
    __slots__ = ("batch", "t0", "features", "results", "outstanding",
                 "last_completion", "subrequests", "hits", "misses",
                 "pushdown_groups", "pushdown_rows", "raw_rows", "offers")

    def __init__(self, batch, t0):
        self.batch = batch
        self.t0 = t0
        self.features: dict = {}
        self.results: list[LookupResult] = [LookupResult() for _ in batch.lookups]
        self.outstanding = 0
        self.last_completion = t0
        self.subrequests = 0
        self.hits = 0
        self.misses = 0
        self.pushdown_groups = 0
        self.pushdown_rows = 0
        self.raw_rows = 0
        self.offers: dict = {}


class Ranker:
    def __init__(
        self,
        deployment: Deployment,
        routing: RoutingTable,
        transport: VirtualTransport,
        params: RankerParams | None = None,
        cache: AdaptiveCache | None = None,
        policy: CachePolicy | None = None,
        tracker: LoadTracker | None = None,
    ):
        self.deployment = deployment
        self.routing = routing
        self.transport = transport
        self.params = params or RankerParams()
        self.cache = cache
        self.policy = policy
        self.tracker = tracker
        self.transport.handler = self._server_handler
        self.transport.on_response = self._on_response
        self._last_level: str | None = None
        self.batch_metrics: list[BatchMetrics] = []
        self.results: dict[int, list[LookupResult]] = {}
        self._active: dict[int, _BatchState] = {}
        self._trace_batches: list[Batch] = []
        self._next_batch = 0
        self._peer_conns: dict[int, list[int]] = {}
        self._peer_rr: dict[int, int] = {}
        for cid in transport.topology.normal_conn_ids():
            peer = transport.topology.conn(cid).peer
            self._peer_conns.setdefault(peer, []).append(cid)
        for peer in self._peer_conns:
            self._peer_conns[peer].sort()
            self._peer_rr[peer] = 0

    # -- driving ------------------------------------------------------------

    def run_trace(self, trace_batches: list[Batch]) -> None:
        """Closed-loop replay: keep up to pipeline_depth batches in flight."""
        self._trace_batches = trace_batches
        self._next_batch = 0
        for _ in range(min(self.params.pipeline_depth, len(trace_batches))):
            self._admit_next()
        self.transport.run_until_idle()
        self.transport.check_quiescence()

    def execute_batch(self, batch: Batch) -> list[LookupResult]:
        """Run a single batch to completion and return its lookup results."""
        self.run_trace([batch])
        return self.results[batch.batch_id]

    def _admit_next(self) -> None:
        if self._next_batch >= len(self._trace_batches):
            return
        batch = self._trace_batches[self._next_batch]
        self._next_batch += 1
        self._start_batch(batch)

    # -- batch pipeline ---------------------------------------------------------

    def _validate(self, batch: Batch) -> None:
        for li, lookup in enumerate(batch.lookups):
            for feature in lookup.features:
                meta = self.deployment.meta(feature.table_id)
                for index in feature.indices:
                    if not (0 <= index < meta.num_rows):
                        raise LookupValidationError(
                            f"batch {batch.batch_id}, lookup {li}: index {index} out of "
                            f"range [0,{meta.num_rows}) for table {feature.table_id}"
                        )

    def _admission_check(self, batch: Batch) -> None:
        """GPU capacity gate: the NN reservation for this batch plus the
        reserved cache budget must fit. The adaptive cache shrinks on the
        spot (never grows) to admit the batch; a fixed cache rejects it."""
        if self.cache is None or self.policy is None:
            return
        model = self.policy.model
        need = model.nn_bytes(batch.size)
        if need > model.gpu_capacity_bytes:
            raise CapacityError(
                f"batch {batch.batch_id} (size {batch.size}) needs {need} NN bytes, "
                f"capacity {model.gpu_capacity_bytes}"
            )
        if need + self.cache.budget_bytes <= model.gpu_capacity_bytes:
            return
        if not self.params.adaptive_cache:
            raise CapacityError(
                f"batch {batch.batch_id} (size {batch.size}): NN {need} bytes plus "
                f"fixed cache {self.cache.budget_bytes} exceeds capacity "
                f"{model.gpu_capacity_bytes}"
            )
        self.cache.resize(target_cache_bytes(model, batch.size), fetcher=None)

    def _start_batch(self, batch: Batch) -> None:
        now = self.transport.loop.now
        self._validate(batch)
        if self.cache is not None:
            self.cache.apply_pending_admissions()
        self._admission_check(batch)
        state = _BatchState(batch, now)
        self._active[batch.batch_id] = state
        threshold = self.params.pushdown_threshold
        for li, lookup in enumerate(batch.lookups):
            result = state.results[li]
            for fp, feature in enumerate(lookup.features):
                fstate = _FeatureState(feature)
                state.features[(li, fp)] = fstate
                residual = self._probe_cache(state, result, fstate, feature)
                if not residual:
                    continue
                self._fan_out(state, li, fp, feature, residual, threshold)
        if state.outstanding == 0:
            self._schedule_finish(state)

    def _probe_cache(self, state, result, fstate, feature) -> list[tuple[int, int]]:
        """Cache fast path; returns the missed (position, index) pairs."""
        if self.cache is None:
            return list(enumerate(feature.indices))
        pooled = self.cache.pooled_get(feature.table_id, feature.op, feature.indices)
        if pooled is not None:
            fstate.cached[-1] = pooled
            fstate.covered = len(feature.indices)
            result.cache_hits += len(feature.indices)
            state.hits += len(feature.indices)
            return []
        residual = []
        for pos, index in enumerate(feature.indices):
            vec = self.cache.get(feature.table_id, index)
            if vec is None:
                state.misses += 1
                residual.append((pos, index))
            else:
                fstate.cached[pos] = vec
                fstate.covered += 1
                result.cache_hits += 1
                state.hits += 1
        return residual

    def _fan_out(self, state, li, fp, feature, residual, threshold) -> None:
        positions = [p for p, _ in residual]
        indices = [i for _, i in residual]
        probe = LookupRequest(features=[Feature(
            table_id=feature.table_id, op=feature.op, indices=indices)])
        groups = group_by_server(self.routing, probe)
        sizes = {(g.server_id, fp): g.total_indices() for g in groups}
        if threshold is None:
            plan = None
        else:
            plan = plan_hierarchical(sizes, threshold)
        result = state.results[li]
        for group in groups:
            item = group.items[0]
            mode = (PlanMode.RAW_FETCH if plan is None
                    else plan.mode(group.server_id, fp))
            group_positions = [positions[p] for p in item.positions]
            payload = _SubrequestPayload(
                batch_id=state.batch.batch_id, lookup_idx=li, feature_pos=fp,
                server_id=group.server_id, mode=mode, table_id=feature.table_id,
                indices=item.indices, positions=group_positions, op=feature.op,
            )
            if mode is PlanMode.PUSHDOWN:
                result.pushdown_groups += 1
                result.pushdown_rows += len(item.indices)
                state.pushdown_groups += 1
                state.pushdown_rows += len(item.indices)
            else:
                result.raw_rows += len(item.indices)
                state.raw_rows += len(item.indices)
            conns = self._peer_conns[group.server_id]
            conn_id = conns[self._peer_rr[group.server_id] % len(conns)]
            self._peer_rr[group.server_id] += 1
            state.outstanding += 1
            state.subrequests += 1
            self.transport.post_subrequest(
                conn_id, payload=payload,
                size_bytes=wire.request_bytes(len(item.indices)),
            )

    # -- transport callbacks -------------------------------------------------------

    def _server_handler(self, msg: Message) -> ServerWork | None:
        payload = msg.payload
        if not isinstance(payload, _SubrequestPayload):
            return None
        server = self.deployment.servers[payload.server_id]
        meta = self.deployment.meta(payload.table_id)
        n = len(payload.indices)
        service = (self.transport.params.server_fixed_time
                   + self.transport.params.server_per_row_time * n)
        if payload.mode is PlanMode.PUSHDOWN:
            partial = server.partial_pool(payload.table_id, payload.indices, payload.op)
            return ServerWork(
                service_time=service, needs_slot=True, respond=True,
                response_size=wire.partial_response_bytes(meta.dim),
                response_payload=(payload, partial),
                payload_bytes=wire.embedding_payload_bytes(1, meta.dim),
            )
        rows = server.lookup_rows(payload.table_id, payload.indices)
        return ServerWork(
            service_time=service, needs_slot=False, respond=True,
            response_size=wire.raw_response_bytes(n, meta.dim),
            response_payload=(payload, rows),
            payload_bytes=wire.embedding_payload_bytes(n, meta.dim),
        )

    def _on_response(self, conn_id: int, resp) -> None:
        self.transport.consume_response(conn_id)
        payload, data = resp.payload
        state = self._active[payload.batch_id]
        fstate = state.features[(payload.lookup_idx, payload.feature_pos)]
        if payload.mode is PlanMode.PUSHDOWN:
            fstate.partials.append(data)
        else:
            for index, pos, row in zip(payload.indices, payload.positions, data):
                fstate.raw[pos] = row
                state.offers[(payload.table_id, index)] = row
        fstate.covered += len(payload.indices)
        state.outstanding -= 1
        now = self.transport.loop.now
        if now > state.last_completion:
            state.last_completion = now
        if state.outstanding == 0:
            self._schedule_finish(state)

    # -- completion ---------------------------------------------------------------

    def _aggregation_cost(self, state: _BatchState) -> float:
        vectors = state.hits + state.raw_rows + sum(
            len(f.partials) for f in state.features.values()
        )
        p = self.transport.params
        return p.aggregation_fixed_time + p.aggregation_per_vector_time * vectors

    def _schedule_finish(self, state: _BatchState) -> None:
        agg = self._aggregation_cost(state)
        done_at = state.last_completion + agg
        self.transport.loop.schedule(done_at - self.transport.loop.now,
                                     lambda: self._finish_batch(state, agg))

    def _finish_batch(self, state: _BatchState, agg_cost: float) -> None:
        now = self.transport.loop.now
        latency = now - state.t0
        expected = (state.last_completion - state.t0) + agg_cost
        if abs(latency - expected) > 1e-9:
            raise InvariantError(
                f"batch latency {latency} != slowest subrequest + aggregation {expected}"
            )
        for li, lookup in enumerate(state.batch.lookups):
            result = state.results[li]
            result.completed_at = now
            for fp, feature in enumerate(lookup.features):
                fstate = state.features[(li, fp)]
                if fstate.covered != len(feature.indices):
                    raise InvariantError(
                        f"lookup {li} feature {fp}: covered {fstate.covered} of "
                        f"{len(feature.indices)} indices"
                    )
                result.vectors.append(self._combine_feature(fstate))
            total = lookup.total_indices()
            if result.cache_hits + result.pushdown_rows + result.raw_rows != total:
                raise InvariantError(
                    f"counter conservation broken on lookup {li}: "
                    f"{result.counters} vs {total} indices"
                )
        self._offer_rows(state)
        self._cache_maintenance(state)
        self.batch_metrics.append(BatchMetrics(
            batch_id=state.batch.batch_id, size=state.batch.size,
            started_at=state.t0, latency=latency, subrequests=state.subrequests,
            cache_hits=state.hits, cache_misses=state.misses,
            pushdown_groups=state.pushdown_groups, pushdown_rows=state.pushdown_rows,
            raw_rows=state.raw_rows,
            load_level=self._last_level, cache_budget=(
                self.cache.budget_bytes if self.cache else None),
            cache_used=self.cache.used_bytes if self.cache else None,
        ))
        if self.params.keep_results:
            self.results[state.batch.batch_id] = state.results
        del self._active[state.batch.batch_id]
        self._admit_next()

    def _combine_feature(self, fstate: _FeatureState) -> np.ndarray:
        if -1 in fstate.cached:  # pooled-result cache hit
            return fstate.cached[-1]
        raw_positions = sorted(set(fstate.cached) | set(fstate.raw))
        raw = [fstate.cached.get(p, fstate.raw.get(p)) for p in raw_positions]
        vector = combine_partials(fstate.partials, raw, fstate.feature.op)
        if self.cache is not None and self.cache.pooled_results_enabled:
            self.cache.pooled_put(fstate.feature.table_id, fstate.feature.op,
                                  fstate.feature.indices, vector)
        return vector

    def _offer_rows(self, state: _BatchState) -> None:
        """Admit raw-fetched rows (only; pushdown rows never reach the
        ranker) through the cache's admission policy."""
        if self.cache is None:
            return
        for (table_id, index), row in state.offers.items():
            self.cache.offer(table_id, index, row)

    def _cache_maintenance(self, state: _BatchState) -> None:
        if self.cache is None or self.tracker is None or self.policy is None:
            return
        level = self.tracker.record_batch(state.batch.size)
        self._last_level = level.value
        if not self.params.adaptive_cache:
            return
        meta_bytes = {t: m.row_bytes for t, m in self.deployment.metas.items()}
        fetcher = lambda table_id, index: self.deployment.get_row(table_id, index)
        row_bytes_of = lambda table_id: meta_bytes[table_id]
        proposed = self.policy.propose(self.cache.budget_bytes, level,
                                       self.tracker.windowed_value())
        if proposed != self.cache.budget_bytes:
            self.cache.resize(proposed, fetcher=fetcher, row_bytes_of=row_bytes_of)
        if self.params.admit_per_batch > 0:
            self.cache.stage_hot_admissions(fetcher, row_bytes_of,
                                            limit=self.params.admit_per_batch)
        self.cache.sketch.age()


# -- flat oracle -------------------------------------------------------------------

@dataclass
class EquivalenceReport:
    lookups_checked: int
    max_abs_diff: float
    max_tolerance_ratio: float  # <= 1.0 means inside tolerance

    @property
    def passed(self) -> bool:
        return self.max_tolerance_ratio <= 1.0


def flat_reference(deployment: Deployment, lookup: LookupRequest) -> list[np.ndarray]:
    """Recompute a lookup with no cache, no pushdown: direct row reads pooled
    flat in request order."""
    out = []
    for feature in lookup.features:
        rows = [deployment.get_row(feature.table_id, i) for i in feature.indices]
        out.append(pool_flat(rows, feature.op))
    return out


def end_to_end_equivalence_check(
    deployment: Deployment,
    batches: list[Batch],
    results: dict[int, list[LookupResult]],
    rel_tol: float = 1e-5,
    abs_floor: float = 1e-6,
) -> EquivalenceReport:
    """Diff pipeline outputs against the flat recomputation.

    An element passes when |a - b| <= max(abs_floor, rel_tol * |ref|); the
    report's ratio is |a - b| over that bound, maximized over all elements.
    """
    checked = 0
    max_abs = 0.0
    max_ratio = 0.0
    for batch in batches:
        batch_results = results[batch.batch_id]
        for lookup, result in zip(batch.lookups, batch_results):
            reference = flat_reference(deployment, lookup)
            for ref, got in zip(reference, result.vectors):
                diff = np.abs(ref.astype(np.float64) - got.astype(np.float64))
                bound = np.maximum(abs_floor, rel_tol * np.abs(ref.astype(np.float64)))
                max_abs = max(max_abs, float(diff.max(initial=0.0)))
                max_ratio = max(max_ratio, float((diff / bound).max(initial=0.0)))
            checked += 1
    return EquivalenceReport(lookups_checked=checked, max_abs_diff=max_abs,
                             max_tolerance_ratio=max_ratio)
