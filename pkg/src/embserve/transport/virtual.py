"""Deterministic discrete-event (virtual-time) transport backend.

Execution model, mirroring the threaded contract on one thread of control:

* Every engine is a serial worker. When idle it scans its connections
  round-robin, takes the head of a pending FIFO, and must then push the
  message through the connection's parallelism unit before doing anything
  else (a real I/O thread blocks in the NIC lock).
* A unit serializes posts. Service costs ``base_service_time`` plus
  ``lock_overhead`` when the unit is currently owned by two or more engines,
  which is exactly the penalty a mapping-aware assignment avoids.
* High-priority (credit) messages skip the engine queues entirely; they are
  scheduled at the unit with strict priority over queued normal messages,
  without preempting the message in service. This models the NIC-level
  service classes of the fast credit channel.
* Responses are credit-gated per connection: a server may have at most
  ``granted`` responses in flight or queued at the ranker, and stalls
  otherwise until a replenishment arrives by piggyback or fast channel.
  The response path itself is a latency + bytes/bandwidth delay; posting
  contention is modeled on the requesting side only.
* Live migration is three-phase: quiesce (the owner stops selecting the
  connection; new posts keep buffering in its pending FIFO, bounded by the
  connection's credit total), detach/attach (the connection is re-associated
  with the target engine's home domain once its in-service message drains),
  resume (the target engine starts draining the FIFO). Per-connection FIFO
  order is asserted on every completion.

With a fixed seed, runs are bit-reproducible: the event queue breaks ties
by insertion sequence and nothing reads wall clocks.
"""

import heapq
from collections import deque
from dataclasses import dataclass
from typing import Callable

from .. import wire
from ..errors import ConfigError, FlowControlError, InvariantError
from .topology import Assignment, Connection, Engine, Priority, Topology


class EventLoop:
    """Min-heap of (time, seq, fn) with deterministic tie-breaking.

    Housekeeping events (samplers, rebalance ticks) do not count as pending
    work; their handlers are expected to stop rescheduling themselves once
    ``real_pending`` reaches zero, so the loop can run to quiescence.
    """

    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = 0
        self.real_pending = 0

    def schedule(self, delay: float, fn: Callable[[], None], housekeeping: bool = False) -> None:
        if delay < 0:
            raise InvariantError(f"negative delay {delay}")
        if not housekeeping:
            self.real_pending += 1
        heapq.heappush(self._heap, (self.now + delay, self._seq, housekeeping, fn))
        self._seq += 1

    def run(self) -> None:
        while self._heap:
            when, _, housekeeping, fn = heapq.heappop(self._heap)
            self.now = when
            if not housekeeping:
                self.real_pending -= 1
            fn()


@dataclass
class TransportParams:
    base_service_time: float = 1.0
    lock_overhead: float = 2.0
    wire_delay: float = 0.5
    response_latency: float = 0.5
    response_per_byte: float = 0.0005
    queue_capacity: int = 16
    credit_mode: str = "auto"  # piggyback | fast | auto
    credit_grace: float | None = None  # auto mode; defaults to base_service_time
    server_fixed_time: float = 0.2
    server_per_row_time: float = 0.05
    aggregation_fixed_time: float = 0.1
    aggregation_per_vector_time: float = 0.01
    rebalance_enabled: bool = False
    rebalance_period: float = 50.0
    imbalance_factor: float = 4.0
    max_migrations_per_tick: int = 1
    sample_period: float = 5.0

    def __post_init__(self):
        if self.credit_mode not in ("piggyback", "fast", "auto"):
            raise ConfigError(f"unknown credit_mode '{self.credit_mode}'")
        if self.credit_grace is None:
            self.credit_grace = self.base_service_time


class Message:
    __slots__ = (
        "msg_id", "conn_id", "seq", "kind", "size_bytes", "payload", "respond",
        "created", "service_start", "completed", "carried_grants", "priority",
    )

    def __init__(self, msg_id, conn_id, seq, kind, size_bytes, payload, respond, created,
                 priority=Priority.NORMAL):
        self.msg_id = msg_id
        self.conn_id = conn_id
        self.seq = seq
        self.kind = kind
        self.size_bytes = size_bytes
        self.payload = payload
        self.respond = respond
        self.created = created
        self.service_start = None
        self.completed = None
        self.carried_grants: list = []
        self.priority = priority


class GrantRecord:
    __slots__ = ("conn_id", "k", "decided", "delivered", "mode", "picked")

    def __init__(self, conn_id, k, decided, mode):
        self.conn_id = conn_id
        self.k = k
        self.decided = decided
        self.delivered = None
        self.mode = mode
        self.picked = False


@dataclass
class ServerWork:
    """What one delivered subrequest costs a server and what comes back."""

    service_time: float
    needs_slot: bool
    respond: bool
    response_size: int
    response_payload: object = None
    payload_bytes: int = 0  # embedding scalars inside the response


class _Response:
    __slots__ = ("msg", "size_bytes", "payload", "payload_bytes", "ready", "stalled_at")

    def __init__(self, msg, size_bytes, payload, payload_bytes, ready):
        self.msg = msg
        self.size_bytes = size_bytes
        self.payload = payload
        self.payload_bytes = payload_bytes
        self.ready = ready
        self.stalled_at = None


@dataclass
class MigrationReport:
    conn_id: int
    from_engine: int
    to_engine: int
    noop: bool = False
    started_at: float = 0.0
    finished_at: float | None = None
    old_domain: int | None = None
    new_domain: int | None = None
    buffered_posts: int = 0


class _EngineState:
    __slots__ = ("current", "parked")

    def __init__(self):
        self.current: tuple | None = None  # (Connection, Message)
        self.parked = False


class _UnitState:
    __slots__ = ("unit", "busy", "waiters", "high")

    def __init__(self, unit):
        self.unit = unit
        self.busy = False
        self.waiters: deque = deque()  # engine ids, FIFO
        self.high: deque = deque()     # high-priority messages, FIFO


class _ServerState:
    __slots__ = ("peer", "cpu_slots", "active", "queue")

    def __init__(self, peer, cpu_slots):
        self.peer = peer
        self.cpu_slots = cpu_slots
        self.active = 0
        self.queue: deque = deque()  # (msg, work, enqueued_at)


class _ConnState:
    __slots__ = ("pending_grants", "resp_wait", "task_queue", "fast_pending", "fast_busy")

    def __init__(self):
        self.pending_grants: list = []   # GrantRecords not yet departed
        self.resp_wait: deque = deque()  # responses waiting for credit
        self.task_queue = 0              # responses sitting at the ranker
        self.fast_pending: list = []     # grants coalescing for the next credit msg
        self.fast_busy = False           # a credit message is in service/queued


class VirtualTransport:
    """Virtual-time execution of the engine/unit/credit model."""

    def __init__(
        self,
        loop: EventLoop,
        topology: Topology,
        assignment: Assignment,
        params: TransportParams,
        handler: Callable[[Message], ServerWork | None] | None = None,
        on_response: Callable[[int, object], None] | None = None,
        server_slots: dict[int, int] | None = None,
        auto_consume: bool = False,
    ):
        self.loop = loop
        self.topology = topology
        self.assignment = assignment
        self.params = params
        self.handler = handler or self._default_handler
        self.on_response = on_response
        self.auto_consume = auto_consume
        self._engine_states = {e.engine_id: _EngineState() for e in assignment.engines}
        self._units = {u.unit_id: _UnitState(u) for u in topology.units}
        self._servers = {
            peer: _ServerState(peer, (server_slots or {}).get(peer, 16))
            for peer in topology.peers
        }
        self._conn_states = {c.conn_id: _ConnState() for c in topology.connections}
        self._owner_counts: dict[int, dict[int, int]] = {u.unit_id: {} for u in topology.units}
        for conn in topology.connections:
            if conn.engine_id is not None:
                self._owner_inc(conn.unit_id, conn.engine_id)
        self._migration_targets: dict[int, tuple[int, MigrationReport]] = {}
        self._msg_counter = 0
        self._live = 0
        self.migration_reports: list[MigrationReport] = []
        self.counters = {
            "posted": 0, "delivered": 0, "server_done": 0, "responses_sent": 0,
            "responses_consumed": 0, "credit_msgs": 0, "credit_applied": 0,
            "stall_count": 0, "unit_posts": 0, "request_bytes": 0,
            "credit_annotation_bytes": 0, "response_bytes": 0,
            "response_payload_bytes": 0, "migration_buffer_overflows": 0,
            "migration_buffer_peak": 0,
        }
        self.stall_time = 0.0
        self.stats = {
            "queue_wait": [], "post_latency": [], "server_time": [],
            "server_queue_wait": [], "response_transit": [],
            "grant_latency": {"piggyback": [], "fast": []},
            "backlog_samples": [],  # (t, [depth per engine])
        }
        self._sampling = False
        if params.rebalance_enabled:
            self.loop.schedule(params.rebalance_period, self._rebalance_event,
                               housekeeping=True)

    # -- shared-unit predicate ------------------------------------------------

    def _owner_inc(self, unit_id: int, engine_id: int) -> None:
        counts = self._owner_counts[unit_id]
        counts[engine_id] = counts.get(engine_id, 0) + 1

    def _owner_dec(self, unit_id: int, engine_id: int) -> None:
        counts = self._owner_counts[unit_id]
        counts[engine_id] -= 1
        if counts[engine_id] == 0:
            del counts[engine_id]

    def unit_is_shared(self, unit_id: int) -> bool:
        return len(self._owner_counts[unit_id]) >= 2

    # -- posting ---------------------------------------------------------------

    def post_subrequest(self, conn_id: int, payload=None, size_bytes: int = 0,
                        respond: bool = True) -> Message:
        """Queue one subrequest on a connection's FIFO. Pending credit grants
        for that connection are picked up here (piggyback)."""
        conn = self.topology.conn(conn_id)
        if conn.priority is Priority.HIGH:
            raise ConfigError("subrequests must use normal-priority connections")
        msg = Message(self._msg_counter, conn_id, conn.posted_seq, "request",
                      size_bytes, payload, respond, self.loop.now)
        self._msg_counter += 1
        conn.posted_seq += 1
        cs = self._conn_states[conn_id]
        if cs.pending_grants:
            msg.carried_grants = cs.pending_grants
            for rec in msg.carried_grants:
                rec.picked = True
            cs.pending_grants = []
            conn.credit.pending_replenish = 0
            msg.size_bytes += wire.CREDIT_FIELD_BYTES
            self.counters["credit_annotation_bytes"] += wire.CREDIT_FIELD_BYTES
        conn.pending.append(msg)
        self._live += 1
        self.counters["posted"] += 1
        self.counters["request_bytes"] += msg.size_bytes
        if conn.migrating:
            # Quiesce buffering never rejects or drops; the designed bound
            # (the connection's credit total) is tracked as an observable so
            # runs with pathological mid-migration bursts are visible.
            conn.migration_arrivals += 1
            if conn.migration_arrivals > conn.credit.granted:
                self.counters["migration_buffer_overflows"] += 1
            self.counters["migration_buffer_peak"] = max(
                self.counters["migration_buffer_peak"], conn.migration_arrivals)
        else:
            self._kick(self.assignment.engine(conn.engine_id))
        return msg

    def _kick(self, engine: Engine) -> None:
        st = self._engine_states[engine.engine_id]
        if st.current is not None:
            return
        n = len(engine.conn_ids)
        for i in range(n):
            cid = engine.conn_ids[(engine.rr_pos + i) % n]
            conn = self.topology.conn(cid)
            if conn.migrating or not conn.pending:
                continue
            engine.rr_pos = (engine.rr_pos + i + 1) % n
            msg = conn.pending.popleft()
            conn.in_flight = True
            st.current = (conn, msg)
            self._request_unit(self._units[conn.unit_id], engine)
            return

    def _request_unit(self, u: _UnitState, engine: Engine) -> None:
        st = self._engine_states[engine.engine_id]
        if u.busy:
            u.waiters.append(engine.engine_id)
            st.parked = True
        else:
            self._start_engine_service(u, engine)

    def _service_time(self, u: _UnitState) -> float:
        dur = u.unit.base_service_time
        if self.unit_is_shared(u.unit.unit_id):
            dur += u.unit.lock_overhead
        return dur

    def _start_engine_service(self, u: _UnitState, engine: Engine) -> None:
        st = self._engine_states[engine.engine_id]
        st.parked = False
        conn, msg = st.current
        u.busy = True
        msg.service_start = self.loop.now
        self.loop.schedule(self._service_time(u),
                           lambda: self._complete_engine_service(u, engine))

    def _complete_engine_service(self, u: _UnitState, engine: Engine) -> None:
        st = self._engine_states[engine.engine_id]
        conn, msg = st.current
        st.current = None
        msg.completed = self.loop.now
        if msg.seq != conn.completed_seq:
            raise InvariantError(
                f"FIFO violation on conn {conn.conn_id}: completed seq {msg.seq}, "
                f"expected {conn.completed_seq}"
            )
        conn.completed_seq += 1
        conn.in_flight = False
        self.counters["unit_posts"] += 1
        self.stats["queue_wait"].append(msg.service_start - msg.created)
        self.stats["post_latency"].append(msg.completed - msg.created)
        self.loop.schedule(self.params.wire_delay, lambda: self._deliver(msg))
        if conn.migrating:
            self._finish_migration(conn)
        self._kick(engine)
        self._release_unit(u)

    def _release_unit(self, u: _UnitState) -> None:
        u.busy = False
        if u.high:
            self._start_high_service(u, u.high.popleft())
        elif u.waiters:
            eid = u.waiters.popleft()
            self._start_engine_service(u, self.assignment.engine(eid))

    # -- high-priority credit channel -------------------------------------------

    def send_credit_fast(self, rec: GrantRecord) -> None:
        """Carry a grant on the per-peer high-priority connection. Credit
        messages are scheduled at the unit directly (NIC service level),
        ahead of any queued normal message but without preempting the one in
        service. Grants coalesce: while a credit message is outstanding on a
        channel, new grants accumulate and ride the next message together."""
        conn = self.topology.conn(rec.conn_id)
        qos_id = self.topology.qos_conn_by_peer.get(conn.peer)
        if qos_id is None:
            raise ConfigError(f"no high-priority connection for peer {conn.peer}")
        qs = self._conn_states[qos_id]
        qs.fast_pending.append(rec)
        if not qs.fast_busy:
            self._dispatch_fast(qos_id)

    def _dispatch_fast(self, qos_id: int) -> None:
        qos = self.topology.conn(qos_id)
        qs = self._conn_states[qos_id]
        msg = Message(self._msg_counter, qos_id, qos.posted_seq, "credit",
                      wire.credit_message_bytes(), None, False, self.loop.now,
                      priority=Priority.HIGH)
        self._msg_counter += 1
        qos.posted_seq += 1
        msg.carried_grants = qs.fast_pending
        qs.fast_pending = []
        qs.fast_busy = True
        self._live += 1
        self.counters["credit_msgs"] += 1
        u = self._units[qos.unit_id]
        if u.busy:
            u.high.append(msg)
        else:
            self._start_high_service(u, msg)

    def _start_high_service(self, u: _UnitState, msg: Message) -> None:
        u.busy = True
        msg.service_start = self.loop.now
        self.loop.schedule(self._service_time(u),
                           lambda: self._complete_high_service(u, msg))

    def _complete_high_service(self, u: _UnitState, msg: Message) -> None:
        msg.completed = self.loop.now
        qos = self.topology.conn(msg.conn_id)
        if msg.seq != qos.completed_seq:
            raise InvariantError(f"FIFO violation on qos conn {msg.conn_id}")
        qos.completed_seq += 1
        self.counters["unit_posts"] += 1
        self.loop.schedule(self.params.wire_delay, lambda: self._deliver(msg))
        qs = self._conn_states[msg.conn_id]
        if qs.fast_pending:
            self._dispatch_fast(msg.conn_id)
        else:
            qs.fast_busy = False
        self._release_unit(u)

    # -- credit flow -------------------------------------------------------------

    def replenish(self, conn_id: int, k: int = 1) -> GrantRecord:
        """Ranker-side grant decision for freed task-queue capacity. Routing
        depends on credit_mode: ride the next request out (piggyback), go on
        the fast channel now (fast), or piggyback with a grace window and
        fall back to the fast channel (auto)."""
        mode = self.params.credit_mode
        rec = GrantRecord(conn_id, k, self.loop.now, mode)
        cs = self._conn_states[conn_id]
        conn = self.topology.conn(conn_id)
        if mode == "fast":
            rec.mode = "fast"
            self.send_credit_fast(rec)
        elif mode == "piggyback":
            cs.pending_grants.append(rec)
            conn.credit.pending_replenish += k
        else:  # auto
            cs.pending_grants.append(rec)
            conn.credit.pending_replenish += k
            self.loop.schedule(self.params.credit_grace,
                               lambda: self._grace_expired(conn_id, rec))
        return rec

    def _grace_expired(self, conn_id: int, rec: GrantRecord) -> None:
        if rec.picked:
            return
        cs = self._conn_states[conn_id]
        cs.pending_grants.remove(rec)
        conn = self.topology.conn(conn_id)
        conn.credit.pending_replenish -= rec.k
        rec.picked = True
        rec.mode = "fast"
        self.send_credit_fast(rec)

    def _apply_grants(self, msg: Message) -> None:
        for rec in msg.carried_grants:
            rec.delivered = self.loop.now
            target = self.topology.conn(rec.conn_id)
            target.credit.apply_replenish(rec.k)
            bucket = "fast" if rec.mode == "fast" else "piggyback"
            self.stats["grant_latency"][bucket].append(rec.delivered - rec.decided)
            self.counters["credit_applied"] += 1
            self._flush_responses(target)

    # -- server side ----------------------------------------------------------------

    def _default_handler(self, msg: Message) -> ServerWork | None:
        if not msg.respond:
            return None
        return ServerWork(
            service_time=self.params.server_fixed_time,
            needs_slot=False,
            respond=True,
            response_size=32,
        )

    def _deliver(self, msg: Message) -> None:
        self.counters["delivered"] += 1
        self._apply_grants(msg)
        if msg.kind == "credit":
            self._live -= 1
            return
        work = self.handler(msg)
        if work is None:
            self._live -= 1
            return
        server = self._servers[self.topology.conn(msg.conn_id).peer]
        if work.needs_slot and server.active >= server.cpu_slots:
            server.queue.append((msg, work, self.loop.now))
        else:
            if work.needs_slot:
                self.stats["server_queue_wait"].append(0.0)
            self._server_start(server, msg, work)

    def _server_start(self, server: _ServerState, msg: Message, work: ServerWork) -> None:
        if work.needs_slot:
            server.active += 1
        self.loop.schedule(work.service_time,
                           lambda: self._server_task_done(server, msg, work))

    def _server_task_done(self, server: _ServerState, msg: Message, work: ServerWork) -> None:
        if work.needs_slot:
            server.active -= 1
            if server.queue:
                nxt_msg, nxt_work, enqueued = server.queue.popleft()
                self.stats["server_queue_wait"].append(self.loop.now - enqueued)
                self._server_start(server, nxt_msg, nxt_work)
        self.counters["server_done"] += 1
        self.stats["server_time"].append(work.service_time)
        if not work.respond:
            self._live -= 1
            return
        conn = self.topology.conn(msg.conn_id)
        resp = _Response(msg, work.response_size, work.response_payload,
                         work.payload_bytes, self.loop.now)
        if conn.credit.can_send():
            self._send_response(conn, resp)
        else:
            resp.stalled_at = self.loop.now
            self.counters["stall_count"] += 1
            self._conn_states[conn.conn_id].resp_wait.append(resp)

    def _send_response(self, conn: Connection, resp: _Response) -> None:
        conn.credit.on_send()
        if resp.stalled_at is not None:
            self.stall_time += self.loop.now - resp.stalled_at
        self.counters["responses_sent"] += 1
        self.counters["response_bytes"] += resp.size_bytes
        self.counters["response_payload_bytes"] += resp.payload_bytes
        transit = self.params.response_latency + resp.size_bytes * self.params.response_per_byte
        self.stats["response_transit"].append(transit)
        self.loop.schedule(transit, lambda: self._response_arrive(conn, resp))

    def _flush_responses(self, conn: Connection) -> None:
        cs = self._conn_states[conn.conn_id]
        while cs.resp_wait and conn.credit.can_send():
            self._send_response(conn, cs.resp_wait.popleft())

    def _response_arrive(self, conn: Connection, resp: _Response) -> None:
        cs = self._conn_states[conn.conn_id]
        cs.task_queue += 1
        if cs.task_queue > conn.credit.granted:
            raise FlowControlError(
                f"task queue on conn {conn.conn_id} grew to {cs.task_queue}, "
                f"capacity {conn.credit.granted}"
            )
        if self.on_response is not None:
            self.on_response(conn.conn_id, resp)
        if self.auto_consume:
            self.consume_response(conn.conn_id)

    def consume_response(self, conn_id: int) -> None:
        """Ranker pops one response off a connection's task queue, freeing a
        slot and deciding a replenishment grant for it."""
        cs = self._conn_states[conn_id]
        if cs.task_queue <= 0:
            raise InvariantError(f"consume on empty task queue, conn {conn_id}")
        cs.task_queue -= 1
        self.counters["responses_consumed"] += 1
        self._live -= 1
        self.replenish(conn_id, 1)

    # -- migration and rebalancing ------------------------------------------------

    def migrate_connection(self, conn_id: int, to_engine_id: int) -> MigrationReport:
        conn = self.topology.conn(conn_id)
        from_id = conn.engine_id
        if conn.priority is Priority.HIGH:
            raise ConfigError("high-priority connections are pinned, not migratable")
        report = MigrationReport(conn_id=conn_id, from_engine=from_id,
                                 to_engine=to_engine_id, started_at=self.loop.now)
        if from_id == to_engine_id or conn.migrating:
            report.noop = True
            return report
        conn.migrating = True
        conn.migration_arrivals = 0
        self._migration_targets[conn_id] = (to_engine_id, report)
        self.migration_reports.append(report)
        if not conn.in_flight:
            self._finish_migration(conn)
        return report

    def _finish_migration(self, conn: Connection) -> None:
        entry = self._migration_targets.pop(conn.conn_id, None)
        if entry is None:
            return
        to_id, report = entry
        from_engine = self.assignment.engine(conn.engine_id)
        to_engine = self.assignment.engine(to_id)
        from_engine.conn_ids.remove(conn.conn_id)
        if from_engine.conn_ids:
            from_engine.rr_pos %= len(from_engine.conn_ids)
        else:
            from_engine.rr_pos = 0
        report.old_domain = conn.domain.domain_id
        self._owner_dec(conn.unit_id, from_engine.engine_id)
        conn.domain = self.topology.domains[to_engine.home_domain]
        conn.engine_id = to_id
        to_engine.conn_ids.append(conn.conn_id)
        self._owner_inc(conn.unit_id, to_id)
        conn.migrating = False
        report.new_domain = conn.domain.domain_id
        report.finished_at = self.loop.now
        report.buffered_posts = conn.migration_arrivals
        self.assignment.by_conn[conn.conn_id] = to_id
        if conn.pending:
            self._kick(to_engine)

    def engine_backlog(self, engine: Engine) -> int:
        return sum(self.topology.conn(c).backlog() for c in engine.conn_ids)

    def rebalance_tick(self) -> list[MigrationReport]:
        """Move the most-loaded connection off the most-backlogged engine when
        the max/min backlog ratio exceeds the imbalance factor."""
        moves: list[MigrationReport] = []
        for _ in range(self.params.max_migrations_per_tick):
            loads = [(self.engine_backlog(e), e.engine_id) for e in self.assignment.engines]
            max_load, max_id = max(loads, key=lambda t: (t[0], -t[1]))
            min_load, min_id = min(loads)
            if max_id == min_id or max_load <= self.params.imbalance_factor * min_load:
                break
            candidates = [
                (self.topology.conn(c).backlog(), c)
                for c in self.assignment.engine(max_id).conn_ids
                if not self.topology.conn(c).migrating
                and self.topology.conn(c).priority is Priority.NORMAL
            ]
            candidates = [(b, c) for b, c in candidates if b > 0]
            if not candidates:
                break
            _, conn_id = max(candidates, key=lambda t: (t[0], -t[1]))
            moves.append(self.migrate_connection(conn_id, min_id))
        return moves

    def _rebalance_event(self) -> None:
        self.rebalance_tick()
        # Reschedule only while real events remain; a wedged run (stalled
        # credits, no events) must still drain to quiescence checking.
        if self.loop.real_pending > 0:
            self.loop.schedule(self.params.rebalance_period, self._rebalance_event,
                               housekeeping=True)

    # -- sampling and bookkeeping -----------------------------------------------

    def start_sampling(self) -> None:
        self._sampling = True
        self.loop.schedule(0.0, self._sample_event, housekeeping=True)

    def _sample_event(self) -> None:
        loads = [self.engine_backlog(e) for e in self.assignment.engines]
        self.stats["backlog_samples"].append((self.loop.now, loads))
        if self.loop.real_pending > 0:
            self.loop.schedule(self.params.sample_period, self._sample_event,
                               housekeeping=True)

    def live_messages(self) -> int:
        return self._live

    def run_until_idle(self) -> None:
        self.loop.run()

    def check_quiescence(self) -> None:
        """After run(): every posted subrequest must have fully completed.
        Raises with a diagnostic dump when responses are still stalled."""
        if self._live != 0:
            stalled = {
                c.conn_id: len(self._conn_states[c.conn_id].resp_wait)
                for c in self.topology.connections
                if self._conn_states[c.conn_id].resp_wait
            }
            raise InvariantError(
                f"run ended with {self._live} live messages; "
                f"stalled responses per conn: {stalled}; counters={self.counters}"
            )
