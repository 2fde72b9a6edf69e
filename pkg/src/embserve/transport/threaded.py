"""Real-thread loopback backend.

Engines are daemon threads; parallelism units are mutual-exclusion regions
with strict priority for credit posts; service time is a calibrated wall
delay (sleep-based: a pure-Python busy-wait would serialize on the GIL and
hide the parallelism the model exists to show). Wall-clock numbers from this
backend are reported for demos and never gate acceptance; the virtual-time
backend is authoritative.
"""

import threading
import time
from collections import deque
from dataclasses import dataclass

from ..errors import ConfigError, InvariantError
from .topology import Assignment, Priority, Topology


class PriorityLock:
    """Mutual exclusion with a high-priority fast lane: normal acquirers
    yield to any waiting high-priority acquirer, and nothing preempts the
    holder."""

    def __init__(self):
        self._cond = threading.Condition()
        self._busy = False
        self._high_waiting = 0

    def acquire(self, high: bool = False) -> None:
        with self._cond:
            if high:
                self._high_waiting += 1
                while self._busy:
                    self._cond.wait()
                self._high_waiting -= 1
            else:
                while self._busy or self._high_waiting > 0:
                    self._cond.wait()
            self._busy = True

    def release(self) -> None:
        with self._cond:
            self._busy = False
            self._cond.notify_all()


@dataclass
class ThreadedParams:
    tick_seconds: float = 0.0002  # wall seconds per virtual tick
    base_service_time: float = 1.0
    lock_overhead: float = 2.0


class ThreadedTransport:
    """Thread-per-engine execution of the same ownership contract as the
    virtual backend: exclusive connection ownership between migrations,
    mutually exclusive units, FIFO per connection."""

    def __init__(self, topology: Topology, assignment: Assignment, params: ThreadedParams):
        self.topology = topology
        self.assignment = assignment
        self.params = params
        self._locks = {u.unit_id: PriorityLock() for u in topology.units}
        self._state_lock = threading.Lock()
        self._conn_locks = {c.conn_id: threading.Lock() for c in topology.connections}
        self._completions: dict[int, list[int]] = {c.conn_id: [] for c in topology.connections}
        self._owner_counts: dict[int, dict[int, int]] = {u.unit_id: {} for u in topology.units}
        for conn in topology.connections:
            if conn.engine_id is not None:
                counts = self._owner_counts[conn.unit_id]
                counts[conn.engine_id] = counts.get(conn.engine_id, 0) + 1
        self._stop = False
        self._work = threading.Semaphore(0)
        self.completed = 0
        self.posted = 0
        self._done = threading.Condition()
        self._threads = [
            threading.Thread(target=self._engine_loop, args=(e.engine_id,), daemon=True)
            for e in assignment.engines
        ]

    # -- shared-unit predicate, same contract as the virtual backend --------

    def _unit_shared(self, unit_id: int) -> bool:
        with self._state_lock:
            return len(self._owner_counts[unit_id]) >= 2

    def _service(self, unit_id: int) -> None:
        ticks = self.params.base_service_time
        if self._unit_shared(unit_id):
            ticks += self.params.lock_overhead
        time.sleep(ticks * self.params.tick_seconds)

    # -- posting -----------------------------------------------------------

    def post(self, conn_id: int) -> None:
        conn = self.topology.conn(conn_id)
        if conn.priority is Priority.HIGH:
            raise ConfigError("use post_credit for high-priority connections")
        with self._conn_locks[conn_id]:
            seq = conn.posted_seq
            conn.posted_seq += 1
            conn.pending.append(seq)
        with self._done:
            self.posted += 1
        self._work.release()

    def post_credit(self, peer: int) -> None:
        """Synchronous high-priority post through the peer's QoS connection."""
        qos_id = self.topology.qos_conn_by_peer[peer]
        qos = self.topology.conn(qos_id)
        lock = self._locks[qos.unit_id]
        lock.acquire(high=True)
        try:
            self._service(qos.unit_id)
        finally:
            lock.release()

    # -- engine workers -------------------------------------------------------

    def _select(self, engine_id: int):
        engine = self.assignment.engine(engine_id)
        with self._state_lock:
            n = len(engine.conn_ids)
            for i in range(n):
                cid = engine.conn_ids[(engine.rr_pos + i) % n]
                conn = self.topology.conn(cid)
                if conn.migrating or not conn.pending:
                    continue
                with self._conn_locks[cid]:
                    if not conn.pending:
                        continue
                    seq = conn.pending.popleft()
                    conn.in_flight = True
                engine.rr_pos = (engine.rr_pos + i + 1) % n
                return conn, seq
        return None

    def _engine_loop(self, engine_id: int) -> None:
        while True:
            self._work.acquire()
            if self._stop:
                return
            item = self._select(engine_id)
            if item is None:
                # Another engine won the race or the conn is quiescing;
                # requeue the work token for whoever can take it.
                self._work.release()
                time.sleep(0.0001)
                continue
            conn, seq = item
            lock = self._locks[conn.unit_id]
            lock.acquire()
            try:
                self._service(conn.unit_id)
            finally:
                lock.release()
            with self._conn_locks[conn.conn_id]:
                if seq != conn.completed_seq:
                    raise InvariantError(
                        f"FIFO violation on conn {conn.conn_id}: {seq} != "
                        f"{conn.completed_seq}")
                conn.completed_seq += 1
                conn.in_flight = False
                self._completions[conn.conn_id].append(seq)
            with self._done:
                self.completed += 1
                self._done.notify_all()

    # -- migration ---------------------------------------------------------------

    def migrate_connection(self, conn_id: int, to_engine_id: int) -> None:
        conn = self.topology.conn(conn_id)
        if conn.priority is Priority.HIGH:
            raise ConfigError("high-priority connections are pinned")
        with self._state_lock:
            if conn.engine_id == to_engine_id:
                return
            conn.migrating = True
        while True:  # quiesce: wait out the in-service message
            with self._conn_locks[conn_id]:
                if not conn.in_flight:
                    break
            time.sleep(0.0001)
        with self._state_lock:
            from_engine = self.assignment.engine(conn.engine_id)
            to_engine = self.assignment.engine(to_engine_id)
            from_engine.conn_ids.remove(conn_id)
            if from_engine.conn_ids:
                from_engine.rr_pos %= len(from_engine.conn_ids)
            else:
                from_engine.rr_pos = 0
            counts = self._owner_counts[conn.unit_id]
            counts[conn.engine_id] -= 1
            if counts[conn.engine_id] == 0:
                del counts[conn.engine_id]
            conn.domain = self.topology.domains[to_engine.home_domain]
            conn.engine_id = to_engine_id
            to_engine.conn_ids.append(conn_id)
            counts = self._owner_counts[conn.unit_id]
            counts[to_engine_id] = counts.get(to_engine_id, 0) + 1
            self.assignment.by_conn[conn_id] = to_engine_id
            conn.migrating = False

    # -- lifecycle -----------------------------------------------------------------

    def start(self) -> None:
        for t in self._threads:
            t.start()

    def join(self, timeout: float = 60.0) -> None:
        deadline = time.monotonic() + timeout
        with self._done:
            while self.completed < self.posted:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise InvariantError(
                        f"threaded run timed out: {self.completed}/{self.posted}")
                self._done.wait(timeout=min(0.2, remaining))
        self._stop = True
        for _ in self._threads:
            self._work.release()
        for t in self._threads:
            t.join(timeout=2.0)

    def completions(self, conn_id: int) -> list[int]:
        return list(self._completions[conn_id])


def run_threaded_stream(cfg, n_messages: int = 4000) -> "MetricsReport":
    """Wall-clock naive-vs-aware posting demo on real threads."""
    from ..transport.topology import assign_mapping_aware, assign_naive, create_connections
    from ..bench.report import MetricsReport, RunMetrics

    report = MetricsReport(experiment=cfg.experiment, seed=cfg.seed,
                           backend="threaded", fingerprint=cfg.fingerprint(),
                           config=cfg.to_dict())
    for label, assigner in (("naive", assign_naive), ("mapping-aware", assign_mapping_aware)):
        peers = sorted({p.server for p in cfg.store.placement}) or [0]
        topology = create_connections(
            num_units=cfg.transport.num_units, peers=peers,
            conns_per_peer=cfg.transport.connections_per_peer,
            base_service_time=cfg.transport.base_service_time,
            lock_overhead=cfg.transport.lock_overhead,
            queue_capacity=cfg.transport.queue_capacity,
        )
        assignment = assigner(topology, cfg.transport.num_engines)
        transport = ThreadedTransport(topology, assignment, ThreadedParams(
            base_service_time=cfg.transport.base_service_time,
            lock_overhead=cfg.transport.lock_overhead,
        ))
        transport.start()
        normal = topology.normal_conn_ids()
        t0 = time.monotonic()
        for i in range(n_messages):
            transport.post(normal[i % len(normal)])
        transport.join(timeout=120.0)
        elapsed = time.monotonic() - t0
        report.runs.append(RunMetrics(
            label=label, makespan=elapsed,
            throughput=n_messages / elapsed if elapsed else 0.0,
            throughput_unit="msgs/s (wall)",
            counters={"posted": transport.posted, "completed": transport.completed},
            extras={"messages": n_messages},
        ))
    naive_tp = report.run("naive").throughput
    aware_tp = report.run("mapping-aware").throughput
    report.comparison.update({
        "throughput_naive": naive_tp,
        "throughput_aware": aware_tp,
        "ratio_naive_over_aware": naive_tp / aware_tp if aware_tp else 0.0,
    })
    report.invariants.update({"wall_clock": True, "gating": False})
    return report
