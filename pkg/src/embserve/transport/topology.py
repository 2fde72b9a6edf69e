"""Connections, NIC parallelism units, resource domains, and engine assignment.

The NIC exposes a fixed set of parallelism units; every post through a unit
is serialized, and a unit whose connections are owned by two or more engines
charges a per-post lock overhead on top of its base service time. Resource
domains are the visible one-to-one handles onto units: connection i is given
domain (i mod num_units) at creation, round-robin, and the domain mapping is
what lets an assignment policy see which connections collide.

Two assignment policies:

* ``assign_naive`` deals connections to engines in contiguous conn-id blocks
  and ignores domains, so units typically end up shared between engines.
* ``assign_mapping_aware`` keeps every domain whole inside one engine
  (domain d -> engine d mod num_engines), which makes the shared-unit
  predicate false everywhere by construction.
"""

from collections import deque
from dataclasses import dataclass, field
from enum import Enum

from ..errors import ConfigError, FlowControlError


class Priority(Enum):
    NORMAL = "normal"
    HIGH = "high"


@dataclass
class ParallelismUnit:
    unit_id: int
    base_service_time: float
    lock_overhead: float


@dataclass(frozen=True)
class ResourceDomain:
    """Static handle onto one parallelism unit; the mapping never changes."""

    domain_id: int
    unit_id: int


class CreditState:
    """Per-connection response budget granted by the ranker.

    ``granted`` is the remote task-queue capacity the ranker will accept;
    ``outstanding`` counts responses in flight or queued at the ranker.
    ``outstanding <= granted`` is asserted on every mutation.
    """

    __slots__ = ("granted", "outstanding", "pending_replenish")

    def __init__(self, granted: int):
        self.granted = granted
        self.outstanding = 0
        self.pending_replenish = 0  # grants decided but not yet departed

    def can_send(self) -> bool:
        return self.outstanding < self.granted

    def on_send(self) -> None:
        self.outstanding += 1
        self._check()

    def apply_replenish(self, k: int) -> None:
        self.outstanding -= k
        if self.outstanding < 0:
            raise FlowControlError(f"replenish of {k} drove outstanding below zero")
        self._check()

    def _check(self) -> None:
        if self.outstanding > self.granted:
            raise FlowControlError(
                f"outstanding {self.outstanding} exceeds granted {self.granted}"
            )


class Connection:
    __slots__ = (
        "conn_id", "peer", "domain", "priority", "engine_id", "pending",
        "credit", "migrating", "in_flight", "posted_seq", "completed_seq",
        "migration_arrivals",
    )

    def __init__(self, conn_id: int, peer: int, domain: ResourceDomain,
                 priority: Priority, queue_capacity: int):
        self.conn_id = conn_id
        self.peer = peer
        self.domain = domain
        self.priority = priority
        self.engine_id: int | None = None
        self.pending: deque = deque()
        self.credit = CreditState(queue_capacity)
        self.migrating = False
        self.in_flight = False
        self.posted_seq = 0      # next sequence number to stamp on a post
        self.completed_seq = 0   # last completed sequence + 1 (FIFO check)
        self.migration_arrivals = 0

    @property
    def unit_id(self) -> int:
        return self.domain.unit_id

    def backlog(self) -> int:
        return len(self.pending) + (1 if self.in_flight else 0)


@dataclass
class Engine:
    """One I/O engine with a dedicated worker; owns its connections
    exclusively between migrations."""

    engine_id: int
    conn_ids: list[int] = field(default_factory=list)
    home_domain: int = 0
    rr_pos: int = 0


@dataclass
class Topology:
    units: list[ParallelismUnit]
    domains: list[ResourceDomain]
    connections: list[Connection]
    peers: list[int]
    qos_conn_by_peer: dict[int, int] = field(default_factory=dict)

    def conn(self, conn_id: int) -> Connection:
        return self.connections[conn_id]

    def normal_conn_ids(self) -> list[int]:
        return [c.conn_id for c in self.connections if c.priority is Priority.NORMAL]

    def unit_connections(self) -> dict[int, list[int]]:
        """The visible unit -> connections mapping."""
        out: dict[int, list[int]] = {u.unit_id: [] for u in self.units}
        for c in self.connections:
            out[c.unit_id].append(c.conn_id)
        return out


def create_connections(
    num_units: int,
    peers: list[int],
    conns_per_peer: int = 1,
    policy: str = "round_robin",
    base_service_time: float = 1.0,
    lock_overhead: float = 2.0,
    queue_capacity: int = 16,
    with_qos: bool = True,
) -> Topology:
    """Create the unit/domain/connection topology.

    Normal connections are created peer-major; connection i is allocated
    domain (i mod num_units). When ``with_qos`` is set, one extra
    high-priority connection per peer is appended, continuing the same
    round-robin counter.
    """
    if num_units < 1:
        raise ConfigError("num_units must be >= 1")
    if not peers:
        raise ConfigError("at least one peer is required")
    if policy != "round_robin":
        raise ConfigError(f"unknown allocation policy '{policy}'")
    units = [ParallelismUnit(u, base_service_time, lock_overhead) for u in range(num_units)]
    domains = [ResourceDomain(domain_id=u, unit_id=u) for u in range(num_units)]
    connections: list[Connection] = []
    for peer in peers:
        for _ in range(conns_per_peer):
            cid = len(connections)
            connections.append(Connection(
                conn_id=cid, peer=peer, domain=domains[cid % num_units],
                priority=Priority.NORMAL, queue_capacity=queue_capacity,
            ))
    qos: dict[int, int] = {}
    if with_qos:
        for peer in peers:
            cid = len(connections)
            connections.append(Connection(
                conn_id=cid, peer=peer, domain=domains[cid % num_units],
                priority=Priority.HIGH, queue_capacity=queue_capacity,
            ))
            qos[peer] = cid
    return Topology(units=units, domains=domains, connections=connections,
                    peers=list(peers), qos_conn_by_peer=qos)


@dataclass
class Assignment:
    policy: str
    engines: list[Engine]
    by_conn: dict[int, int] = field(default_factory=dict)

    def engine(self, engine_id: int) -> Engine:
        return self.engines[engine_id]


def _finish(topology: Topology, engines: list[Engine], policy: str) -> Assignment:
    by_conn = {}
    for e in engines:
        domain_counts: dict[int, int] = {}
        for cid in e.conn_ids:
            conn = topology.conn(cid)
            conn.engine_id = e.engine_id
            by_conn[cid] = e.engine_id
            domain_counts[conn.domain.domain_id] = domain_counts.get(conn.domain.domain_id, 0) + 1
        if domain_counts:
            e.home_domain = max(sorted(domain_counts), key=lambda d: domain_counts[d])
        else:
            e.home_domain = e.engine_id % len(topology.domains)
    return Assignment(policy=policy, engines=engines, by_conn=by_conn)


def assign_naive(topology: Topology, num_engines: int) -> Assignment:
    """Deal connections to engines in contiguous conn-id blocks, blind to
    the domain mapping. With blocks spanning domains, units end up shared."""
    if num_engines < 1:
        raise ConfigError("num_engines must be >= 1")
    n = len(topology.connections)
    engines = [Engine(engine_id=e) for e in range(num_engines)]
    for e in range(num_engines):
        lo = e * n // num_engines
        hi = (e + 1) * n // num_engines
        engines[e].conn_ids = list(range(lo, hi))
    return _finish(topology, engines, "naive")


def assign_mapping_aware(topology: Topology, num_engines: int) -> Assignment:
    """Aggregate connections by resource domain so that no domain (hence no
    unit) spans two engines: the ordered domain list is split into contiguous,
    as-even-as-possible blocks, one block per engine."""
    if num_engines < 1:
        raise ConfigError("num_engines must be >= 1")
    engines = [Engine(engine_id=e) for e in range(num_engines)]
    by_domain: dict[int, list[int]] = {}
    for c in topology.connections:
        by_domain.setdefault(c.domain.domain_id, []).append(c.conn_id)
    domains = sorted(by_domain)
    n = len(domains)
    for e in range(num_engines):
        lo = e * n // num_engines
        hi = (e + 1) * n // num_engines
        for domain_id in domains[lo:hi]:
            engines[e].conn_ids.extend(sorted(by_domain[domain_id]))
    return _finish(topology, engines, "mapping_aware")


def shared_units(topology: Topology, assignment: Assignment) -> dict[int, set[int]]:
    """unit_id -> set of engines owning connections mapped to it."""
    owners: dict[int, set[int]] = {u.unit_id: set() for u in topology.units}
    for c in topology.connections:
        if c.engine_id is not None:
            owners[c.unit_id].add(c.engine_id)
    return owners
