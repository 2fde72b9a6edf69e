"""embserve: a disaggregated embedding-lookup serving engine.

Embedding tables live as row-wise shards on embedding servers; rankers
resolve sparse indices through a range-based routing table, serve hot rows
from an adaptive GPU cache, push partial pooling down to the servers, and
fan subrequests out over a modeled multi-threaded transport with credit
flow control. All gated measurements run on the deterministic virtual-time
backend.
"""

__version__ = "0.1.0"

from .cache import AdaptiveCache, CachePolicy, LoadLevel, LoadTracker, MemoryModel
from .errors import (
    CapacityError,
    ConfigError,
    EmbServeError,
    FlowControlError,
    InvariantError,
    LookupValidationError,
    RoutingViolationError,
    TraceParseError,
)
from .pooling import PartialResult, PlanMode, PoolingOp, combine_partials, pool_flat
from .requests import Batch, Feature, LookupRequest
from .routing import RoutingTable, build_routing, group_by_server
from .store import Deployment, ServerStore, ShardSpec, TableMeta, init_store
from .workload import Trace, WorkloadConfig, generate_trace, load_trace, save_trace
