"""Lookup request shapes shared by the workload generator, router and ranker."""

from dataclasses import dataclass, field

from .errors import ConfigError
from .pooling import PoolingOp


@dataclass
class Feature:
    """One sparse feature of a lookup: which table, which rows, how to pool."""

    table_id: int
    op: PoolingOp
    indices: list[int]

    def __post_init__(self):
        if len(self.indices) == 0:
            raise ConfigError(f"feature on table {self.table_id} has no indices")


@dataclass
class LookupRequest:
    features: list[Feature]

    def __post_init__(self):
        if len(self.features) == 0:
            raise ConfigError("lookup has no features")

    def total_indices(self) -> int:
        return sum(len(f.indices) for f in self.features)


@dataclass
class Batch:
    batch_id: int
    tick: int
    lookups: list[LookupRequest] = field(default_factory=list)

    def __post_init__(self):
        if len(self.lookups) == 0:
            raise ConfigError(f"batch {self.batch_id} is empty")

    @property
    def size(self) -> int:
        return len(self.lookups)
