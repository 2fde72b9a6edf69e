"""Experiment configuration: one human-editable YAML file, sections per module.

Every knob has an embedded default (printable with ``run --print-defaults``);
a config file only overrides what it names. Validation runs pre-flight and
reports the offending field path.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field

import yaml

from ..errors import ConfigError
from ..pooling import PoolingOp
from ..store import ShardSpec, TableMeta
from ..workload import CoOccurrence, Fluctuation, TableWorkload, WorkloadConfig

GIB = 1 << 30
MIB = 1 << 20


@dataclass
class TableConfig:
    id: int = 0
    rows: int = 10000
    dim: int = 64


@dataclass
class PlacementConfig:
    table: int = 0
    start: int = 0
    end: int = 10000
    server: int = 0


@dataclass
class StoreConfig:
    seed: int | None = None  # content seed; None -> experiment seed
    cpu_budget: int | None = None  # None -> 2 * transport.num_engines
    tables: list[TableConfig] = field(default_factory=lambda: [
        TableConfig(id=0, rows=10000, dim=64),
        TableConfig(id=1, rows=10000, dim=64),
    ])
    placement: list[PlacementConfig] = field(default_factory=lambda: [
        PlacementConfig(table=0, start=0, end=10000, server=0),
        PlacementConfig(table=1, start=0, end=10000, server=1),
    ])


@dataclass
class CacheConfig:
    enabled: bool = True
    gpu_capacity_bytes: int = 80 * GIB
    nn_fixed_bytes: int = 10 * GIB
    nn_per_sample_bytes: int = 256 * MIB
    high_watermark: int = 512
    low_watermark: int = 128
    window: int = 16
    window_stat: str = "mean"
    hysteresis_fraction: float = 0.05
    admission: str = "sketch"
    sketch_decay: float = 0.5
    admit_per_batch: int = 64  # hot-row swap-in trickle; 0 disables
    pooled_result_cache: bool = False
    initial_budget_bytes: int | None = None  # None -> target at base batch size


@dataclass
class PoolingConfig:
    pushdown_threshold: int | None = 2  # None disables pushdown


@dataclass
class RebalanceConfig:
    enabled: bool = False
    period: float = 50.0
    factor: float = 4.0
    max_migrations_per_tick: int = 1


@dataclass
class TransportConfig:
    num_units: int = 8
    num_engines: int = 8
    connections_per_peer: int = 8
    assignment: str = "mapping_aware"  # naive | mapping_aware
    base_service_time: float = 1.0
    lock_overhead: float = 2.0
    wire_delay: float = 0.5
    response_latency: float = 0.5
    response_per_byte: float = 0.0005
    queue_capacity: int = 16
    credit_mode: str = "auto"  # piggyback | fast | auto
    credit_grace: float | None = None
    server_fixed_time: float = 0.2
    server_per_row_time: float = 0.05
    aggregation_fixed_time: float = 0.1
    aggregation_per_vector_time: float = 0.01
    rebalance: RebalanceConfig = field(default_factory=RebalanceConfig)
    sample_period: float = 5.0


@dataclass
class WorkloadTableConfig:
    table: int = 0
    zipf_alpha: float = 1.0
    weight: float = 1.0
    op: str = "sum"


@dataclass
class FluctuationConfig:
    amplitude: float = 0.0
    period: int = 32


@dataclass
class CoOccurrenceConfig:
    group_size: int = 4
    prob: float = 0.0


@dataclass
class WorkloadSection:
    trace_path: str | None = None
    seed: int | None = None  # None -> experiment seed
    lookups_per_batch: int = 32
    indices_per_lookup: list[int] = field(default_factory=lambda: [4, 8])
    features_per_lookup: int = 1
    duration_batches: int = 50
    fluctuation: FluctuationConfig = field(default_factory=FluctuationConfig)
    co_occurrence: CoOccurrenceConfig | None = None
    tables: list[WorkloadTableConfig] = field(default_factory=lambda: [
        WorkloadTableConfig(table=0, zipf_alpha=1.0, weight=1.0, op="sum"),
        WorkloadTableConfig(table=1, zipf_alpha=0.8, weight=1.0, op="mean"),
    ])


@dataclass
class RankerConfig:
    pipeline_depth: int = 1
    keep_results: bool = True
    adaptive_cache: bool = True
    check_equivalence: bool = True


@dataclass
class ExperimentConfig:
    experiment: str = "smoke"
    seed: int = 0
    backend: str = "virtual"  # virtual | threaded
    out: str | None = None
    store: StoreConfig = field(default_factory=StoreConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    transport: TransportConfig = field(default_factory=TransportConfig)
    workload: WorkloadSection = field(default_factory=WorkloadSection)
    ranker: RankerConfig = field(default_factory=RankerConfig)

    # -- derived views -------------------------------------------------------

    def table_metas(self) -> list[TableMeta]:
        return [TableMeta(table_id=t.id, num_rows=t.rows, dim=t.dim)
                for t in self.store.tables]

    def shard_specs(self) -> list[ShardSpec]:
        return [ShardSpec(table_id=p.table, start=p.start, end=p.end, server_id=p.server)
                for p in self.store.placement]

    def store_seed(self) -> int:
        return self.seed if self.store.seed is None else self.store.seed

    def cpu_budget(self) -> int:
        if self.store.cpu_budget is not None:
            return self.store.cpu_budget
        return 2 * self.transport.num_engines

    def workload_config(self) -> WorkloadConfig:
        w = self.workload
        co = None
        if w.co_occurrence is not None and w.co_occurrence.prob > 0:
            co = CoOccurrence(group_size=w.co_occurrence.group_size,
                              prob=w.co_occurrence.prob)
        return WorkloadConfig(
            tables=[TableWorkload(table_id=t.table, zipf_alpha=t.zipf_alpha,
                                  weight=t.weight, op=PoolingOp(t.op))
                    for t in w.tables],
            lookups_per_batch=w.lookups_per_batch,
            indices_per_lookup=(w.indices_per_lookup[0], w.indices_per_lookup[1]),
            features_per_lookup=w.features_per_lookup,
            fluctuation=Fluctuation(amplitude=w.fluctuation.amplitude,
                                    period=w.fluctuation.period),
            duration_batches=w.duration_batches,
            seed=self.seed if w.seed is None else w.seed,
            co_occurrence=co,
        )

    def to_dict(self) -> dict:
        # `out` is an I/O location, not experiment semantics: keep it off the
        # provenance dict so summaries are pure functions of (config, seed).
        data = asdict(self)
        data.pop("out")
        return data

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def validate(self) -> None:
        if self.backend not in ("virtual", "threaded"):
            raise ConfigError(f"backend: unknown backend '{self.backend}'")
        if self.transport.assignment not in ("naive", "mapping_aware"):
            raise ConfigError(
                f"transport.assignment: unknown policy '{self.transport.assignment}'")
        if self.transport.credit_mode not in ("piggyback", "fast", "auto"):
            raise ConfigError(
                f"transport.credit_mode: unknown mode '{self.transport.credit_mode}'")
        if self.pooling.pushdown_threshold is not None and self.pooling.pushdown_threshold < 2:
            raise ConfigError("pooling.pushdown_threshold: must be >= 2 or null")
        if self.cache.admission not in ("sketch", "always"):
            raise ConfigError(f"cache.admission: unknown policy '{self.cache.admission}'")
        if self.cache.window_stat not in ("mean", "max"):
            raise ConfigError(f"cache.window_stat: unknown stat '{self.cache.window_stat}'")
        table_ids = {t.id for t in self.store.tables}
        if len(table_ids) != len(self.store.tables):
            raise ConfigError("store.tables: duplicate table id")
        for i, p in enumerate(self.store.placement):
            if p.table not in table_ids:
                raise ConfigError(
                    f"store.placement[{i}].table: table {p.table} not declared in store.tables")
        rows = {t.id: t.rows for t in self.store.tables}
        if self.workload.trace_path is None:
            for i, t in enumerate(self.workload.tables):
                if t.table not in table_ids:
                    raise ConfigError(
                        f"workload.tables[{i}].table: table {t.table} missing from placement")
                if self.workload.indices_per_lookup[1] > rows[t.table]:
                    raise ConfigError(
                        f"workload.tables[{i}]: indices_per_lookup upper bound "
                        f"{self.workload.indices_per_lookup[1]} exceeds {rows[t.table]} rows")
        if self.ranker.pipeline_depth < 1:
            raise ConfigError("ranker.pipeline_depth: must be >= 1")


# -- parsing -------------------------------------------------------------------


def _build(cls, data, path):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    kwargs = {}
    fields = {f.name: f for f in cls.__dataclass_fields__.values()}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown field")
        kwargs[key] = _coerce(fields[key], value, f"{path}.{key}")
    return cls(**kwargs)


_NESTED = {
    "store": StoreConfig, "cache": CacheConfig, "pooling": PoolingConfig,
    "transport": TransportConfig, "workload": WorkloadSection, "ranker": RankerConfig,
    "rebalance": RebalanceConfig, "fluctuation": FluctuationConfig,
    "co_occurrence": CoOccurrenceConfig,
}
_NESTED_LISTS = {
    "tables@store": TableConfig, "placement@store": PlacementConfig,
    "tables@workload": WorkloadTableConfig,
}


def _coerce(fld, value, path):
    name = fld.name
    owner = path.split(".")[-2] if "." in path else ""
    if name in _NESTED and (value is None or isinstance(value, dict)):
        if value is None and name == "co_occurrence":
            return None
        return _build(_NESTED[name], value, path)
    key = f"{name}@{owner}"
    if key in _NESTED_LISTS:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_build(_NESTED_LISTS[key], item, f"{path}[{i}]")
                for i, item in enumerate(value)]
    return value


def config_from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data, "config")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config file must contain a mapping")
    return config_from_dict(data)


def defaults_yaml() -> str:
    """The full default config, as a starting point for editing."""
    return yaml.safe_dump(asdict(ExperimentConfig()), sort_keys=False)
