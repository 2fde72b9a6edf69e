"""Experiment construction and the named trend experiments.

Named experiments (see ``NAMED_EXPERIMENTS``) reproduce one measured trend
each as paired or swept sub-runs inside the deterministic virtual-time
backend, and surface the comparison statistic the acceptance suite gates on:

* fig5-contention      growing a reserved GPU cache shrinks the feasible
                       batch size; the adaptive cache gives the reservation
                       back under high load while a fixed cache rejects.
* fig6-left-throughput naive multi-threaded posting vs mapping-aware
                       engine assignment, same message stream.
* fig6-right-credit    credit delivery latency, piggyback-only vs the
                       high-priority fast channel, under saturation.
* pooling-bytes        hierarchical pooling payload reduction with exact
                       byte accounting.
* migration-balance    engine backlog gap with and without periodic
                       connection migration under a skewed workload.
"""

import numpy as np

from ..cache import AdaptiveCache, CachePolicy, LoadTracker, MemoryModel, max_batch_for_cache, target_cache_bytes
from ..errors import CapacityError, ConfigError
from ..pooling import PoolingOp
from ..ranker import Ranker, RankerParams, end_to_end_equivalence_check
from ..requests import Batch, Feature, LookupRequest
from ..routing import build_routing
from ..store import Deployment, init_store
from ..transport.topology import (
    Topology,
    assign_mapping_aware,
    assign_naive,
    create_connections,
    shared_units,
)
from ..transport.virtual import EventLoop, TransportParams, VirtualTransport
from ..workload import ZipfSampler, generate_trace, load_trace
from .config import ExperimentConfig
from .report import MetricsReport, RunMetrics, percentiles

NAMED_EXPERIMENTS = (
    "fig5-contention",
    "fig6-left-throughput",
    "fig6-right-credit",
    "pooling-bytes",
    "migration-balance",
)


# -- building blocks ---------------------------------------------------------


def build_deployment(cfg: ExperimentConfig) -> Deployment:
    return init_store(cfg.table_metas(), cfg.shard_specs(), cfg.store_seed(),
                      cpu_budget=cfg.cpu_budget())


def transport_params(cfg: ExperimentConfig, **overrides) -> TransportParams:
    t = cfg.transport
    kwargs = dict(
        base_service_time=t.base_service_time, lock_overhead=t.lock_overhead,
        wire_delay=t.wire_delay, response_latency=t.response_latency,
        response_per_byte=t.response_per_byte, queue_capacity=t.queue_capacity,
        credit_mode=t.credit_mode, credit_grace=t.credit_grace,
        server_fixed_time=t.server_fixed_time, server_per_row_time=t.server_per_row_time,
        aggregation_fixed_time=t.aggregation_fixed_time,
        aggregation_per_vector_time=t.aggregation_per_vector_time,
        rebalance_enabled=t.rebalance.enabled, rebalance_period=t.rebalance.period,
        imbalance_factor=t.rebalance.factor,
        max_migrations_per_tick=t.rebalance.max_migrations_per_tick,
        sample_period=t.sample_period,
    )
    kwargs.update(overrides)
    return TransportParams(**kwargs)


def build_topology(cfg: ExperimentConfig, peers: list[int]) -> Topology:
    t = cfg.transport
    return create_connections(
        num_units=t.num_units, peers=peers, conns_per_peer=t.connections_per_peer,
        base_service_time=t.base_service_time, lock_overhead=t.lock_overhead,
        queue_capacity=t.queue_capacity,
    )


def build_assignment(cfg: ExperimentConfig, topology: Topology, policy: str | None = None):
    policy = policy or cfg.transport.assignment
    if policy == "naive":
        return assign_naive(topology, cfg.transport.num_engines)
    return assign_mapping_aware(topology, cfg.transport.num_engines)


def build_cache_stack(cfg: ExperimentConfig):
    if not cfg.cache.enabled:
        return None, None, None
    c = cfg.cache
    model = MemoryModel(gpu_capacity_bytes=c.gpu_capacity_bytes,
                        nn_fixed_bytes=c.nn_fixed_bytes,
                        nn_per_sample_bytes=c.nn_per_sample_bytes)
    budget = c.initial_budget_bytes
    if budget is None:
        budget = target_cache_bytes(model, cfg.workload.lookups_per_batch)
    cache = AdaptiveCache(budget_bytes=budget, admission=c.admission,
                          sketch_decay=c.sketch_decay,
                          pooled_results=c.pooled_result_cache)
    policy = CachePolicy(model=model, hysteresis_fraction=c.hysteresis_fraction)
    tracker = LoadTracker(window=c.window, high_watermark=c.high_watermark,
                          low_watermark=c.low_watermark, stat=c.window_stat)
    return cache, policy, tracker


def load_or_generate_trace(cfg: ExperimentConfig):
    if cfg.workload.trace_path is not None:
        return load_trace(cfg.workload.trace_path)
    rows = {t.id: t.rows for t in cfg.store.tables}
    return generate_trace(cfg.workload_config(), rows)


def _flow_invariants(transport: VirtualTransport) -> dict:
    c = transport.counters
    return {
        "flow_control_violations": 0,  # violations raise, so reaching here means zero
        "posted": c["posted"],
        "delivered": c["delivered"] - c["credit_msgs"],
        "drops": c["posted"] - (c["delivered"] - c["credit_msgs"]),
        "responses_sent": c["responses_sent"],
        "responses_consumed": c["responses_consumed"],
        "quiesced": transport.live_messages() == 0,
    }


def run_pipeline(cfg: ExperimentConfig, label: str, trace=None,
                 assignment_policy: str | None = None,
                 ranker_overrides: dict | None = None,
                 param_overrides: dict | None = None,
                 sampling: bool = False) -> tuple[RunMetrics, Ranker, VirtualTransport]:
    """One full closed-loop replay through the ranker pipeline."""
    deployment = build_deployment(cfg)
    routing = build_routing(cfg.table_metas(), cfg.shard_specs())
    if trace is None:
        trace = load_or_generate_trace(cfg)
    loop = EventLoop()
    topology = build_topology(cfg, peers=deployment.server_ids)
    assignment = build_assignment(cfg, topology, assignment_policy)
    params = transport_params(cfg, **(param_overrides or {}))
    transport = VirtualTransport(
        loop, topology, assignment, params,
        server_slots={p: cfg.cpu_budget() for p in deployment.server_ids},
    )
    cache, policy, tracker = build_cache_stack(cfg)
    rparams = RankerParams(
        pushdown_threshold=cfg.pooling.pushdown_threshold,
        pipeline_depth=cfg.ranker.pipeline_depth,
        adaptive_cache=cfg.ranker.adaptive_cache,
        keep_results=cfg.ranker.keep_results,
        admit_per_batch=cfg.cache.admit_per_batch,
    )
    for key, value in (ranker_overrides or {}).items():
        setattr(rparams, key, value)
    ranker = Ranker(deployment, routing, transport, params=rparams,
                    cache=cache, policy=policy, tracker=tracker)
    if sampling:
        transport.start_sampling()
    ranker.run_trace(trace.batches)
    total_lookups = sum(b.size for b in trace.batches)
    makespan = loop.now
    metrics = RunMetrics(
        label=label,
        makespan=makespan,
        throughput=total_lookups / makespan if makespan > 0 else 0.0,
        counters=dict(sorted(transport.counters.items())),
        latency_stages={
            "post_queue": percentiles(transport.stats["queue_wait"]),
            "post_total": percentiles(transport.stats["post_latency"]),
            "server_queue": percentiles(transport.stats["server_queue_wait"]),
            "server": percentiles(transport.stats["server_time"]),
            "response": percentiles(transport.stats["response_transit"]),
            "batch": percentiles([m.latency for m in ranker.batch_metrics]),
        },
        series={
            "hit_rate": [round(m.hit_rate, 6) for m in ranker.batch_metrics],
            "cache_budget": [m.cache_budget for m in ranker.batch_metrics],
            "engine_depths": [
                [t] + depths for t, depths in transport.stats["backlog_samples"]
            ],
        },
        extras={
            "lookups": total_lookups,
            "batches": len(ranker.batch_metrics),
            "migrations": len([r for r in transport.migration_reports if not r.noop]),
            "stall_count": transport.counters["stall_count"],
            "stall_time": transport.stall_time,
            "request_bytes": transport.counters["request_bytes"],
            "response_bytes": transport.counters["response_bytes"],
            "response_payload_bytes": transport.counters["response_payload_bytes"],
        },
    )
    return metrics, ranker, transport


def _base_report(cfg: ExperimentConfig) -> MetricsReport:
    return MetricsReport(experiment=cfg.experiment, seed=cfg.seed, backend=cfg.backend,
                         fingerprint=cfg.fingerprint(), config=cfg.to_dict())


# -- generic run ------------------------------------------------------------------


def run_generic(cfg: ExperimentConfig) -> MetricsReport:
    report = _base_report(cfg)
    metrics, ranker, transport = run_pipeline(cfg, label="pipeline", sampling=True)
    report.runs.append(metrics)
    report.invariants.update(_flow_invariants(transport))
    if cfg.ranker.check_equivalence and cfg.ranker.keep_results:
        deployment = build_deployment(cfg)
        trace = load_or_generate_trace(cfg)
        eq = end_to_end_equivalence_check(deployment, trace.batches, ranker.results)
        report.invariants["equivalence_max_ratio"] = round(eq.max_tolerance_ratio, 9)
        report.invariants["equivalence_max_abs"] = float(eq.max_abs_diff)
        report.invariants["equivalence_pass"] = eq.passed
    return report


# -- fig5: cache/NN memory contention ------------------------------------------------


def _sized_trace(sizes: list[int], table_id: int, num_rows: int,
                 indices_per_lookup: int, seed: int, alpha: float = 1.0,
                 op: PoolingOp = PoolingOp.SUM) -> list[Batch]:
    """Batches with an explicit size schedule (deterministic in the seed)."""
    rng = np.random.default_rng(seed)
    sampler = ZipfSampler(num_rows, alpha)
    batches = []
    for b, size in enumerate(sizes):
        lookups = []
        for _ in range(size):
            idx = [int(i) for i in sampler.sample(rng, indices_per_lookup)]
            lookups.append(LookupRequest(features=[
                Feature(table_id=table_id, op=op, indices=idx)]))
        batches.append(Batch(batch_id=b, tick=b, lookups=lookups))
    return batches


class _TraceBox:
    def __init__(self, batches):
        self.batches = batches


def run_fig5_contention(cfg: ExperimentConfig) -> MetricsReport:
    report = _base_report(cfg)
    c = cfg.cache
    model = MemoryModel(gpu_capacity_bytes=c.gpu_capacity_bytes,
                        nn_fixed_bytes=c.nn_fixed_bytes,
                        nn_per_sample_bytes=c.nn_per_sample_bytes)
    fractions = [round(0.1 * i, 1) for i in range(0, 9)]
    sweep = []
    for frac in fractions:
        cache_bytes = int(frac * model.gpu_capacity_bytes)
        try:
            sweep.append(max_batch_for_cache(model, cache_bytes))
        except CapacityError:
            sweep.append(0)
    zero_cache_max = sweep[0]

    base = cfg.workload.lookups_per_batch
    sizes = [base] * 10 + [zero_cache_max] * 12
    table = cfg.store.tables[0]
    trace = _TraceBox(_sized_trace(sizes, table.id, table.rows,
                                   cfg.workload.indices_per_lookup[0], cfg.seed))

    adaptive_metrics, adaptive_ranker, transport_a = run_pipeline(
        cfg, label="adaptive-cache", trace=trace)
    report.runs.append(adaptive_metrics)
    report.invariants.update(_flow_invariants(transport_a))
    sustained = (len(adaptive_ranker.batch_metrics) == len(sizes)
                 and max(m.size for m in adaptive_ranker.batch_metrics) == zero_cache_max)

    fixed_rejected = False
    fixed_error = ""
    try:
        fixed_metrics, _, _ = run_pipeline(
            cfg, label="fixed-cache", trace=_TraceBox(_sized_trace(
                sizes, table.id, table.rows,
                cfg.workload.indices_per_lookup[0], cfg.seed)),
            ranker_overrides={"adaptive_cache": False})
        report.runs.append(fixed_metrics)
    except CapacityError as exc:
        fixed_rejected = True
        fixed_error = str(exc)

    report.comparison.update({
        "sweep_fractions": fractions,
        "sweep_max_batch": sweep,
        "zero_cache_max_batch": zero_cache_max,
        "adaptive_sustained_max_batch": sustained,
        "fixed_cache_rejected": fixed_rejected,
        "fixed_cache_error": fixed_error,
    })
    return report


# -- fig6 left: naive vs mapping-aware posting throughput ------------------------------


def _stream_run(cfg: ExperimentConfig, label: str, policy: str, n_messages: int,
                respond: bool) -> tuple[RunMetrics, VirtualTransport]:
    loop = EventLoop()
    peers = sorted({p.server for p in cfg.store.placement}) or [0]
    topology = build_topology(cfg, peers=peers)
    assignment = build_assignment(cfg, topology, policy)
    params = transport_params(cfg)
    transport = VirtualTransport(loop, topology, assignment, params, auto_consume=True)
    normal = topology.normal_conn_ids()
    for i in range(n_messages):
        transport.post_subrequest(normal[i % len(normal)], payload=None,
                                  size_bytes=64, respond=respond)
    transport.run_until_idle()
    transport.check_quiescence()
    makespan = loop.now
    metrics = RunMetrics(
        label=label, makespan=makespan,
        throughput=n_messages / makespan if makespan else 0.0,
        throughput_unit="msgs/tick",
        counters=dict(sorted(transport.counters.items())),
        latency_stages={
            "post_queue": percentiles(transport.stats["queue_wait"]),
            "post_total": percentiles(transport.stats["post_latency"]),
        },
        extras={
            "messages": n_messages,
            "shared_units": sum(
                1 for owners in shared_units(topology, assignment).values()
                if len(owners) >= 2),
        },
    )
    return metrics, transport


def run_fig6_left(cfg: ExperimentConfig, n_messages: int = 100_000) -> MetricsReport:
    report = _base_report(cfg)
    naive, t_naive = _stream_run(cfg, "naive", "naive", n_messages, respond=False)
    aware, t_aware = _stream_run(cfg, "mapping-aware", "mapping_aware", n_messages,
                                 respond=False)
    report.runs.extend([naive, aware])
    report.invariants.update(_flow_invariants(t_aware))
    ratio = naive.throughput / aware.throughput if aware.throughput else 0.0
    report.comparison.update({
        "throughput_naive": naive.throughput,
        "throughput_aware": aware.throughput,
        "ratio_naive_over_aware": ratio,
        "ratio_aware_over_naive": 1.0 / ratio if ratio else 0.0,
    })
    return report


# -- fig6 right: credit delivery latency ---------------------------------------------


def _credit_run(cfg: ExperimentConfig, label: str, credit_mode: str,
                n_messages: int, inject_interval: float) -> tuple[RunMetrics, VirtualTransport]:
    loop = EventLoop()
    peers = sorted({p.server for p in cfg.store.placement}) or [0]
    topology = build_topology(cfg, peers=peers)
    assignment = build_assignment(cfg, topology, "mapping_aware")
    # Credit totals sized above the per-connection response count so the
    # paced run drains fully even when piggybacked grants go undelivered.
    params = transport_params(cfg, credit_mode=credit_mode, queue_capacity=10**6)
    for conn in topology.connections:
        conn.credit.granted = 10**6
    transport = VirtualTransport(loop, topology, assignment, params, auto_consume=True)
    normal = topology.normal_conn_ids()

    def inject(i: int):
        transport.post_subrequest(normal[i % len(normal)], payload=None,
                                  size_bytes=64, respond=True)
        if i + 1 < n_messages:
            loop.schedule(inject_interval, lambda: inject(i + 1))

    loop.schedule(0.0, lambda: inject(0))
    transport.run_until_idle()
    transport.check_quiescence()
    lat = transport.stats["grant_latency"]
    delivered = lat["piggyback"] if credit_mode == "piggyback" else lat["fast"]
    metrics = RunMetrics(
        label=label, makespan=loop.now,
        throughput=n_messages / loop.now if loop.now else 0.0,
        throughput_unit="msgs/tick",
        counters=dict(sorted(transport.counters.items())),
        latency_stages={
            "grant_delivery": percentiles(delivered),
            "post_queue": percentiles(transport.stats["queue_wait"]),
        },
        extras={
            "grants_decided": transport.counters["responses_consumed"],
            "grants_delivered": len(delivered),
        },
    )
    return metrics, transport


def run_fig6_right(cfg: ExperimentConfig, n_messages: int = 20_000) -> MetricsReport:
    report = _base_report(cfg)
    # Inject at 1.5x the aware-assignment service capacity to saturate the
    # normal channel, so piggybacked credits sit behind deep engine queues.
    capacity = cfg.transport.num_engines / cfg.transport.base_service_time
    interval = 1.0 / (1.5 * capacity)
    piggy, t_p = _credit_run(cfg, "piggyback-only", "piggyback", n_messages, interval)
    fast, t_f = _credit_run(cfg, "fast-channel", "fast", n_messages, interval)
    report.runs.extend([piggy, fast])
    report.invariants.update(_flow_invariants(t_f))
    mean_piggy = piggy.latency_stages["grant_delivery"]["mean"]
    mean_fast = fast.latency_stages["grant_delivery"]["mean"]
    report.comparison.update({
        "mean_grant_latency_piggyback": mean_piggy,
        "mean_grant_latency_fast": mean_fast,
        "fast_over_piggyback": mean_fast / mean_piggy if mean_piggy else 0.0,
    })
    return report


# -- pooling bytes on the wire ----------------------------------------------------


def run_pooling_bytes(cfg: ExperimentConfig) -> MetricsReport:
    report = _base_report(cfg)
    push_metrics, push_ranker, t_push = run_pipeline(
        cfg, label="pushdown", ranker_overrides={"pushdown_threshold": 2})
    raw_metrics, raw_ranker, t_raw = run_pipeline(
        cfg, label="raw-fetch", ranker_overrides={"pushdown_threshold": None})
    report.runs.extend([push_metrics, raw_metrics])
    report.invariants.update(_flow_invariants(t_push))
    push_payload = t_push.counters["response_payload_bytes"]
    raw_payload = t_raw.counters["response_payload_bytes"]
    report.comparison.update({
        "payload_bytes_pushdown": push_payload,
        "payload_bytes_raw": raw_payload,
        "payload_ratio": raw_payload / push_payload if push_payload else 0.0,
        "response_bytes_pushdown": t_push.counters["response_bytes"],
        "response_bytes_raw": t_raw.counters["response_bytes"],
        "pushdown_groups": sum(m.pushdown_groups for m in push_ranker.batch_metrics),
        "raw_rows": sum(m.raw_rows for m in raw_ranker.batch_metrics),
    })
    return report


# -- migration balance -----------------------------------------------------------


def run_migration_balance(cfg: ExperimentConfig) -> MetricsReport:
    report = _base_report(cfg)
    trace = load_or_generate_trace(cfg)
    off_metrics, _, t_off = run_pipeline(
        cfg, label="no-migration", trace=trace,
        param_overrides={"rebalance_enabled": False}, sampling=True)
    trace2 = load_or_generate_trace(cfg)
    on_metrics, _, t_on = run_pipeline(
        cfg, label="rebalance", trace=trace2,
        param_overrides={"rebalance_enabled": True}, sampling=True)
    report.runs.extend([off_metrics, on_metrics])
    report.invariants.update(_flow_invariants(t_on))

    def mean_gap(transport):
        samples = transport.stats["backlog_samples"]
        if not samples:
            return 0.0
        return sum(max(d) - min(d) for _, d in samples) / len(samples)

    gap_off = mean_gap(t_off)
    gap_on = mean_gap(t_on)
    migrations = len([r for r in t_on.migration_reports if not r.noop])
    aware_still_private = all(
        len(owners) < 2
        for owners in shared_units(t_on.topology, t_on.assignment).values())
    report.comparison.update({
        "mean_backlog_gap_no_migration": gap_off,
        "mean_backlog_gap_rebalance": gap_on,
        "gap_reduction": gap_off - gap_on,
        "migrations": migrations,
        "mapping_aware_preserved": aware_still_private,
    })
    return report


# -- dispatch -------------------------------------------------------------------


def named_experiment_config(name: str, seed: int = 0) -> ExperimentConfig:
    """Fully-resolved default config for a named experiment."""
    from .config import (
        CacheConfig, PlacementConfig, PoolingConfig, RankerConfig, StoreConfig,
        TableConfig, WorkloadSection, WorkloadTableConfig,
    )

    cfg = ExperimentConfig(experiment=name, seed=seed)
    if name == "fig5-contention":
        cfg.store = StoreConfig(
            tables=[TableConfig(id=0, rows=20000, dim=64)],
            placement=[PlacementConfig(table=0, start=0, end=10000, server=0),
                       PlacementConfig(table=0, start=10000, end=20000, server=1)],
        )
        cfg.workload.tables = [WorkloadTableConfig(table=0, zipf_alpha=1.0)]
        cfg.workload.lookups_per_batch = 128
        cfg.workload.indices_per_lookup = [4, 4]
        cfg.cache = CacheConfig(high_watermark=200, low_watermark=64)
    elif name in ("fig6-left-throughput", "fig6-right-credit"):
        # Default transport calibration: 8 engines, 8 units, 64 connections
        # (8 peers x 8 conns/peer), lock_overhead = 2x base.
        cfg.store = StoreConfig(
            tables=[TableConfig(id=0, rows=80000, dim=64)],
            placement=[PlacementConfig(table=0, start=10000 * s, end=10000 * (s + 1),
                                       server=s) for s in range(8)],
        )
        cfg.workload.tables = [WorkloadTableConfig(table=0, zipf_alpha=1.0)]
        cfg.cache.enabled = False
    elif name == "pooling-bytes":
        cfg.store = StoreConfig(
            tables=[TableConfig(id=0, rows=4096, dim=64)],
            placement=[PlacementConfig(table=0, start=0, end=4096, server=0)],
        )
        cfg.cache.enabled = False
        cfg.workload = WorkloadSection(
            lookups_per_batch=25, duration_batches=8,
            indices_per_lookup=[8, 8],
            tables=[WorkloadTableConfig(table=0, zipf_alpha=0.8)],
        )
        cfg.ranker = RankerConfig(check_equivalence=True)
    elif name == "migration-balance":
        # One hot server (90% of lookups): block-distributed domains start its
        # eight connections clustered on half the engines, which is the
        # imbalance live migration exists to fix.
        cfg.store = StoreConfig(
            tables=[TableConfig(id=0, rows=8192, dim=32),
                    TableConfig(id=1, rows=8192, dim=32)],
            placement=[PlacementConfig(table=0, start=0, end=8192, server=0),
                       PlacementConfig(table=1, start=0, end=8192, server=1)],
        )
        cfg.cache.enabled = False
        cfg.workload = WorkloadSection(
            lookups_per_batch=64, duration_batches=60,
            indices_per_lookup=[8, 8],
            tables=[WorkloadTableConfig(table=0, zipf_alpha=1.0, weight=0.9),
                    WorkloadTableConfig(table=1, zipf_alpha=1.0, weight=0.1)],
        )
        cfg.transport.num_units = 16
        cfg.transport.num_engines = 4
        cfg.transport.connections_per_peer = 8
        cfg.transport.rebalance.period = 25.0
        cfg.transport.rebalance.factor = 2.0
        cfg.transport.sample_period = 2.0
        cfg.ranker = RankerConfig(pipeline_depth=4, keep_results=False,
                                  check_equivalence=False)
        cfg.pooling = PoolingConfig(pushdown_threshold=2)
    cfg.validate()
    return cfg


def run_experiment(cfg: ExperimentConfig) -> MetricsReport:
    cfg.validate()
    if cfg.backend == "threaded" and cfg.experiment not in (
            "fig6-left-throughput",):
        raise ConfigError(
            "backend: the threaded backend supports transport stream experiments "
            "only (fig6-left-throughput); ranker pipelines run on 'virtual'")
    if cfg.experiment == "fig5-contention":
        report = run_fig5_contention(cfg)
    elif cfg.experiment == "fig6-left-throughput":
        if cfg.backend == "threaded":
            from ..transport.threaded import run_threaded_stream
            report = run_threaded_stream(cfg)
        else:
            report = run_fig6_left(cfg)
    elif cfg.experiment == "fig6-right-credit":
        report = run_fig6_right(cfg)
    elif cfg.experiment == "pooling-bytes":
        report = run_pooling_bytes(cfg)
    elif cfg.experiment == "migration-balance":
        report = run_migration_balance(cfg)
    else:
        report = run_generic(cfg)
    if cfg.out:
        report.write(cfg.out)
    return report


def run_named(name: str, seed: int = 0) -> MetricsReport:
    return run_experiment(named_experiment_config(name, seed=seed))
