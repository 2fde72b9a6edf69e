"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Named experiments are executed twice through a session fixture; the
second run feeds the determinism criterion and doubles as the always-on
invariant sweep (flow-control assertions raise inside the runs themselves).
"""

import math
import time
from collections import OrderedDict

import numpy as np
import pytest

from embserve import wire
from embserve.bench.experiments import NAMED_EXPERIMENTS, run_named
from embserve.cache import AdaptiveCache
from embserve.pooling import PartialResult, PoolingOp, combine_partials, pool_flat
from embserve.routing import build_routing
from embserve.store import ShardSpec, TableMeta
from embserve.workload import ZipfSampler

REL_TOL = 1e-5
ABS_FLOOR = 1e-6


def check(criterion: str, ok: bool, detail: str = ""):
    print(f"[acceptance] {criterion}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"{criterion}: {detail}"


@pytest.fixture(scope="session")
def named_reports():
    """Each named experiment, run twice with identical config+seed."""
    out = {}
    for name in NAMED_EXPERIMENTS:
        out[name] = (run_named(name, seed=0), run_named(name, seed=0))
    return out


# -- 1: hierarchical pooling equivalence ------------------------------------------


def test_criterion_1_hierarchical_pooling_equivalence():
    started = time.monotonic()
    rng = np.random.default_rng(2024)
    lookups = 10_000
    worst = 0.0
    for _ in range(lookups):
        dim = int(rng.integers(1, 257))
        n = int(rng.integers(1, 33))
        rows = (rng.random((n, dim)) * 2.0 - 1.0).astype(np.float32)
        op = PoolingOp.SUM if rng.random() < 0.5 else PoolingOp.MEAN
        # random partition into groups, random pushdown assignment per group
        owners = rng.integers(0, int(rng.integers(1, 7)), size=n)
        partials, raw_positions = [], []
        for g in np.unique(owners):
            members = np.nonzero(owners == g)[0]
            if rng.random() < 0.6 and members.size >= 1:
                acc = np.zeros(dim, dtype=np.float64)
                for i in members:
                    acc += rows[i]
                partials.append(PartialResult(vector=acc.astype(np.float32),
                                              count=int(members.size), source=int(g)))
            else:
                raw_positions.extend(int(i) for i in members)
        raw = [rows[i] for i in sorted(raw_positions)]
        got = combine_partials(partials, raw, op)
        ref = pool_flat([rows[i] for i in range(n)], op)
        diff = np.abs(ref.astype(np.float64) - got.astype(np.float64))
        bound = np.maximum(ABS_FLOOR, REL_TOL * np.abs(ref.astype(np.float64)))
        worst = max(worst, float((diff / bound).max()))
    elapsed = time.monotonic() - started
    check("1 hierarchical-pooling-equivalence",
          worst <= 1.0 and elapsed <= 60.0,
          f"max tolerance ratio {worst:.4f} over {lookups} lookups, {elapsed:.1f}s")


# -- 2: routing oracle ---------------------------------------------------------------


def test_criterion_2_routing_oracle():
    started = time.monotonic()
    rng = np.random.default_rng(7)
    total = 0
    agreement = True
    for trial in range(20):
        num_rows = int(rng.integers(50, 5000))
        n_cuts = int(rng.integers(0, min(7, num_rows - 1) + 1))
        cuts = sorted(rng.choice(np.arange(1, num_rows), size=n_cuts,
                                 replace=False).tolist()) if n_cuts else []
        bounds = [0] + [int(c) for c in cuts] + [num_rows]
        placement = [ShardSpec(0, bounds[i], bounds[i + 1], int(rng.integers(0, 16)))
                     for i in range(len(bounds) - 1)]
        rt = build_routing([TableMeta(0, num_rows, 4)], placement)
        indices = rng.integers(0, num_rows, size=5000)
        resolved = rt.resolve_many(0, indices)
        brute = np.empty(indices.size, dtype=np.int64)
        for k, idx in enumerate(indices):
            for spec in placement:
                if spec.start <= idx < spec.end:
                    brute[k] = spec.server_id
                    break
        agreement &= bool((resolved == brute).all())
        for idx, expect in zip(indices[:300], brute[:300]):
            agreement &= rt.resolve(0, int(idx)) == int(expect)
        total += indices.size
    elapsed = time.monotonic() - started
    check("2 routing-oracle", agreement and total >= 100_000 and elapsed <= 10.0,
          f"{total} pairs, 100% agreement={agreement}, {elapsed:.1f}s")


# -- 3: flow-control safety and liveness ------------------------------------------------


def test_criterion_3_flow_control_safety_liveness(named_reports):
    problems = []
    for name, (first, _) in named_reports.items():
        inv = first.invariants
        if inv.get("flow_control_violations", 0) != 0:
            problems.append(f"{name}: credit violations")
        if inv.get("drops", 0) != 0:
            problems.append(f"{name}: drops={inv['drops']}")
        if not inv.get("quiesced", False):
            problems.append(f"{name}: did not quiesce")
        if inv.get("responses_sent") != inv.get("responses_consumed"):
            problems.append(f"{name}: responses not conserved")
    check("3 flow-control-safety-liveness", not problems, "; ".join(problems) or
          f"all {len(named_reports)} named experiments clean")


# -- 4: fig5 trend -----------------------------------------------------------------------


def test_criterion_4_fig5_cache_batch_contention(named_reports):
    started = time.monotonic()
    report = named_reports["fig5-contention"][0]
    comp = report.comparison
    sweep = comp["sweep_max_batch"]
    non_increasing = all(a >= b for a, b in zip(sweep, sweep[1:]))
    ok = (non_increasing and comp["adaptive_sustained_max_batch"]
          and comp["fixed_cache_rejected"])
    check("4 fig5-cache-batch-contention", ok,
          f"sweep={sweep}, adaptive_sustained={comp['adaptive_sustained_max_batch']}, "
          f"fixed_rejected={comp['fixed_cache_rejected']}")
    assert time.monotonic() - started <= 10.0  # reads precomputed fixture


# -- 5: fig6-left trend ---------------------------------------------------------------


def test_criterion_5_fig6_left_throughput(named_reports):
    report = named_reports["fig6-left-throughput"][0]
    comp = report.comparison
    naive, aware = comp["throughput_naive"], comp["throughput_aware"]
    ok = naive <= 0.6 * aware and comp["ratio_aware_over_naive"] >= 1.6
    check("5 fig6-left-throughput", ok,
          f"naive={naive:.3f} aware={aware:.3f} "
          f"naive/aware={comp['ratio_naive_over_aware']:.3f} "
          f"aware/naive={comp['ratio_aware_over_naive']:.2f}")


# -- 6: fig6-right trend -----------------------------------------------------------------


def test_criterion_6_fig6_right_credit_latency(named_reports):
    report = named_reports["fig6-right-credit"][0]
    comp = report.comparison
    ok = comp["mean_grant_latency_fast"] <= 0.65 * comp["mean_grant_latency_piggyback"]
    check("6 fig6-right-credit-latency", ok,
          f"fast={comp['mean_grant_latency_fast']:.3f} "
          f"piggyback={comp['mean_grant_latency_piggyback']:.3f} "
          f"quotient={comp['fast_over_piggyback']:.4f}")


# -- 7: pooling bytes on the wire ---------------------------------------------------------


def test_criterion_7_pooling_bytes(named_reports):
    report = named_reports["pooling-bytes"][0]
    comp = report.comparison
    dim, fanout = 64, 8
    groups = comp["pushdown_groups"]
    lookups = comp["raw_rows"] // fanout
    assert lookups == groups  # same workload, one 8-row group per lookup
    exact_payload = comp["payload_bytes_raw"] == fanout * comp["payload_bytes_pushdown"]
    # header overhead accounted exactly by the message-size model
    expected_push = groups * wire.partial_response_bytes(dim)
    expected_raw = lookups * wire.raw_response_bytes(fanout, dim)
    exact_headers = (comp["response_bytes_pushdown"] == expected_push
                     and comp["response_bytes_raw"] == expected_raw)
    push_run = report.run("pushdown")
    expected_requests = (groups * wire.request_bytes(fanout)
                         + push_run.counters["credit_annotation_bytes"])
    exact_requests = push_run.counters["request_bytes"] == expected_requests
    ok = comp["payload_ratio"] == 8.0 and exact_payload and exact_headers and exact_requests
    check("7 pooling-bytes-on-wire", ok,
          f"ratio={comp['payload_ratio']}, payload exact={exact_payload}, "
          f"headers exact={exact_headers}, requests exact={exact_requests}")


# -- 8: migration balance --------------------------------------------------------------------


def test_criterion_8_migration_balance(named_reports):
    report = named_reports["migration-balance"][0]
    comp = report.comparison
    ok = (comp["mean_backlog_gap_rebalance"] < comp["mean_backlog_gap_no_migration"]
          and comp["migrations"] >= 1)
    # per-connection FIFO order is asserted on every completion inside the
    # backend; reaching this point means no violation fired across the run
    check("8 migration-balance", ok,
          f"gap no-migration={comp['mean_backlog_gap_no_migration']:.2f} "
          f"rebalance={comp['mean_backlog_gap_rebalance']:.2f} "
          f"migrations={comp['migrations']}")


# -- 9: cache fidelity ------------------------------------------------------------------------


class _OracleLRU:
    def __init__(self, capacity):
        self.capacity = capacity
        self.entries = OrderedDict()
        self.evictions = []
        self.hits = 0

    def access(self, key):
        if key in self.entries:
            self.hits += 1
            self.entries.move_to_end(key)
            return True
        if len(self.entries) >= self.capacity:
            victim, _ = self.entries.popitem(last=False)
            self.evictions.append(victim)
        self.entries[key] = True
        return False


def test_criterion_9_cache_fidelity():
    started = time.monotonic()
    row = np.ones(4, dtype=np.float32)
    row_bytes = row.size * row.itemsize

    # exact LRU eviction sequence on a 10^4-access string
    rng = np.random.default_rng(17)
    capacity = 64
    cache = AdaptiveCache(budget_bytes=capacity * row_bytes, admission="always",
                          record_evictions=True)
    oracle = _OracleLRU(capacity)
    for key in rng.integers(0, 500, size=10_000):
        key = int(key)
        hit = cache.get(0, key) is not None
        if not hit:
            cache.offer(0, key, row)
        assert hit == oracle.access(key)
    sequence_exact = cache.eviction_log == [(0, k) for k in oracle.evictions]

    # steady-state hit rate on Zipf(1.0), budget for 10% of rows
    n_rows, cap = 10_000, 1_000
    sampler = ZipfSampler(n_rows, 1.0)
    trace = sampler.sample(np.random.default_rng(29), 60_000)
    cache2 = AdaptiveCache(budget_bytes=cap * row_bytes, admission="always")
    oracle2 = _OracleLRU(cap)
    measured = hits2 = ohits = 0
    for step, key in enumerate(trace):
        key = int(key)
        hit = cache2.get(0, key) is not None
        if not hit:
            cache2.offer(0, key, row)
        ohit = oracle2.access(key)
        if step >= 20_000:
            measured += 1
            hits2 += hit
            ohits += ohit
    ours, ref = hits2 / measured, ohits / measured
    elapsed = time.monotonic() - started
    ok = sequence_exact and abs(ours - ref) <= 0.03 and elapsed <= 30.0
    check("9 cache-fidelity", ok,
          f"eviction sequence exact={sequence_exact}, hit rate {ours:.4f} vs "
          f"oracle {ref:.4f} (|d|={abs(ours - ref):.4f}), {elapsed:.1f}s")


# -- 10: determinism -------------------------------------------------------------------------


def test_criterion_10_determinism(named_reports):
    mismatched = [name for name, (a, b) in named_reports.items()
                  if a.to_machine() != b.to_machine()]
    check("10 determinism", not mismatched,
          "byte-identical machine summaries for all named experiments"
          if not mismatched else f"mismatched: {mismatched}")
