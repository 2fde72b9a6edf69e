from collections import OrderedDict

import numpy as np
import pytest

from embserve.cache import (
    AdaptiveCache,
    CachePolicy,
    FrequencySketch,
    LoadLevel,
    LoadTracker,
    MemoryModel,
    max_batch_for_cache,
    target_cache_bytes,
)
from embserve.errors import CapacityError, ConfigError
from embserve.store import row_values


class ReferenceLRU:
    """Independent entry-count LRU replay used as the fidelity oracle."""

    def __init__(self, capacity_entries: int):
        self.capacity = capacity_entries
        self.entries = OrderedDict()
        self.evictions = []
        self.hits = 0
        self.misses = 0

    def access(self, key):
        if key in self.entries:
            self.hits += 1
            self.entries.move_to_end(key)
            return True
        self.misses += 1
        if len(self.entries) >= self.capacity:
            victim, _ = self.entries.popitem(last=False)
            self.evictions.append(victim)
        self.entries[key] = True
        return False


def vec(dim=4, fill=1.0):
    return np.full(dim, fill, dtype=np.float32)


ROW_BYTES = 16  # dim 4 float32


# -- memory model -----------------------------------------------------------


def toy_model():
    return MemoryModel(gpu_capacity_bytes=100, nn_fixed_bytes=20, nn_per_sample_bytes=1)


def test_target_cache_bytes_example():
    # capacity 100, fixed 20, per-sample 0.1, batch 400 -> 40 (scaled x10 to ints)
    model = MemoryModel(gpu_capacity_bytes=1000, nn_fixed_bytes=200, nn_per_sample_bytes=1)
    assert target_cache_bytes(model, 400) == 400
    assert target_cache_bytes(model, 800) == 0
    with pytest.raises(CapacityError):
        target_cache_bytes(model, 900)


def test_max_batch_inverse():
    model = MemoryModel(gpu_capacity_bytes=1000, nn_fixed_bytes=200, nn_per_sample_bytes=1)
    assert max_batch_for_cache(model, 400) == 400
    assert max_batch_for_cache(model, 0) == 800
    with pytest.raises(CapacityError):
        max_batch_for_cache(model, 900)


def test_max_batch_sweep_non_increasing():
    model = MemoryModel(gpu_capacity_bytes=10_000, nn_fixed_bytes=1_000,
                        nn_per_sample_bytes=7)
    prev = None
    for cache_bytes in range(0, 8000 + 1, 97):
        batch = max_batch_for_cache(model, cache_bytes)
        if prev is not None:
            assert batch <= prev
        prev = batch


def test_model_validation():
    with pytest.raises(ConfigError):
        MemoryModel(gpu_capacity_bytes=10, nn_fixed_bytes=20, nn_per_sample_bytes=1)


# -- load tracker ------------------------------------------------------------


def test_tracker_levels():
    tr = LoadTracker(window=4, high_watermark=512, low_watermark=128)
    for _ in range(4):
        level = tr.record_batch(600)
    assert level is LoadLevel.HIGH
    tr = LoadTracker(window=4, high_watermark=512, low_watermark=128)
    for _ in range(4):
        level = tr.record_batch(64)
    assert level is LoadLevel.LOW
    tr = LoadTracker(window=4, high_watermark=512, low_watermark=128)
    for size in (600, 64, 600, 64):  # mean 332
        level = tr.record_batch(size)
    assert level is LoadLevel.NORMAL


def test_tracker_max_stat_alternative():
    tr = LoadTracker(window=4, high_watermark=512, low_watermark=128, stat="max")
    tr.record_batch(64)
    assert tr.record_batch(600) is LoadLevel.HIGH


def test_tracker_window_slides():
    tr = LoadTracker(window=2, high_watermark=100, low_watermark=10)
    tr.record_batch(500)
    tr.record_batch(50)
    assert tr.record_batch(50) is LoadLevel.NORMAL  # 500 fell out


# -- adaptive cache: LRU and admission -------------------------------------------


def test_lru_eviction_order_example():
    cache = AdaptiveCache(budget_bytes=3 * ROW_BYTES, admission="always",
                          record_evictions=True)
    for i, key in enumerate(("A", "B", "C")):
        cache.offer(0, i, vec())
    cache.get(0, 0)  # A most recent
    cache.resize(2 * ROW_BYTES, fetcher=None)
    # B was least recently used once A was touched
    assert cache.eviction_log == [(0, 1)]


def test_cache_get_hit_and_miss():
    cache = AdaptiveCache(budget_bytes=10 * ROW_BYTES)
    assert cache.get(0, 1) is None
    cache.offer(0, 1, vec(fill=3.5))
    got = cache.get(0, 1)
    assert got is not None and np.array_equal(got, vec(fill=3.5))
    assert cache.hits == 1 and cache.misses == 1
    assert cache.hit_rate() == 0.5  # accounting identity


def test_budget_safety_after_inserts():
    cache = AdaptiveCache(budget_bytes=5 * ROW_BYTES, admission="always")
    for i in range(50):
        cache.offer(0, i, vec())
        assert cache.used_bytes <= cache.budget_bytes


def test_sketch_admission_protects_hot_victims():
    cache = AdaptiveCache(budget_bytes=1 * ROW_BYTES, admission="sketch")
    for _ in range(5):
        cache.get(0, 1)  # heat up key (0,1) in the miss sketch
    cache.offer(0, 1, vec())
    cache.get(0, 2)  # one miss for the cold candidate
    assert cache.offer(0, 2, vec()) is False  # colder than the victim
    assert cache.contains(0, 1)
    for _ in range(9):
        cache.get(0, 3)
    assert cache.offer(0, 3, vec()) is True  # hotter than the victim
    assert cache.contains(0, 3) and not cache.contains(0, 1)


def test_always_admission_evicts_lru():
    cache = AdaptiveCache(budget_bytes=2 * ROW_BYTES, admission="always",
                          record_evictions=True)
    cache.offer(0, 1, vec())
    cache.offer(0, 2, vec())
    cache.offer(0, 3, vec())
    assert cache.eviction_log == [(0, 1)]


def test_resize_grow_admits_hottest():
    # sketch ranking {X:9, Y:3}, room for 1 -> X admitted
    cache = AdaptiveCache(budget_bytes=0)
    for _ in range(9):
        cache.get(0, 7)  # X
    for _ in range(3):
        cache.get(0, 8)  # Y
    fetcher = lambda t, i: vec(fill=float(i))
    report = cache.resize(1 * ROW_BYTES, fetcher=fetcher, row_bytes_of=lambda t: ROW_BYTES)
    assert report.admitted == [(0, 7)]
    assert cache.apply_pending_admissions() == 1
    assert cache.contains(0, 7) and not cache.contains(0, 8)


def test_resize_shrink_reports_evictions():
    cache = AdaptiveCache(budget_bytes=3 * ROW_BYTES, admission="always")
    for i in range(3):
        cache.offer(0, i, vec())
    report = cache.resize(1 * ROW_BYTES, fetcher=None)
    assert report.evicted == [(0, 0), (0, 1)]
    assert cache.used_bytes <= cache.budget_bytes


def test_admissions_are_asynchronous():
    cache = AdaptiveCache(budget_bytes=0)
    cache.get(0, 1)
    cache.resize(ROW_BYTES, fetcher=lambda t, i: vec())
    assert not cache.contains(0, 1)  # staged, not yet applied
    cache.apply_pending_admissions()
    assert cache.contains(0, 1)


def test_cached_values_bit_identical_to_store():
    cache = AdaptiveCache(budget_bytes=10 * ROW_BYTES)
    row = row_values(3, 0, 5, 4)
    cache.offer(0, 5, row)
    assert cache.get(0, 5).tobytes() == row_values(3, 0, 5, 4).tobytes()


def test_pooled_result_keyspace_disabled_by_default():
    from embserve.pooling import PoolingOp

    cache = AdaptiveCache(budget_bytes=10 * ROW_BYTES)
    cache.pooled_put(0, PoolingOp.SUM, [1, 2], vec())
    assert cache.pooled_get(0, PoolingOp.SUM, [1, 2]) is None


def test_pooled_result_keyspace_enabled():
    from embserve.pooling import PoolingOp

    cache = AdaptiveCache(budget_bytes=10 * ROW_BYTES, pooled_results=True)
    cache.pooled_put(0, PoolingOp.SUM, [2, 1], vec(fill=9.0))
    got = cache.pooled_get(0, PoolingOp.SUM, [1, 2])  # keyed by sorted indices
    assert got is not None and np.array_equal(got, vec(fill=9.0))


# -- policy direction and hysteresis ------------------------------------------------


def policy_model():
    return MemoryModel(gpu_capacity_bytes=10_000, nn_fixed_bytes=1_000,
                       nn_per_sample_bytes=10)


def test_policy_high_never_grows_low_never_shrinks():
    policy = CachePolicy(model=policy_model(), hysteresis_fraction=0.0)
    # High load: target above current must clamp to current
    assert policy.propose(1_000, LoadLevel.HIGH, windowed_batch=100) <= 1_000
    # Low load: target below current must clamp to current
    assert policy.propose(9_000, LoadLevel.LOW, windowed_batch=800) >= 9_000
    # Normal load tracks the target exactly
    assert policy.propose(0, LoadLevel.NORMAL, windowed_batch=100) == 8_000


def test_policy_hysteresis_suppresses_small_moves():
    policy = CachePolicy(model=policy_model(), hysteresis_fraction=0.05)
    # target(100) = 8000; |8000-7800| = 200 < 500 -> hold
    assert policy.propose(7_800, LoadLevel.NORMAL, windowed_batch=100) == 7_800
    # |8000-7000| = 1000 >= 500 -> move
    assert policy.propose(7_000, LoadLevel.NORMAL, windowed_batch=100) == 8_000


def test_policy_infeasible_batch_proposes_zero():
    policy = CachePolicy(model=policy_model(), hysteresis_fraction=0.0)
    assert policy.propose(5_000, LoadLevel.HIGH, windowed_batch=2_000) == 0


# -- fidelity against the reference replay ---------------------------------------


def test_lru_eviction_sequence_matches_reference_replay():
    rng = np.random.default_rng(11)
    capacity = 50
    cache = AdaptiveCache(budget_bytes=capacity * ROW_BYTES, admission="always",
                          record_evictions=True)
    oracle = ReferenceLRU(capacity)
    trace = rng.integers(0, 400, size=10_000)
    for raw in trace:
        key = int(raw)
        hit = cache.get(0, key) is not None
        assert hit == oracle.access(key)
        if not hit:
            cache.offer(0, key, vec())
    assert cache.eviction_log == [(0, k) for k in oracle.evictions]


def test_zipf_steady_state_hit_rate_near_oracle():
    from embserve.workload import ZipfSampler

    rng = np.random.default_rng(5)
    n_rows, capacity = 10_000, 1_000  # budget for 10% of rows
    sampler = ZipfSampler(n_rows, 1.0)
    trace = [int(i) for i in sampler.sample(rng, 60_000)]
    cache = AdaptiveCache(budget_bytes=capacity * ROW_BYTES, admission="always")
    oracle = ReferenceLRU(capacity)
    warmup = 20_000
    cache_hits = oracle_hits = measured = 0
    for step, key in enumerate(trace):
        hit = cache.get(0, key) is not None
        if not hit:
            cache.offer(0, key, vec())
        ohit = oracle.access(key)
        if step >= warmup:
            measured += 1
            cache_hits += hit
            oracle_hits += ohit
    ours = cache_hits / measured
    ref = oracle_hits / measured
    assert abs(ours - ref) <= 0.03
