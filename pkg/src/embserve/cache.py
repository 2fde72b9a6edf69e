"""Ranker-side adaptive embedding cache.

Three cooperating pieces:

* ``MemoryModel`` ties cache capacity to NN batch memory. The NN estimate is
  affine in batch size, so the ideal cache budget is simply GPU capacity
  minus the NN reservation for the current batch size.
* ``LoadTracker`` classifies load from a sliding window of recent batch
  sizes (windowed mean against two watermarks; max is a config alternative).
* ``AdaptiveCache`` holds (table, row) -> vector entries under a byte budget
  with LRU eviction. New rows are admitted through a decayed frequency
  sketch of recent misses; plain admit-everything is available as a config
  mode and for oracle comparisons. Grow-admissions are fetched
  asynchronously: ``resize`` stages them and the writer applies them on its
  next tick, so lookups are never blocked.

Budget semantics: ``budget_bytes`` is the reserved GPU allocation, which is
what contends with NN memory. ``used_bytes <= budget_bytes`` holds after
every resize and insert.
"""

from collections import OrderedDict, deque
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import CapacityError, ConfigError, InvariantError


class LoadLevel(Enum):
    HIGH = "high"
    NORMAL = "normal"
    LOW = "low"


@dataclass(frozen=True)
class MemoryModel:
    gpu_capacity_bytes: int
    nn_fixed_bytes: int
    nn_per_sample_bytes: int

    def __post_init__(self):
        if min(self.gpu_capacity_bytes, self.nn_fixed_bytes, self.nn_per_sample_bytes) < 0:
            raise ConfigError("memory model coefficients must be >= 0")
        if self.nn_fixed_bytes > self.gpu_capacity_bytes:
            raise ConfigError("nn_fixed_bytes exceeds gpu_capacity_bytes")

    def nn_bytes(self, batch_size: int) -> int:
        return self.nn_fixed_bytes + batch_size * self.nn_per_sample_bytes


def target_cache_bytes(model: MemoryModel, batch_size: int) -> int:
    """Ideal cache budget for a batch: capacity minus the NN reservation."""
    need = model.nn_bytes(batch_size)
    if need > model.gpu_capacity_bytes:
        raise CapacityError(
            f"batch {batch_size} needs {need} NN bytes, capacity is "
            f"{model.gpu_capacity_bytes}"
        )
    return model.gpu_capacity_bytes - need


def max_batch_for_cache(model: MemoryModel, cache_bytes: int) -> int:
    """Largest admissible batch when ``cache_bytes`` of GPU memory is
    reserved for the cache. Strictly non-increasing in cache_bytes."""
    if cache_bytes + model.nn_fixed_bytes > model.gpu_capacity_bytes:
        raise CapacityError(
            f"cache {cache_bytes} plus fixed NN {model.nn_fixed_bytes} exceeds "
            f"capacity {model.gpu_capacity_bytes}"
        )
    free = model.gpu_capacity_bytes - cache_bytes - model.nn_fixed_bytes
    if model.nn_per_sample_bytes == 0:
        raise ConfigError("nn_per_sample_bytes must be > 0 to bound batch size")
    return free // model.nn_per_sample_bytes


class LoadTracker:
    def __init__(self, window: int = 16, high_watermark: int = 512,
                 low_watermark: int = 128, stat: str = "mean"):
        if low_watermark >= high_watermark:
            raise ConfigError("low_watermark must be < high_watermark")
        if stat not in ("mean", "max"):
            raise ConfigError(f"unknown window stat '{stat}'")
        self.window: deque = deque(maxlen=window)
        self.high_watermark = high_watermark
        self.low_watermark = low_watermark
        self.stat = stat

    def record_batch(self, batch_size: int) -> LoadLevel:
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.window.append(batch_size)
        return self.classify()

    def classify(self) -> LoadLevel:
        if not self.window:
            return LoadLevel.NORMAL
        value = (sum(self.window) / len(self.window)
                 if self.stat == "mean" else max(self.window))
        if value >= self.high_watermark:
            return LoadLevel.HIGH
        if value <= self.low_watermark:
            return LoadLevel.LOW
        return LoadLevel.NORMAL

    def windowed_value(self) -> float:
        if not self.window:
            return 0.0
        return (sum(self.window) / len(self.window)
                if self.stat == "mean" else float(max(self.window)))


class FrequencySketch:
    """Decayed miss-frequency counts used for admission ranking."""

    def __init__(self, decay: float = 0.5, prune_below: float = 0.25):
        self.decay = decay
        self.prune_below = prune_below
        self._counts: dict = {}

    def bump(self, key, weight: float = 1.0) -> None:
        self._counts[key] = self._counts.get(key, 0.0) + weight

    def estimate(self, key) -> float:
        return self._counts.get(key, 0.0)

    def age(self) -> None:
        """Halve (by ``decay``) every count; drop negligible entries."""
        dead = []
        for key in self._counts:
            self._counts[key] *= self.decay
            if self._counts[key] < self.prune_below:
                dead.append(key)
        for key in dead:
            del self._counts[key]

    def hottest(self, n: int, exclude=()) -> list:
        skip = set(exclude)
        ranked = sorted(
            ((k, v) for k, v in self._counts.items() if k not in skip),
            key=lambda kv: (-kv[1], kv[0]),
        )
        return [k for k, _ in ranked[:n]]


@dataclass
class CacheEntry:
    vector: np.ndarray
    size_bytes: int
    last_tick: int
    hits: int = 0


@dataclass
class ResizeReport:
    old_budget: int
    new_budget: int
    evicted: list = field(default_factory=list)
    admitted: list = field(default_factory=list)
    applied: bool = True  # False when skipped by hysteresis


class AdaptiveCache:
    def __init__(
        self,
        budget_bytes: int,
        admission: str = "sketch",
        sketch_decay: float = 0.5,
        pooled_results: bool = False,
        record_evictions: bool = False,
    ):
        if admission not in ("sketch", "always"):
            raise ConfigError(f"unknown admission policy '{admission}'")
        self.budget_bytes = int(budget_bytes)
        self.admission = admission
        self.pooled_results_enabled = pooled_results
        self._entries: OrderedDict = OrderedDict()  # key -> CacheEntry, LRU order
        self.used_bytes = 0
        self.tick = 0
        self.hits = 0
        self.misses = 0
        self.sketch = FrequencySketch(decay=sketch_decay)
        self.eviction_log: list | None = [] if record_evictions else None
        self._pending_admissions: list = []

    # -- lookups ----------------------------------------------------------

    def get(self, table_id: int, index: int) -> np.ndarray | None:
        """Row probe. Hit refreshes recency; miss feeds the sketch."""
        key = (table_id, index)
        entry = self._entries.get(key)
        self.tick += 1
        if entry is None:
            self.misses += 1
            self.sketch.bump(key)
            return None
        self.hits += 1
        entry.hits += 1
        entry.last_tick = self.tick
        self._entries.move_to_end(key)
        return entry.vector

    def pooled_get(self, table_id: int, op, indices) -> np.ndarray | None:
        """Optional second keyspace: cached pooled results, keyed by the
        sorted index multiset. Disabled unless configured on."""
        if not self.pooled_results_enabled:
            return None
        key = ("pooled", table_id, op.value, tuple(sorted(indices)))
        entry = self._entries.get(key)
        self.tick += 1
        if entry is None:
            return None
        entry.hits += 1
        entry.last_tick = self.tick
        self._entries.move_to_end(key)
        return entry.vector

    def pooled_put(self, table_id: int, op, indices, vector: np.ndarray) -> None:
        if not self.pooled_results_enabled:
            return
        key = ("pooled", table_id, op.value, tuple(sorted(indices)))
        self._insert(key, vector, force=False)

    def hit_rate(self) -> float:
        total = self.hits + self.misses
        return self.hits / total if total else 0.0

    def contains(self, table_id: int, index: int) -> bool:
        return (table_id, index) in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    # -- insertion and eviction -------------------------------------------

    def offer(self, table_id: int, index: int, vector: np.ndarray) -> bool:
        """Admission attempt for a freshly raw-fetched row.

        With free room under the budget, insert. At budget, the sketch
        policy admits only candidates at least as hot (by miss frequency) as
        the current LRU victim; 'always' admits unconditionally.
        """
        key = (table_id, index)
        if key in self._entries:
            return True
        size = vector.size * vector.itemsize
        if size > self.budget_bytes:
            return False
        if self.admission == "sketch" and self.used_bytes + size > self.budget_bytes:
            victim = next(iter(self._entries))
            if self.sketch.estimate(key) < self.sketch.estimate(victim):
                return False
        return self._insert(key, vector, force=False)

    def _insert(self, key, vector: np.ndarray, force: bool) -> bool:
        size = vector.size * vector.itemsize
        if size > self.budget_bytes:
            return False
        while self.used_bytes + size > self.budget_bytes:
            self._evict_one()
        self.tick += 1
        self._entries[key] = CacheEntry(vector=vector, size_bytes=size, last_tick=self.tick)
        self.used_bytes += size
        self._check_budget()
        return True

    def _evict_one(self):
        key, entry = self._entries.popitem(last=False)
        self.used_bytes -= entry.size_bytes
        if self.eviction_log is not None:
            self.eviction_log.append(key)
        return key

    def evict_to_budget(self) -> list:
        evicted = []
        while self.used_bytes > self.budget_bytes:
            evicted.append(self._evict_one())
        self._check_budget()
        return evicted

    def _check_budget(self):
        if self.used_bytes > self.budget_bytes:
            raise InvariantError(
                f"cache used {self.used_bytes} exceeds budget {self.budget_bytes}"
            )

    # -- resizing -----------------------------------------------------------

    def resize(self, new_budget: int, fetcher, row_bytes_of=None) -> ResizeReport:
        """Apply a new byte budget.

        Shrink evicts LRU entries until used <= budget. Grow ranks absent rows
        by the miss sketch and stages as many as fit; their vectors come from
        ``fetcher(table_id, index)`` and are installed by
        ``apply_pending_admissions`` on the writer's next tick (admission is
        asynchronous and best-effort, never blocking the lookup path).
        """
        if new_budget < 0:
            raise ConfigError("cache budget must be >= 0")
        report = ResizeReport(old_budget=self.budget_bytes, new_budget=new_budget)
        grow = new_budget > self.budget_bytes
        self.budget_bytes = int(new_budget)
        if self.used_bytes > self.budget_bytes:
            report.evicted = self.evict_to_budget()
        if grow and fetcher is not None:
            report.admitted = self.stage_hot_admissions(fetcher, row_bytes_of)
        return report

    def stage_hot_admissions(self, fetcher, row_bytes_of=None,
                             limit: int | None = None) -> list:
        """Stage the hottest absent rows (by miss frequency) that fit in the
        spare budget, fetched via ``fetcher``. This is the swap-in path: it
        runs on budget growth and as a steady-state trickle each batch, so a
        cache in front of a pushdown-heavy workload still fills with hot rows
        it never saw raw."""
        staged: list = []
        room = self.budget_bytes - self.used_bytes
        if room <= 0 or not self.sketch._counts:
            return staged
        pending_keys = {key for key, _ in self._pending_admissions}
        for key in self.sketch.hottest(n=limit if limit is not None
                                       else len(self.sketch._counts)):
            if not (isinstance(key, tuple) and len(key) == 2):
                continue
            if key in self._entries or key in pending_keys:
                continue
            size = row_bytes_of(key[0]) if row_bytes_of else None
            if size is not None and size > room:
                continue
            vector = fetcher(key[0], key[1])
            if vector is None:
                continue
            size = vector.size * vector.itemsize
            if size > room:
                continue
            self._pending_admissions.append((key, vector))
            staged.append(key)
            room -= size
            if limit is not None and len(staged) >= limit:
                break
        return staged

    def apply_pending_admissions(self) -> int:
        """Install vectors staged by the last grow; called by the single
        writer at the start of its next tick."""
        applied = 0
        for key, vector in self._pending_admissions:
            if key not in self._entries and self._insert(key, vector, force=False):
                applied += 1
        self._pending_admissions.clear()
        return applied


@dataclass
class CachePolicy:
    """Budget controller: turns load level + windowed batch size into the
    next cache budget, with hysteresis against oscillation."""

    model: MemoryModel
    hysteresis_fraction: float = 0.05

    def propose(self, current_budget: int, level: LoadLevel, windowed_batch: float) -> int:
        batch = max(1, int(round(windowed_batch)))
        try:
            target = target_cache_bytes(self.model, batch)
        except CapacityError:
            target = 0
        # Direction guarantee: High never grows the budget, Low never shrinks it.
        if level is LoadLevel.HIGH:
            proposed = min(current_budget, target)
        elif level is LoadLevel.LOW:
            proposed = max(current_budget, target)
        else:
            proposed = target
        if abs(proposed - current_budget) < self.hysteresis_fraction * self.model.gpu_capacity_bytes:
            return current_budget
        return proposed
