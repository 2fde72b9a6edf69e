"""Reproducible lookup-trace generation and the line-oriented trace format.

Index popularity per table follows Zipf(alpha) over row ids (alpha=0 is
uniform), sampled by exact inverse-CDF over the precomputed normalization so
oracles can compare against the analytic pmf. Batch sizes ride a sine wave:
size(b) = round(base * (1 + amplitude * sin(2*pi*b / period))).

Trace files are versioned, diffable text: a header line carrying the
generator fingerprint, then one batch per line.
"""

import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, TraceParseError
from .pooling import PoolingOp
from .requests import Batch, Feature, LookupRequest

TRACE_FORMAT = "embtrace"
TRACE_VERSION = 1


@dataclass(frozen=True)
class TableWorkload:
    table_id: int
    zipf_alpha: float = 1.0
    weight: float = 1.0
    op: PoolingOp = PoolingOp.SUM

    def __post_init__(self):
        if self.zipf_alpha < 0:
            raise ConfigError(f"table {self.table_id}: zipf_alpha must be >= 0")
        if self.weight <= 0:
            raise ConfigError(f"table {self.table_id}: weight must be > 0")


@dataclass(frozen=True)
class Fluctuation:
    amplitude: float = 0.0
    period: int = 32

    def __post_init__(self):
        if not (0 <= self.amplitude < 1):
            raise ConfigError("fluctuation amplitude must be in [0, 1)")
        if self.period < 1:
            raise ConfigError("fluctuation period must be >= 1")


@dataclass(frozen=True)
class CoOccurrence:
    """Optional co-occurrence groups: with probability ``prob`` a draw expands
    into ``group_size`` consecutive row ids (which also land on one shard for
    contiguous placements). Defaults are not validated against production
    traces; this is a modeling knob."""

    group_size: int = 4
    prob: float = 0.0


@dataclass
class WorkloadConfig:
    tables: list[TableWorkload]
    lookups_per_batch: int = 64
    indices_per_lookup: tuple[int, int] = (8, 8)  # inclusive [lo, hi], uniform
    features_per_lookup: int = 1
    fluctuation: Fluctuation = field(default_factory=Fluctuation)
    duration_batches: int = 100
    seed: int = 0
    co_occurrence: CoOccurrence | None = None

    def __post_init__(self):
        if not self.tables:
            raise ConfigError("workload needs at least one table")
        if self.lookups_per_batch < 1:
            raise ConfigError("lookups_per_batch must be >= 1")
        lo, hi = self.indices_per_lookup
        if not (1 <= lo <= hi):
            raise ConfigError("indices_per_lookup bounds must satisfy 1 <= lo <= hi")
        if self.features_per_lookup < 1:
            raise ConfigError("features_per_lookup must be >= 1")
        if self.duration_batches < 1:
            raise ConfigError("duration_batches must be >= 1")


@dataclass
class Trace:
    batches: list[Batch]
    fingerprint: str

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        if self.fingerprint != other.fingerprint or len(self.batches) != len(other.batches):
            return False
        for a, b in zip(self.batches, other.batches):
            if (a.batch_id, a.tick) != (b.batch_id, b.tick):
                return False
            if len(a.lookups) != len(b.lookups):
                return False
            for la, lb in zip(a.lookups, b.lookups):
                for fa, fb in zip(la.features, lb.features):
                    if (fa.table_id, fa.op, fa.indices) != (fb.table_id, fb.op, fb.indices):
                        return False
        return True


class ZipfSampler:
    """Exact inverse-CDF sampling of Zipf(alpha) over n row ids; row r has
    probability (r+1)^-alpha / H_n(alpha)."""

    def __init__(self, n: int, alpha: float):
        if n < 1:
            raise ConfigError("zipf sampler needs n >= 1")
        self.n = n
        self.alpha = alpha
        weights = np.arange(1, n + 1, dtype=np.float64) ** (-alpha)
        self.pmf = weights / weights.sum()
        self.cdf = np.cumsum(self.pmf)

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        u = rng.random(count)
        return np.searchsorted(self.cdf, u, side="right")


def config_fingerprint(config: WorkloadConfig, table_rows: dict[int, int]) -> str:
    blob = json.dumps(
        {
            "tables": [
                {"table": t.table_id, "alpha": t.zipf_alpha, "weight": t.weight,
                 "op": t.op.value, "rows": table_rows[t.table_id]}
                for t in config.tables
            ],
            "lookups_per_batch": config.lookups_per_batch,
            "indices_per_lookup": list(config.indices_per_lookup),
            "features_per_lookup": config.features_per_lookup,
            "fluctuation": [config.fluctuation.amplitude, config.fluctuation.period],
            "duration_batches": config.duration_batches,
            "seed": config.seed,
            "co_occurrence": (
                [config.co_occurrence.group_size, config.co_occurrence.prob]
                if config.co_occurrence else None
            ),
        },
        sort_keys=True,
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def batch_size_at(config: WorkloadConfig, b: int) -> int:
    wave = 1.0 + config.fluctuation.amplitude * math.sin(
        2.0 * math.pi * b / config.fluctuation.period
    )
    return max(1, int(round(config.lookups_per_batch * wave)))


def generate_trace(config: WorkloadConfig, table_rows: dict[int, int]) -> Trace:
    """Generate a deterministic trace; identical config+seed => identical trace."""
    for t in config.tables:
        if t.table_id not in table_rows:
            raise ConfigError(f"workload references unknown table {t.table_id}")
        lo, hi = config.indices_per_lookup
        if hi > table_rows[t.table_id]:
            raise ConfigError(
                f"table {t.table_id}: up to {hi} indices per lookup exceeds "
                f"{table_rows[t.table_id]} rows"
            )
    rng = np.random.default_rng(config.seed)
    samplers = {t.table_id: ZipfSampler(table_rows[t.table_id], t.zipf_alpha)
                for t in config.tables}
    weights = np.array([t.weight for t in config.tables], dtype=np.float64)
    weights = weights / weights.sum()
    table_list = list(config.tables)
    lo, hi = config.indices_per_lookup
    batches = []
    for b in range(config.duration_batches):
        size = batch_size_at(config, b)
        lookups = []
        for _ in range(size):
            features = []
            picks = rng.choice(len(table_list), size=config.features_per_lookup, p=weights)
            for pick in picks:
                tw = table_list[pick]
                n_rows = table_rows[tw.table_id]
                count = int(rng.integers(lo, hi + 1)) if hi > lo else lo
                indices = _draw_indices(rng, samplers[tw.table_id], count, n_rows,
                                        config.co_occurrence)
                features.append(Feature(table_id=tw.table_id, op=tw.op, indices=indices))
            lookups.append(LookupRequest(features=features))
        batches.append(Batch(batch_id=b, tick=b, lookups=lookups))
    return Trace(batches=batches, fingerprint=config_fingerprint(config, table_rows))


def _draw_indices(rng, sampler: ZipfSampler, count: int, n_rows: int,
                  co: CoOccurrence | None) -> list[int]:
    if co is not None and co.prob > 0 and count >= co.group_size and rng.random() < co.prob:
        base = int(sampler.sample(rng, 1)[0])
        base = min(base, n_rows - co.group_size)
        group = list(range(base, base + co.group_size))
        rest = sampler.sample(rng, count - co.group_size)
        return group + [int(i) for i in rest]
    return [int(i) for i in sampler.sample(rng, count)]


# -- trace file format ---------------------------------------------------------

def save_trace(trace: Trace, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{TRACE_FORMAT} {TRACE_VERSION} {trace.fingerprint}\n")
        for batch in trace.batches:
            lookups = ";".join(
                " ".join(
                    f"{f.table_id}:{f.op.value}:{','.join(str(i) for i in f.indices)}"
                    for f in lookup.features
                )
                for lookup in batch.lookups
            )
            fh.write(f"B {batch.batch_id} {batch.tick}|{lookups}\n")


def load_trace(path) -> Trace:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise TraceParseError(1, "header", "empty file")
        parts = header.split()
        if len(parts) != 3 or parts[0] != TRACE_FORMAT:
            raise TraceParseError(1, "header", f"expected '{TRACE_FORMAT} <version> <fingerprint>'")
        if int(parts[1]) != TRACE_VERSION:
            raise TraceParseError(1, "version", f"unsupported version {parts[1]}")
        fingerprint = parts[2]
        batches = []
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            batches.append(_parse_batch_line(line, line_no))
    return Trace(batches=batches, fingerprint=fingerprint)


def _parse_batch_line(line: str, line_no: int) -> Batch:
    head, sep, body = line.partition("|")
    if not sep:
        raise TraceParseError(line_no, "batch", "missing '|' separator")
    head_parts = head.split()
    if len(head_parts) != 3 or head_parts[0] != "B":
        raise TraceParseError(line_no, "batch-header", f"malformed header '{head}'")
    try:
        batch_id, tick = int(head_parts[1]), int(head_parts[2])
    except ValueError:
        raise TraceParseError(line_no, "batch-header", "id and tick must be integers") from None
    if not body:
        raise TraceParseError(line_no, "lookups", "batch has no lookups")
    lookups = []
    for lookup_txt in body.split(";"):
        features = []
        for feat_txt in lookup_txt.split():
            fields = feat_txt.split(":")
            if len(fields) != 3:
                raise TraceParseError(line_no, "feature", f"malformed feature '{feat_txt}'")
            try:
                table_id = int(fields[0])
            except ValueError:
                raise TraceParseError(line_no, "table", f"bad table id '{fields[0]}'") from None
            try:
                op = PoolingOp(fields[1])
            except ValueError:
                raise TraceParseError(line_no, "op", f"unknown pooling op '{fields[1]}'") from None
            try:
                indices = [int(i) for i in fields[2].split(",") if i != ""]
            except ValueError:
                raise TraceParseError(line_no, "indices", f"bad index list '{fields[2]}'") from None
            if not indices:
                raise TraceParseError(line_no, "indices", "feature has no indices")
            features.append(Feature(table_id=table_id, op=op, indices=indices))
        if not features:
            raise TraceParseError(line_no, "lookup", "lookup has no features")
        lookups.append(LookupRequest(features=features))
    return Batch(batch_id=batch_id, tick=tick, lookups=lookups)


def convert_external_trace(path, fmt: str) -> Trace:
    """Converter stub for public production trace formats.

    Intended mapping for the public DLRM-style lookup datasets: each source
    row contributes one lookup; the per-feature id column maps to table_id in
    declaration order, the id-list column maps verbatim to ``indices``, the
    pooling op defaults to SUM, and source batch boundaries map to trace
    batches with tick = batch position. Left unimplemented until a concrete
    dataset is wired in.
    """
    raise NotImplementedError(
        f"external trace conversion ('{fmt}') is specified but not implemented"
    )
