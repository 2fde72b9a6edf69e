"""Pooling semantics: flat reductions, hierarchical planning, and the
ranker-side combination of server-side partial results.

The contract that everything else leans on: pooling a lookup hierarchically
(partial sums at the servers, one global combine at the ranker) must produce
the same vector as pooling all rows flat at the ranker, for any partition of
the rows and any pushdown/raw split. Two rules make that hold to tight
tolerance:

* partials always carry ``(sum, count)``, never a per-group mean, so Mean is
  recomposed exactly from one division at the very end;
* accumulation is float64 in a fixed order (partials by ascending server id,
  then raw vectors in request order), rounded to float32 only on emit.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import EmbServeError


class PoolingOp(Enum):
    SUM = "sum"
    MEAN = "mean"


class PlanMode(Enum):
    PUSHDOWN = "pushdown"
    RAW_FETCH = "raw_fetch"


@dataclass(frozen=True)
class PartialResult:
    """Server-side partial pool: element-wise float64-accumulated sum of the
    selected rows, emitted as float32, plus how many rows went in."""

    vector: np.ndarray
    count: int
    source: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise EmbServeError("PartialResult.count must be >= 1")


@dataclass
class PoolingPlan:
    """Pushdown-vs-raw decision per (server, feature position) of one lookup."""

    threshold: int
    modes: dict = field(default_factory=dict)  # (server_id, feature_pos) -> PlanMode

    def mode(self, server_id: int, feature_pos: int) -> "PlanMode":
        return self.modes[(server_id, feature_pos)]


def sum_rows_f64(rows: Iterable[np.ndarray], dim: int | None = None) -> np.ndarray:
    """Sequential element-wise sum in input order, float64 accumulator."""
    acc = None
    for row in rows:
        if acc is None:
            acc = np.zeros(row.shape[-1], dtype=np.float64)
        acc += row
    if acc is None:
        if dim is None:
            raise EmbServeError("cannot sum zero rows without a dim")
        acc = np.zeros(dim, dtype=np.float64)
    return acc


def pool_flat(vectors: Sequence[np.ndarray], op: PoolingOp) -> np.ndarray:
    """Reduce a non-empty list of equal-dim vectors to one float32 vector."""
    if len(vectors) == 0:
        raise EmbServeError("pool_flat: empty vector list")
    dim = vectors[0].shape[-1]
    for v in vectors:
        if v.shape[-1] != dim:
            raise EmbServeError(f"pool_flat: dim mismatch ({v.shape[-1]} != {dim})")
    total = sum_rows_f64(vectors)
    if op is PoolingOp.MEAN:
        total = total / len(vectors)
    return total.astype(np.float32)


def plan_hierarchical(group_sizes: dict, threshold: int) -> PoolingPlan:
    """Decide pushdown vs raw fetch per destination group.

    ``group_sizes`` maps (server_id, feature_pos) to the number of indices the
    lookup routes there. A group is pushed down iff its size reaches the
    threshold; singletons and small groups are fetched raw.
    """
    if threshold < 2:
        raise EmbServeError(f"pushdown threshold must be >= 2, got {threshold}")
    plan = PoolingPlan(threshold=threshold)
    for key, size in group_sizes.items():
        plan.modes[key] = PlanMode.PUSHDOWN if size >= threshold else PlanMode.RAW_FETCH
    return plan


def combine_partials(
    partials: Sequence[PartialResult],
    raw: Sequence[np.ndarray],
    op: PoolingOp,
) -> np.ndarray:
    """Global pooling step: fold partial sums and raw vectors into the final
    result. Partials are folded by ascending server id, then raw vectors in
    request order, so the result is reproducible run to run."""
    if len(partials) == 0 and len(raw) == 0:
        raise EmbServeError("combine_partials: nothing to combine")
    dims = {p.vector.shape[-1] for p in partials} | {v.shape[-1] for v in raw}
    if len(dims) != 1:
        raise EmbServeError(f"combine_partials: inconsistent dims {sorted(dims)}")
    ordered = sorted(partials, key=lambda p: p.source)
    total = sum_rows_f64(
        [p.vector for p in ordered] + list(raw), dim=next(iter(dims))
    )
    if op is PoolingOp.MEAN:
        count = sum(p.count for p in partials) + len(raw)
        total = total / count
    return total.astype(np.float32)
