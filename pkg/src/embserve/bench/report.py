"""Metrics reports: human-readable tables plus a canonical machine summary.

The machine summary is a pure function of (config, seed) under the
virtual-time backend: identical runs serialize to identical bytes.
"""

import json
from dataclasses import dataclass, field


def percentiles(values, probs=(0.50, 0.95, 0.99)) -> dict:
    """Deterministic nearest-rank percentiles plus mean and count."""
    out = {"count": len(values)}
    if not values:
        out.update({"mean": 0.0, "p50": 0.0, "p95": 0.0, "p99": 0.0})
        return out
    ordered = sorted(values)
    n = len(ordered)
    out["mean"] = sum(ordered) / n
    for p in probs:
        rank = max(1, min(n, int(-(-p * n // 1))))  # ceil(p*n), clamped
        out[f"p{int(p * 100)}"] = ordered[rank - 1]
    return out


@dataclass
class RunMetrics:
    label: str
    makespan: float = 0.0
    throughput: float = 0.0
    throughput_unit: str = "lookups/tick"
    counters: dict = field(default_factory=dict)
    latency_stages: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "makespan": self.makespan,
            "throughput": self.throughput,
            "throughput_unit": self.throughput_unit,
            "counters": self.counters,
            "latency_stages": self.latency_stages,
            "series": self.series,
            "extras": self.extras,
        }


@dataclass
class MetricsReport:
    experiment: str
    seed: int
    backend: str
    fingerprint: str
    config: dict = field(default_factory=dict)
    runs: list = field(default_factory=list)
    comparison: dict = field(default_factory=dict)
    invariants: dict = field(default_factory=dict)

    def run(self, label: str) -> RunMetrics:
        for r in self.runs:
            if r.label == label:
                return r
        raise KeyError(f"no run labeled '{label}'")

    def to_machine(self) -> str:
        payload = {
            "experiment": self.experiment,
            "seed": self.seed,
            "backend": self.backend,
            "fingerprint": self.fingerprint,
            "comparison": self.comparison,
            "invariants": self.invariants,
            "runs": [r.to_dict() for r in self.runs],
            "config": self.config,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def to_text(self) -> str:
        lines = []
        lines.append(f"experiment: {self.experiment}")
        lines.append(f"seed: {self.seed}   backend: {self.backend}   "
                     f"fingerprint: {self.fingerprint}")
        lines.append("")
        for run in self.runs:
            lines.append(f"== run: {run.label}")
            lines.append(f"  makespan: {run.makespan:.3f}   "
                         f"throughput: {run.throughput:.4f} {run.throughput_unit}")
            if run.counters:
                lines.append("  counters:")
                for key in sorted(run.counters):
                    lines.append(f"    {key:<28} {run.counters[key]}")
            if run.latency_stages:
                lines.append(f"  {'stage':<16}{'count':>8}{'mean':>12}"
                             f"{'p50':>12}{'p95':>12}{'p99':>12}")
                for stage in sorted(run.latency_stages):
                    s = run.latency_stages[stage]
                    lines.append(
                        f"  {stage:<16}{s['count']:>8}{s['mean']:>12.4f}"
                        f"{s['p50']:>12.4f}{s['p95']:>12.4f}{s['p99']:>12.4f}")
            if run.extras:
                lines.append("  extras:")
                for key in sorted(run.extras):
                    lines.append(f"    {key:<28} {run.extras[key]}")
            lines.append("")
        if self.comparison:
            lines.append("== comparison")
            for key in sorted(self.comparison):
                lines.append(f"  {key:<36} {self.comparison[key]}")
            lines.append("")
        if self.invariants:
            lines.append("== invariants")
            for key in sorted(self.invariants):
                lines.append(f"  {key:<36} {self.invariants[key]}")
            lines.append("")
        return "\n".join(lines)

    def write(self, out_dir) -> tuple[str, str]:
        import os

        os.makedirs(out_dir, exist_ok=True)
        base = os.path.join(str(out_dir), self.experiment.replace("/", "_"))
        text_path = base + ".report.txt"
        machine_path = base + ".summary.json"
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())
        with open(machine_path, "w", encoding="utf-8") as fh:
            fh.write(self.to_machine())
        return text_path, machine_path


def comparison_table(summaries: list[dict]) -> str:
    """Side-by-side key metrics for `embserve report <summaries...>`."""
    lines = []
    header = f"{'experiment':<24}{'seed':>6}{'fingerprint':>20}"
    lines.append(header)
    for s in summaries:
        lines.append(f"{s['experiment']:<24}{s['seed']:>6}{s['fingerprint']:>20}")
        for run in s.get("runs", []):
            lines.append(f"  {run['label']:<22} makespan={run['makespan']:<12.3f}"
                         f" throughput={run['throughput']:.4f} {run['throughput_unit']}")
        for key in sorted(s.get("comparison", {})):
            lines.append(f"    {key:<34} {s['comparison'][key]}")
    return "\n".join(lines)
