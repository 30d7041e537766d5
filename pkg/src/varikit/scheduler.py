"""Workload-adaptive choice of compression ratio, simulated on a logical clock.

A single server drains requests first-come first-served at a fixed FLOP
rate. On each arrival the adaptive policy picks the smallest ratio ``k``
whose predicted completion (current backlog plus the request's own cost,
divided by capacity) fits the latency budget, falling back to the largest
registered ratio. Plugin swaps are free.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from varikit.backbone import BackboneConfig
from varikit.cost import model_flops
from varikit.plugin import PluginBundle


@dataclass(frozen=True)
class RegistryEntry:
    k: int
    quality: float
    bundle: PluginBundle | None = None


class PluginRegistry:
    """Ratio -> (bundle, quality) map with FLOP costs from the cost model."""

    def __init__(self, config: BackboneConfig, r: int):
        self.config = config
        self.r = r
        self.entries: dict[int, RegistryEntry] = {1: RegistryEntry(1, 1.0, None)}

    @classmethod
    def from_qualities(cls, config: BackboneConfig, r: int, qualities: dict[int, float]) -> "PluginRegistry":
        reg = cls(config, r)
        for k in sorted(qualities):
            if k != 1:
                reg.register(k, qualities[k])
        return reg

    def register(self, k: int, quality: float, bundle: PluginBundle | None = None) -> None:
        if k < 2:
            raise ValueError("k = 1 is the built-in unplugged baseline")
        if not 0.0 <= quality <= 1.0:
            raise ValueError(f"quality must lie in [0, 1], got {quality}")
        if bundle is not None and bundle.k != k:
            raise ValueError(f"bundle ratio {bundle.k} registered under k={k}")
        merged = dict(self.entries)
        merged[k] = RegistryEntry(k, quality, bundle)
        ks = sorted(merged)
        for a, b in zip(ks, ks[1:]):
            if merged[b].quality > merged[a].quality:
                raise ValueError(f"quality must not increase with k: q({b}) > q({a})")
        self.entries = merged

    @property
    def ratios(self) -> list[int]:
        return sorted(self.entries)

    def quality(self, k: int) -> float:
        return self.entries[k].quality

    def cost(self, k: int, n: int) -> int:
        """Whole-forward FLOPs of one length-n request at ratio k."""
        if k == 1:
            return model_flops(n, self.config, 1, plugged=False)
        return model_flops(n, self.config, min(k, n), self.r, plugged=True)

    def cost_per_token(self, k: int, n: int) -> float:
        return self.cost(k, n) / n


@dataclass(frozen=True)
class WorkloadTrace:
    events: list[tuple[float, int]]
    capacity: float
    latency_budget: float

    def __post_init__(self):
        if self.capacity <= 0 or self.latency_budget <= 0:
            raise ValueError("capacity and latency budget must be positive")
        prev = -math.inf
        for t, n in self.events:
            if t < prev:
                raise ValueError("arrival times must be non-decreasing")
            if t < 0 or n <= 0:
                raise ValueError("arrival times must be >= 0 and lengths positive")
            prev = t

    def to_jsonl(self) -> str:
        lines = [json.dumps({"capacity": self.capacity, "latency_budget": self.latency_budget})]
        lines += [json.dumps({"arrival": t, "length": n}) for t, n in self.events]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "WorkloadTrace":
        rows = [json.loads(line) for line in text.splitlines() if line.strip()]
        if not rows or "capacity" not in rows[0]:
            raise ValueError("trace must start with a {capacity, latency_budget} header line")
        head = rows[0]
        events = [(float(r["arrival"]), int(r["length"])) for r in rows[1:]]
        return cls(events, float(head["capacity"]), float(head["latency_budget"]))

    @classmethod
    def load(cls, path) -> "WorkloadTrace":
        return cls.from_jsonl(Path(path).read_text())


def two_phase_trace(light: int = 100, heavy: int = 200, seq_len: int = 16, capacity: float = 10_000.0,
                    light_gap: float = 100.0, heavy_gap: float = 30.0, budget: float = 100.0) -> WorkloadTrace:
    """Light load followed by a burst that an unplugged model cannot sustain.

    With the default desk-scale encoder an unplugged request needs ~42.6
    ticks of service, so a 30-tick arrival gap overloads it, while k = 4
    (~26.2 ticks) keeps up.
    """
    events = [(i * light_gap, seq_len) for i in range(light)]
    start = light * light_gap
    events += [(start + i * heavy_gap, seq_len) for i in range(heavy)]
    return WorkloadTrace(events, capacity, budget)


def select_plugin(backlog_flops: float, capacity: float, budget: float, registry: PluginRegistry,
                  seq_len: int) -> int:
    for k in registry.ratios:
        if (backlog_flops + registry.cost(k, seq_len)) / capacity <= budget:
            return k
    return registry.ratios[-1]


def nearest_rank(values: list[float], q: float) -> float:
    ordered = sorted(values)
    idx = max(0, math.ceil(q * len(ordered)) - 1)
    return ordered[idx]


@dataclass(frozen=True)
class SimReport:
    policy: str
    requests: int
    p50_latency: float
    p95_latency: float
    latency_budget: float
    meets_budget: bool
    mean_quality: float
    usage: dict[int, int] = field(default_factory=dict)
    total_flops: int = 0

    def to_json(self) -> str:
        d = asdict(self)
        d["usage"] = {str(k): v for k, v in sorted(self.usage.items())}
        return json.dumps(d, indent=2, sort_keys=True)


def simulate(trace: WorkloadTrace, registry: PluginRegistry, policy: str | int = "adaptive") -> SimReport:
    """Replay ``trace`` through a FIFO server; ``policy`` is ``"adaptive"`` or a fixed k."""
    if policy != "adaptive" and policy not in registry.entries:
        raise ValueError(f"fixed policy k={policy} is not registered")
    free_at = 0.0
    latencies: list[float] = []
    qualities: list[float] = []
    usage: dict[int, int] = {k: 0 for k in registry.ratios}
    total = 0
    for arrival, n in trace.events:
        backlog = max(0.0, free_at - arrival) * trace.capacity
        if policy == "adaptive":
            k = select_plugin(backlog, trace.capacity, trace.latency_budget, registry, n)
        else:
            k = int(policy)
        cost = registry.cost(k, n)
        total += cost
        free_at = max(arrival, free_at) + cost / trace.capacity
        latencies.append(free_at - arrival)
        qualities.append(registry.quality(k))
        usage[k] += 1
    p95 = nearest_rank(latencies, 0.95) if latencies else 0.0
    return SimReport(
        policy=str(policy) if policy == "adaptive" else f"fixed_k={policy}",
        requests=len(latencies),
        p50_latency=nearest_rank(latencies, 0.50) if latencies else 0.0,
        p95_latency=p95,
        latency_budget=trace.latency_budget,
        meets_budget=p95 <= trace.latency_budget,
        mean_quality=math.fsum(qualities) / len(qualities) if qualities else 0.0,
        usage=usage,
        total_flops=total,
    )
