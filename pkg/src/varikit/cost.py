"""Parameter and FLOP accounting for FFN-site compression plugins.

Convention: one multiply-accumulate in a matrix product is one FLOP. The
FFN (d -> 4d -> d) therefore costs 8 d^2 per row. Plugin layers add small
per-token terms for bias, softmax, weighted sum and residual work:

* compression layer:   (k d + 2 d + 3) per token, k^2 d + k parameters
* decompression layer: (3 r d + 2 d + r) per token, 3 r d + r + d parameters

:func:`measured_flops` counts the same quantities by instrumenting an actual
forward pass; both routes agree exactly whenever k divides n.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass

import numpy as np

from varikit import tensor as T
from varikit.backbone import BackboneConfig, BackboneWeights
from varikit.plugin import PluginBundle, compressed_length, plugged_forward

CONVENTION = "MAC=1 for matrix products; closed-form plugin and FFN counts"


class DomainError(ValueError):
    pass


def _check_positive(**values: int) -> None:
    for name, v in values.items():
        if not isinstance(v, (int, np.integer)) or v <= 0:
            raise DomainError(f"{name} must be a positive integer, got {v!r}")


def compression_cost(n: int, d: int, k: int) -> tuple[int, int]:
    _check_positive(n=n, d=d, k=k)
    return k * k * d + k, (k * d + 2 * d + 3) * n


def decompression_cost(n: int, d: int, r: int) -> tuple[int, int]:
    _check_positive(n=n, d=d, r=r)
    return 3 * r * d + r + d, (3 * r * d + 2 * d + r) * n


def plugin_cost(n: int, d: int, k: int, r: int) -> tuple[int, int]:
    """(parameters, FLOPs) of one FFN-site plugin layer pair over n tokens."""
    _check_positive(n=n, d=d, k=k, r=r)
    if k > n:
        raise DomainError(f"compression ratio k={k} exceeds sequence length n={n}")
    cp, cf = compression_cost(n, d, k)
    dp, df = decompression_cost(n, d, r)
    return cp + dp, cf + df


def ffn_cost(n: int, d: int) -> tuple[int, int]:
    _check_positive(n=n, d=d)
    return 8 * d * d, 8 * n * d * d


def ffn_flops_compressed(n: int, d: int, k: int) -> int:
    _check_positive(n=n, d=d, k=k)
    return 8 * compressed_length(n, k) * d * d


def attention_flops(n: int, d: int, n_kv: int | None = None) -> int:
    """Q/K/V/O projections plus score and context products."""
    n_kv = n if n_kv is None else n_kv
    return 4 * n * d * d + 2 * n * n_kv * d


@dataclass(frozen=True)
class CostReport:
    n: int
    d: int
    k: int
    r: int
    plugin_params: int
    host_params: int
    plugin_flops: int
    host_flops_compressed: int
    host_flops_uncompressed: int
    param_overhead_ratio: float
    flops_saving_ratio: float
    exact_flops_overhead_ratio: float
    approx_flops_overhead_ratio: float
    convention: str = CONVENTION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("n, d, k, r", f"{self.n}, {self.d}, {self.k}, {self.r}"),
            ("plugin params", f"{self.plugin_params:,}"),
            ("FFN params", f"{self.host_params:,}"),
            ("param overhead", f"{100 * self.param_overhead_ratio:.2f}%"),
            ("plugin FLOPs", f"{self.plugin_flops:,}"),
            ("FFN FLOPs (compressed)", f"{self.host_flops_compressed:,}"),
            ("FFN FLOPs (uncompressed)", f"{self.host_flops_uncompressed:,}"),
            ("FLOPs saving", f"{100 * self.flops_saving_ratio:.2f}%"),
            ("plugin/FFN FLOPs exact", f"{self.exact_flops_overhead_ratio:.5f}"),
            ("plugin/FFN FLOPs (4+k+3r)/8d", f"{self.approx_flops_overhead_ratio:.5f}"),
        ]
        width = max(len(a) for a, _ in rows)
        return "\n".join(f"{a.ljust(width)}  {b}" for a, b in rows)


def speedup_report(n: int, d: int, k: int, r: int) -> CostReport:
    plugin_params, plugin_flops = plugin_cost(n, d, k, r)
    host_params, host_full = ffn_cost(n, d)
    host_comp = ffn_flops_compressed(n, d, k)
    return CostReport(
        n=n, d=d, k=k, r=r,
        plugin_params=plugin_params,
        host_params=host_params,
        plugin_flops=plugin_flops,
        host_flops_compressed=host_comp,
        host_flops_uncompressed=host_full,
        param_overhead_ratio=plugin_params / host_params,
        flops_saving_ratio=1.0 - (plugin_flops + host_comp) / host_full,
        exact_flops_overhead_ratio=plugin_flops / host_full,
        approx_flops_overhead_ratio=(4 + k + 3 * r) / (8 * d),
    )


def model_flops(n: int, config: BackboneConfig, k: int = 1, r: int | None = None,
                plugged: bool | None = None) -> int:
    """Whole-encoder FLOPs for one length-n sequence with an FFN-site plugin.

    ``plugged`` defaults to ``k > 1``; the k = 1 baseline runs unplugged.
    The embedding lookup, normalisation and readout head are not counted.
    """
    plugged = k > 1 if plugged is None else plugged
    d = config.d
    per_layer = attention_flops(n, d)
    if plugged:
        if r is None:
            raise DomainError("a plugged model needs the bottleneck r")
        _check_positive(n=n, d=d, k=k, r=r)
        m = compressed_length(n, k)
        # compression runs over the padded length, decompression over n
        per_layer += compression_cost(m * k, d, k)[1] + decompression_cost(n, d, r)[1]
        per_layer += ffn_flops_compressed(n, d, k)
    else:
        per_layer += ffn_cost(n, d)[1]
    return config.n_layers * per_layer


def measured_flops(tokens, weights: BackboneWeights, bundle: PluginBundle | None = None,
                   **modes) -> dict[str, int]:
    """Instrumented plugged forward over one sequence.

    Returns FLOPs keyed ``L{layer}.{site}`` where site is ``attention``,
    ``ffn``, ``compress``, ``kv_compress`` or ``decompress``.
    """
    with T.FlopCounter() as counter:
        plugged_forward(tokens, weights, bundle, **modes)
    return dict(sorted(counter.counts.items()))


def per_site_totals(counts: dict[str, int]) -> dict[str, int]:
    """Sum :func:`measured_flops` output over layers."""
    totals: dict[str, int] = defaultdict(int)
    for key, v in counts.items():
        totals[key.split(".", 1)[1]] += v
    return dict(totals)
