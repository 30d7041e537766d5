"""Activated-neuron statistics for FFNs running on compressed sequences.

A neuron counts as activated when the first FFN projection (before ReLU)
is strictly positive. For every group of ``k`` original tokens we compare:

* ``shared``: neurons activated by all members in the unplugged model,
* ``union``: neurons activated by at least one member,
* ``merged``: neurons activated by the group's compressed vector,

and report ``|merged & shared| / |shared|`` and ``|merged & union| / |merged|``.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from varikit.backbone import BackboneWeights, Taps
from varikit.plugin import PluginBundle, compressed_length, plugged_forward


@dataclass(frozen=True)
class ActivationSets:
    shared: frozenset[int]
    union: frozenset[int]
    merged: frozenset[int]
    layer: int
    group: int

    def ratios(self) -> tuple[float | None, float | None]:
        return containment_ratios(self.shared, self.union, self.merged)


def activated_set(pre_activation) -> frozenset[int]:
    v = np.asarray(pre_activation).reshape(-1)
    return frozenset(np.flatnonzero(v > 0).tolist())


def containment_ratios(shared, union, merged) -> tuple[float | None, float | None]:
    """(|merged & shared| / |shared|, |merged & union| / |merged|).

    Each ratio is None when its denominator is empty.
    """
    recall = len(merged & shared) / len(shared) if shared else None
    precision = len(merged & union) / len(merged) if merged else None
    return recall, precision


def _pre_activations(tokens, backbone: BackboneWeights, bundle: PluginBundle | None,
                     **modes) -> dict[int, np.ndarray]:
    taps = Taps()
    plugged_forward(tokens, backbone, bundle, taps=taps, **modes)
    out = {}
    for l in range(backbone.config.n_layers):
        arr = taps.get(l, "ffn_pre_act")
        out[l] = arr[0] if np.ndim(tokens) == 1 else arr
    return out


def group_activation_sets(tokens, backbone: BackboneWeights, bundle: PluginBundle,
                          **modes) -> list[ActivationSets]:
    """Activation sets for every (layer, group) of one token sequence.

    Only real members enter ``shared`` and ``union``; zero padding of a short final
    group never passes through the original FFN.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 1:
        raise ValueError("group_activation_sets takes a single sequence")
    if bundle.site != "FFN":
        raise ValueError("neuron analysis applies to FFN-site bundles")
    original = _pre_activations(tokens, backbone, None)
    compressed = _pre_activations(tokens, backbone, bundle, **modes)
    n, k = len(tokens), bundle.k
    result = []
    for l in range(backbone.config.n_layers):
        for i in range(compressed_length(n, k)):
            members = [activated_set(row) for row in original[l][i * k:min((i + 1) * k, n)]]
            result.append(ActivationSets(
                shared=frozenset.intersection(*members),
                union=frozenset.union(*members),
                merged=activated_set(compressed[l][i]),
                layer=l,
                group=i,
            ))
    return result


def group_containment(tokens, backbone: BackboneWeights, bundle: PluginBundle, layer: int,
                      group: int, **modes) -> tuple[float | None, float | None]:
    for s in group_activation_sets(tokens, backbone, bundle, **modes):
        if s.layer == layer and s.group == group:
            return s.ratios()
    raise IndexError(f"no group {group} at layer {layer}")


@dataclass(frozen=True)
class ContainmentSummary:
    k: int
    mean_c_in_i: float | None
    mean_c_in_u: float | None
    groups: int
    undefined_c_in_i: int
    undefined_c_in_u: int

    def to_dict(self) -> dict:
        return self.__dict__.copy()


def containment_summary(token_batch: np.ndarray, backbone: BackboneWeights, bundle: PluginBundle,
                        **modes) -> ContainmentSummary:
    """Mean containment ratios over all groups; undefined groups are counted, not averaged."""
    ci, cu = [], []
    groups = und_i = und_u = 0
    for row in np.asarray(token_batch):
        for s in group_activation_sets(row, backbone, bundle, **modes):
            groups += 1
            a, b = s.ratios()
            if a is None:
                und_i += 1
            else:
                ci.append(a)
            if b is None:
                und_u += 1
            else:
                cu.append(b)
    return ContainmentSummary(
        k=bundle.k,
        mean_c_in_i=float(np.mean(ci)) if ci else None,
        mean_c_in_u=float(np.mean(cu)) if cu else None,
        groups=groups,
        undefined_c_in_i=und_i,
        undefined_c_in_u=und_u,
    )


def activated_fraction(token_batch: np.ndarray, backbone: BackboneWeights,
                       bundle: PluginBundle | None = None, **modes) -> dict[int, float]:
    """Per-layer mean fraction of activated FFN neurons over every processed row."""
    pre = _pre_activations(np.asarray(token_batch), backbone, bundle, **modes)
    return {l: float((arr > 0).mean(dtype=np.float64)) for l, arr in pre.items()}


def activation_ratio_sweep(ks: list[int], token_batch: np.ndarray, backbone: BackboneWeights,
                           bundles: dict[int, PluginBundle | None]) -> list[dict]:
    """Rows ``{k, layer, mean_fraction}`` plus a ``layer = "all"`` mean per k."""
    rows = []
    for k in ks:
        per_layer = activated_fraction(token_batch, backbone, bundles.get(k))
        for l, frac in per_layer.items():
            rows.append({"k": k, "layer": l, "mean_fraction": frac})
        rows.append({"k": k, "layer": "all", "mean_fraction": float(np.mean(list(per_layer.values())))})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=["k", "layer", "mean_fraction"], lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "mean_fraction": f"{row['mean_fraction']:.6f}"})
    return buf.getvalue()


def summary_json(sweep: list[dict], containment: list[ContainmentSummary]) -> str:
    return json.dumps(
        {"activation_sweep": sweep, "containment": [c.to_dict() for c in containment]},
        indent=2, sort_keys=True,
    )
