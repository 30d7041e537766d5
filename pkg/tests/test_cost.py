import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from varikit.backbone import BackboneConfig, init_weights
from varikit.cost import (
    DomainError,
    compression_cost,
    decompression_cost,
    ffn_cost,
    ffn_flops_compressed,
    measured_flops,
    model_flops,
    per_site_totals,
    plugin_cost,
    speedup_report,
)
from varikit.plugin import init_plugin


def test_reference_parameter_and_flop_counts():
    assert compression_cost(1, 768, 4) == (12_292, 4_611)
    assert decompression_cost(1, 768, 64) == (148_288, 149_056)
    assert plugin_cost(1 * 4, 768, 4, 64)[0] == 160_580
    assert plugin_cost(4, 768, 4, 64)[1] == 4 * 153_667
    assert plugin_cost(1, 1, 1, 1) == (7, 12)
    assert ffn_cost(1, 768) == (4_718_592, 4_718_592)


def test_single_group_costs_one_row():
    assert ffn_flops_compressed(4, 16, 4) == 8 * 16 * 16


def test_domain_errors():
    with pytest.raises(DomainError):
        plugin_cost(2, 8, 4, 2)
    with pytest.raises(DomainError):
        compression_cost(0, 8, 2)
    with pytest.raises(DomainError):
        decompression_cost(3, 8, -1)


def test_headline_report():
    rep = speedup_report(512, 768, 4, 64)
    assert abs(rep.flops_saving_ratio - 0.7174) <= 1e-3
    assert abs(rep.param_overhead_ratio - 0.0340) <= 5e-4
    assert rep.approx_flops_overhead_ratio == pytest.approx(200 / 6144)
    rel = abs(rep.approx_flops_overhead_ratio - rep.exact_flops_overhead_ratio) / rep.exact_flops_overhead_ratio
    assert rel <= 0.05
    assert "%" in rep.table()
    assert '"flops_saving_ratio"' in rep.to_json()


def test_no_compression_is_pure_overhead():
    rep = speedup_report(64, 768, 1, 64)
    assert rep.host_flops_compressed == rep.host_flops_uncompressed
    assert rep.flops_saving_ratio < 0
    assert "-" in rep.table()


def test_saving_grows_with_ratio():
    savings = [speedup_report(1024, 768, k, 64).flops_saving_ratio for k in (2, 4, 8, 16, 32)]
    assert all(a < b for a, b in zip(savings, savings[1:]))


@settings(max_examples=60, deadline=None)
@given(st.sampled_from([64, 128, 256, 512, 768, 1024]), st.integers(1, 8), st.integers(1, 64))
def test_approximation_close_when_ratios_small(d, k_frac, r_frac):
    k = max(1, d // 8 * k_frac // 8)
    r = max(1, d // 8 * r_frac // 64)
    rep = speedup_report(k * 16, d, k, r)
    rel = abs(rep.approx_flops_overhead_ratio - rep.exact_flops_overhead_ratio) / rep.exact_flops_overhead_ratio
    assert rel <= 0.05


def _measure(n, d, k, r, seed):
    cfg = BackboneConfig(vocab_size=8, d=d, n_layers=1, n_heads=1, max_seq_len=n)
    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, rng).freeze()
    bundle = init_plugin(d, k, r, "FFN", 1, rng)
    toks = rng.integers(0, 8, size=n)
    return cfg, per_site_totals(measured_flops(toks, weights, bundle))


def test_reference_instrumented_counts():
    _, got = _measure(8, 16, 4, 4, 0)
    assert got["compress"] == (64 + 32 + 3) * 8 == 792
    assert got["decompress"] == (192 + 32 + 4) * 8 == 1824
    assert got["ffn"] == 8 * 2 * 256 == 4096


@settings(max_examples=110, deadline=None)
@given(st.integers(1, 6), st.integers(1, 4), st.integers(2, 24), st.integers(1, 23), st.integers(0, 9999))
def test_instrumented_counts_equal_closed_forms(groups, k, d, r, seed):
    r = min(r, d - 1)
    n = groups * k
    cfg, got = _measure(n, d, k, r, seed)
    assert got["compress"] == compression_cost(n, d, k)[1]
    assert got["decompress"] == decompression_cost(n, d, r)[1]
    assert got["ffn"] == ffn_flops_compressed(n, d, k)
    assert sum(got.values()) == model_flops(n, cfg, k, r, plugged=True)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 11), st.integers(2, 4), st.integers(0, 9999))
def test_model_flops_with_padding(n, k, seed):
    cfg, got = _measure(n, 8, k, 3, seed)
    assert sum(got.values()) == model_flops(n, cfg, k, 3, plugged=True)


def test_unplugged_model_flops(small_weights):
    toks = np.arange(12)
    got = sum(measured_flops(toks, small_weights).values())
    assert got == model_flops(12, small_weights.config)
