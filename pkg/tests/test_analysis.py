import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from varikit.analysis import (
    activated_fraction,
    activated_set,
    activation_ratio_sweep,
    containment_ratios,
    containment_summary,
    group_activation_sets,
    summary_json,
    sweep_csv,
)
from varikit.backbone import BackboneConfig, Taps, encode, init_weights
from varikit.plugin import identity_bundle, init_plugin, plugged_forward


def test_activated_set_examples():
    assert activated_set([-1.0, -2.0]) == frozenset()
    assert activated_set([1.0, 0.0, -1.0, 2.0]) == {0, 3}


@given(st.lists(st.floats(-5, 5), max_size=40))
def test_activated_set_matches_scan(values):
    assert activated_set(values) == {i for i, v in enumerate(values) if v > 0}


def test_containment_ratio_examples():
    assert containment_ratios({1}, {1, 2, 3}, {1, 2}) == (1.0, 1.0)
    assert containment_ratios({1, 2}, {1, 2, 5}, {2, 7}) == (0.5, 0.5)
    assert containment_ratios(frozenset(), {3}, frozenset()) == (None, None)


def _model(seed, d=8):
    cfg = BackboneConfig(vocab_size=16, d=d, n_layers=2, n_heads=2, max_seq_len=16)
    return init_weights(cfg, np.random.default_rng(seed), dtype=np.float64).freeze()


def _oracle(tokens, weights, bundle):
    """Recompute per-group ratios with explicit loops over neuron indices."""
    plain, comp = Taps(), Taps()
    encode(tokens, weights, taps=plain)
    plugged_forward(tokens, weights, bundle, taps=comp)
    n, k = len(tokens), bundle.k
    out = []
    for l in range(weights.config.n_layers):
        orig = plain.get(l, "ffn_pre_act")[0]
        small = comp.get(l, "ffn_pre_act")[0]
        for g in range(small.shape[0]):
            rows = orig[g * k:min(n, (g + 1) * k)]
            width = rows.shape[1]
            inter = [j for j in range(width) if all(row[j] > 0 for row in rows)]
            union = [j for j in range(width) if any(row[j] > 0 for row in rows)]
            cset = [j for j in range(width) if small[g][j] > 0]
            a = sum(j in cset for j in inter) / len(inter) if inter else None
            b = sum(j in union for j in cset) / len(cset) if cset else None
            out.append((a, b))
    return out


def test_identity_plugin_ratios_are_one():
    weights = _model(0)
    toks = np.random.default_rng(1).integers(0, 16, size=10)
    for s in group_activation_sets(toks, weights, identity_bundle(8, 4, "FFN", 2, np.float64)):
        assert s.merged == s.shared == s.union
        assert s.ratios() == (1.0, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12), st.sampled_from([2, 3, 4]))
def test_ratios_bounded_and_match_oracle(seed, n, k):
    rng = np.random.default_rng(seed)
    weights = _model(seed % 7)
    bundle = init_plugin(8, k, 4, "FFN", 2, rng, dtype=np.float64)
    toks = rng.integers(0, 16, size=n)
    sets = group_activation_sets(toks, weights, bundle)
    got = [s.ratios() for s in sets]
    assert got == _oracle(toks, weights, bundle)
    for s, (a, b) in zip(sets, got):
        assert s.shared <= s.union
        for v in (a, b):
            assert v is None or 0.0 <= v <= 1.0


def test_summary_counts_groups():
    weights = _model(2)
    toks = np.random.default_rng(3).integers(0, 16, size=(3, 7))
    summ = containment_summary(toks, weights, init_plugin(8, 2, 4, "FFN", 2, np.random.default_rng(0),
                                                          dtype=np.float64))
    assert summ.groups == 3 * 2 * 4
    assert summ.mean_c_in_u is None or 0 <= summ.mean_c_in_u <= 1


def test_fraction_at_ratio_one_matches_unplugged():
    weights = _model(4)
    toks = np.random.default_rng(5).integers(0, 16, size=(4, 9))
    assert activated_fraction(toks, weights, identity_bundle(8, 4, "FFN", 2, np.float64)) == \
        activated_fraction(toks, weights, None)


def test_sweep_rows_and_serialisation_are_deterministic():
    weights = _model(6)
    toks = np.random.default_rng(7).integers(0, 16, size=(4, 8))

    def run():
        bundles = {k: init_plugin(8, k, 4, "FFN", 2, np.random.default_rng(k), dtype=np.float64) for k in (2, 4)}
        rows = activation_ratio_sweep([1, 2, 4], toks, weights, bundles)
        return sweep_csv(rows), summary_json(rows, [])

    csv_a, js_a = run()
    csv_b, js_b = run()
    assert csv_a == csv_b and js_a == js_b
    lines = csv_a.strip().split("\n")
    assert lines[0] == "k,layer,mean_fraction"
    assert len(lines) == 1 + 3 * 3
    assert sorted({line.split(",")[0] for line in lines[1:]}) == ["1", "2", "4"]
