import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loratrace.lora import LoraSpec, finetune
from loratrace.model import ModelConfig, generate_model
from loratrace.obfuscate import ObfuscationSpec, obfuscate_model
from loratrace.tracer import (
    IncompatibleModelsError,
    LayerEstimate,
    ProbeError,
    TraceConfig,
    collect_intermediates,
    difference_matrix,
    layer_output_norms,
    log_ratios,
    probe_set,
    rank_from_spectrum,
    run_layer,
    select_layers,
    trace,
    weight_similarity_baseline,
)


@pytest.fixture(scope="module")
def lora8(flagship_base):
    return finetune(flagship_base, LoraSpec(8, ("V",), seed=4))


@pytest.fixture(scope="module")
def lora8_obf(lora8):
    return obfuscate_model(lora8, ObfuscationSpec(seed=4))


def test_spectrum_example():
    rank, peak = rank_from_spectrum([10, 9, 8, 1e-8, 5e-9])
    assert rank == 3
    assert peak == pytest.approx(math.log(8e8), rel=1e-12)


def test_flat_spectrum_is_null():
    rank, peak = rank_from_spectrum([1.0, 0.9, 0.8, 0.7])
    assert rank is None and peak < math.log(1e3)


def test_zero_spectrum_is_null():
    assert rank_from_spectrum([0.0, 0.0, 0.0]) == (None, 0.0)
    assert rank_from_spectrum([1e-9, 1e-20], reference_scale=1.0)[0] is None


def test_full_rank_floor_not_needed():
    # an exact zero tail still yields a finite ratio thanks to the clamp
    rank, peak = rank_from_spectrum([2.0, 1.0, 0.0])
    assert rank == 2 and math.isfinite(peak)


def test_ties_take_smallest_rank():
    assert rank_from_spectrum([1e8, 1.0, 1e-8])[0] == 1


def test_log_ratios_length():
    assert log_ratios([4.0, 2.0, 1.0]).tolist() == pytest.approx([math.log(2)] * 2)


def test_probe_set_order(flagship_base):
    p = probe_set(flagship_base, 64)
    assert p.tolist() == list(range(64))


def test_probe_set_skips_parallel(small_model):
    emb = small_model.embedding.copy()
    emb[1] = 3.0 * emb[0]
    emb[2] = 0.0
    m = type(small_model)(small_model.config, emb, small_model.layers)
    p = probe_set(m, 5)
    assert 1 not in p and 2 not in p and p[0] == 0


def test_probe_set_too_many(small_model):
    with pytest.raises(ProbeError):
        probe_set(small_model, small_model.config.vocab_size + 1)


def test_difference_matrix_masked_row():
    Y = np.ones((4, 3))
    with pytest.raises(IndexError):
        difference_matrix(Y, Y, [0, 2], mask=np.array([True, True, False, True]))
    assert difference_matrix(Y, 2 * Y, [1, 3]).shape == (2, 3)


def test_select_layers():
    est = [LayerEstimate(i, 1, p, np.zeros(2), []) for i, p in enumerate([3.0, 9.0, 9.0, 1.0])]
    assert select_layers(est, 0.1) == [1]
    assert select_layers(est, 0.5) == [1, 2]


def test_run_layer_single_cycle(flagship_base, lora8):
    data = collect_intermediates(flagship_base, lora8, probe_set(flagship_base, 64))[2]
    tcfg = TraceConfig(cycles=1).resolve(64)
    est = run_layer(data, tcfg, data.y_cand, np.ones(64, dtype=bool))
    assert est.rank == 8 and len(est.cycle_ranks) == 1


def test_run_layer_corrupted_row(flagship_base, lora8):
    data = collect_intermediates(flagship_base, lora8, probe_set(flagship_base, 64))[2]
    tcfg = TraceConfig(cycles=16).resolve(64)
    Y = data.y_cand.copy()
    Y[5] += 1e-4 * np.random.default_rng(0).standard_normal(64)
    est = run_layer(data, tcfg, Y, np.ones(64, dtype=bool))
    assert est.rank == 8
    assert 9 in est.cycle_ranks


def test_run_layer_too_few_usable(flagship_base, lora8):
    data = collect_intermediates(flagship_base, lora8, probe_set(flagship_base, 64))[0]
    mask = np.zeros(64, dtype=bool)
    mask[:10] = True
    est = run_layer(data, TraceConfig().resolve(64), data.y_cand, mask)
    assert est.rank is None and not est.usable and est.reconstruction_failures == 54


def test_null_identical(flagship_base):
    rep = trace(flagship_base, flagship_base)
    assert rep.verdict == "no_delta_detected"
    assert rep.baseline_similarity == pytest.approx([1.0] * 8)


def test_null_obfuscated(flagship_base):
    rep = trace(flagship_base, obfuscate_model(flagship_base, ObfuscationSpec(seed=6)))
    assert rep.verdict == "no_delta_detected"


def test_fast_path(flagship_base, lora8):
    rep = trace(flagship_base, lora8, TraceConfig(assume_unobfuscated=True))
    assert rep.aggregate_rank == 8 and rep.aggregate_spread == 0
    assert all(e.rank == 8 for e in rep.layers)
    assert min(rep.baseline_similarity) > 0.99


def test_obfuscated_recovery(flagship_base, lora8_obf):
    rep = trace(flagship_base, lora8_obf)
    assert rep.verdict == "lora_detected"
    assert rep.aggregate_rank == 8
    assert max(rep.baseline_similarity) < 0.9
    assert len(rep.selected_layers) == 1


def test_value_and_output_doubles(flagship_base):
    cand = obfuscate_model(finetune(flagship_base, LoraSpec(8, ("V", "O"), seed=2)), ObfuscationSpec(seed=2))
    assert trace(flagship_base, cand).aggregate_rank == 16


def test_obfuscation_invariance(flagship_base, lora8, lora8_obf):
    a = trace(flagship_base, lora8)
    b = trace(flagship_base, lora8_obf)
    assert [e.rank for e in a.layers] == [e.rank for e in b.layers]


def test_rank_bounded_by_subset(flagship_base):
    cand = finetune(flagship_base, LoraSpec(16, ("V", "O"), seed=1))
    rep = trace(flagship_base, cand, TraceConfig(subset_size=12, assume_unobfuscated=True))
    assert all(e.rank is None or e.rank <= 12 for e in rep.layers)


def test_more_cycles_never_raise_rank(flagship_base, lora8_obf):
    lo = trace(flagship_base, lora8_obf, TraceConfig(cycles=4))
    hi = trace(flagship_base, lora8_obf, TraceConfig(cycles=16))
    for a, b in zip(lo.layers, hi.layers):
        assert b.rank <= a.rank
        assert b.cycle_ranks[:4] == a.cycle_ranks


def test_thread_count_irrelevant(flagship_base, lora8_obf):
    a = trace(flagship_base, lora8_obf, threads=1)
    b = trace(flagship_base, lora8_obf, threads=4)
    assert a.to_json() == b.to_json()


def test_incompatible_models(flagship_base, small_model):
    with pytest.raises(IncompatibleModelsError):
        trace(flagship_base, small_model)


def test_layer_norms_zero_weights(small_model):
    zeroed = [lw.replace(w_v=np.zeros_like(lw.w_v), w_down=np.zeros_like(lw.w_down)) for lw in small_model.layers]
    m = small_model.with_layers(zeroed)
    norms = layer_output_norms(m, [0, 1, 2])
    assert len(norms) == small_model.config.num_layers
    expected = np.mean(np.linalg.norm(small_model.embedding[:3], axis=1))
    assert norms == pytest.approx([expected] * len(norms), rel=1e-15)


def test_similarity_baseline_bounds(flagship_base, lora8):
    sims = weight_similarity_baseline(flagship_base, lora8)
    assert len(sims) == 8 and all(0.99 < s <= 1.0 for s in sims)


def test_report_files(tmp_path, flagship_base, lora8):
    rep = trace(flagship_base, lora8, TraceConfig(assume_unobfuscated=True, cycles=2))
    rep.write(tmp_path)
    for name in ("report.json", "spectra.csv", "ratios.csv", "timings.json"):
        assert (tmp_path / name).exists()
    with open(tmp_path / "spectra.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["layer", "index", "singular_value"]
    assert len(rows) == 1 + 8 * 32
    with open(tmp_path / "ratios.csv") as fh:
        assert next(csv.reader(fh)) == ["layer", "index", "log_ratio"]
    assert "timings" not in rep.to_dict()


def test_config_round_trip():
    tc = TraceConfig(cycles=3, subset_size=10, assume_unobfuscated=True, seed=7)
    assert TraceConfig.from_dict(tc.to_dict()) == tc
    with pytest.raises(ValueError):
        TraceConfig(subset_size=100).resolve(64)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 16), st.integers(0, 10**6))
def test_spectral_oracle_property(s, seed):
    rng = np.random.default_rng(seed)
    n, d = 32, 64
    m = rng.standard_normal((n, s)) @ rng.standard_normal((s, d))
    rank, peak = rank_from_spectrum(np.linalg.svd(m, compute_uv=False))
    assert rank == s and peak > math.log(1e8)
