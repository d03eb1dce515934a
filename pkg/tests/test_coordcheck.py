"""Coordinate-check harness on small widths (the full-width run is in the
acceptance suite)."""

import pytest

from phaselab.config import ConfigError, ModelConfig, MuPParams
from phaselab.coordcheck import coord_check


def configs(widths, scaling="head_dim", n_layers=2):
    return [ModelConfig(n_layers=n_layers, hidden_dim=w, n_heads=2,
                        vocab_size=512, seq_len=32, attention_scaling=scaling)
            for w in widths]


BASE = MuPParams.for_width(64, base_width=64)


def test_single_width_ratios_are_one():
    rep = coord_check(configs([64]), BASE, steps=2, seed=0, batch_size=2)
    for series in rep.ratios.values():
        assert all(r == 1.0 for r in series)
    assert rep.ok


def test_non_multiple_width_rejected():
    with pytest.raises(ConfigError):
        coord_check(configs([64, 96]), BASE, steps=2)


def test_configs_must_differ_only_in_width():
    cfgs = configs([64, 128])
    cfgs[1] = ModelConfig(n_layers=3, hidden_dim=128, n_heads=2, vocab_size=512,
                          seq_len=32)
    with pytest.raises(ConfigError):
        coord_check(cfgs, BASE, steps=2)


def test_small_width_pair_passes_band():
    rep = coord_check(configs([64, 128]), BASE, steps=4, seed=0, batch_size=4)
    band_flags = [f for f in rep.flagged if f["kind"] == "band"]
    assert band_flags == []
    for metric, exp in rep.score_exponents.items():
        assert abs(exp - (-0.5)) < 0.25, (metric, exp)


def test_sqrt_scaling_control_is_flagged():
    rep = coord_check(configs([64, 128], scaling="sqrt_head_dim"), BASE,
                      steps=4, seed=0, batch_size=4)
    scaling_flags = [f for f in rep.flagged if f["kind"] == "score_scaling"]
    assert scaling_flags, "control run must flag the attention score scaling"
    assert all(abs(f["exponent"]) < 0.3 for f in scaling_flags)


def test_report_serializes():
    rep = coord_check(configs([64, 128]), BASE, steps=2, seed=1, batch_size=2)
    text = rep.to_json()
    assert '"widths"' in text and '"ratios"' in text


def test_matched_seeds_deterministic():
    a = coord_check(configs([64, 128]), BASE, steps=3, seed=5, batch_size=2)
    b = coord_check(configs([64, 128]), BASE, steps=3, seed=5, batch_size=2)
    assert a.rms == b.rms
