import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.stats import norm

from src.device import DeviceParams, ReferencePair, ThermalModel, params_at, v_opt
from src.variation import (
    BerResult, ReadMode, VariationSpec, cell_error_prob, cell_error_probs, estimate_ber,
    operation_ber, sample_ber_direct, sample_block,
)

V_OPT_RT = 0.3 * 2 ** 0.5
V_OPT_HOT = 0.22 * 1.7 ** 0.5


@pytest.fixture
def nominal():
    return DeviceParams(tmr0=1.0, vh=0.3, rp=10e3)


@pytest.fixture
def device():
    return ThermalModel()


def small_spec(**kw):
    base = dict(n_cells=4096, n_blocks=8, seed=11)
    base.update(kw)
    return VariationSpec(**base)


def test_spec_defaults():
    spec = VariationSpec()
    assert spec.n_cells == 1_048_576
    assert spec.n_blocks * spec.cells_per_block == 1_048_576
    assert spec.block_sizes() == [16384] * 64


def test_spec_validation():
    with pytest.raises(ValidationError):
        VariationSpec(n_cells=2_000_000)
    with pytest.raises(ValidationError):
        VariationSpec(sigma_over_mu_tmr0=-0.01)
    with pytest.raises(ValidationError):
        VariationSpec(sa_offset_sigma=0.0)
    with pytest.raises(ValidationError):
        VariationSpec(tmr0_vh_correlation=1.0)


def test_block_sizes_split_remainder():
    spec = VariationSpec(n_cells=10, n_blocks=4)
    assert spec.block_sizes() == [3, 3, 2, 2]
    assert sum(VariationSpec(n_cells=3, n_blocks=4).block_sizes()) == 3


def test_zero_variation_block_is_uniform(nominal):
    spec = small_spec(sigma_over_mu_tmr0=0.0, sigma_over_mu_vh=0.0)
    sample = sample_block(spec, nominal, np.random.default_rng(0), n_cells=100)
    assert len(sample) == 100
    assert np.all(sample.tmr0 == 1.0) and np.all(sample.vh == 0.3) and np.all(sample.rp == 10e3)
    assert sample.ref_pair == ReferencePair.of(nominal)
    assert sample.cell(5) == nominal


def test_sampling_is_reproducible(nominal):
    spec = small_spec()
    a = sample_block(spec, nominal, np.random.default_rng([1, 2, 0]), n_cells=500)
    b = sample_block(spec, nominal, np.random.default_rng([1, 2, 0]), n_cells=500)
    assert np.array_equal(a.tmr0, b.tmr0) and np.array_equal(a.vh, b.vh)
    assert a.ref_pair == b.ref_pair


def test_sample_mean_and_bounds(nominal):
    spec = small_spec(sigma_over_mu_tmr0=0.05, sigma_over_mu_vh=0.05)
    sample = sample_block(spec, nominal, np.random.default_rng(5), n_cells=100_000)
    se = 0.05 * nominal.tmr0 / math.sqrt(100_000)
    assert abs(sample.tmr0.mean() - nominal.tmr0) <= 3 * se
    # Truncated at 4 sigma
    assert sample.tmr0.max() <= nominal.tmr0 * (1 + 4 * 0.05) + 1e-12
    assert sample.vh.min() >= nominal.vh * (1 - 4 * 0.05) - 1e-12


def test_floor_at_tenth_of_mean(nominal):
    spec = small_spec(sigma_over_mu_tmr0=0.5)
    sample = sample_block(spec, nominal, np.random.default_rng(2), n_cells=20_000)
    assert sample.tmr0.min() >= 0.1 * nominal.tmr0


def test_correlation(nominal):
    spec = small_spec(tmr0_vh_correlation=0.8)
    sample = sample_block(spec, nominal, np.random.default_rng(3), n_cells=50_000)
    rho = np.corrcoef(sample.tmr0, sample.vh)[0, 1]
    assert rho == pytest.approx(0.8, abs=0.03)


def test_block_level_shift(nominal):
    spec = small_spec(sigma_over_mu_tmr0=0.0, sigma_over_mu_vh=0.0, block_sigma_over_mu=0.1)
    sample = sample_block(spec, nominal, np.random.default_rng(4), n_cells=10)
    # The whole block moves together
    assert np.all(sample.tmr0 == sample.tmr0[0])
    assert sample.tmr0[0] != nominal.tmr0


def test_cell_error_prob_nominal(nominal):
    p = cell_error_prob(nominal, ReferencePair.of(nominal), V_OPT_RT, 1e-6)
    assert p == pytest.approx(norm.cdf(-5.3033), rel=1e-3)
    assert p == pytest.approx(5.7e-8, rel=0.05)


def test_cell_error_prob_limits(nominal):
    pair = (nominal, nominal)
    assert cell_error_prob(nominal, pair, 0.0, 1e-6) == 0.5
    assert cell_error_prob(nominal, pair, V_OPT_RT, 1.0) == pytest.approx(0.5, abs=1e-5)
    with pytest.raises(ValueError):
        cell_error_prob(nominal, pair, V_OPT_RT, 0.0)
    with pytest.raises(ValueError):
        cell_error_prob(nominal, pair, float("nan"), 1e-6)


def test_zero_margin_side_contributes_quarter(nominal):
    # A P cell whose current equals the reference current: one side has zero margin
    pair = ReferencePair.of(nominal)
    v = 0.3
    i_ref = (v / nominal.rp + v / (nominal.rp * 1.5)) / 2
    cell = DeviceParams(tmr0=1.0, vh=0.3, rp=v / i_ref)
    p = cell_error_prob(cell, pair, v, 1e-9)
    assert p == pytest.approx(0.25, abs=1e-6)


def test_vectorized_matches_scalar(nominal):
    spec = small_spec()
    sample = sample_block(spec, nominal, np.random.default_rng(9), n_cells=20)
    probs = cell_error_probs(sample, 0.4, 1e-6)
    for i in range(20):
        assert probs[i] == pytest.approx(cell_error_prob(sample.cell(i), sample.ref_pair, 0.4, 1e-6),
                                         rel=1e-9, abs=1e-300)


def test_read_mode():
    assert ReadMode.dbo().label == "DBO"
    assert ReadMode.fixed(0.3).v_read == 0.3
    with pytest.raises(ValidationError):
        ReadMode(kind="FIXED")
    with pytest.raises(ValidationError):
        ReadMode(kind="DBO", v_read=0.3)


def test_estimate_is_deterministic(device):
    spec = small_spec()
    a = estimate_ber(spec, device, ReadMode.dbo())
    b = estimate_ber(spec, device, ReadMode.dbo())
    assert a == b
    assert a.n_cells_evaluated == 4096
    assert 0 <= a.ber <= 1 and a.stderr >= 0


def test_no_variation_dbo_matches_fixed_at_optimum(device):
    spec = small_spec(sigma_over_mu_tmr0=0.0, sigma_over_mu_vh=0.0, sa_offset_sigma=1.5e-6)
    dbo = estimate_ber(spec, device, ReadMode.dbo())
    fixed = estimate_ber(spec, device, ReadMode.fixed(V_OPT_RT))
    assert dbo.v_read == pytest.approx(V_OPT_RT, abs=0.005)
    assert dbo.ber == pytest.approx(fixed.ber, rel=0.05)
    assert fixed.stderr == 0.0


@pytest.mark.parametrize("bias", [0.2, 0.3, 0.35, 0.5, 0.6])
def test_no_variation_dbo_beats_off_optimum_bias(device, bias):
    spec = small_spec(sigma_over_mu_tmr0=0.0, sigma_over_mu_vh=0.0, sa_offset_sigma=1.5e-6)
    dbo = estimate_ber(spec, device, ReadMode.dbo())
    fixed = estimate_ber(spec, device, ReadMode.fixed(bias))
    assert dbo.ber <= fixed.ber


def test_hot_dbo_beats_room_temperature_bias(device):
    spec = VariationSpec(n_cells=20_000, n_blocks=16, temperature=125.0, seed=0)
    dbo = estimate_ber(spec, device, ReadMode.dbo())
    fixed = estimate_ber(spec, device, ReadMode.fixed(V_OPT_RT))
    assert dbo.ber < fixed.ber
    assert dbo.v_read == pytest.approx(v_opt(params_at(device, 125.0)), rel=0.05)


def test_ber_monotone_in_offset(device):
    results = [
        estimate_ber(small_spec(sigma_over_mu_tmr0=0.02, sigma_over_mu_vh=0.02, sa_offset_sigma=s),
                     device, ReadMode.fixed(V_OPT_RT))
        for s in (0.5e-6, 1e-6, 2e-6, 4e-6)
    ]
    bers = [r.ber for r in results]
    assert bers == sorted(bers)


def test_direct_sampling_agrees_with_estimate(device):
    spec = VariationSpec(sigma_over_mu_tmr0=0.02, sigma_over_mu_vh=0.02, sa_offset_sigma=1.4e-6,
                         n_cells=20_000, n_blocks=8, seed=21)
    mode = ReadMode.fixed(V_OPT_RT)
    est = estimate_ber(spec, device, mode)
    direct = sample_ber_direct(spec, device, mode, reads=10_000_000, rng=np.random.default_rng(99))
    assert est.ber >= 1e-5
    combined = math.sqrt(est.stderr ** 2 + direct.stderr ** 2)
    assert abs(est.ber - direct.ber) <= 3 * combined
    assert direct.n_cells_evaluated == est.n_cells_evaluated


def test_operation_ber_takes_worst_temperature():
    def result(mode, temp, ber):
        return BerResult(mode=mode, v_read=0.4, temp_c=temp, sigma_mu_tmr0=0.05, sigma_mu_vh=0.05,
                         ber=ber, stderr=0.0, n_cells_evaluated=10)

    dbo, fixed = ReadMode.dbo(), ReadMode.fixed(0.42)
    ops = operation_ber([
        result(dbo, 25.0, 1e-6), result(fixed, 25.0, 1e-7),
        result(dbo, 125.0, 1e-4), result(fixed, 125.0, 3e-3),
    ])
    assert [(o.mode, o.operation_ber, o.worst_temp_c) for o in ops] == [
        ("DBO", 1e-4, 125.0), ("FIXED", 3e-3, 125.0),
    ]
    assert ops[0].v_read is None and ops[1].v_read == 0.42


@pytest.mark.parametrize("temp, lo_rt, hi_rt, lo_hot, hi_hot", [
    # FIXED/DBO ratio bounds for the room-temperature and the hot optimum
    (25.0, 0.5, 0.9, 0.25, 0.6),
    (125.0, 1.5, 3.0, 0.8, 1.1),
])
def test_macro_ber_ratios_at_five_percent(device, temp, lo_rt, hi_rt, lo_hot, hi_hot):
    spec = VariationSpec(n_cells=100_000, sigma_over_mu_tmr0=0.05, sigma_over_mu_vh=0.05,
                         temperature=temp, seed=0)
    dbo = estimate_ber(spec, device, ReadMode.dbo())
    rt = estimate_ber(spec, device, ReadMode.fixed(V_OPT_RT))
    hot = estimate_ber(spec, device, ReadMode.fixed(V_OPT_HOT))

    assert lo_rt < rt.ber / dbo.ber < hi_rt
    assert lo_hot < hot.ber / dbo.ber < hi_hot
    # No single fixed bias is beaten by an order of magnitude at either temperature
    assert max(rt.ber, hot.ber) / dbo.ber < 10
