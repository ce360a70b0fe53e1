import pytest

from app.models.schemas import ChannelMixerKind
from app.services.flops import estimate_flops, gdd_mlp_flops
from app.services.forecaster import CMambaModel
from tests.conftest import tiny_model_config


def ett_config(**overrides):
    values = dict(look_back=96, horizon=96, channels=7, patch_len=16, stride=8, d_model=128, num_blocks=3,
                  block={"d_model": 128})
    values.update(overrides)
    return tiny_model_config(**values)


def test_gdd_increment_is_small_for_ett_sizes():
    report = estimate_flops(ett_config(), batch=64)
    assert 0.001 <= report.increment <= 0.02
    assert 0 < report.gdd_mlp_part < report.gdd_module_total < report.total


def test_increment_grows_with_channel_count():
    increments = [estimate_flops(ett_config(channels=v), batch=8).increment for v in (7, 21, 137, 321)]
    assert increments == sorted(increments)
    assert increments[0] < increments[-1]


def test_doubling_hidden_width_doubles_network_cost():
    single = estimate_flops(ett_config(gdd_expansion=1.0), batch=4)
    double = estimate_flops(ett_config(gdd_expansion=2.0), batch=4)
    assert double.gdd_mlp_part == 2 * single.gdd_mlp_part
    assert gdd_mlp_flops(7, 14, 12) == 2 * gdd_mlp_flops(7, 7, 12)


def test_total_is_affine_in_block_count():
    totals = [estimate_flops(ett_config(num_blocks=k), batch=2).total for k in (2, 3, 4)]
    assert totals[2] - totals[1] == totals[1] - totals[0] > 0


def test_disabled_mixer_costs_exactly_the_module():
    with_gdd = estimate_flops(ett_config(), batch=3)
    without = estimate_flops(ett_config(channel_mixer=ChannelMixerKind.NONE), batch=3)
    assert without.gdd_mlp_part == 0
    assert without.gdd_module_total == 0
    assert without.increment == 0.0
    assert with_gdd.total - without.total == with_gdd.gdd_module_total


def test_plain_mlp_is_counted_separately():
    report = estimate_flops(ett_config(channel_mixer=ChannelMixerKind.MLP), batch=2)
    assert report.breakdown["plain_mlp"] > 0
    assert report.gdd_module_total == 0


def test_model_and_config_give_the_same_report(tiny_config):
    assert estimate_flops(CMambaModel(tiny_config), batch=5) == estimate_flops(tiny_config, batch=5)


def test_breakdown_sums_to_total():
    report = estimate_flops(ett_config(block={"d_model": 128, "use_conv": True, "d_mode": "free"}), batch=7)
    assert sum(report.breakdown.values()) == report.total
    assert report.breakdown["mamba_conv"] > 0
    assert report.breakdown["mamba_proj_d"] == 0


def test_cost_scales_linearly_with_batch():
    assert estimate_flops(ett_config(), batch=10).total == 10 * estimate_flops(ett_config(), batch=1).total


def test_batch_must_be_positive(tiny_config):
    with pytest.raises(ValueError):
        estimate_flops(tiny_config, batch=0)
