import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from earlyfusion import tensor as T
from earlyfusion.errors import ConfigError, ShapeError
from earlyfusion.nn import param_count
from earlyfusion.tensor import Tensor, finite_diff_gradcheck
from earlyfusion.unet import UNetConfig, init_unet, unet_forward


def _hand_count(cin, depth, base):
    """Parameter count written out layer by layer."""
    conv = lambda i, o, k: i * o * k * k + o  # noqa: E731
    total = 0
    for lvl in range(depth):
        w = base * 2**lvl
        total += conv(cin, w, 3) + conv(w, w, 3) + conv(w, 2 * w, 3)
        cin = 2 * w
    wb = base * 2**depth
    total += 2 * conv(wb, wb, 3)
    for lvl in range(depth):
        w = base * 2**lvl
        total += (2 * w) * w * 4 + w + conv(2 * w, w, 3) + conv(w, w, 3)
    return total + conv(base, 1, 1)


def test_output_shape_matches_input():
    cfg = UNetConfig(in_channels=2, depth=3, base_width=4, image_size=32)
    out = unet_forward(init_unet(cfg, 0), cfg, Tensor(np.zeros((3, 2, 32, 32))))
    assert out.shape == (3, 1, 32, 32)


@settings(max_examples=8)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 4), st.integers(1, 3))
def test_output_shape_property(depth, in_ch, width, mult):
    size = 2**depth * mult
    cfg = UNetConfig(in_channels=in_ch, depth=depth, base_width=width, image_size=size)
    out = unet_forward(init_unet(cfg, 0), cfg, Tensor(np.random.default_rng(0).random((1, in_ch, size, size))))
    assert out.shape == (1, 1, size, size)


def test_forward_is_deterministic(rng):
    cfg = UNetConfig(depth=2, base_width=4, image_size=16)
    x = rng.random((2, 2, 16, 16))
    a = unet_forward(init_unet(cfg, 5), cfg, Tensor(x)).data
    b = unet_forward(init_unet(cfg, 5), cfg, Tensor(x)).data
    assert np.array_equal(a, b)


def test_init_seeded():
    cfg = UNetConfig(depth=2, base_width=4, image_size=16)
    a, b = init_unet(cfg, 1), init_unet(cfg, 2)
    assert not np.array_equal(a["enc0_a_w"].data, b["enc0_a_w"].data)
    assert all(not v.data.any() for k, v in a.items() if k.endswith("_b"))


@pytest.mark.parametrize("level", [0, 1, 2])
def test_skip_ablation_changes_output(level, rng):
    cfg = UNetConfig(depth=3, base_width=4, image_size=16)
    params = init_unet(cfg, 0)
    x = Tensor(rng.random((1, 2, 16, 16)))
    full = unet_forward(params, cfg, x).data
    ablated = unet_forward(params, cfg, x, zero_skips=(level,)).data
    assert not np.allclose(full, ablated)


@pytest.mark.parametrize("cin,depth,base", [(2, 3, 8), (2, 3, 16), (1, 3, 16), (3, 2, 4), (6, 1, 2)])
def test_parameter_count_hand_formula(cin, depth, base):
    cfg = UNetConfig(in_channels=cin, depth=depth, base_width=base, image_size=2**depth * 2)
    assert param_count(init_unet(cfg, 0)) == _hand_count(cin, depth, base)


def test_parameter_count_regression():
    assert param_count(init_unet(UNetConfig(2, 3, 8, 64), 0)) == 169249
    assert param_count(init_unet(UNetConfig(2, 3, 16, 64), 0)) == 675649


def test_in_channels_only_change_first_conv():
    one = init_unet(UNetConfig(in_channels=1, depth=3, base_width=4, image_size=16), 0)
    two = init_unet(UNetConfig(in_channels=2, depth=3, base_width=4, image_size=16), 0)
    assert one.keys() == two.keys()
    differing = [k for k in one if one[k].shape != two[k].shape]
    assert differing == ["enc0_a_w"]
    assert one["enc0_a_w"].shape == (4, 1, 3, 3) and two["enc0_a_w"].shape == (4, 2, 3, 3)


def test_bottleneck_is_8x8_at_64():
    cfg = UNetConfig(depth=3, base_width=2, image_size=64)
    p = init_unet(cfg, 0)
    h = Tensor(np.zeros((1, 2, 64, 64)))
    for lvl in range(3):
        h = T.conv2d(h, p[f"enc{lvl}_a_w"], p[f"enc{lvl}_a_b"], 1, 1)
        h = T.conv2d(h, p[f"enc{lvl}_b_w"], p[f"enc{lvl}_b_b"], 1, 1)
        h = T.conv2d(h, p[f"down{lvl}_w"], p[f"down{lvl}_b"], 2, 1)
    assert h.shape == (1, 16, 8, 8)
    assert p["mid_a_w"].shape == (16, 16, 3, 3)


@pytest.mark.parametrize("shape", [(1, 1, 16, 16), (1, 2, 16, 8), (2, 16, 16), (1, 2, 12, 12)])
def test_bad_input_shape(shape):
    cfg = UNetConfig(depth=3, base_width=2, image_size=16)
    with pytest.raises(ShapeError):
        unet_forward(init_unet(cfg, 0), cfg, Tensor(np.zeros(shape)))


@pytest.mark.parametrize("kwargs", [{"image_size": 20}, {"depth": 0}, {"in_channels": 0}, {"base_width": 0}])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        UNetConfig(**{"image_size": 16, **kwargs})


def test_end_to_end_gradcheck_16px(rng):
    cfg = UNetConfig(in_channels=2, depth=2, base_width=4, image_size=16)
    params = init_unet(cfg, 0)
    # nonzero biases keep ReLU inputs off the kink
    for k, v in params.items():
        if k.endswith("_b"):
            v.data[...] = rng.uniform(-0.1, 0.1, size=v.shape)
    x = rng.random((1, 2, 16, 16))
    w = rng.normal(size=(1, 1, 16, 16))

    def make_f():
        return lambda _: T.sum_(unet_forward(params, cfg, Tensor(x)) * Tensor(w))

    worst = 0.0
    for name, p in params.items():
        coords = rng.choice(p.size, size=min(p.size, 3), replace=False)
        worst = max(worst, finite_diff_gradcheck(make_f(), p, h=1e-6, coords=coords))
    assert worst <= 1e-4
    xt = Tensor(x.copy())
    err = finite_diff_gradcheck(lambda t: T.sum_(unet_forward(params, cfg, t) * Tensor(w)), xt, h=1e-6, coords=range(0, 512, 37))
    assert err <= 1e-4
