import math

import numpy as np
import pytest

from cloudfcn import unet
from cloudfcn.errors import ConfigError, ContractError, FormatError, IntegrityError, ShapeError
from cloudfcn.training import jaccard_loss

TINY = unet.NetworkConfig(input_size=32, base_channels=2, channel_cap=64)


def test_full_size_forward_shape():
    cfg = unet.NetworkConfig()
    params = unet.init_params(cfg, seed=0)
    prob, _ = unet.forward(params, np.zeros((1, 4, 192, 192), dtype=np.float32))
    assert prob.shape == (1, 1, 192, 192)
    assert prob.dtype == np.float32


def test_channel_ladder():
    assert unet.NetworkConfig().encode_channels() == [32, 64, 128, 256, 512, 1024]
    assert unet.NetworkConfig(base_channels=4, channel_cap=64).encode_channels() == [4, 8, 16, 32, 64, 64]


def test_tiny_bottleneck_is_one_pixel():
    params = unet.init_params(TINY, seed=1)
    _, tape = unet.forward(params, np.zeros((2, 4, 32, 32)))
    assert tape.records["enc5"][0].shape[-2:] == (1, 1)


@pytest.mark.parametrize("kwargs", [{"input_size": 48}, {"decode_blocks": 4}, {"base_channels": 0}])
def test_bad_network_config(kwargs):
    with pytest.raises(ConfigError):
        unet.NetworkConfig(**kwargs)


def test_input_shape_checked():
    params = unet.init_params(TINY, seed=0)
    with pytest.raises(ShapeError):
        unet.forward(params, np.zeros((1, 3, 32, 32)))
    with pytest.raises(ShapeError):
        unet.forward(params, np.zeros((1, 4, 64, 64)))


def test_init_is_seeded_and_bounded():
    a = unet.init_params(TINY, seed=7)
    assert a == unet.init_params(TINY, seed=7)
    assert a != unet.init_params(TINY, seed=8)
    for name, t in a.tensors.items():
        if name.endswith(".b"):
            assert not t.any()
        else:
            bound = math.sqrt(6 / unet._fan_in(t.shape, name))
            assert np.abs(t).max() <= bound
    u = unet.init_params(TINY, seed=7, scale=1.0)
    assert max(np.abs(t).max() for t in u.tensors.values()) <= 1.0


def test_fan_in():
    assert unet._fan_in((8, 4, 3, 3), "enc0.conv1.w") == 36
    assert unet._fan_in((16, 8, 2, 2), "dec0.up.w") == 16
    assert unet._fan_in((1, 4), "out.w") == 4


def test_output_in_unit_interval(rng):
    params = unet.init_params(TINY, seed=3, scale=1.0)
    prob = unet.predict(params, rng.random((2, 4, 32, 32)) * 10)
    assert prob.min() >= 0 and prob.max() <= 1


def test_zero_upstream_gives_zero_grads(rng):
    params = unet.init_params(TINY, seed=0, dtype=np.float64)
    prob, tape = unet.forward(params, rng.random((1, 4, 32, 32)))
    grads = unet.backward(params, tape, np.zeros_like(prob))
    assert set(grads) == set(params.tensors)
    assert all(not g.any() for g in grads.values())


def _pick_indices(grads, rng, n, floor=1e-6):
    """Sample (name, index) pairs whose analytic gradient is large enough to resolve numerically."""
    picks = []
    names = sorted(grads)
    for name in names:
        big = np.argwhere(np.abs(grads[name]) > floor)
        if len(big):
            picks.append((name, tuple(big[rng.integers(len(big))])))
    extra = [(n_, tuple(i)) for n_ in names for i in np.argwhere(np.abs(grads[n_]) > floor)]
    for k in rng.permutation(len(extra))[: max(0, n - len(picks))]:
        picks.append(extra[k])
    return picks


@pytest.mark.parametrize("objective", ["linear", "jaccard"])
def test_whole_network_gradient(rng, objective):
    params = unet.init_params(TINY, seed=5, dtype=np.float64)
    x = rng.random((2, 4, 32, 32))
    weights = rng.normal(size=(2, 1, 32, 32))
    h = (weights > 0).astype(float)

    def loss():
        prob = unet.forward(params, x)[0]
        return float(np.sum(weights * prob)) if objective == "linear" else jaccard_loss(h, prob).value

    prob, tape = unet.forward(params, x)
    upstream = weights if objective == "linear" else jaccard_loss(h, prob).grad_y
    grads = unet.backward(params, tape, upstream)
    picks = _pick_indices(grads, rng, 50)
    assert len(picks) >= 40
    step = 1e-6
    worst = 0.0
    for name, idx in picks:
        t = params.tensors[name]
        old = t[idx]
        t[idx] = old + step
        up = loss()
        t[idx] = old - step
        down = loss()
        t[idx] = old
        fd = (up - down) / (2 * step)
        g = grads[name][idx]
        worst = max(worst, abs(g - fd) / max(abs(g), abs(fd)))
    assert worst < 1e-4


def test_input_gradient_through_skip_path(rng):
    # with every decoder conv zeroed, only the first-level skip carries signal to the output
    params = unet.init_params(TINY, seed=2, dtype=np.float64)
    x = rng.random((1, 4, 32, 32))
    prob, tape = unet.forward(params, x)
    grads = unet.backward(params, tape, np.ones_like(prob))
    assert np.abs(grads["enc0.conv1.w"]).sum() > 0
    for j in range(TINY.decode_blocks):
        params.tensors[f"dec{j}.up.w"][:] = 0
    params.bump()
    prob, tape = unet.forward(params, x)
    grads = unet.backward(params, tape, np.ones_like(prob))
    assert not grads["enc5.conv1.w"].any()
    assert np.abs(grads["enc0.conv1.w"]).sum() > 0


def test_tape_single_use_and_staleness(rng):
    params = unet.init_params(TINY, seed=0)
    x = rng.random((1, 4, 32, 32)).astype(np.float32)
    prob, tape = unet.forward(params, x)
    unet.backward(params, tape, np.ones_like(prob))
    with pytest.raises(ContractError):
        unet.backward(params, tape, np.ones_like(prob))
    prob, tape = unet.forward(params, x)
    params.bump()
    with pytest.raises(ContractError):
        unet.backward(params, tape, np.ones_like(prob))


def test_forward_is_deterministic(rng):
    params = unet.init_params(TINY, seed=0)
    x = rng.random((1, 4, 32, 32)).astype(np.float32)
    assert unet.predict(params, x).tobytes() == unet.predict(params, x.copy()).tobytes()


def test_checkpoint_roundtrip(tmp_path):
    params = unet.init_params(TINY, seed=11)
    extra = {"adam.m/out.b": np.arange(1, dtype=np.float32)}
    unet.save_params(tmp_path / "a.csck", params, extra=extra, meta={"epoch": 3})
    back, ex, meta = unet.read_checkpoint(tmp_path / "a.csck")
    assert back == params
    assert back.seed == 11 and back.init == params.init
    np.testing.assert_array_equal(ex["adam.m/out.b"], extra["adam.m/out.b"])
    assert meta["epoch"] == 3
    assert unet.load_params(tmp_path / "a.csck", TINY) == params
    unet.save_params(tmp_path / "b.csck", params, extra=extra, meta={"epoch": 3})
    assert (tmp_path / "a.csck").read_bytes() == (tmp_path / "b.csck").read_bytes()


def test_checkpoint_float64_roundtrip(tmp_path):
    params = unet.init_params(TINY, seed=1, dtype=np.float64)
    unet.save_params(tmp_path / "a.csck", params)
    back = unet.load_params(tmp_path / "a.csck")
    assert back.dtype == np.float64 and back == params


def test_checkpoint_config_mismatch(tmp_path):
    unet.save_params(tmp_path / "a.csck", unet.init_params(TINY, seed=0))
    with pytest.raises(ConfigError):
        unet.load_params(tmp_path / "a.csck", unet.NetworkConfig(input_size=32, base_channels=4))


def test_checkpoint_corruption_detected(tmp_path):
    p = tmp_path / "a.csck"
    unet.save_params(p, unet.init_params(TINY, seed=0))
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0x01
    p.write_bytes(bytes(data))
    with pytest.raises(IntegrityError):
        unet.load_params(p)


def test_checkpoint_not_a_checkpoint(tmp_path):
    p = tmp_path / "a.csck"
    p.write_bytes(b"hello world, definitely not tensors" * 2)
    with pytest.raises(FormatError):
        unet.load_params(p)


def test_unit_scale_draw_fills_interval():
    params = unet.init_params(unet.NetworkConfig(input_size=32, base_channels=8, channel_cap=64), seed=0, scale=1.0)
    w = np.concatenate([t.ravel() for n, t in params.tensors.items() if n.endswith(".w")])
    assert w.size >= 10_000
    assert w.min() >= -1 and w.max() <= 1
    assert w.min() < -0.99 and w.max() > 0.99


def test_small_scale_bound():
    params = unet.init_params(TINY, seed=0, scale=0.05)
    assert max(np.abs(t).max() for t in params.tensors.values()) <= 0.05
    with pytest.raises(ConfigError):
        unet.init_params(TINY, seed=0, scale=0.0)
