import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from procanet.errors import (
    BadMagicError,
    ConfigError,
    ManifestMismatchError,
    PayloadLengthError,
    ShapeError,
    TruncatedError,
    VersionMismatchError,
)
from procanet.model import (
    ModelConfig,
    count_params,
    forward,
    init_params,
    load_weights,
    loss_and_grads,
    param_shapes,
    predict_logits,
    save_weights,
)

TINY = dict(levels=2, base_channels=4)


def expected_param_count(b, L, bands1, bands2, attention=True):
    """Independent walk over the channel ladder: 3x3 conv = 9*cin*cout + cout."""
    conv = lambda cin, cout, k=3: k * k * cin * cout + cout  # noqa: E731
    total = 0
    for bands in [bands1] + ([bands2] if bands2 else []):
        cin = bands
        for i in range(L):
            total += conv(cin, b * 2**i) + conv(b * 2**i, b * 2**i)
            cin = b * 2**i
    if attention and bands2:
        total += sum(4 * conv(b * 2**i, b * 2**i) for i in range(L))
    deep = b * 2 ** (L - 1)
    total += conv(deep, 2 * deep) + conv(2 * deep, 2 * deep)
    prev = 2 * deep
    for i in range(L - 2, -1, -1):
        c = b * 2**i
        total += conv(prev, c) + conv(2 * c, c) + conv(c, c)
        prev = c
    total += conv(prev, b) + 2 * conv(b, b) + conv(b, 1, 1)
    return total


@pytest.mark.parametrize("b,L,bands2,attention", [(16, 4, 1, True), (4, 2, 1, True),
                                                  (8, 3, 1, False), (8, 3, None, False)])
def test_parameter_count_matches_ladder_walk(b, L, bands2, attention):
    config = ModelConfig(levels=L, base_channels=b, attention_enabled=attention,
                         encoder2_bands=("NIR",) if bands2 else None)
    assert count_params(init_params(config)) == expected_param_count(b, L, 4, bands2, attention)


def test_default_ladder_shapes():
    shapes = param_shapes(ModelConfig())
    assert [shapes[f"enc1.{i}.conv2.weight"][0] for i in range(4)] == [16, 32, 64, 128]
    assert shapes["proca.3.w_self_r.weight"] == (128, 128, 3, 3)
    assert shapes["bottleneck.conv2.weight"][:2] == (256, 256)
    ups = [shapes[f"dec.{j}.up.weight"][:2] for j in range(3)] + [shapes["final.up.weight"][:2]]
    assert ups == [(64, 256), (32, 64), (16, 32), (16, 16)]
    assert shapes["head.weight"] == (1, 16, 1, 1)


def test_init_is_seeded_and_bounded():
    a = init_params(ModelConfig(**TINY, seed=3))
    b = init_params(ModelConfig(**TINY, seed=3))
    c = init_params(ModelConfig(**TINY, seed=4))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)
    for name, p in a.items():
        assert p.dtype == np.float32
        if name.endswith(".bias"):
            assert not p.any()
        else:
            assert np.abs(p).max() <= np.sqrt(1.0 / np.prod(p.shape[1:]))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(levels=0)
    with pytest.raises(ConfigError):
        ModelConfig(base_channels=0)
    with pytest.raises(ConfigError):
        ModelConfig(encoder1_bands=())
    assert ModelConfig(encoder2_bands=None, attention_enabled=True).attention_enabled is False
    cfg = ModelConfig(**TINY, encoder2_bands=None)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


@pytest.mark.slow
def test_default_config_output_shape():
    config = ModelConfig()
    params = init_params(config)
    out = forward(params, config, np.zeros((2, 4, 128, 128), np.float32),
                  np.zeros((2, 1, 128, 128), np.float32))
    assert out.shape == (2, 1, 128, 128) and out.dtype == np.float32


def test_single_encoder_shape():
    config = ModelConfig(**TINY, encoder1_bands=("R", "G", "B"), encoder2_bands=None)
    out = forward(init_params(config), config, np.ones((1, 3, 64, 64)))
    assert out.shape == (1, 1, 64, 64)


def test_zero_input_with_zero_biases_gives_zero_logits():
    config = ModelConfig(**TINY)
    out = forward(init_params(config), config, np.zeros((1, 4, 16, 16)), np.zeros((1, 1, 16, 16)))
    assert np.all(np.isfinite(out)) and not out.any()


@settings(max_examples=6, deadline=None)
@given(size=st.sampled_from([32, 64, 128]), n=st.integers(1, 2), attention=st.booleans())
def test_shape_contract(size, n, attention):
    config = ModelConfig(**TINY, attention_enabled=attention)
    rng = np.random.default_rng(size)
    out = forward(init_params(config), config, rng.random((n, 4, size, size)),
                  rng.random((n, 1, size, size)))
    assert out.shape == (n, 1, size, size)


def test_input_errors():
    config = ModelConfig(**TINY)
    params = init_params(config)
    with pytest.raises(ShapeError):
        forward(params, config, np.zeros((1, 3, 16, 16)), np.zeros((1, 1, 16, 16)))
    with pytest.raises(ShapeError):
        forward(params, config, np.zeros((1, 4, 18, 18)), np.zeros((1, 1, 18, 18)))
    with pytest.raises(ShapeError):
        forward(params, config, np.zeros((1, 4, 16, 16)), np.zeros((1, 1, 32, 32)))
    with pytest.raises(ShapeError):
        forward(params, config, np.zeros((1, 4, 16, 16)))


def test_forward_deterministic_and_batch_independent():
    config = ModelConfig(**TINY)
    params = init_params(config)
    rng = np.random.default_rng(0)
    x1, x2 = rng.random((3, 4, 16, 16)), rng.random((3, 1, 16, 16))
    full = forward(params, config, x1, x2)
    assert full.tobytes() == forward(params, config, x1, x2).tobytes()
    assert predict_logits(params, config, x1, x2, batch_size=2).tobytes() == full.tobytes()
    assert forward(params, config, x1[1:2], x2[1:2]).tobytes() == full[1:2].tobytes()


@pytest.mark.parametrize("attention", [True, False])
def test_every_parameter_gets_nonzero_gradient(attention):
    config = ModelConfig(**TINY, attention_enabled=attention, seed=1)
    params = init_params(config)
    rng = np.random.default_rng(1)
    y = (rng.random((2, 1, 16, 16)) > 0.5).astype(np.float32)
    _, grads = loss_and_grads(params, config, rng.random((2, 4, 16, 16)),
                              rng.random((2, 1, 16, 16)), y)
    assert list(grads) == list(params)
    assert all(np.any(g != 0) for g in grads.values())


def test_weights_round_trip(tmp_path):
    config = ModelConfig(**TINY, seed=5)
    params = init_params(config)
    path = tmp_path / "w.pcaw"
    save_weights(params, path)
    loaded = load_weights(path, config)
    assert list(loaded) == list(params)
    assert all(loaded[k].tobytes() == params[k].tobytes() for k in params)


def test_weights_errors(tmp_path):
    config = ModelConfig(**TINY)
    params = init_params(config)
    path = tmp_path / "w.pcaw"
    save_weights(params, path)
    raw = path.read_bytes()

    bad = tmp_path / "bad"
    bad.write_bytes(b"XCAW" + raw[4:])
    with pytest.raises(BadMagicError, match="bad magic"):
        load_weights(bad)
    bad.write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionMismatchError):
        load_weights(bad)
    bad.write_bytes(raw[:10])
    with pytest.raises(TruncatedError):
        load_weights(bad)
    bad.write_bytes(raw[:-4])
    with pytest.raises(PayloadLengthError, match="payload length mismatch"):
        load_weights(bad)
    # same byte length, different shape: the manifest no longer matches the payload
    edited = raw.replace(b"head.weight:1,4,1,1", b"head.weight:1,5,1,1")
    bad.write_bytes(edited)
    with pytest.raises(PayloadLengthError, match="payload length mismatch"):
        load_weights(bad)
    with pytest.raises(ManifestMismatchError):
        load_weights(path, ModelConfig(levels=2, base_channels=8))
