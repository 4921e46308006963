import numpy as np
import pytest

from satcalc.dataset import ALL_TASKS, TaskId, synth_scene
from satcalc.grid import BandStack
from satcalc.model import (
    ADAPTER_KEYS, ModelConfig, adapter_forward, attention_weights, backbone_forward, cross_attend, decode,
    forward_all, images_from, init_params, prompt_embed, tiny_config,
)


@pytest.fixture(scope="module")
def tiny():
    return init_params(tiny_config(), seed=3)


@pytest.fixture(scope="module")
def patch():
    x, _ = synth_scene(8, 8, 8)
    return x


def identity_adapter(d):
    a = {k: np.zeros((d, d)) if k.startswith("w") else np.zeros(d) for k in ADAPTER_KEYS}
    for k in ("wq", "wk", "wv", "wo"):
        a[k] = np.eye(d)
    a["w1"], a["b1"] = np.zeros((d, 4 * d)), np.zeros(4 * d)
    a["w2"] = np.zeros((4 * d, d))
    return a


def test_config_validation():
    for bad in (dict(input_hw=30), dict(window=3), dict(n_heads=5), dict(decoder_layers=0),
                dict(decoder_layers=11), dict(decoder_mode="conv"), dict(in_channels=3), dict(dtype="float16")):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    cfg = ModelConfig()
    assert cfg.n_tokens == 64 and cfg.token_side == 8
    assert ModelConfig.from_mapping(dict(line.split("=") for line in cfg.to_text().split())) == cfg


def test_decoder_widths():
    assert ModelConfig().decoder_widths() == [64, 1024, 1024, 1024, 32 * 32]
    assert ModelConfig(decoder_mode="tokenwise").decoder_widths()[-1] == 16
    assert ModelConfig(decoder_layers=1).decoder_widths() == [64, 1024]


def test_backbone_shapes_and_determinism():
    cfg = ModelConfig(decoder_hidden=8)
    p = init_params(cfg, 0)
    x, _ = synth_scene(1, 32, 32)
    img = images_from(x)
    f = backbone_forward(cfg, p.backbone, img)
    assert f.shape == (1, 64, 64)
    assert np.all(np.isfinite(f))
    assert backbone_forward(cfg, p.backbone, img).tobytes() == f.tobytes()
    img2 = img.copy()
    img2[0, 2, 5, 7] += 0.05
    assert not np.array_equal(backbone_forward(cfg, p.backbone, img2), f)
    with pytest.raises(ValueError):
        backbone_forward(cfg, p.backbone, img[:, :, :16, :16])


def test_backbone_is_frozen_and_seeded():
    cfg = tiny_config()
    a, b = init_params(cfg, 0), init_params(cfg, 99)
    assert a.backbone_hash() == b.backbone_hash()
    assert init_params(tiny_config(backbone_seed=1), 0).backbone_hash() != a.backbone_hash()
    with pytest.raises(ValueError):
        a.backbone["embed.w"][0, 0] = 1.0


def test_shift_changes_features():
    cfg = tiny_config(n_backbone_blocks=1)
    cfg2 = tiny_config(n_backbone_blocks=2)
    x = np.random.default_rng(0).uniform(0, 1, (1, 4, 8, 8))
    f1 = backbone_forward(cfg, init_params(cfg).backbone, x)
    f2 = backbone_forward(cfg2, init_params(cfg2).backbone, x)
    assert f1.shape == f2.shape and not np.allclose(f1, f2)


def test_nodata_pixels_are_zero_filled():
    cube = np.full((4, 8, 8), 0.3, np.float32)
    valid = np.ones((8, 8), bool)
    valid[0, 0] = False
    img = images_from(BandStack.from_array(cube, valid))
    assert img.shape == (1, 4, 8, 8) and np.all(img[0, :, 0, 0] == 0)


def test_prompt_embed(tiny):
    table = tiny.trainable["prompt"]
    assert np.array_equal(prompt_embed(table, TaskId.EVI), table[3])
    assert not np.array_equal(prompt_embed(table, TaskId.NDVI), prompt_embed(table, TaskId.H))
    t = table.copy()
    t[3] += 1.0
    for task in ALL_TASKS:
        if task.ordinal != 3:
            assert np.array_equal(prompt_embed(t, task), prompt_embed(table, task))


def test_cross_attend_single_key():
    d = 4
    a = identity_adapter(d)
    f = np.array([[0.3, -1.0, 2.0, 0.5]])
    out = cross_attend(a, f, np.full(d, 0.7), n_heads=1)
    np.testing.assert_allclose(out, f)


def test_cross_attend_zero_prompt_is_self_attention(tiny):
    a = tiny.adapter(TaskId.H)
    f = np.random.default_rng(1).normal(size=(16, 8))
    out = cross_attend(a, f, np.zeros(8), 2)
    # plain multi-head self-attention written out directly
    q, k, v = f @ a["wq"] + a["bq"], f @ a["wk"] + a["bk"], f @ a["wv"] + a["bv"]
    heads = []
    for h in range(2):
        s = q[:, 4 * h:4 * h + 4] @ k[:, 4 * h:4 * h + 4].T / 2.0
        p = np.exp(s - s.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        heads.append(p @ v[:, 4 * h:4 * h + 4])
    np.testing.assert_allclose(out, np.concatenate(heads, 1) @ a["wo"] + a["bo"], atol=1e-12)


def test_cross_attend_permutation_equivariant(tiny):
    a = tiny.adapter(TaskId.NDVI)
    rng = np.random.default_rng(2)
    f = rng.normal(size=(16, 8))
    q = rng.normal(size=8)
    perm = rng.permutation(16)
    np.testing.assert_allclose(cross_attend(a, f[perm], q, 2), cross_attend(a, f, q, 2)[perm], atol=1e-12)


def test_attention_rows_sum_to_one(tiny):
    f = np.random.default_rng(3).normal(size=(2, 16, 8)) * 3
    p = attention_weights(tiny.adapter(TaskId.CS), f, tiny.trainable["prompt"][7], 2)
    assert p.shape == (2, 2, 16, 16)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_adapter_forward(tiny):
    rng = np.random.default_rng(4)
    f = rng.normal(size=(16, 8))
    q = rng.normal(size=8)
    a = tiny.adapter(TaskId.H)
    out = adapter_forward(a, f, q, 2)
    assert out.shape == (16, 8)
    zero = dict(a, w1=np.zeros_like(a["w1"]), w2=np.zeros_like(a["w2"]), b2=np.zeros_like(a["b2"]))
    # residual paths around both attention and MLP
    np.testing.assert_allclose(adapter_forward(zero, f, q, 2), f + cross_attend(a, f, q, 2), atol=1e-12)
    assert not np.allclose(out, adapter_forward(tiny.adapter(TaskId.AGB), f, q, 2))


@pytest.mark.parametrize("mode", ["global", "tokenwise"])
def test_decode_shapes(mode):
    cfg = tiny_config(decoder_mode=mode)
    p = init_params(cfg, 0)
    ft = np.random.default_rng(5).normal(size=(16, 8))
    g = decode(p.decoder(TaskId.H), ft, cfg)
    assert g.shape == (8, 8) and g.valid.all()
    assert decode(p.decoder(TaskId.H), ft[None].repeat(3, 0), cfg).shape == (3, 8, 8)


def test_decode_constant_map():
    cfg = tiny_config()
    layers = init_params(cfg, 0).decoder(TaskId.H)
    w, b = layers[-1]
    layers = layers[:-1] + [(np.zeros_like(w), np.full_like(b, 2.5))]
    g = decode(layers, np.random.default_rng(6).normal(size=(16, 8)), cfg)
    assert np.all(g.values == 2.5)


def test_tokenwise_unshuffle_places_each_token():
    cfg = tiny_config(decoder_mode="tokenwise", decoder_layers=1)
    # single linear layer: token i emits p*p copies of its first feature
    w = np.zeros((8, 4))
    w[0, :] = 1.0
    ft = np.zeros((16, 8))
    ft[:, 0] = np.arange(16)
    out = decode([(w, np.zeros(4))], ft, cfg).values
    expect = np.kron(np.arange(16).reshape(4, 4), np.ones((2, 2)))
    np.testing.assert_array_equal(out, expect)


def test_forward_all(tiny, patch):
    maps = forward_all(tiny, patch, ALL_TASKS)
    assert set(maps) == set(ALL_TASKS) and all(m.shape == (8, 8) for m in maps.values())
    assert forward_all(tiny, patch, [TaskId.EVI])[TaskId.EVI] == maps[TaskId.EVI]
    other = tiny.copy()
    other.trainable["adapter.H.wq"] += 0.5
    after = forward_all(other, patch, ALL_TASKS)
    for t in ALL_TASKS:
        assert (after[t] == maps[t]) == (t is not TaskId.H)
    with pytest.raises(ValueError):
        forward_all(tiny, patch, [])


def test_activations_finite_at_init():
    cfg = ModelConfig(decoder_hidden=32)
    p = init_params(cfg, 1)
    x = BandStack.from_array(np.random.default_rng(0).uniform(0, 1, (4, 32, 32)).astype(np.float32))
    for g in forward_all(p, x, ALL_TASKS).values():
        assert np.all(np.isfinite(g.values))
