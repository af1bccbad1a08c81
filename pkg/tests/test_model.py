import numpy as np
import pytest

from latentfactor.errors import ArgumentError, ConfigError
from latentfactor.model import (
    PRESETS,
    ModelConfig,
    apply_rope,
    cross_entropy,
    forward_toy,
    get_preset,
    make_toy_model,
)
from latentfactor.attention import rope_rotation

TINY = ModelConfig(n_layers=1, d=2, h=1, d_h=2, d_i=2, vocab=3, max_pos=4, name="tiny")


def tiny_weights():
    w = {
        "embed.tokens": np.array([[1.0, 0.0], [0.0, 1.0], [2.0, -1.0]]),
        "embed.positions": np.array([[0.5, 0.0], [0.0, 0.5], [0.0, 0.0], [0.0, 0.0]]),
        "final_ln.weight": np.array([1.0, 2.0]),
        "final_ln.bias": np.array([0.0, 0.1]),
    }
    p = "layers.0"
    for ln in ("ln1", "ln2"):
        w[f"{p}.{ln}.weight"] = np.ones(2)
        w[f"{p}.{ln}.bias"] = np.zeros(2)
    for mod in ("attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj", "mlp.fc1", "mlp.fc2"):
        w[f"{p}.{mod}.weight"] = np.eye(2)
        w[f"{p}.{mod}.bias"] = np.zeros(2)
    w[f"{p}.mlp.fc1.bias"] = np.array([0.0, -0.5])
    return w


def test_hand_computed_single_token():
    w = tiny_weights()
    eps = 1e-5
    # token 0 at position 0: x = (1.5, 0)
    x = np.array([1.5, 0.0])
    ln = lambda v: (v - v.mean()) / np.sqrt(((v - v.mean()) ** 2).mean() + eps)
    a = ln(x)              # (+1, -1) up to eps
    x = x + a              # single key: attention weight 1, value = a
    m = ln(x)
    u = np.maximum(m + np.array([0.0, -0.5]), 0.0)
    x = x + u
    f = ln(x) * np.array([1.0, 2.0]) + np.array([0.0, 0.1])
    expect = w["embed.tokens"] @ f
    got = forward_toy(TINY, w, [0])
    assert got.shape == (1, 1, 3)
    assert np.allclose(got[0, 0], expect, atol=1e-12)


def test_zero_weights_give_equal_logits():
    w = {k: np.zeros_like(v) for k, v in tiny_weights().items()}
    logits = forward_toy(TINY, w, [[0, 1, 2], [2, 2, 1]])
    assert np.all(logits == logits.flat[0])


def test_missing_tensor():
    w = tiny_weights()
    del w["layers.0.attn.v_proj.weight"]
    with pytest.raises(ConfigError):
        forward_toy(TINY, w, [0])


def test_bad_tokens():
    with pytest.raises(ArgumentError):
        forward_toy(TINY, tiny_weights(), [3])
    with pytest.raises(ArgumentError):
        forward_toy(TINY, tiny_weights(), [0, 1, 2, 0, 1])


def test_factored_weights_are_read():
    w = tiny_weights()
    cfg = TINY
    ref = forward_toy(cfg, w, [0, 1, 2])
    W = w.pop("layers.0.mlp.fc1.weight")
    w["layers.0.mlp.fc1.B"] = W
    w["layers.0.mlp.fc1.A"] = np.eye(2)
    assert np.allclose(forward_toy(cfg, w, [0, 1, 2]), ref)


def test_capture_and_determinism():
    cfg = get_preset("toy")
    w = make_toy_model(cfg, 3)
    tokens = np.random.default_rng(0).integers(0, cfg.vocab, (2, 10))
    t = forward_toy(cfg, w, tokens, capture=True, keep_scores=True)
    assert set(t.inputs) == {f"layers.{i}.{k}" for i in range(2) for k in ("attn_in", "o_in", "fc1_in", "fc2_in")}
    assert t.inputs["layers.0.fc2_in"].shape == (cfg.d_i, 20)
    assert t.scores[0].shape == (2, cfg.h, 10, 10)
    assert np.array_equal(forward_toy(cfg, w, tokens), t.logits)
    # causal: logits at position 3 ignore later tokens
    other = tokens.copy()
    other[:, 5:] = (other[:, 5:] + 1) % cfg.vocab
    assert np.allclose(forward_toy(cfg, w, other)[:, :5], t.logits[:, :5])


def test_toy_is_seeded():
    cfg = get_preset("toy")
    a, b = make_toy_model(cfg, 1), make_toy_model(cfg, 1)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["embed.tokens"], make_toy_model(cfg, 2)["embed.tokens"])


def test_rope_gqa_forward():
    cfg = get_preset("toy-rope-gqa")
    w = make_toy_model(cfg, 0)
    logits = forward_toy(cfg, w, [1, 2, 3, 4])
    assert np.all(np.isfinite(logits))
    x = np.random.default_rng(0).standard_normal((1, 8, 5))
    rotated = apply_rope(x, 1e4)
    for pos in range(5):
        assert np.allclose(rotated[0, :, pos], rope_rotation(8, pos) @ x[0, :, pos])


def test_cross_entropy_uniform():
    logits = np.zeros((1, 4, 5))
    assert cross_entropy(logits, [[0, 1, 2, 3]]) == pytest.approx(np.log(5))


def test_config_validation():
    with pytest.raises(ArgumentError):
        ModelConfig(n_layers=1, d=4, h=3, h_kv=2, d_h=2, d_i=4, vocab=4, max_pos=4)
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"n_layers": 1, "bogus": 2})
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"n_layers": 1})
    with pytest.raises(ArgumentError):
        get_preset("gpt-5")
    cfg = get_preset("OPT-6.7B")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_presets_follow_tables():
    opt = PRESETS["opt-6.7b"]
    assert (opt.n_layers, opt.h, opt.d, opt.d_h, opt.d_i) == (32, 32, 4096, 128, 16384)
    q = PRESETS["qwen2-7b"]
    assert (q.n_layers, q.h, q.h_kv, q.d, q.d_h, q.d_i) == (28, 28, 4, 3584, 128, 18944)
    toy = PRESETS["toy"]
    assert (toy.n_layers, toy.d, toy.h, toy.d_i, toy.vocab) == (2, 32, 4, 128, 64)
