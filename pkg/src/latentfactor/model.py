"""Model configurations and a small pre-norm transformer in numpy.

Weights live in a flat ``name -> array`` mapping. A linear module ``p`` is
either dense (``p.weight``) or factored (``p.B`` and ``p.A``); ``p.bias`` is
optional in both cases. Hidden states use the column convention (d x tokens).

Tensor names::

    embed.tokens, embed.positions
    layers.{i}.ln1.{weight,bias}, layers.{i}.ln2.{weight,bias}
    layers.{i}.attn.{q,k,v,o}_proj.*
    layers.{i}.mlp.{fc1,fc2}.*
    final_ln.{weight,bias}, head.weight (only when the head is untied)
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import ArgumentError, ConfigError
from .mlp import activation_fn

LN_EPS = 1e-5


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d: int
    h: int
    d_h: int
    d_i: int
    vocab: int
    max_pos: int
    h_kv: int | None = None
    activation: str = "relu"
    qkv_bias: bool = True
    mlp_bias: bool = True
    rope_theta: float | None = None
    gated_mlp: bool = False
    tied_head: bool = True
    name: str = "custom"

    def __post_init__(self):
        if self.h_kv is None:
            object.__setattr__(self, "h_kv", self.h)
        for f in ("d", "h", "d_h", "d_i", "vocab", "max_pos", "h_kv"):
            v = getattr(self, f)
            if isinstance(v, bool) or not isinstance(v, int) or v < 1:
                raise ArgumentError(f"config field {f} must be a positive integer, got {v!r}")
        if not isinstance(self.n_layers, int) or self.n_layers < 0:
            raise ArgumentError(f"n_layers must be a non-negative integer, got {self.n_layers!r}")
        if self.h % self.h_kv:
            raise ArgumentError(f"h={self.h} is not divisible by h_kv={self.h_kv}")
        if self.activation not in ("relu", "gelu", "silu"):
            raise ArgumentError(f"unknown activation {self.activation!r}")
        if self.rope_theta is not None and self.d_h % 2:
            raise ArgumentError("rotary embedding needs an even head dimension")

    @property
    def group_size(self) -> int:
        return self.h // self.h_kv

    @property
    def d_attn(self) -> int:
        return self.h * self.d_h

    @property
    def d_kv(self) -> int:
        return self.h_kv * self.d_h

    def linear_shapes(self) -> dict:
        """``(d_out, d_in)`` of each per-layer linear module."""
        shapes = {
            "attn.q_proj": (self.d_attn, self.d),
            "attn.k_proj": (self.d_kv, self.d),
            "attn.v_proj": (self.d_kv, self.d),
            "attn.o_proj": (self.d, self.d_attn),
            "mlp.fc1": (self.d_i, self.d),
            "mlp.fc2": (self.d, self.d_i),
        }
        if self.gated_mlp:
            shapes["mlp.gate"] = (self.d_i, self.d)
        return shapes

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigError(f"incomplete model config: {exc}") from None


def _opt(name, L, h, d, d_h):
    return ModelConfig(
        n_layers=L, d=d, h=h, d_h=d_h, d_i=4 * d, vocab=50272, max_pos=2048,
        activation="relu", name=name,
    )


def _qwen2(name, L, h, h_kv, d, d_h, d_i):
    return ModelConfig(
        n_layers=L, d=d, h=h, h_kv=h_kv, d_h=d_h, d_i=d_i, vocab=151936, max_pos=32768,
        activation="silu", qkv_bias=True, mlp_bias=False, rope_theta=1e6, gated_mlp=True,
        name=name,
    )


PRESETS = {
    "opt-125m": _opt("opt-125m", 12, 12, 768, 64),
    "opt-350m": _opt("opt-350m", 24, 16, 1024, 64),
    "opt-1.3b": _opt("opt-1.3b", 24, 32, 2048, 64),
    "opt-2.7b": _opt("opt-2.7b", 32, 32, 2560, 80),
    "opt-6.7b": _opt("opt-6.7b", 32, 32, 4096, 128),
    "opt-13b": _opt("opt-13b", 40, 40, 5120, 128),
    "opt-30b": _opt("opt-30b", 48, 56, 7168, 128),
    "opt-66b": _opt("opt-66b", 64, 72, 9216, 128),
    "qwen2-0.5b": _qwen2("qwen2-0.5b", 24, 14, 2, 896, 64, 4864),
    "qwen2-1.5b": _qwen2("qwen2-1.5b", 28, 12, 2, 1536, 128, 8960),
    "qwen2-3b": _qwen2("qwen2-3b", 36, 16, 2, 2048, 128, 11008),
    "qwen2-7b": _qwen2("qwen2-7b", 28, 28, 4, 3584, 128, 18944),
    "qwen2-14b": _qwen2("qwen2-14b", 40, 40, 4, 5120, 128, 27392),
    "qwen2-32b": _qwen2("qwen2-32b", 60, 56, 8, 7168, 128, 28672),
    "toy": ModelConfig(
        n_layers=2, d=32, h=4, d_h=8, d_i=128, vocab=64, max_pos=128, name="toy"
    ),
    "toy-rope-gqa": ModelConfig(
        n_layers=2, d=32, h=4, h_kv=2, d_h=8, d_i=128, vocab=64, max_pos=128,
        qkv_bias=False, mlp_bias=False, rope_theta=1e4, name="toy-rope-gqa",
    ),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ArgumentError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None


# -- toy weights ----------------------------------------------------------------


def make_toy_model(config: ModelConfig, seed: int = 0) -> dict:
    """Random weights with strongly anisotropic activations.

    Token embeddings lie near a low-dimensional subspace with a decaying
    spectrum and the norm gains vary per channel, so activation-aware whitening
    has something to exploit.
    """
    if config.gated_mlp:
        raise ConfigError("the toy model only supports two-layer MLPs")
    rng = np.random.default_rng(seed)
    d = config.d
    w = {}
    k = max(2, d // 4)
    basis = np.linalg.qr(rng.standard_normal((d, d)))[0]
    spectrum = 3.0 * 0.6 ** np.arange(d)
    spectrum[:k] += 2.0
    w["embed.tokens"] = rng.standard_normal((config.vocab, d)) * spectrum @ basis.T
    if config.rope_theta is None:
        w["embed.positions"] = 0.1 * rng.standard_normal((config.max_pos, d))

    def gain(n):
        return np.exp(0.6 * rng.standard_normal(n))

    def lin(prefix, d_out, d_in, bias, scale=1.0):
        w[prefix + ".weight"] = scale * rng.standard_normal((d_out, d_in)) / np.sqrt(d_in)
        if bias:
            w[prefix + ".bias"] = 0.1 * rng.standard_normal(d_out)

    for i in range(config.n_layers):
        p = f"layers.{i}"
        w[f"{p}.ln1.weight"] = gain(d)
        w[f"{p}.ln1.bias"] = 0.2 * rng.standard_normal(d)
        w[f"{p}.ln2.weight"] = gain(d)
        w[f"{p}.ln2.bias"] = 0.2 * rng.standard_normal(d)
        lin(f"{p}.attn.q_proj", config.d_attn, d, config.qkv_bias, 2.0)
        lin(f"{p}.attn.k_proj", config.d_kv, d, config.qkv_bias, 2.0)
        lin(f"{p}.attn.v_proj", config.d_kv, d, config.qkv_bias)
        lin(f"{p}.attn.o_proj", d, config.d_attn, config.qkv_bias, 0.5)
        lin(f"{p}.mlp.fc1", config.d_i, d, config.mlp_bias)
        lin(f"{p}.mlp.fc2", d, config.d_i, config.mlp_bias, 0.5)
    w["final_ln.weight"] = 0.15 * gain(d)
    w["final_ln.bias"] = 0.1 * rng.standard_normal(d)
    if not config.tied_head:
        w["head.weight"] = rng.standard_normal((config.vocab, d)) / np.sqrt(d)
    return w


# -- forward pass -----------------------------------------------------------------


def _get(weights, name):
    try:
        return weights[name]
    except KeyError:
        raise ConfigError(f"missing tensor {name!r}") from None


def linear(weights, prefix: str, x: np.ndarray) -> np.ndarray:
    if prefix + ".weight" in weights:
        y = weights[prefix + ".weight"] @ x
    elif prefix + ".B" in weights:
        y = _get(weights, prefix + ".B") @ (_get(weights, prefix + ".A") @ x)
    else:
        raise ConfigError(f"missing tensor {prefix + '.weight'!r}")
    b = weights.get(prefix + ".bias")
    return y if b is None else y + b[:, None]


def layer_norm(x, g, b):
    mu = x.mean(axis=0, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=0, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * g[:, None] + b[:, None]


def apply_rope(x: np.ndarray, theta: float) -> np.ndarray:
    """Rotate (heads, d_h, l) features by their position (half-split layout)."""
    d_h, l = x.shape[1], x.shape[2]
    half = d_h // 2
    freq = theta ** (-2.0 * np.arange(half) / d_h)
    ang = freq[:, None] * np.arange(l)[None, :]
    c, s = np.cos(ang), np.sin(ang)
    x1, x2 = x[:, :half], x[:, half:]
    return np.concatenate([x1 * c - x2 * s, x2 * c + x1 * s], axis=1)


def _softmax_rows(s):
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ForwardTrace:
    logits: np.ndarray  # (batch, l, vocab)
    inputs: dict = field(default_factory=dict)  # capture name -> (d_in, batch*l)
    hidden: list = field(default_factory=list)  # per layer (batch, d, l)
    scores: list = field(default_factory=list)  # per layer (batch, h, l, l), pre-softmax


def _as_batch(tokens, vocab) -> np.ndarray:
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] == 0:
        raise ArgumentError("tokens must be a non-empty sequence or a batch of sequences")
    if arr.dtype.kind not in "iu":
        raise ArgumentError("tokens must be integers")
    if arr.min() < 0 or arr.max() >= vocab:
        raise ArgumentError(f"token ids must lie in [0, {vocab})")
    return arr.astype(np.int64)


def forward_toy(config: ModelConfig, weights, tokens, capture: bool = False, keep_scores: bool = False):
    """Run the model on ``tokens`` (one sequence or an equal-length batch).

    Returns logits of shape (batch, l, vocab) or, with ``capture``, a
    :class:`ForwardTrace` that also holds the input of every linear module:
    ``layers.{i}.attn_in``, ``o_in``, ``fc1_in`` and ``fc2_in``.
    """
    if config.gated_mlp:
        raise ConfigError("gated MLPs are not supported by the numpy forward pass")
    batch = _as_batch(tokens, config.vocab)
    l = batch.shape[1]
    if config.rope_theta is None and l > config.max_pos:
        raise ArgumentError(f"sequence length {l} exceeds max_pos {config.max_pos}")
    act = activation_fn(config.activation)
    emb = _get(weights, "embed.tokens")
    pos = None if config.rope_theta is not None else _get(weights, "embed.positions")
    head = emb if config.tied_head else _get(weights, "head.weight")
    scale = 1.0 / np.sqrt(config.d_h)
    mask = np.triu(np.ones((l, l), dtype=bool), k=1)
    caps: dict = {}
    hidden = [[] for _ in range(config.n_layers)]
    scores_all = [[] for _ in range(config.n_layers)]
    logits = np.empty((batch.shape[0], l, config.vocab))

    def keep(name, x):
        if capture:
            caps.setdefault(name, []).append(x)

    for b, seq in enumerate(batch):
        x = emb[seq].T.copy()
        if pos is not None:
            x = x + pos[:l].T
        for i in range(config.n_layers):
            p = f"layers.{i}"
            a = layer_norm(x, _get(weights, f"{p}.ln1.weight"), _get(weights, f"{p}.ln1.bias"))
            keep(f"{p}.attn_in", a)
            q = linear(weights, f"{p}.attn.q_proj", a).reshape(config.h, config.d_h, l)
            k = linear(weights, f"{p}.attn.k_proj", a).reshape(config.h_kv, config.d_h, l)
            v = linear(weights, f"{p}.attn.v_proj", a).reshape(config.h_kv, config.d_h, l)
            if config.rope_theta is not None:
                q = apply_rope(q, config.rope_theta)
                k = apply_rope(k, config.rope_theta)
            kv = np.arange(config.h) // config.group_size
            s = np.einsum("hdl,hdm->hlm", q, k[kv])
            if keep_scores:
                scores_all[i].append(s)
            s = np.where(mask, -np.inf, s * scale)
            attn = _softmax_rows(s)
            o = np.einsum("hdm,hlm->hdl", v[kv], attn).reshape(config.d_attn, l)
            keep(f"{p}.o_in", o)
            x = x + linear(weights, f"{p}.attn.o_proj", o)
            m = layer_norm(x, _get(weights, f"{p}.ln2.weight"), _get(weights, f"{p}.ln2.bias"))
            keep(f"{p}.fc1_in", m)
            u = act(linear(weights, f"{p}.mlp.fc1", m))
            keep(f"{p}.fc2_in", u)
            x = x + linear(weights, f"{p}.mlp.fc2", u)
            hidden[i].append(x)
        f = layer_norm(x, _get(weights, "final_ln.weight"), _get(weights, "final_ln.bias"))
        logits[b] = (head @ f).T
    if not capture and not keep_scores:
        return logits
    return ForwardTrace(
        logits=logits,
        inputs={k: np.concatenate(v, axis=1) for k, v in caps.items()},
        hidden=[np.stack(hs) for hs in hidden],
        scores=[np.stack(sc) for sc in scores_all] if keep_scores else [],
    )


def cross_entropy(logits: np.ndarray, tokens) -> float:
    """Mean next-token cross entropy (nats)."""
    batch = np.asarray(tokens)
    if batch.ndim == 1:
        batch = batch[None, :]
    if batch.shape[1] < 2:
        return 0.0
    lg = logits[:, :-1]
    lg = lg - lg.max(axis=-1, keepdims=True)
    logp = lg - np.log(np.exp(lg).sum(axis=-1, keepdims=True))
    target = batch[:, 1:]
    picked = np.take_along_axis(logp, target[..., None], axis=-1)[..., 0]
    return float(-picked.mean())
