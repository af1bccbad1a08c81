"""Whole-model compression and evaluation on the numpy toy transformer."""

from __future__ import annotations

import time

import numpy as np

from .accounting import CompressionPlan, count_params_flops
from .attention import (
    AttentionHeads,
    joint_qk,
    joint_qk_bias_aware,
    joint_qk_rope,
)
from .calibration import estimate_stats, make_preconditioner
from .errors import ArgumentError, LatentFactorError, PlanError
from .local import Junction, activation_loss, apply_junction, bias_update_local, compress_local
from .mlp import compress_mlp
from .model import ModelConfig, cross_entropy, forward_toy
from .vo import ValueHeads, joint_vo, vo_bias_update


class _Layer:
    """Per-layer helper holding captured inputs and writing factors."""

    def __init__(self, i, weights, trace, plan: CompressionPlan, out: dict):
        self.p = f"layers.{i}"
        self.w = weights
        self.plan = plan
        self.out = out
        self.inputs = {k: trace.inputs[f"{self.p}.{k}"] for k in ("attn_in", "o_in", "fc1_in", "fc2_in")}
        self._stats = {}

    def stats(self, key):
        if key not in self._stats:
            self._stats[key] = estimate_stats(self.inputs[key], self.plan.lambda_rel)
        return self._stats[key]

    def weight(self, mod):
        return self.w[f"{self.p}.{mod}.weight"]

    def bias(self, mod):
        return self.w.get(f"{self.p}.{mod}.bias")

    def put(self, mod, B, A, bias=None):
        self.out[f"{self.p}.{mod}.B"] = np.asarray(B)
        self.out[f"{self.p}.{mod}.A"] = np.asarray(A)
        if bias is not None:
            self.out[f"{self.p}.{mod}.bias"] = np.asarray(bias)

    def local(self, mod, key, r) -> float:
        """Activation-aware compression of one module; returns its activation loss."""
        W = self.weight(mod)
        b = self.bias(mod)
        stats = self.stats(key)
        centered = self.plan.bias_aware and b is not None
        P = make_preconditioner(stats, self.plan.preconditioner, self.inputs[key], centered=centered)
        r = min(r, *W.shape)
        factor = compress_local(W, P, r)
        if centered:
            b = bias_update_local(W, factor, stats, b)
        junction = Junction.parse(self.plan.junction)
        if junction is not Junction.LEFT_SINGULAR:
            factor = apply_junction(factor, junction)
        self.put(mod, factor.B, factor.A, b)
        return activation_loss(W, factor.product(), stats.whitening_matrix(centered))


def _compress_qk(layer: _Layer, config: ModelConfig, ranks, losses):
    plan = layer.plan
    heads = AttentionHeads.from_projections(
        layer.weight("attn.q_proj"),
        layer.weight("attn.k_proj"),
        config.h,
        config.h_kv,
        layer.bias("attn.q_proj"),
        layer.bias("attn.k_proj"),
    )
    stats = layer.stats("attn_in")
    if plan.rope_aware and config.rope_theta is not None:
        f = joint_qk_rope(
            heads, stats, ranks["q"], ranks["k"], plan.iters_qk, plan.rope_window,
            config.rope_theta, junction=plan.junction,
        )
    elif plan.bias_aware and heads.has_bias:
        f = joint_qk_bias_aware(heads, stats, ranks["q"], ranks["k"], plan.iters_qk, junction=plan.junction)
    else:
        P = make_preconditioner(stats, plan.preconditioner, layer.inputs["attn_in"])
        f = joint_qk(heads, P, ranks["q"], ranks["k"], plan.iters_qk, junction=plan.junction)
    layer.put("attn.q_proj", f.Bq.reshape(-1, f.r_q), f.Aq, None if f.bq_hat is None else f.bq_hat.ravel())
    layer.put("attn.k_proj", f.Bk.reshape(-1, f.r_k), f.Ak, None if f.bk_hat is None else f.bk_hat.ravel())
    losses[f"{layer.p}.attn.qk"] = f.final_loss


def _compress_vo(layer: _Layer, config: ModelConfig, ranks, losses):
    plan = layer.plan
    heads = ValueHeads.from_projections(
        layer.weight("attn.v_proj"),
        layer.weight("attn.o_proj"),
        config.h,
        layer.bias("attn.v_proj"),
        layer.bias("attn.o_proj"),
    )
    stats = layer.stats("attn_in")
    f = joint_vo(
        heads, stats, ranks["v"], ranks["o"], plan.iters_qk,
        centered=plan.bias_aware, junction=plan.junction,
    )
    has_bias = heads.bv is not None or heads.bo is not None
    bo = vo_bias_update(heads, f, stats) if has_bias else None
    layer.put("attn.v_proj", f.Bv.reshape(-1, f.r_v), f.Av)
    layer.put("attn.o_proj", f.Bo, np.concatenate(list(f.Ao), axis=1), bo)
    losses[f"{layer.p}.attn.vo"] = f.loss_trace[-1]


def _compress_mlp(layer: _Layer, config: ModelConfig, ranks, losses):
    plan = layer.plan
    f = compress_mlp(
        layer.weight("mlp.fc1"),
        layer.weight("mlp.fc2"),
        layer.inputs["fc1_in"],
        r_u=min(ranks["u"], config.d, config.d_i),
        r_d=min(ranks["d"], config.d, config.d_i),
        iters=plan.iters_ud,
        bu=layer.bias("mlp.fc1"),
        bd=layer.bias("mlp.fc2"),
        activation=config.activation,
        lambda_rel=plan.lambda_rel,
    )
    junction = Junction.parse(plan.junction)
    for mod, factor in (("mlp.fc1", f.up), ("mlp.fc2", f.down)):
        if junction is not Junction.LEFT_SINGULAR:
            factor = apply_junction(factor, junction)
        layer.put(mod, factor.B, factor.A, factor.bias)
    losses[f"{layer.p}.mlp.joint"] = f.loss_trace[-1]


def compress_model(weights: dict, config: ModelConfig, plan: CompressionPlan, calib_tokens):
    """Compress every linear layer of the toy model according to ``plan``.

    Activations are captured once from the original model. Returns the new
    weight mapping (factored modules stored as ``.B`` / ``.A``) and a report.
    """
    start = time.perf_counter()
    tokens = np.asarray(calib_tokens)
    if tokens.size == 0:
        raise ArgumentError("calibration token set is empty")
    if len(plan.ranks) != config.n_layers:
        raise PlanError(f"plan has {len(plan.ranks)} layers, model has {config.n_layers}")
    if plan.joint_vo and config.h_kv != config.h:
        raise PlanError("joint VO compression needs as many value heads as query heads")
    trace = forward_toy(config, weights, tokens, capture=True)
    out = {k: v for k, v in weights.items() if not k.startswith("layers.")}
    losses = {}
    for i in range(config.n_layers):
        p = f"layers.{i}"
        for name in ("ln1.weight", "ln1.bias", "ln2.weight", "ln2.bias"):
            out[f"{p}.{name}"] = weights[f"{p}.{name}"]
        layer = _Layer(i, weights, trace, plan, out)
        ranks = plan.ranks[i]
        try:
            if plan.joint_qk:
                _compress_qk(layer, config, ranks, losses)
            else:
                losses[f"{p}.attn.q_proj"] = layer.local("attn.q_proj", "attn_in", ranks["q"])
                losses[f"{p}.attn.k_proj"] = layer.local("attn.k_proj", "attn_in", ranks["k"])
            if plan.joint_vo:
                _compress_vo(layer, config, ranks, losses)
            else:
                losses[f"{p}.attn.v_proj"] = layer.local("attn.v_proj", "attn_in", ranks["v"])
                losses[f"{p}.attn.o_proj"] = layer.local("attn.o_proj", "o_in", ranks["o"])
            if plan.joint_ud:
                _compress_mlp(layer, config, ranks, losses)
            else:
                losses[f"{p}.mlp.fc1"] = layer.local("mlp.fc1", "fc1_in", ranks["u"])
                losses[f"{p}.mlp.fc2"] = layer.local("mlp.fc2", "fc2_in", ranks["d"])
        except LatentFactorError as exc:
            exc.args = (f"layer {i}: {exc}",) + exc.args[1:]
            raise
    report = count_params_flops(config, plan)
    report.layer_losses = {k: float(v) for k, v in losses.items()}
    report.wall_time = time.perf_counter() - start
    return out, report


def stored_param_count(weights: dict) -> int:
    return int(sum(np.asarray(v).size for v in weights.values()))


def evaluate(original: dict, compressed: dict, config: ModelConfig, tokens) -> dict:
    """Compare two weight sets on ``tokens``.

    Reports per-layer hidden-state MSE, per-layer pre-softmax attention-map
    Frobenius error, final-logit MSE and the cross-entropy change with the
    matching perplexity ratio ``exp(delta CE)``.
    """
    try:
        a = forward_toy(config, original, tokens, keep_scores=True)
        b = forward_toy(config, compressed, tokens, keep_scores=True)
    except LatentFactorError:
        raise
    except (ValueError, IndexError) as exc:
        raise ArgumentError(f"weights do not match the config: {exc}") from None
    ce_a = cross_entropy(a.logits, tokens)
    ce_b = cross_entropy(b.logits, tokens)
    return {
        "activation_mse": [float(np.mean((x - y) ** 2)) for x, y in zip(a.hidden, b.hidden)],
        "attention_map_error": [float(np.linalg.norm(x - y)) for x, y in zip(a.scores, b.scores)],
        "logit_mse": float(np.mean((a.logits - b.logits) ** 2)),
        "ce_original": ce_a,
        "ce_compressed": ce_b,
        "ce_delta": ce_b - ce_a,
        "perplexity_ratio": float(np.exp(ce_b - ce_a)),
    }
