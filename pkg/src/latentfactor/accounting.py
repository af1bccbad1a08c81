"""Rank planning and parameter / FLOPs accounting.

MACs count one multiply-add; FLOPs are twice the MACs. Linear layers cost their
stored parameter count per token, each attention layer adds ``h d_h l^2`` for
the score maps and the same again for applying them, and the output head costs
``vocab * d`` per token.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from ._validation import check_count, check_real
from .attention import mla_params
from .calibration import DEFAULT_LAMBDA_REL, Preconditioner
from .errors import ArgumentError, PlanError
from .local import Junction, lowrank_params
from .model import ModelConfig
from .vo import ContractionOrder, vo_contraction_plan, vo_params

MODULES = {
    "q": "attn.q_proj",
    "k": "attn.k_proj",
    "v": "attn.v_proj",
    "o": "attn.o_proj",
    "u": "mlp.fc1",
    "d": "mlp.fc2",
}
GATE = ("g", "mlp.gate")


def _modules(config: ModelConfig) -> dict:
    mods = dict(MODULES)
    if config.gated_mlp:
        mods[GATE[0]] = GATE[1]
    return mods


@dataclass
class CompressionPlan:
    target_ratio: float
    ranks: list  # one {"q", "k", "v", "o", "u", "d"} -> rank dict per layer
    preconditioner: str = "rootcov"
    junction: str = "block-identity"
    iters_qk: int = 8
    iters_ud: int = 4
    joint_qk: bool = False
    joint_vo: bool = False
    joint_ud: bool = False
    bias_aware: bool = False
    rope_aware: bool = False
    rope_window: int = 10
    lambda_rel: float = DEFAULT_LAMBDA_REL
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CompressionPlan":
        try:
            return cls(**data)
        except TypeError as exc:
            raise PlanError(f"malformed plan: {exc}") from None

    @property
    def block_identity(self) -> bool:
        return Junction.parse(self.junction).saves_block


def _largest_rank(stored, budget: float, r_max: int, what: str) -> int:
    best = 0
    for r in range(1, r_max + 1):
        if stored(r) <= budget:
            best = r
    if best == 0:
        raise PlanError(
            f"{what}: even rank 1 needs {stored(1)} parameters, budget is {budget:.1f}"
        )
    return best


def solve_ranks(
    config: ModelConfig,
    target_ratio: float,
    *,
    junction="block-identity",
    joint_qk: bool = False,
    joint_vo: bool = False,
    **flags,
) -> CompressionPlan:
    """Largest ranks whose stored parameters fit ``(1 - target_ratio)`` of the
    dense linear parameters, module by module (jointly for QK / VO pairs)."""
    target_ratio = check_real(target_ratio, "target_ratio", low=0.0)
    if target_ratio >= 1.0:
        raise ArgumentError("target_ratio must be below 1")
    junction = Junction.parse(junction)
    keep = 1.0 - target_ratio
    shapes = config.linear_shapes()
    ranks = {}
    for key, mod in _modules(config).items():
        d_out, d_in = shapes[mod]
        ranks[key] = _largest_rank(
            lambda r, a=d_out, b=d_in: lowrank_params(a, b, r, junction),
            keep * d_out * d_in,
            min(d_out, d_in),
            mod,
        )
    block = junction.saves_block
    if joint_qk:
        budget = keep * (config.d_attn + config.d_kv) * config.d
        r = _largest_rank(
            lambda r: mla_params(config.d, config.d_h, config.h, r, r, config.h_kv, block),
            budget,
            config.d,
            "joint QK",
        )
        ranks["q"] = ranks["k"] = r
    if joint_vo:
        if config.h_kv != config.h:
            raise PlanError("joint VO compression needs as many value heads as query heads")
        budget = keep * 2 * config.d_attn * config.d
        r = _largest_rank(
            lambda r: vo_params(config.d, config.d, config.d_h, config.h, r, r, block),
            budget,
            config.d,
            "joint VO",
        )
        ranks["v"] = ranks["o"] = r
    return CompressionPlan(
        target_ratio=target_ratio,
        ranks=[dict(ranks) for _ in range(config.n_layers)],
        junction=junction.value,
        joint_qk=joint_qk,
        joint_vo=joint_vo,
        **flags,
    )


def full_rank_plan(config: ModelConfig, **flags) -> CompressionPlan:
    shapes = config.linear_shapes()
    ranks = {k: min(shapes[m]) for k, m in _modules(config).items()}
    if flags.get("joint_qk") or flags.get("joint_vo"):
        for k in ("q", "k", "v", "o"):
            ranks[k] = config.d
    flags.setdefault("junction", "dense")
    return CompressionPlan(0.0, [dict(ranks) for _ in range(config.n_layers)], **flags)


@dataclass
class CompressionReport:
    params: int
    dense_params: int
    linear_params: int
    dense_linear_params: int
    macs: int
    flops: int
    token_len: int
    layer_losses: dict = field(default_factory=dict)
    plan: dict | None = None
    wall_time: float = 0.0
    notes: str = "target ratio applies to linear-layer parameters; embeddings stay dense"

    @property
    def param_ratio(self) -> float:
        return self.params / self.dense_params if self.dense_params else 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, *, include_time: bool = True) -> str:
        data = self.to_dict()
        if not include_time:
            data.pop("wall_time")
        return json.dumps(data, indent=1, sort_keys=True)

    def table(self) -> str:
        rows = [
            ("parameters", f"{self.params:,}", f"{self.dense_params:,}"),
            ("linear parameters", f"{self.linear_params:,}", f"{self.dense_linear_params:,}"),
            ("MACs", f"{_si(self.macs)}", ""),
            ("FLOPs", f"{_si(self.flops)}", ""),
        ]
        lines = [f"{'quantity':<20}{'value':>20}{'dense':>20}"]
        lines += [f"{a:<20}{b:>20}{c:>20}" for a, b, c in rows]
        lines.append(f"token length {self.token_len}, parameter ratio {self.param_ratio:.4f}")
        if self.layer_losses:
            lines.append("")
            lines.append(f"{'module':<32}{'loss':>16}")
            lines += [f"{k:<32}{v:>16.6g}" for k, v in sorted(self.layer_losses.items())]
        return "\n".join(lines)


def _si(n: float) -> str:
    for unit, scale in (("T", 1e12), ("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(n) >= scale:
            return f"{n / scale:.3f}{unit}"
    return str(n)


def _layer_linear(config: ModelConfig, ranks: dict | None, plan: CompressionPlan | None):
    """Stored linear parameters of one layer, with the joint QK / VO parts
    reported separately (``None`` when the pair is compressed independently)."""
    shapes = config.linear_shapes()
    dense = {m: a * b for m, (a, b) in shapes.items()}
    if plan is None or ranks is None:
        return dense, None
    junction = Junction.parse(plan.junction)
    stored = dict(dense)
    for key, mod in _modules(config).items():
        stored[mod] = lowrank_params(*shapes[mod], ranks[key], junction)
    vo = None
    if plan.joint_qk:
        stored["attn.q_proj"] = mla_params(
            config.d, config.d_h, config.h, ranks["q"], ranks["k"], config.h_kv, plan.block_identity
        )
        stored["attn.k_proj"] = 0
    if plan.joint_vo:
        stored["attn.v_proj"] = vo_params(
            config.d, config.d, config.d_h, config.h, ranks["v"], ranks["o"], plan.block_identity
        )
        stored["attn.o_proj"] = 0
        vo = (ranks["v"], ranks["o"])
    return stored, vo


def count_params_flops(config: ModelConfig, plan: CompressionPlan | None = None, token_len: int = 128) -> CompressionReport:
    """Parameter, MAC and FLOP totals for the dense model or a compression plan."""
    l = check_count(token_len, "token_len")
    if plan is not None and len(plan.ranks) != config.n_layers:
        raise PlanError(f"plan has {len(plan.ranks)} layers, model has {config.n_layers}")
    d = config.d
    embed = config.vocab * d + (config.max_pos * d if config.rope_theta is None else 0)
    head = 0 if config.tied_head else config.vocab * d
    per_layer_misc = 4 * d  # two norms
    if config.qkv_bias:
        per_layer_misc += config.d_attn + 2 * config.d_kv + d
    if config.mlp_bias:
        per_layer_misc += config.d_i + d
    fixed = embed + head + 2 * d + config.n_layers * per_layer_misc
    attn_macs = 2 * config.h * config.d_h * l * l
    dense_linear = sum(a * b for a, b in config.linear_shapes().values()) * config.n_layers

    linear = 0
    macs = config.vocab * d * l
    for i in range(config.n_layers):
        ranks = plan.ranks[i] if plan is not None else None
        stored, vo = _layer_linear(config, ranks, plan)
        n = sum(stored.values())
        linear += n
        if vo is None:
            macs += n * l + attn_macs
        else:
            cp = vo_contraction_plan(d, d, config.d_h, config.h, l, vo[0], vo[1])
            vo_cost = (
                cp.flops_output_side
                if cp.order is ContractionOrder.OUTPUT_SIDE
                else cp.flops_value_side
            )
            n_other = n - stored["attn.v_proj"]
            macs += n_other * l + attn_macs // 2 + vo_cost
    return CompressionReport(
        params=int(fixed + linear),
        dense_params=int(fixed + dense_linear),
        linear_params=int(linear),
        dense_linear_params=int(dense_linear),
        macs=int(macs),
        flops=int(2 * macs),
        token_len=l,
        plan=None if plan is None else plan.to_dict(),
    )


def preconditioner_name(value) -> str:
    return Preconditioner.parse(value).value
