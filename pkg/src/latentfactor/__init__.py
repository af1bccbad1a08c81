"""Activation-aware low-rank factorization and latent attention for transformers."""

from .accounting import CompressionPlan, CompressionReport, count_params_flops, solve_ranks
from .archive import TensorArchive, load_archive, save_archive
from .attention import (
    AttentionHeads,
    MlaFactors,
    joint_qk,
    joint_qk_attention_aware,
    joint_qk_bias_aware,
    joint_qk_gqa,
    joint_qk_rope,
    reconstruct_attention_maps,
    rope_rotation,
)
from .calibration import CalibrationStats, Preconditioner, additive_pe_adjust, estimate_stats, make_preconditioner
from .errors import (
    ArgumentError,
    ConfigError,
    DegenerateInputError,
    FormatError,
    InputError,
    LatentFactorError,
    NumericError,
    PlanError,
)
from .estimators import JointMLPCompressor, JointQKCompressor, LowRankLinear
from .linalg import SvdResult, pinv, psd_sqrt, right_singular, truncated_svd
from .local import (
    Junction,
    LowRankFactor,
    apply_junction,
    bias_update_local,
    compress_joint_qkv,
    compress_local,
    compress_split_head,
)
from .mlp import MlpFactors, compress_mlp, solve_z_relu, solve_zprime
from .model import PRESETS, ModelConfig, forward_toy, get_preset, make_toy_model
from .pipeline import compress_model, evaluate
from .sparse import SparseResidual, fista_sparse, hard_shrink_topk, soft_shrink, uniform_quantize
from .vo import ContractionPlan, ValueHeads, VoFactors, joint_vo, vo_bias_update, vo_contraction_plan

__version__ = "0.1.0"
