import numpy as np

from latentfactor.accounting import solve_ranks
from latentfactor.model import get_preset, make_toy_model
from latentfactor.pipeline import compress_model, evaluate

TOY_SEED = 0
CALIB_SHAPE = (8, 32)  # 256 calibration tokens


def toy_setup(preset="toy"):
    cfg = get_preset(preset)
    weights = make_toy_model(cfg, TOY_SEED)
    tokens = np.random.default_rng(TOY_SEED).integers(0, cfg.vocab, CALIB_SHAPE)
    return cfg, weights, tokens


def run_plan(cfg, weights, tokens, ratio, **flags):
    plan = solve_ranks(cfg, ratio, **flags)
    compressed, report = compress_model(weights, cfg, plan, tokens)
    return compressed, report, evaluate(weights, compressed, cfg, tokens)
