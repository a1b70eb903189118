import os

os.environ.setdefault("MACWEIGHTS_DEBUG_CHECKS", "1")

import numpy as np
import pytest

from macweights import tensor as T
from macweights.model import ModelConfig, MoeConfig, ffn_intermediate, init_params
from macweights.trace import trace_forward

T.DEBUG_CHECKS = True


def random_config(rng, variant=None, moe=False, positional=None):
    heads = int(rng.choice([1, 2, 4]))
    head_dim = int(rng.choice([4, 8]))
    d = heads * head_dim
    cfg = ModelConfig(
        vocab_size=int(rng.integers(17, 258)),
        hidden_dim=d,
        ffn_dim=int(rng.choice([2, 3]) * d),
        num_layers=int(rng.integers(2, 5)),
        num_heads=heads,
        head_dim=head_dim,
        residual_variant=variant or str(rng.choice(["pre_ln", "residual_dropout", "sandwich_ln"])),
        norm_kind=str(rng.choice(["rmsnorm", "layernorm"])),
        positional=positional or str(rng.choice(["rope", "none"])),
        bos_token_id=0,
        moe=MoeConfig(num_experts=int(rng.integers(2, 5)), moe_layers=(2,)) if moe else None,
    )
    return cfg


def params_to_lists(params):
    return {name: params[name].astype(np.float64).tolist() for name in params.names()}


def plant_massive_rows(config, params, layer, rows, expert=None, strengths=None, down_coord=None):
    """Rewrite the chosen gate/up rows so the bos intermediate is huge there.

    Rows are pointed along the actual normalized FFN input at `layer` (probed
    with [bos]), which guarantees a large positive SiLU argument. Returns the
    expected intermediate magnitudes per planted row.
    """
    if expert is not None:
        # steer the router toward the planted expert first
        tr = trace_forward(config, params, [config.bos_token_id], 0)
        x = tr.layers[layer - 1].ln2.astype(params[f"layers.{layer}.moe.router"].dtype)
        router = params[f"layers.{layer}.moe.router"]
        router[:, expert] = 8.0 * x / max(float(x @ x), 1e-12)
        prefix = f"layers.{layer}.moe.experts.{expert}"
    else:
        prefix = f"layers.{layer}.ffn"
    tr = trace_forward(config, params, [config.bos_token_id], 0)
    x = tr.layers[layer - 1].ln2
    xx = float(x @ x)
    assert xx > 0
    gate, up = params[f"{prefix}.w_gate"], params[f"{prefix}.w_up"]
    if strengths is None:
        strengths = [1000.0 - 50.0 * i for i in range(len(rows))]
    mags = []
    for row, s in zip(rows, strengths):
        gate[row, :] = (s * x / xx).astype(gate.dtype)  # gate dot x == s
        up[row, :] = (s * x / xx).astype(up.dtype)
        mags.append(s / (1.0 + np.exp(-s)) * s)
    if down_coord is not None:
        w_down = params[f"{prefix}.w_down"]
        w_down[:, rows[0]] = 0.0
        w_down[down_coord, rows[0]] = 1.0
    return mags


@pytest.fixture
def tiny_config():
    return ModelConfig(
        vocab_size=33, hidden_dim=16, ffn_dim=32, num_layers=2,
        num_heads=2, head_dim=8, positional="rope", bos_token_id=0,
    )


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, seed=7)
