"""bos-token probe: locate the massive layer and the top-k massive weight rows.

The probe always feeds exactly [bos]. The massive layer is, by default, the
layer whose intermediate state has the globally largest magnitude; an
"earliest jump" rule (first layer whose max is >= 50x the running median of
earlier maxima) is available for models whose peak drifts late. For MoE
layers only the router's argmax expert at [bos] is considered.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DetectionError, InputError
from .model import ModelConfig, ParameterStore
from .trace import StateTrace, trace_forward

LAYER_RULES = ("argmax", "earliest_jump")
JUMP_FACTOR = 50.0
ROUTER_FLAG_THRESHOLD = 0.9


@dataclass
class MassiveWeightReport:
    layer: int
    expert: int | None
    k: int
    indices: list[int]
    magnitudes: list[float]
    selection_rule: str
    config_hash: str

    def to_dict(self) -> dict:
        return {
            "layer": self.layer,
            "expert": self.expert,
            "k": self.k,
            "indices": self.indices,
            "magnitudes": self.magnitudes,
            "rule": self.selection_rule,
            "config_hash": self.config_hash,
        }


def _bos_trace(config: ModelConfig, params: ParameterStore) -> StateTrace:
    return trace_forward(config, params, [config.bos_token_id], position=0)


def _layer_maxima(trace: StateTrace) -> np.ndarray:
    return np.asarray([float(np.max(np.abs(ls.inter))) for ls in trace.layers])


def _pick_layer(maxima: np.ndarray, rule: str) -> int:
    if rule == "argmax":
        return int(np.argmax(maxima)) + 1  # ties -> lowest layer
    if rule == "earliest_jump":
        for i in range(1, maxima.size):
            prev = np.sort(maxima[:i])
            running_median = prev[(i - 1) // 2]
            if running_median > 0 and maxima[i] >= JUMP_FACTOR * running_median:
                return i + 1
        return int(np.argmax(maxima)) + 1  # no jump found: fall back
    raise ConfigError(f"unknown layer selection rule {rule!r}, expected one of {LAYER_RULES}")


def find_massive_layer(
    config: ModelConfig, params: ParameterStore, rule: str = "argmax"
) -> tuple[int, int | None]:
    trace = _bos_trace(config, params)
    maxima = _layer_maxima(trace)
    if np.all(maxima == 0.0):
        raise DetectionError("all intermediate states are identically zero at [bos]")
    layer = _pick_layer(maxima, rule)
    return layer, trace.layers[layer - 1].expert


def find_massive_weights(
    config: ModelConfig, params: ParameterStore, k: int, rule: str = "argmax"
) -> MassiveWeightReport:
    if not 1 <= k <= config.ffn_dim:
        raise InputError(f"k={k} out of range [1, {config.ffn_dim}]")
    trace = _bos_trace(config, params)
    maxima = _layer_maxima(trace)
    if np.all(maxima == 0.0):
        raise DetectionError("all intermediate states are identically zero at [bos]")
    layer = _pick_layer(maxima, rule)
    ls = trace.layers[layer - 1]
    mags = np.abs(ls.inter)
    order = np.argsort(-mags, kind="stable")  # descending, ties -> lower index
    top = order[:k]
    return MassiveWeightReport(
        layer=layer,
        expert=ls.expert,
        k=k,
        indices=[int(i) for i in top],
        magnitudes=[float(mags[i]) for i in top],
        selection_rule=rule,
        config_hash=trace.config_hash,
    )


def massive_weight_count(config: ModelConfig, k: int) -> int:
    """Weights touched by a top-k attack: k rows in each of W_gate and W_up."""
    if k < 0:
        raise InputError(f"k must be >= 0, got {k}")
    return 2 * k * config.hidden_dim


@dataclass
class RouterProfile:
    layer: int
    probabilities: list[float]
    argmax_expert: int
    flagged: bool = field(default=False)


def router_profile(config: ModelConfig, params: ParameterStore) -> list[RouterProfile]:
    if config.moe is None:
        raise ConfigError("router_profile requires an MoE model")
    trace = _bos_trace(config, params)
    out = []
    for l in sorted(config.moe.moe_layers):
        probs = trace.layers[l - 1].router_probs
        out.append(
            RouterProfile(
                layer=l,
                probabilities=[float(p) for p in probs],
                argmax_expert=int(np.argmax(probs)),
                flagged=bool(np.max(probs) > ROUTER_FLAG_THRESHOLD),
            )
        )
    return out
