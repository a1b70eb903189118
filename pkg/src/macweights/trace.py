"""Per-layer state tracing and magnitude statistics.

For a designated token position, each layer contributes the six residual
states (h_prev, ln1, attn_out, h_hat, ln2, ffn_out), the resulting hidden
state h, and the FFN intermediate state, plus the post-softmax attention
maps. Tracing copies values out of the forward pass and never changes it:
traced and untraced logits are bitwise equal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .model import ModelConfig, ParameterStore, forward

STATE_KINDS = ("h_prev", "ln1", "attn_out", "h_hat", "ln2", "ffn_out", "h", "inter")


@dataclass
class LayerStates:
    h_prev: np.ndarray
    ln1: np.ndarray
    attn_out: np.ndarray
    h_hat: np.ndarray
    ln2: np.ndarray
    ffn_out: np.ndarray
    h: np.ndarray
    inter: np.ndarray  # intermediate state; MoE: the router-argmax expert's
    router_probs: np.ndarray | None = None
    expert: int | None = None


@dataclass
class StateTrace:
    config_hash: str
    position: int
    token_ids: np.ndarray
    layers: list[LayerStates]  # index 0 is layer 1
    attentions: list[np.ndarray]  # per layer [H, T, T]
    logits: np.ndarray


@dataclass
class MagnitudeProfile:
    # per layer: (top1, top2, top3, median) of absolute values
    hidden: list[tuple[float, float, float, float]]
    inter: list[tuple[float, float, float, float]]


def trace_forward(config: ModelConfig, params: ParameterStore, token_ids, position: int = 0) -> StateTrace:
    ids = np.asarray(token_ids, dtype=np.int64)
    if not 0 <= position < ids.size:
        raise InputError(f"position {position} out of range for {ids.size} tokens")
    logits, cap = forward(config, params, ids, capture=True)
    layers = []
    for lc in cap.layers:
        if lc.inter is not None:
            inter = lc.inter[position]
            router_probs, expert = None, None
        else:
            router_probs = lc.router_probs[position]
            expert = int(np.argmax(router_probs))
            inter = lc.expert_inter[expert][position]
        layers.append(
            LayerStates(
                h_prev=lc.h_prev[position],
                ln1=lc.ln1[position],
                attn_out=lc.attn_out[position],
                h_hat=lc.h_hat[position],
                ln2=lc.ln2[position],
                ffn_out=lc.ffn_out[position],
                h=lc.h[position],
                inter=inter,
                router_probs=router_probs,
                expert=expert,
            )
        )
    return StateTrace(
        config_hash=config.config_hash(),
        position=position,
        token_ids=ids,
        layers=layers,
        attentions=cap.attentions,
        logits=logits.data,
    )


def top3_and_median(vec: np.ndarray) -> tuple[float, float, float, float]:
    """Top-3 absolute magnitudes (zero-padded) and the median |value|.

    Even-length median is the lower middle element, not interpolated.
    """
    mags = np.sort(np.abs(np.asarray(vec, dtype=np.float64)))
    n = mags.size
    top = [float(mags[n - 1 - i]) if i < n else 0.0 for i in range(3)]
    median = float(mags[(n - 1) // 2])
    return top[0], top[1], top[2], median


def magnitude_profile(trace: StateTrace) -> MagnitudeProfile:
    return MagnitudeProfile(
        hidden=[top3_and_median(ls.h) for ls in trace.layers],
        inter=[top3_and_median(ls.inter) for ls in trace.layers],
    )


def attention_sink_fraction(trace: StateTrace, sink_position: int = 0) -> list[float]:
    """Per layer: mean attention mass on `sink_position`, averaged over heads
    and over query positions at or after the sink."""
    t_len = trace.token_ids.size
    if not 0 <= sink_position < t_len:
        raise InputError(f"sink_position {sink_position} out of range for {t_len} tokens")
    out = []
    for attn in trace.attentions:
        mass = attn[:, sink_position:, sink_position]  # [H, T - sink]
        out.append(float(mass.mean()))
    return out


def profile_rows(profile: MagnitudeProfile) -> list[dict]:
    """Flatten a profile into CSV-ready rows (layer, state_kind, stats)."""
    rows = []
    for kind, series in (("hidden", profile.hidden), ("inter", profile.inter)):
        for layer0, (t1, t2, t3, med) in enumerate(series):
            rows.append(
                {
                    "layer": layer0 + 1,
                    "state_kind": kind,
                    "top1": t1,
                    "top2": t2,
                    "top3": t3,
                    "median": med,
                }
            )
    return rows
