"""Decoder-only transformer with a gated FFN and three residual variants.

Residual wiring per layer:
  pre_ln:           h = h_hat + FFN(LN(h_hat)),     h_hat = h_prev + ATTN(LN(h_prev))
  residual_dropout: dropout applied to the ATTN and FFN outputs (training only)
  sandwich_ln:      an extra LN wraps the ATTN and FFN outputs before the add

FFN(x) = W_down(SiLU(W_gate x) * W_up x); W_gate/W_up rows index the
intermediate state, which is what the probe and attacks operate on.
Optional top-2 MoE layers replace the dense FFN with routed experts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericFaultError, ShapeError
from .tensor import Tensor

RESIDUAL_VARIANTS = ("pre_ln", "residual_dropout", "sandwich_ln")
NORM_KINDS = ("rmsnorm", "layernorm")
POSITIONAL_KINDS = ("rope", "none")


@dataclass(frozen=True)
class MoeConfig:
    num_experts: int
    moe_layers: tuple[int, ...]  # 1-based layer indices
    top_t: int = 2


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int
    ffn_dim: int
    num_layers: int
    num_heads: int
    head_dim: int
    residual_variant: str = "pre_ln"
    p_res: float = 0.0
    norm_kind: str = "rmsnorm"
    norm_eps: float = 1e-5
    positional: str = "rope"
    rope_theta: float = 10000.0
    bos_token_id: int = 0
    moe: MoeConfig | None = None

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} != num_heads*head_dim "
                f"{self.num_heads}*{self.head_dim}"
            )
        if not 0 <= self.bos_token_id < self.vocab_size:
            raise ConfigError(f"bos_token_id {self.bos_token_id} out of vocab range")
        if self.residual_variant not in RESIDUAL_VARIANTS:
            raise ConfigError(f"unknown residual_variant {self.residual_variant!r}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"unknown norm_kind {self.norm_kind!r}")
        if self.positional not in POSITIONAL_KINDS:
            raise ConfigError(f"unknown positional {self.positional!r}")
        if self.norm_eps <= 0:
            raise ConfigError(f"norm_eps must be > 0, got {self.norm_eps}")
        if not 0.0 <= self.p_res < 1.0:
            raise ConfigError(f"p_res must lie in [0, 1), got {self.p_res}")
        if self.moe is not None:
            if self.moe.num_experts < 2:
                raise ConfigError("MoE needs at least 2 experts")
            if self.moe.top_t != 2:
                raise ConfigError("only top-2 routing is supported")
            bad = [l for l in self.moe.moe_layers if not 1 <= l <= self.num_layers]
            if bad:
                raise ConfigError(f"moe_layers out of [1, {self.num_layers}]: {bad}")

    def is_moe_layer(self, layer: int) -> bool:
        return self.moe is not None and layer in self.moe.moe_layers

    def to_dict(self) -> dict:
        d = {
            "vocab_size": self.vocab_size,
            "hidden_dim": self.hidden_dim,
            "ffn_dim": self.ffn_dim,
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "head_dim": self.head_dim,
            "residual_variant": self.residual_variant,
            "p_res": self.p_res,
            "norm_kind": self.norm_kind,
            "norm_eps": self.norm_eps,
            "positional": self.positional,
            "rope_theta": self.rope_theta,
            "bos_token_id": self.bos_token_id,
        }
        if self.moe is not None:
            d["moe"] = {
                "num_experts": self.moe.num_experts,
                "top_t": self.moe.top_t,
                "moe_layers": sorted(self.moe.moe_layers),
            }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        moe = d.pop("moe", None)
        if moe is not None:
            moe = MoeConfig(
                num_experts=moe["num_experts"],
                moe_layers=tuple(moe["moe_layers"]),
                top_t=moe.get("top_t", 2),
            )
        known = {k: d[k] for k in d if k in cls.__dataclass_fields__}
        return cls(moe=moe, **known)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ParameterStore:
    """Named map tensor-name -> numpy array; the single source of weights."""

    def __init__(self, arrays: dict[str, np.ndarray], dtype: str = "f32"):
        self.dtype = dtype
        npdt = T.np_dtype(dtype)
        self.arrays = {k: np.ascontiguousarray(v, dtype=npdt) for k, v in arrays.items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __setitem__(self, name: str, value: np.ndarray):
        self.arrays[name] = np.ascontiguousarray(value, dtype=T.np_dtype(self.dtype))

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> list[str]:
        return sorted(self.arrays)

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.arrays.items()}, self.dtype)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in self.names():
            h.update(name.encode())
            h.update(self.arrays[name].tobytes())
        return h.hexdigest()


def parameter_names(config: ModelConfig) -> list[str]:
    names = ["embed", "final_norm", "lm_head"]
    for l in range(1, config.num_layers + 1):
        names += [f"layers.{l}.attn.{w}" for w in ("wq", "wk", "wv", "wo")]
        names += [f"layers.{l}.norm_attn", f"layers.{l}.norm_ffn"]
        if config.residual_variant == "sandwich_ln":
            names += [f"layers.{l}.norm_attn_post", f"layers.{l}.norm_ffn_post"]
        if config.is_moe_layer(l):
            names.append(f"layers.{l}.moe.router")
            for e in range(config.moe.num_experts):
                names += [
                    f"layers.{l}.moe.experts.{e}.{w}" for w in ("w_gate", "w_up", "w_down")
                ]
        else:
            names += [f"layers.{l}.ffn.{w}" for w in ("w_gate", "w_up", "w_down")]
    return names


def _param_shape(config: ModelConfig, name: str) -> tuple[int, ...]:
    d, dff, v = config.hidden_dim, config.ffn_dim, config.vocab_size
    if name == "embed":
        return (v, d)
    if name == "lm_head":
        return (d, v)
    if name.endswith(("norm_attn", "norm_ffn", "norm_attn_post", "norm_ffn_post")) or name == "final_norm":
        return (d,)
    if ".attn." in name:
        return (d, d)
    if name.endswith(".moe.router"):
        return (d, config.moe.num_experts)
    if name.endswith(("w_gate", "w_up")):
        return (dff, d)
    if name.endswith("w_down"):
        return (d, dff)
    raise ConfigError(f"unknown parameter name {name!r}")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    return {name: _param_shape(config, name) for name in parameter_names(config)}


def init_params(config: ModelConfig, seed: int, dtype: str = "f32", scale: float = 0.02) -> ParameterStore:
    rng = np.random.default_rng(seed)
    npdt = T.np_dtype(dtype)
    arrays = {}
    for name in parameter_names(config):
        shape = _param_shape(config, name)
        if len(shape) == 1:  # norm gains start at identity
            arrays[name] = np.ones(shape, dtype=npdt)
        else:
            arrays[name] = rng.normal(0.0, scale, size=shape).astype(npdt)
    return ParameterStore(arrays, dtype)


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclass
class LayerCapture:
    h_prev: np.ndarray
    ln1: np.ndarray
    attn_out: np.ndarray
    h_hat: np.ndarray
    ln2: np.ndarray
    ffn_out: np.ndarray
    h: np.ndarray
    inter: np.ndarray | None  # dense layer intermediate [T, d_ff]
    router_probs: np.ndarray | None = None  # MoE: [T, num_experts]
    expert_inter: dict[int, np.ndarray] = field(default_factory=dict)


@dataclass
class ForwardCapture:
    layers: list[LayerCapture]
    attentions: list[np.ndarray]  # per layer [H, T, T], post-softmax


def rope_tables(T_len: int, head_dim: int, theta: float, dtype: str):
    """cos/sin tables with the rotate-half pairing (dim i pairs with i + hd/2)."""
    half = head_dim // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.arange(T_len, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1)
    npdt = T.np_dtype(dtype)
    return cos.astype(npdt), sin.astype(npdt)


class _Leaves:
    """Wraps ParameterStore arrays as graph leaves, reusing training leaves."""

    def __init__(self, params: ParameterStore, train_leaves: dict[str, Tensor] | None):
        self.params = params
        self.train_leaves = train_leaves or {}

    def __call__(self, name: str) -> Tensor:
        leaf = self.train_leaves.get(name)
        if leaf is not None:
            return leaf
        t = Tensor.__new__(Tensor)
        t.data = self.params[name]
        t.dtype = self.params.dtype
        t.requires_grad = False
        t.grad = None
        t._parents = ()
        t._backward = None
        return t


def _norm(x: Tensor, gain: Tensor, config: ModelConfig) -> Tensor:
    if config.norm_kind == "rmsnorm":
        return T.rmsnorm(x, gain, config.norm_eps)
    return T.layernorm(x, gain, config.norm_eps)


def _linear(x: Tensor, name: str, leaves: _Leaves, adapters) -> Tensor:
    """y = x @ W^T for a [out, in] weight, plus an optional low-rank delta."""
    w = leaves(name)
    y = T.matmul(x, T.transpose(w))
    if adapters is not None:
        ad = adapters.get(name)
        if ad is not None:
            a = ad.leaf_a if ad.leaf_a is not None else T.constant(ad.a, x.dtype)
            b = ad.leaf_b if ad.leaf_b is not None else T.constant(ad.b, x.dtype)
            delta = T.matmul(T.matmul(x, T.transpose(a)), T.transpose(b))
            y = T.add(y, T.mul(delta, T.constant(ad.scaling, x.dtype)))
    return y


def _dense_ffn(x: Tensor, prefix: str, leaves: _Leaves, adapters):
    gate = T.silu(_linear(x, f"{prefix}.w_gate", leaves, adapters))
    up = _linear(x, f"{prefix}.w_up", leaves, adapters)
    inter = T.mul(gate, up)
    out = _linear(inter, f"{prefix}.w_down", leaves, adapters)
    return out, inter


def _moe_ffn(x: Tensor, layer: int, config: ModelConfig, leaves: _Leaves, adapters):
    n_exp = config.moe.num_experts
    router = leaves(f"layers.{layer}.moe.router")
    probs = T.softmax_lastdim(T.matmul(x, router))  # [T, E]
    # top-2 per token, ties to the lower expert index (stable sort on -p)
    order = np.argsort(-probs.data, axis=-1, kind="stable")
    top2 = order[:, :2]
    sel = np.zeros_like(probs.data)
    np.put_along_axis(sel, top2, 1.0, axis=-1)
    picked = T.mul(probs, T.constant(sel, x.dtype))
    gate_w = T.mul(picked, T.reciprocal(T.sum_lastdim(picked, keepdims=True)))
    out = None
    expert_inter = {}
    for e in range(n_exp):
        ffn_e, inter_e = _dense_ffn(x, f"layers.{layer}.moe.experts.{e}", leaves, adapters)
        expert_inter[e] = inter_e
        coeff = T.slice_cols(gate_w, e, e + 1)  # [T, 1], broadcasts over d
        term = T.mul(ffn_e, coeff)
        out = term if out is None else T.add(out, term)
    return out, probs, expert_inter


def _attention(x: Tensor, layer: int, config: ModelConfig, leaves: _Leaves, adapters, cos_sin):
    Tn = x.shape[0]
    hd = config.head_dim
    q = _linear(x, f"layers.{layer}.attn.wq", leaves, adapters)
    k = _linear(x, f"layers.{layer}.attn.wk", leaves, adapters)
    v = _linear(x, f"layers.{layer}.attn.wv", leaves, adapters)
    npdt = T.np_dtype(x.dtype)
    mask = np.triu(np.full((Tn, Tn), -1e30, dtype=npdt), k=1)
    mask_t = T.constant(mask, x.dtype)
    inv_sqrt = T.constant(np.asarray(1.0 / np.sqrt(hd), dtype=npdt), x.dtype)
    heads, probs_np = [], []
    for h in range(config.num_heads):
        lo, hi = h * hd, (h + 1) * hd
        qh, kh, vh = (T.slice_cols(t, lo, hi) for t in (q, k, v))
        if cos_sin is not None:
            cos, sin = cos_sin
            qh = T.add(T.mul(qh, cos), T.mul(T.rotate_half(qh), sin))
            kh = T.add(T.mul(kh, cos), T.mul(T.rotate_half(kh), sin))
        scores = T.add(T.mul(T.matmul(qh, T.transpose(kh)), inv_sqrt), mask_t)
        probs = T.softmax_lastdim(scores)
        probs_np.append(probs.data)
        heads.append(T.matmul(probs, vh))
    ctx = heads[0] if len(heads) == 1 else T.concat_cols(heads)
    out = _linear(ctx, f"layers.{layer}.attn.wo", leaves, adapters)
    return out, np.stack(probs_np, axis=0)


def forward(
    config: ModelConfig,
    params: ParameterStore,
    token_ids,
    *,
    adapters=None,
    capture: bool = False,
    training: bool = False,
    dropout_rng: np.random.Generator | None = None,
    train_leaves: dict[str, Tensor] | None = None,
):
    """Full forward pass; returns (logits Tensor [T, V], ForwardCapture | None).

    Dropout on the residual branches only applies when
    `training=True` and the variant is residual_dropout; inference never
    drops. Tracing (`capture=True`) copies states and does not change the
    computation.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise InputError(f"token_ids must be a non-empty 1-D sequence, got shape {ids.shape}")
    bad = np.nonzero((ids < 0) | (ids >= config.vocab_size))[0]
    if bad.size:
        raise InputError(
            f"token id {int(ids[bad[0]])} at position {int(bad[0])} "
            f">= vocab_size {config.vocab_size}"
        )
    leaves = _Leaves(params, train_leaves)
    dtype = params.dtype
    x = T.take_rows(leaves("embed"), ids)
    cos_sin = None
    if config.positional == "rope":
        cos, sin = rope_tables(ids.size, config.head_dim, config.rope_theta, dtype)
        cos_sin = (T.constant(cos, dtype), T.constant(sin, dtype))
    drop_p = config.p_res if (training and config.residual_variant == "residual_dropout") else 0.0
    if drop_p > 0.0 and dropout_rng is None:
        raise ConfigError("residual_dropout training requires a dropout_rng")

    cap = ForwardCapture(layers=[], attentions=[]) if capture else None
    for l in range(1, config.num_layers + 1):
        h_prev = x
        ln1 = _norm(h_prev, leaves(f"layers.{l}.norm_attn"), config)
        attn_out, attn_probs = _attention(ln1, l, config, leaves, adapters, cos_sin)
        attn_branch = _residual_branch(attn_out, f"layers.{l}.norm_attn_post", config, leaves, drop_p, dropout_rng, dtype)
        h_hat = T.add(h_prev, attn_branch)
        ln2 = _norm(h_hat, leaves(f"layers.{l}.norm_ffn"), config)
        if config.is_moe_layer(l):
            ffn_out, router_probs, expert_inter = _moe_ffn(ln2, l, config, leaves, adapters)
            inter = None
        else:
            ffn_out, inter_t = _dense_ffn(ln2, f"layers.{l}.ffn", leaves, adapters)
            inter, router_probs, expert_inter = inter_t, None, {}
        ffn_branch = _residual_branch(ffn_out, f"layers.{l}.norm_ffn_post", config, leaves, drop_p, dropout_rng, dtype)
        h = T.add(h_hat, ffn_branch)
        if not np.all(np.isfinite(h.data)):
            raise NumericFaultError(f"non-finite hidden state at layer {l}", layer=l)
        if capture:
            cap.layers.append(
                LayerCapture(
                    h_prev=h_prev.data.copy(),
                    ln1=ln1.data.copy(),
                    attn_out=attn_branch.data.copy(),
                    h_hat=h_hat.data.copy(),
                    ln2=ln2.data.copy(),
                    ffn_out=ffn_branch.data.copy(),
                    h=h.data.copy(),
                    inter=None if inter is None else inter.data.copy(),
                    router_probs=None if router_probs is None else router_probs.data.copy(),
                    expert_inter={e: t.data.copy() for e, t in expert_inter.items()},
                )
            )
            cap.attentions.append(attn_probs)
        x = h
    final = _norm(x, leaves("final_norm"), config)
    logits = T.matmul(final, leaves("lm_head"))
    if not np.all(np.isfinite(logits.data)):
        raise NumericFaultError("non-finite logits after the final projection", layer=config.num_layers)
    return logits, cap


def _residual_branch(out, post_norm_name, config, leaves, drop_p, dropout_rng, dtype):
    if config.residual_variant == "sandwich_ln":
        return _norm(out, leaves(post_norm_name), config)
    if drop_p > 0.0:
        keep = (dropout_rng.random(out.shape) >= drop_p).astype(T.np_dtype(dtype))
        return T.mul(out, T.constant(keep, dtype))
    return out


def logits_np(config: ModelConfig, params: ParameterStore, token_ids, adapters=None) -> np.ndarray:
    """Inference-mode logits as a plain array."""
    out, _ = forward(config, params, token_ids, adapters=adapters)
    return out.data


# ---------------------------------------------------------------------------
# probe-facing helpers
# ---------------------------------------------------------------------------


def ffn_intermediate(config: ModelConfig, params: ParameterStore, layer: int, x: np.ndarray):
    """Intermediate state SiLU(W_gate x) * (W_up x) for a normalized input.

    Dense layers return an array [..., d_ff]. MoE layers return
    (per-expert {e: array}, router probabilities).
    """
    if not 1 <= layer <= config.num_layers:
        raise InputError(f"layer {layer} out of [1, {config.num_layers}]")
    x = np.asarray(x, dtype=T.np_dtype(params.dtype))
    if x.shape[-1] != config.hidden_dim:
        raise ShapeError(f"input dim {x.shape[-1]} != hidden_dim {config.hidden_dim}")

    def dense(prefix):
        g = x @ params[f"{prefix}.w_gate"].T
        u = x @ params[f"{prefix}.w_up"].T
        return (g / (1.0 + np.exp(-g))) * u

    if config.is_moe_layer(layer):
        probs, _ = moe_route(params[f"layers.{layer}.moe.router"], x)
        inters = {
            e: dense(f"layers.{layer}.moe.experts.{e}") for e in range(config.moe.num_experts)
        }
        return inters, probs
    return dense(f"layers.{layer}.ffn")


def moe_route(router_weights: np.ndarray, x: np.ndarray):
    """Softmax router probabilities and the top-2 expert indices (ties -> lower)."""
    if router_weights.shape[-1] < 2:
        raise ConfigError("moe_route needs at least 2 experts")
    z = np.asarray(x) @ router_weights
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    order = np.argsort(-probs, axis=-1, kind="stable")
    top2 = order[..., :2]
    if probs.ndim == 1:
        return probs, (int(top2[0]), int(top2[1]))
    return probs, top2
