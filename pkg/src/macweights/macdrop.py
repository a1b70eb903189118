"""Curriculum weight dropout on pre-trained massive rows + LoRA fine-tuning.

Each training step: evaluate the curriculum probability p, sample ONE 0/1
mask of shape [k, d], multiply it into the k massive rows of both W_gate and
W_up (shared mask, no 1/(1-p) rescaling), run the LoRA update with base
weights frozen, then restore the massive rows bitwise from saved copies.
After any run the base parameter store is bitwise identical to the loaded
checkpoint.

Curriculum schedules:
  step:         p = p0 * (1 - t/T_step)
  epoch_before: p = p0 * (1 - (e-1)/T_epoch)   (nonzero at the final epoch)
  epoch_after:  p = p0 * (1 - e/T_epoch)
  exp:          p = p0 * exp(-alpha * t)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, InputError, NumericFaultError, ShapeError
from .model import ModelConfig, ParameterStore, forward, param_shapes
from .probe import MassiveWeightReport, find_massive_weights
from .tensor import Tensor

SCHEDULE_KINDS = ("step", "epoch_before", "epoch_after", "exp")


@dataclass
class CurriculumSchedule:
    kind: str
    p0: float
    alpha: float = 0.01
    t_total: int | None = None  # T_step
    n_epochs: int | None = None  # T_epoch

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not 0.0 <= self.p0 <= 1.0:
            raise ConfigError(f"p0 must lie in [0, 1], got {self.p0}")
        if self.kind == "exp" and self.alpha <= 0:
            raise ConfigError(f"exp schedule needs alpha > 0, got {self.alpha}")


def schedule_eval(schedule: CurriculumSchedule, t: int, e: int = 1) -> float:
    """Closed-form dropout probability at step t (epoch e), clamped to [0, 1]."""
    kind = schedule.kind
    if kind in ("step", "exp"):
        if t < 0 or (schedule.t_total is not None and t > schedule.t_total):
            raise InputError(f"step counter {t} out of [0, {schedule.t_total}]")
    if kind in ("epoch_before", "epoch_after"):
        if schedule.n_epochs is None:
            raise ConfigError("epoch schedules need n_epochs")
        if not 1 <= e <= schedule.n_epochs:
            raise InputError(f"epoch counter {e} out of [1, {schedule.n_epochs}]")
    if kind == "step":
        if schedule.t_total is None:
            raise ConfigError("step schedule needs t_total")
        p = schedule.p0 * (1.0 - t / schedule.t_total)
    elif kind == "epoch_before":
        p = schedule.p0 * (1.0 - (e - 1) / schedule.n_epochs)
    elif kind == "epoch_after":
        p = schedule.p0 * (1.0 - e / schedule.n_epochs)
    else:  # exp
        p = schedule.p0 * math.exp(-schedule.alpha * t)
    return min(max(p, 0.0), 1.0)


# ---------------------------------------------------------------------------
# LoRA adapters
# ---------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    a: np.ndarray  # [r, in]
    b: np.ndarray  # [out, r]
    rank: int
    alpha: float
    leaf_a: Tensor | None = None
    leaf_b: Tensor | None = None

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


class LoraAdapterSet(dict):
    """name -> LoraAdapter for every linear weight except embed/lm_head/router."""

    @staticmethod
    def target_names(config: ModelConfig) -> list[str]:
        names = []
        for name, shape in param_shapes(config).items():
            if len(shape) != 2 or name in ("embed", "lm_head") or name.endswith(".moe.router"):
                continue
            names.append(name)
        return names

    @classmethod
    def init(cls, config: ModelConfig, rank: int = 16, alpha: float = 16.0, seed: int = 0,
             dtype: str = "f32", init_scale: float = 0.02) -> "LoraAdapterSet":
        rng = np.random.default_rng([seed, 0xA])
        npdt = T.np_dtype(dtype)
        shapes = param_shapes(config)
        out = cls()
        for name in cls.target_names(config):
            n_out, n_in = shapes[name]
            out[name] = LoraAdapter(
                a=rng.normal(0.0, init_scale, size=(rank, n_in)).astype(npdt),
                b=np.zeros((n_out, rank), dtype=npdt),
                rank=rank,
                alpha=alpha,
            )
        return out

    def make_leaves(self, dtype: str) -> dict[str, Tensor]:
        """Fresh requires_grad leaves over the current arrays, keyed for Adam."""
        leaves = {}
        for name, ad in self.items():
            ad.leaf_a = Tensor(ad.a, dtype=dtype, requires_grad=True)
            ad.leaf_b = Tensor(ad.b, dtype=dtype, requires_grad=True)
            leaves[f"{name}.lora_a"] = ad.leaf_a
            leaves[f"{name}.lora_b"] = ad.leaf_b
        return leaves

    def absorb_leaves(self):
        for ad in self.values():
            ad.a = ad.leaf_a.data
            ad.b = ad.leaf_b.data
            ad.leaf_a = ad.leaf_b = None


def merge_adapters(params: ParameterStore, adapters: LoraAdapterSet) -> ParameterStore:
    """W' = W + (alpha/r) * B @ A on a copy of the store."""
    merged = params.copy()
    for name, ad in adapters.items():
        w = merged[name]
        if ad.b.shape[0] != w.shape[0] or ad.a.shape[1] != w.shape[1]:
            raise ShapeError(
                f"adapter for {name!r} has shapes A{ad.a.shape} B{ad.b.shape}, weight is {w.shape}"
            )
        w += (ad.scaling * (ad.b @ ad.a)).astype(w.dtype)
    return merged


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, leaves: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.leaves = leaves
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(t.data) for k, t in leaves.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in leaves.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float | None = None):
        self.t += 1
        lr = self.lr if lr is None else lr
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1**self.t
        corr2 = 1.0 - b2**self.t
        for name in sorted(self.leaves):
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / corr1
            vhat = self.v[name] / corr2
            leaf = self.leaves[name]
            leaf.data = leaf.data - (lr * mhat / (np.sqrt(vhat) + self.eps)).astype(leaf.data.dtype)


# ---------------------------------------------------------------------------
# MacDrop state and step
# ---------------------------------------------------------------------------


@dataclass
class MacDropState:
    report: MassiveWeightReport
    gate_name: str
    up_name: str
    saved_gate: np.ndarray  # [k, d] bitwise copies of the pre-trained rows
    saved_up: np.ndarray
    mask: np.ndarray | None = None
    t: int = 0
    e: int = 1

    @classmethod
    def from_report(cls, params: ParameterStore, report: MassiveWeightReport) -> "MacDropState":
        if report.expert is not None:
            prefix = f"layers.{report.layer}.moe.experts.{report.expert}"
        else:
            prefix = f"layers.{report.layer}.ffn"
        rows = np.asarray(report.indices, dtype=np.int64)
        return cls(
            report=report,
            gate_name=f"{prefix}.w_gate",
            up_name=f"{prefix}.w_up",
            saved_gate=params[f"{prefix}.w_gate"][rows, :].copy(),
            saved_up=params[f"{prefix}.w_up"][rows, :].copy(),
        )


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_ratio: float = 0.05
    epochs: int = 3
    batch_size: int = 4
    seed: int = 0
    k: int = 5
    p0: float = 0.8
    schedule_kind: str = "step"
    alpha: float = 0.01
    lora_rank: int = 16
    lora_alpha: float = 16.0
    chunk_len: int = 256
    rescale_mask: bool = False  # 1/(1-p) inverted-dropout variant, off by default
    per_row_mask: bool = False  # one mask bit per row instead of per element


def _batch_loss(config, params, adapters, batch, train_leaves):
    total = None
    for seq in batch:
        logits, _ = forward(config, params, seq[:-1], adapters=adapters, train_leaves=train_leaves)
        loss = T.cross_entropy_mean(logits, seq[1:])
        total = loss if total is None else T.add(total, loss)
    return T.mul(total, T.constant(1.0 / len(batch), total.dtype))


def macdrop_step(
    config: ModelConfig,
    params: ParameterStore,
    adapters: LoraAdapterSet,
    state: MacDropState,
    p: float,
    batch,
    optimizer: Adam,
    leaves: dict[str, Tensor],
    mask_rng: np.random.Generator,
    lr: float,
    *,
    rescale: bool = False,
    per_row: bool = False,
) -> float:
    """One fine-tuning step with masked massive rows; returns the loss."""
    k, d = state.saved_gate.shape
    npdt = T.np_dtype(params.dtype)
    shape = (k, 1) if per_row else (k, d)
    mask = (mask_rng.random(shape) > p).astype(npdt)
    if per_row:
        mask = np.broadcast_to(mask, (k, d)).copy()
    if rescale and p < 1.0:
        mask = mask / npdt(1.0 - p)
    state.mask = mask
    rows = np.asarray(state.report.indices, dtype=np.int64)
    gate, up = params[state.gate_name], params[state.up_name]
    try:
        gate[rows, :] = state.saved_gate * mask
        up[rows, :] = state.saved_up * mask
        loss = _batch_loss(config, params, adapters, batch, None)
        if not np.isfinite(loss.data):
            raise NumericFaultError(f"non-finite loss at step {state.t + 1}", step=state.t + 1)
        grads = T.backward(loss, leaves)
        optimizer.step(grads, lr=lr)
    finally:
        # pre-trained massive weights rollback, bitwise
        gate[rows, :] = state.saved_gate
        up[rows, :] = state.saved_up
    state.t += 1
    return float(loss.data)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def chunk_stream(stream, chunk_len: int) -> list[np.ndarray]:
    """Pack a token stream into [chunk_len + 1] sequences (input/target pairs)."""
    ids = np.asarray(stream, dtype=np.int64)
    step = chunk_len + 1
    n = ids.size // step
    if n == 0:
        raise InputError(f"stream of {ids.size} tokens is shorter than one chunk of {step}")
    return [ids[i * step : (i + 1) * step] for i in range(n)]


def validation_loss(config, params, adapters, chunks) -> float:
    total = 0.0
    for seq in chunks:
        logits, _ = forward(config, params, seq[:-1], adapters=adapters)
        total += float(T.cross_entropy_mean(logits, seq[1:]).data)
    return total / len(chunks)


def finetune(
    config: ModelConfig,
    params: ParameterStore,
    train_stream,
    val_stream,
    train_config: TrainConfig,
    schedule: CurriculumSchedule | None = None,
    use_macdrop: bool = True,
    report: MassiveWeightReport | None = None,
):
    """LoRA fine-tuning with optional MacDrop; returns (adapters, metrics).

    metrics = {"steps": [{step, epoch, p, loss}...], "val_per_epoch": [...],
    "initial_val": float, "final_val": float}. Deterministic under the seed:
    mask sampling uses its own RNG stream so toggling MacDrop leaves the
    batch order untouched.
    """
    tc = train_config
    train_chunks = chunk_stream(train_stream, tc.chunk_len)
    val_chunks = chunk_stream(val_stream, tc.chunk_len)
    steps_per_epoch = math.ceil(len(train_chunks) / tc.batch_size)
    t_total = tc.epochs * steps_per_epoch
    if schedule is None:
        schedule = CurriculumSchedule(
            kind=tc.schedule_kind, p0=tc.p0, alpha=tc.alpha, t_total=t_total, n_epochs=tc.epochs
        )
    else:
        if schedule.t_total is None:
            schedule.t_total = t_total
        if schedule.n_epochs is None:
            schedule.n_epochs = tc.epochs

    state = None
    if use_macdrop:
        if report is None:
            report = find_massive_weights(config, params, tc.k)
        state = MacDropState.from_report(params, report)

    adapters = LoraAdapterSet.init(
        config, rank=tc.lora_rank, alpha=tc.lora_alpha, seed=tc.seed, dtype=params.dtype
    )
    leaves = adapters.make_leaves(params.dtype)
    optimizer = Adam(leaves, lr=tc.lr, beta1=tc.beta1, beta2=tc.beta2)
    data_rng = np.random.default_rng([tc.seed, 1])
    mask_rng = np.random.default_rng([tc.seed, 2])
    warmup = math.ceil(tc.warmup_ratio * t_total)

    metrics = {"steps": [], "val_per_epoch": []}
    metrics["initial_val"] = validation_loss(config, params, adapters, val_chunks)
    t = 0
    for epoch in range(1, tc.epochs + 1):
        order = data_rng.permutation(len(train_chunks))
        for b in range(steps_per_epoch):
            t += 1
            batch = [train_chunks[i] for i in order[b * tc.batch_size : (b + 1) * tc.batch_size]]
            lr = tc.lr * (t / warmup) if (warmup > 0 and t <= warmup) else tc.lr
            if use_macdrop:
                p = schedule_eval(schedule, t, epoch)
                state.e = epoch
                loss = macdrop_step(
                    config, params, adapters, state, p, batch, optimizer, leaves, mask_rng, lr,
                    rescale=tc.rescale_mask, per_row=tc.per_row_mask,
                )
            else:
                p = 0.0
                loss_t = _batch_loss(config, params, adapters, batch, None)
                if not np.isfinite(loss_t.data):
                    raise NumericFaultError(f"non-finite loss at step {t}", step=t)
                grads = T.backward(loss_t, leaves)
                optimizer.step(grads, lr=lr)
                loss = float(loss_t.data)
            metrics["steps"].append({"step": t, "epoch": epoch, "p": p, "loss": loss})
        metrics["val_per_epoch"].append(validation_loss(config, params, adapters, val_chunks))
    metrics["final_val"] = metrics["val_per_epoch"][-1]
    adapters.absorb_leaves()
    return adapters, metrics


def pretrain(
    config: ModelConfig,
    params: ParameterStore,
    stream,
    steps: int,
    lr: float = 3e-3,
    batch_size: int = 4,
    chunk_len: int = 64,
    seed: int = 0,
) -> list[float]:
    """Train all base weights in place (toy-scale corpus bootstrap)."""
    chunks = chunk_stream(stream, chunk_len)
    rng = np.random.default_rng([seed, 3])
    leaves = {
        name: Tensor(params[name], dtype=params.dtype, requires_grad=True)
        for name in params.names()
    }
    optimizer = Adam(leaves, lr=lr)
    losses = []
    for t in range(steps):
        batch = [chunks[i] for i in rng.integers(0, len(chunks), size=batch_size)]
        loss = _batch_loss(config, params, None, batch, leaves)
        grads = T.backward(loss, leaves)
        optimizer.step(grads)
        for name, leaf in leaves.items():
            params.arrays[name] = leaf.data
        losses.append(float(loss.data))
    return losses
