"""Perplexity over token streams and multiple-choice log-likelihood accuracy.

Perplexity uses a sliding window: within each window only the tokens not
already scored by a previous window contribute, so every token is scored
exactly once. With a window covering the whole stream this reduces to the
single-pass full-context NLL.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .model import ModelConfig, ParameterStore, logits_np


@dataclass
class EvalReport:
    dataset: str
    metric_kind: str  # "perplexity" | "mc_accuracy"
    value: float
    count: int  # scored tokens / scored items
    window: int | None = None
    stride: int | None = None
    skipped: int = 0

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "metric_kind": self.metric_kind,
            "value": self.value,
            "count": self.count,
            "window": self.window,
            "stride": self.stride,
            "skipped": self.skipped,
        }


@dataclass
class McItem:
    context: list[int]
    options: list[list[int]]  # per-option continuation ids
    gold: int

    def validate(self):
        if len(self.context) < 1:
            raise InputError("mc item needs a non-empty context")
        if len(self.options) < 2:
            raise InputError("mc item needs at least 2 options")
        if not 0 <= self.gold < len(self.options):
            raise InputError(f"gold index {self.gold} out of range")


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64) - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def perplexity_from_logits_fn(logits_fn, stream, window: int, stride: int, dataset: str = "") -> EvalReport:
    ids = np.asarray(stream, dtype=np.int64)
    n = ids.size
    if n < 2:
        raise InputError(f"stream of {n} tokens is too short to score")
    if window < 2:
        raise InputError(f"window must be >= 2, got {window}")
    if not 1 <= stride <= window:
        raise InputError(f"stride must lie in [1, window], got {stride}")
    nll, count = 0.0, 0
    prev_end = 0
    for begin in range(0, n - 1, stride):
        end = min(begin + window, n)
        trg_start = max(prev_end, begin + 1)
        if trg_start < end:
            logp = _log_softmax(logits_fn(ids[begin:end]))
            for t in range(trg_start, end):
                nll -= logp[t - begin - 1, ids[t]]
                count += 1
            prev_end = end
        if end == n:
            break
    return EvalReport(
        dataset=dataset,
        metric_kind="perplexity",
        value=float(math.exp(nll / count)),
        count=count,
        window=window,
        stride=stride,
    )


def perplexity(
    config: ModelConfig,
    params: ParameterStore,
    stream,
    window: int = 1024,
    stride: int = 512,
    dataset: str = "",
) -> EvalReport:
    return perplexity_from_logits_fn(
        lambda ids: logits_np(config, params, ids), stream, window, stride, dataset
    )


def mc_accuracy_from_logits_fn(logits_fn, items, normalization: str = "sum", dataset: str = "") -> EvalReport:
    if normalization not in ("sum", "per_token"):
        raise InputError(f"unknown normalization {normalization!r}")
    items = list(items)
    if not items:
        raise InputError("no multiple-choice items to score")
    correct, scored, skipped = 0, 0, 0
    for item in items:
        item.validate()
        if any(len(opt) == 0 for opt in item.options):
            skipped += 1
            continue
        scores = []
        for opt in item.options:
            full = list(item.context) + list(opt)
            logp = _log_softmax(logits_fn(np.asarray(full[:-1], dtype=np.int64)))
            start = len(item.context) - 1  # row predicting the first option token
            ll = sum(logp[start + j, opt[j]] for j in range(len(opt)))
            scores.append(ll / len(opt) if normalization == "per_token" else ll)
        pred = int(np.argmax(scores))  # ties -> lowest index
        correct += int(pred == item.gold)
        scored += 1
    if scored == 0:
        raise InputError("every item was skipped (empty option continuations)")
    return EvalReport(
        dataset=dataset,
        metric_kind="mc_accuracy",
        value=correct / scored,
        count=scored,
        skipped=skipped,
    )


def mc_accuracy(
    config: ModelConfig,
    params: ParameterStore,
    items,
    normalization: str = "sum",
    dataset: str = "",
) -> EvalReport:
    return mc_accuracy_from_logits_fn(
        lambda ids: logits_np(config, params, ids), items, normalization, dataset
    )
