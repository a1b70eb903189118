"""Top-k zeroing and top-k retaining attacks on W_gate/W_up.

Zeroing wipes the massive rows; retaining wipes every other row. Both touch
only the two projection matrices at the reported layer (and, for MoE, only
the probed expert). Attacks default to copy-on-write so sweeps compare
against the untouched model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InputError
from .model import ModelConfig, ParameterStore
from .probe import MassiveWeightReport, find_massive_weights

ATTACK_KINDS = ("zeroing", "retaining")


@dataclass
class AttackSpec:
    kind: str
    k: int
    layer: int
    report: MassiveWeightReport
    expert: int | None = None
    in_place: bool = False

    def validate(self, d_ff: int):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if not 0 <= self.k <= d_ff:
            raise InputError(f"k={self.k} out of range [0, {d_ff}]")
        if self.layer != self.report.layer or self.expert != self.report.expert:
            raise ConfigError("attack target does not match the massive-weight report")
        if any(not 0 <= i < d_ff for i in self.report.indices):
            raise InputError("report indices out of the intermediate dimension")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "k": self.k, "layer": self.layer, "expert": self.expert}


def spec_from_report(report: MassiveWeightReport, kind: str, in_place: bool = False) -> AttackSpec:
    return AttackSpec(
        kind=kind,
        k=report.k,
        layer=report.layer,
        expert=report.expert,
        report=report,
        in_place=in_place,
    )


def _target_prefix(spec: AttackSpec) -> str:
    if spec.expert is not None:
        return f"layers.{spec.layer}.moe.experts.{spec.expert}"
    return f"layers.{spec.layer}.ffn"


def apply_attack(params: ParameterStore, spec: AttackSpec) -> ParameterStore:
    prefix = _target_prefix(spec)
    gate_name, up_name = f"{prefix}.w_gate", f"{prefix}.w_up"
    if gate_name not in params or up_name not in params:
        raise ConfigError(f"target layer {spec.layer} has no FFN weights at {prefix!r}")
    spec.validate(params[gate_name].shape[0])
    target = params if spec.in_place else params.copy()
    rows = np.asarray(spec.report.indices[: spec.k], dtype=np.int64)
    if spec.kind == "zeroing":
        target[gate_name][rows, :] = 0.0
        target[up_name][rows, :] = 0.0
    else:  # retaining: zero everything except the massive rows
        keep = np.zeros(target[gate_name].shape[0], dtype=bool)
        keep[rows] = True
        target[gate_name][~keep, :] = 0.0
        target[up_name][~keep, :] = 0.0
    return target


def k_sweep(
    config: ModelConfig,
    params: ParameterStore,
    kind: str,
    k_values,
    eval_fn,
    rule: str = "argmax",
) -> list[dict]:
    """Evaluate eval_fn(config, attacked_params) for each k on a fresh copy.

    Per-row errors are recorded and the sweep continues. k=0 zeroing is the
    untouched baseline (the copy is bitwise identical to `params`).
    """
    k_values = list(k_values)
    k_max = max(max(k_values), 1)
    full_report = find_massive_weights(config, params, k_max, rule=rule)
    rows = []
    for k in k_values:
        # top-k indices are a prefix of the top-k_max sort
        report = MassiveWeightReport(
            layer=full_report.layer,
            expert=full_report.expert,
            k=k,
            indices=full_report.indices[:k],
            magnitudes=full_report.magnitudes[:k],
            selection_rule=full_report.selection_rule,
            config_hash=full_report.config_hash,
        )
        row = {"kind": kind, "k": k}
        try:
            attacked = apply_attack(params, spec_from_report(report, kind))
            row["metric"] = float(eval_fn(config, attacked))
        except Exception as e:  # keep sweeping past per-k failures
            row["error"] = str(e)
        rows.append(row)
    return rows
