"""macweights: locate, attack, and protect massive weights in gated-FFN
transformers, with a bos-token probe and curriculum weight-dropout
fine-tuning at toy scale."""

from .attack import AttackSpec, apply_attack, k_sweep, spec_from_report
from .checkpoint import load_checkpoint, load_token_stream, save_checkpoint, save_token_stream
from .evaluation import EvalReport, McItem, mc_accuracy, perplexity
from .macdrop import (
    CurriculumSchedule,
    LoraAdapterSet,
    MacDropState,
    TrainConfig,
    finetune,
    merge_adapters,
    pretrain,
    schedule_eval,
)
from .model import ModelConfig, MoeConfig, ParameterStore, ffn_intermediate, forward, init_params, moe_route
from .probe import (
    MassiveWeightReport,
    find_massive_layer,
    find_massive_weights,
    massive_weight_count,
    router_profile,
)
from .trace import MagnitudeProfile, StateTrace, attention_sink_fraction, magnitude_profile, trace_forward

__version__ = "0.1.0"
