"""Codebook-conditioned fast inference for toy decoder transformers.

A learnable prototype codebook produces a fixed set of thinking-token
vectors that are injected mid-stack into a small decoder; a two-stage
procedure (pooled-state alignment, then supervised fine-tuning under a
freeze plan) trains the codebook and per-layer low-rank adapters; a
lightweight gate escalates from the single-pass fast mode to explicit
derivation decoding only when the predicted gain warrants the tokens.
"""

from .backbone import (AdapterConfig, Backbone, BackboneConfig, DecodeResult,
                       FastThinker, FreezePlan, LowRankAdapter, apply_adapter,
                       forward_with_injection, freeze_plan, greedy_decode, lm_loss,
                       pool_span)
from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .codebook import (ActivationStats, CodebookParams, RefinerParams, ThinkingTokens,
                       activation_stats, attend, global_prototype_order, refine)
from .config import RunConfig, config_digest, dump_config, load_config
from .datapipe import (BuildReport, Hint, HintFailure, HintRecord, Problem,
                       RemoteTeacher, ScriptedTeacher, SyntheticTeacher, VerifyResult,
                       build_dataset, build_hint, canonical_label, leak_check,
                       make_teacher, verify)
from .evaluate import (EvalReport, ExampleOutcome, build_routing_dataset, evaluate,
                       policy_report, random_escalation_flags)
from .pipeline import PipelineResult, run_full_pipeline
from .report import collect_activation_data, emit_report, write_routing_records
from .router import (RouterFeatures, RouterParams, RouterTrainConfig, RoutingDecision,
                     RoutingExample, adaptive_threshold, decide, extract_features,
                     make_label, router_loss, train_router)
from .synth import SyntheticTask, VOCAB, Vocab, generate_synthetic
from .training import (AlignmentBatch, MetricsLogger, Stage1Config, Stage2Config,
                       Stage2Example, alignment_loss, finite_diff_audit, run_stage1,
                       run_stage2, stage1_step, stage2_step, train_lm)

__all__ = [name for name in dir() if not name.startswith("_")]
