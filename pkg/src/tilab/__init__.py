"""Transitive inference in small attention-only transformers.

In-weights and in-context training regimes, behavioral evaluation over all
item pairs, induction/ablation/PCA analyses and a prompt-probe harness for
language models.
"""
from .estimator import AttentionOnlyTransformer
from .evaluation import EvalReport, EffectStats, distance_curve, effect_stats, evaluate_all_pairs
from .model import ArchConfig, ModelParams, batched_forward, forward, init_params
from .numerics import PCA, make_rng, spawn_rng
from .taskgen import EpisodeSampler, Hierarchy, encode_batch, encode_episode, sample_hierarchy
from .train import RegimeConfig, TrainingRun, run_training, transfer_eval_setup

__version__ = "0.1.0"
