"""Bidirectional unit-to-unit translation with a reversible conformer
stack and twin denoising diffusion processes, on a numpy tensor engine.

The same parameter set serves four maps: a forward and a reverse
transducer (exact inverses of each other at the representation level),
and the two conditional denoisers trained on top of them.
"""

from .blocks import Mode, RdcConfig, SplitState, palindrome_trace
from .data import ParallelPair, generate_corpus, load_jsonl, save_jsonl, split_corpus
from .decoding import (Hypothesis, corpus_bleu, ctc_beam, ctc_greedy,
                       evaluate_translation, roundtrip_eval, unit_bleu)
from .diffusion import (DiffusionSchedule, ancestral_sample, build_schedule,
                        ddm_train_step, denoise, posterior_step, preset, q_sample)
from .errors import (CheckpointError, ConfigError, DataError, DplxError,
                     FormatError, InfeasibleAlignmentError, RankError,
                     ShapeError, StepError, TrainingDivergedError)
from .losses import (LossWeights, cc_loss, composite_loss, ctc_loss, fba_loss,
                     mse_loss, required_frames)
from .model import (DuplexModel, ModelConfig, build_model,
                    parameter_count_formula, translate)
from .rng import RngHub
from .tensor import Tensor, backward, no_grad, parameter, use_dtype
from .tensorfile import load_tensors, save_tensors
from .training import (Adam, TrainConfig, load_checkpoint, run_stage,
                       save_checkpoint, train)

__version__ = "0.1.0"

__all__ = [
    "Adam", "CheckpointError", "ConfigError", "DataError", "DiffusionSchedule",
    "DplxError", "DuplexModel", "FormatError", "Hypothesis",
    "InfeasibleAlignmentError", "LossWeights", "Mode", "ModelConfig",
    "ParallelPair", "RankError", "RdcConfig", "RngHub", "ShapeError",
    "SplitState", "StepError", "Tensor", "TrainConfig",
    "TrainingDivergedError", "ancestral_sample", "backward", "build_model",
    "build_schedule", "cc_loss", "composite_loss", "corpus_bleu", "ctc_beam",
    "ctc_greedy", "ctc_loss", "ddm_train_step", "denoise",
    "evaluate_translation", "fba_loss", "generate_corpus", "load_checkpoint",
    "load_jsonl", "load_tensors", "mse_loss", "no_grad",
    "palindrome_trace", "parameter", "parameter_count_formula",
    "posterior_step", "preset", "q_sample", "required_frames",
    "roundtrip_eval", "run_stage", "save_checkpoint", "save_jsonl",
    "save_tensors", "split_corpus", "train", "translate", "unit_bleu",
    "use_dtype",
]
