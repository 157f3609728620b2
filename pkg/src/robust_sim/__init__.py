"""Learning single-index models under agnostic label noise."""

from .core import (Dataset, Hypothesis, LearnerConfig, PiecewiseLinearActivation, Sample,
                   angle, eval_activation, l2_loss, misalignment)
from .learner import (CandidateSet, DatasetSource, ScenarioSource, TraceRecord, initialize,
                      learn, optimize, run_inner_loop, select_hypothesis, truncate_label)
from .monotone_fit import (ChainQP, FitResult, brute_fit_oracle, fit_activation,
                           fit_activation_full, solve_chain_qp)
from .surrogate import (GradientReport, activation_integral, surrogate_gradient,
                        surrogate_loss)
from .synth import (MarginalSpec, NoiseModel, ScenarioSpec, TargetModel, estimate_opt,
                    named_activation, read_csv, sample_batch, write_csv)

__version__ = "0.1.0"
