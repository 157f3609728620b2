"""Probes, experiment runner and CLI."""

from .experiment import (ConfigError, ExperimentConfig, ProbeSpec, load_config,
                         run_experiment)
from .probes import (ProbeResult, probe_contraction, probe_misalignment, probe_sharpness,
                     repro_example)

__all__ = ["ConfigError", "ExperimentConfig", "ProbeSpec", "load_config", "run_experiment",
           "ProbeResult", "probe_contraction", "probe_misalignment", "probe_sharpness",
           "repro_example"]
