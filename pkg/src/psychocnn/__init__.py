"""Evaluate image classifiers as psychophysics observers.

Models sweep a morph continuum from sad to happy faces; a cumulative-Gaussian
psychometric function is fitted to their p(happy) and the resulting PSE is
compared with a human baseline.
"""

from .models import ModelSpec, build_model, classify_continuum
from .psychometrics import PsychometricFit, fit_psychometric, pse_of
from .stats import build_table, one_sample_t
from .stimuli import MorphContinuum, apply_mask, load_continuum, synth_continuum

__version__ = "0.1.0"

__all__ = ["ModelSpec", "build_model", "classify_continuum", "PsychometricFit",
           "fit_psychometric", "pse_of", "build_table", "one_sample_t", "MorphContinuum",
           "apply_mask", "load_continuum", "synth_continuum"]
