"""Differentially private sequence-to-sequence training at desk scale.

DP-SGD (per-example clipping, calibrated Gaussian noise, RDP accounting)
with interchangeable Poisson-sampling and random-shuffling iteration, a
tiny transformer encoder-decoder on a from-scratch autodiff tape, corpus
ingestion, greedy decoding, and corpus BLEU. Drive it from Python or the
``dpseq`` command line.
"""

from dpseq.autodiff import Tape, Tensor, backward, per_example_grads

__version__ = "0.1.0"

__all__ = ["Tape", "Tensor", "backward", "per_example_grads", "__version__"]
