"""Auditory EEG match-mismatch decoding pipeline.

Subpackages follow the processing chain: storage (on-disk formats), dsp
(band-specific preprocessing), synthgen (forward-model test cohorts), trf
(lagged ridge regression and GFP analysis), decoder (similarity decoder with
exact gradients), training (match-mismatch training loop and ensembles),
composite (LDA fusion), evaluation (tasks, accuracies, confidence intervals),
pipeline (stage orchestration), cli (command-line entry point).
"""

__version__ = "0.1.0"
