"""Balanced per-environment mini-batch sampling for out-of-distribution generalization.

Modules: :mod:`.data` (manifests, image packs, synthetic environments),
:mod:`.augment`, :mod:`.sampler`, :mod:`.nn` (model, loss, Adam),
:mod:`.metrics` (ROC-AUC), :mod:`.experiment` (training and suites) and
:mod:`.cli`.
"""

__version__ = "0.1.0"
