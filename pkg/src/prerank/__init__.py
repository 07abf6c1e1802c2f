"""Pre-ranking distillation toolkit.

End-to-end pipeline for training lightweight pre-ranking models against a
heavyweight ranking teacher: synthetic cascade corpus generation, feature
discretization, pairwise sample construction, siamese DeepFM training with a
blended pairwise/pointwise loss, polarization-gate pruning with structural
shrinking, and recall/efficiency evaluation against a linear baseline.
"""

__version__ = "0.1.0"
