"""Single-stage unsupervised object localization via image masking.

A frozen patch-feature encoder feeds a tiny trainable 1x1-conv head that is
self-trained against its own edge-refined predictions, with a Siamese masked
branch for context supervision.
"""

__version__ = "0.1.0"
