"""Dataset watermarking toolkit for contrastive learning.

Embeds data-poisoning-style watermark triggers into unlabeled image
datasets and verifies dataset ownership against black-box suspect models
via the density statistic delta = S' - S at feature, soft-label, and
hard-label levels.
"""

from clmark.imagecore import ImageTensor, DctBlockPlan
from clmark.verify import OutputBatch, VerifyConfig, VerificationReport

__version__ = "0.1.0"

__all__ = [
    "ImageTensor",
    "DctBlockPlan",
    "OutputBatch",
    "VerifyConfig",
    "VerificationReport",
]
