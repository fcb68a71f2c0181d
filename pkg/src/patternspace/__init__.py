"""Label-free discovery of frequent objects from small image sets.

Random patches are embedded into a pattern space by a VAE trained with an
objectness-modulated contrastive loss; frequent objects are then extracted by
clustering the pattern vectors of patches sampled at inference time.
"""

from patternspace.dataset import AnnotatedImage, Box, ScaledImage
from patternspace.patches import PatchSpec, SamplerConfig, iou

__all__ = [
    "AnnotatedImage",
    "Box",
    "PatchSpec",
    "SamplerConfig",
    "ScaledImage",
    "iou",
]

__version__ = "0.1.0"
