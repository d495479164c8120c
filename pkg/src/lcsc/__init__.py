"""Two-layer locality-constrained sparse coding for fine-grained categorization."""

from .codebook import Codebook, LearnerParams, init_dct_codebook, learn_codebook
from .descriptors import DescriptorParams, dense_grid
from .imageio import BoundingBox, RgbImage, load_image
from .llc import EncoderParams, encode_grid, llc_encode
from .pipeline import PipelineConfig, combine_scales, extract_pipeline_features

__version__ = "0.1.0"

__all__ = [
    "BoundingBox",
    "Codebook",
    "DescriptorParams",
    "EncoderParams",
    "LearnerParams",
    "PipelineConfig",
    "RgbImage",
    "combine_scales",
    "dense_grid",
    "encode_grid",
    "extract_pipeline_features",
    "init_dct_codebook",
    "learn_codebook",
    "llc_encode",
    "load_image",
]
