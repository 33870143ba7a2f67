"""confmatch: confidence-guided attention matching on synthetic homography pairs."""

from .config import AblationFlags, RunConfig
from .evaluate import generate_corpus, mma, run_benchmark
from .features import Image
from .geometry import Homography
from .matching import MatchSet, PipelineWeights, match_pair, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AblationFlags",
    "Homography",
    "Image",
    "MatchSet",
    "PipelineWeights",
    "RunConfig",
    "generate_corpus",
    "match_pair",
    "mma",
    "run_benchmark",
    "run_pipeline",
    "__version__",
]
