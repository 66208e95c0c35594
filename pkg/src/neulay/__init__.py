"""neulay: neural-layout conditioned image synthesis at desk scale."""

__version__ = "0.1.0"

from . import diffusion, evaluation, features, layout, pca, pipeline, scenes
from .errors import NeulayError

__all__ = [
    "diffusion",
    "evaluation",
    "features",
    "layout",
    "pca",
    "pipeline",
    "scenes",
    "NeulayError",
    "__version__",
]
