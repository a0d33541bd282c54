"""MatchingGAN: few-shot image generation by matching-based feature fusion."""
from .config import TrainConfig, load_config
from .data import CategorySplit, DatasetManifest, ImageStore, build_manifest, split_categories
from .discriminator import DiscriminatorConfig, MatchingDiscriminator
from .errors import MatchingGANError
from .generator import GeneratorConfig, MatchingGenerator

__version__ = "0.1.0"

__all__ = [
    "CategorySplit",
    "DatasetManifest",
    "DiscriminatorConfig",
    "GeneratorConfig",
    "ImageStore",
    "MatchingDiscriminator",
    "MatchingGANError",
    "MatchingGenerator",
    "TrainConfig",
    "build_manifest",
    "load_config",
    "split_categories",
]
