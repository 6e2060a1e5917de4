from .augment import AugmentPipeline, VectorJitter, augment
from .dataset import Dataset, first_n_per_class, load_dataset, save_dataset
from .formats import load_cifar_binary, load_idx
from .multiview import VIEW_SETS, MultiviewBatch, build_multiview
from .synthetic import Certificate, InfeasibleSpecError, SyntheticSpec, gaussian_mixture, gen_synthetic

__all__ = [
    "AugmentPipeline",
    "VectorJitter",
    "augment",
    "Dataset",
    "first_n_per_class",
    "load_dataset",
    "save_dataset",
    "load_cifar_binary",
    "load_idx",
    "VIEW_SETS",
    "MultiviewBatch",
    "build_multiview",
    "Certificate",
    "InfeasibleSpecError",
    "SyntheticSpec",
    "gaussian_mixture",
    "gen_synthetic",
]
