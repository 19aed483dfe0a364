"""Variational Shape Learner: a hierarchical latent-variable generative model
of voxelized 3D shapes, with training, evaluation, and latent-space tools."""

from .errors import (ConfigError, DataError, MeshParseError, NumericalAbort,
                     ShapeError, VoxelFormatError)
from .latent_hierarchy import (GaussianParams, HierarchyConfig, LatentState,
                               PosteriorChain, PriorChain, reparameterize,
                               sample_generative, split_latent)
from .model import ModelConfig, VSLModel
from .objective import (ObjectiveBreakdown, ObjectiveConfig,
                        kl_diag_gaussians, kl_to_standard_normal,
                        latent_term, reconstruction_term, total_objective,
                        warmup_gamma)
from .trainer import OptimizerState, TrainConfig, adam_step, train
from .voxel_io import (DatasetManifest, ImageSample, ManifestEntry, Sample,
                       TriangleMesh, VoxelGrid, load_dataset, load_voxel_file,
                       parse_off, prepare_image, read_binvox, read_voxel,
                       save_voxel_file, voxelize, write_voxel)

__version__ = "0.1.0"
