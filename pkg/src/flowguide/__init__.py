"""Training-free motion transfer for flow-matching video models, at toy scale.

A closed-form oracle velocity field over a synthetic moving-shapes dataset
stands in for a pretrained video model, so every part of the guidance loop
can be checked exactly.
"""

from .core import DomainError, NumericError, SeededRng, ShapeError, TimeGrid, lerp_path
from .fields import (CfgField, MlpField, OracleField, VelocityField, cfg_velocity, fm_train_step,
                     oracle_velocity, oracle_velocity_vjp)
from .guidance import (DiffMode, GuidanceConfig, SourceRep, forward_noise, guidance_gradient,
                       guidance_loss, optimize_latent, source_representation)
from .metrics import (appearance_score, centroid_track, diff_field_similarity, motion_fidelity,
                      temporal_consistency, trajectory_rmse)
from .pipeline import (SamplerConfig, TransferJob, ablate, desk_scale_lr, generate_baseline,
                       standard_benchmark, transfer)
from .regularization import RegularizerConfig, average_velocity, decompose, regulated_velocity
from .sampler import DenoiseTrace, euler_step, latent_prediction, sample
from .toy_world import (AppearanceClass, Dataset, Trajectory, build_dataset, load_dataset,
                        render_video, save_dataset)

__version__ = "0.1.0"
