"""Semantic-layout-guided 3D diffusion for thoracic volumes.

Library surface: noise schedules, the forward/reverse diffusion
operations including anatomically aware sampling (AAS), the 3D U-Net
noise predictor, the training loop, phantom data generation with file
I/O, and the image-quality/segmentation metric suite. The `thoraxgen`
command exposes the end-to-end pipeline.
"""

from .schedule import (NoiseSchedule, build_cosine_schedule,
                       build_linear_schedule, schedule_from_descriptor)
from .data import (Volume, SemanticLayout, MaskPair, PhantomConfig,
                   normalize_intensity, derive_masks, layout_to_channels,
                   conditioning_channel_count,
                   resample_cubic, generate_phantom, save_volume, load_volume,
                   save_layout, load_layout, BACKGROUND, LUNG, NODULE,
                   LUNG_AND_NODULE, NODULE_ONLY)
from .diffusion import (LatentVolume, SamplerConfig, forward_diffuse,
                        reference_diffuse, denoise_step, masked_blend,
                        aas_sample, plain_sample, MODE_AAS, MODE_PLAIN)
from .denoiser import Denoiser, DenoiserConfig, UNet3D, sinusoidal_embedding
from .trainer import (TrainConfig, TrainState, train_step, ema_update, fit,
                      save_checkpoint, load_checkpoint,
                      denoiser_from_checkpoint)
from .metrics import (FeatureVector, Ellipse, masked_mse, extract_features,
                      fid, frechet_distance, mmd, dice, sensitivity,
                      specificity, mds_embed, fit_ellipse, ellipse_overlap,
                      aggregate_folds)

__version__ = "0.1.0"
