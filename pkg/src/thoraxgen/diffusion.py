"""Forward diffusion and the two reverse sampling loops.

The guided loop ("aas" mode, anatomically aware sampling) denoises the
lung region under layout conditioning while re-noising a real reference
volume to the matching step and blending the two through the
extra-pulmonary mask. The plain loop ("plain" mode) is ordinary ancestral
DDPM sampling with layout conditioning only.

All randomness flows through named substreams keyed by
(seed, "sample", sample_id, step, purpose), so parallel sampling is
reproducible and a fresh reference-noising draw is taken at every step.
"""

from dataclasses import dataclass

import numpy as np

from .data import (SemanticLayout, Volume, derive_masks, layout_to_channels,
                   LUNG_AND_NODULE)
from .errors import (ConfigurationError, DimensionError, MaskDomainError,
                     NumericHealthError)
from .rng import substream
from .schedule import NoiseSchedule

MODE_AAS = "aas"
MODE_PLAIN = "plain"
SAMPLER_MODES = (MODE_AAS, MODE_PLAIN)


@dataclass
class LatentVolume:
    values: np.ndarray   # (D, H, W), diffusion-space intensities
    t: int               # time index, 0 = clean

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DimensionError(f"latent must be 3D, got {self.values.shape}")
        if self.t < 0:
            raise ConfigurationError(f"latent time index must be >= 0, got {self.t}")


@dataclass
class SamplerConfig:
    mode: str = MODE_AAS
    conditioning: str = LUNG_AND_NODULE
    use_ema_weights: bool = True
    seed: int = 0
    sample_id: int = 0

    def __post_init__(self):
        if self.mode not in SAMPLER_MODES:
            raise ConfigurationError(f"unknown sampler mode {self.mode!r}")


def _check_shapes(a: np.ndarray, b: np.ndarray, what: str):
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {a.shape} != {b.shape}")


def forward_diffuse(x0, t: int, eps: np.ndarray,
                    schedule: NoiseSchedule) -> LatentVolume:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    values = x0.values if isinstance(x0, Volume) else np.asarray(x0)
    eps = np.asarray(eps)
    _check_shapes(values, eps, "forward_diffuse")
    if not 0 <= t <= schedule.T:
        raise ConfigurationError(f"t={t} outside 0..{schedule.T}")
    abar = schedule.alpha_bar(t)
    out = np.sqrt(abar) * values.astype(np.float64) + np.sqrt(1.0 - abar) * eps
    return LatentVolume(out.astype(np.float32), t)


def reference_diffuse(x_ref, t_minus_1: int, eps: np.ndarray,
                      schedule: NoiseSchedule) -> LatentVolume:
    """Noise the reference volume to step t-1; exact copy when t-1 == 0."""
    lat = forward_diffuse(x_ref, t_minus_1, eps, schedule)
    if t_minus_1 == 0:
        # abar_0 == 1: guarantee bit-exactness rather than sqrt(1)*x rounding.
        values = x_ref.values if isinstance(x_ref, Volume) else np.asarray(x_ref)
        lat = LatentVolume(values.astype(np.float32), 0)
    return lat


def denoise_step(x_t: LatentVolume, cond_channels: np.ndarray, t: int,
                 denoiser, schedule: NoiseSchedule,
                 z: np.ndarray | None) -> LatentVolume:
    """One conditional ancestral step: x_{t-1} from x_t.

    x_{t-1} = (x_t - ((1-alpha_t)/sqrt(1-abar_t)) * eps_theta) / sqrt(alpha_t)
              + sigma_t * z
    z must be all-zeros (or None) at t == 1.
    """
    if t < 1:
        raise ConfigurationError(f"denoise step needs t >= 1, got t={t}")
    if t > schedule.T:
        raise ConfigurationError(f"t={t} exceeds schedule T={schedule.T}")
    cond_channels = np.asarray(cond_channels, dtype=np.float32)
    if cond_channels.ndim != 4:
        raise DimensionError(
            f"conditioning must be (C, D, H, W), got {cond_channels.shape}")
    _check_shapes(x_t.values, cond_channels[0], "denoise_step conditioning")

    inp = np.concatenate([x_t.values[None], cond_channels], axis=0)
    eps_pred = np.asarray(denoiser.predict(inp, t), dtype=np.float64)
    _check_shapes(x_t.values, eps_pred, "denoiser output")

    alpha = schedule.alpha(t)
    abar = schedule.alpha_bar(t)
    mean = (x_t.values.astype(np.float64)
            - ((1.0 - alpha) / np.sqrt(1.0 - abar)) * eps_pred) / np.sqrt(alpha)
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
        _check_shapes(x_t.values, z, "denoise_step noise")
        mean = mean + schedule.sigma(t) * z
    return LatentVolume(mean.astype(np.float32), t - 1)


def masked_blend(x_lung: LatentVolume, x_extra: LatentVolume,
                 m_extra: np.ndarray) -> LatentVolume:
    """(1 - m_e) * x_lung + m_e * x_extra, elementwise over a binary mask."""
    m = np.asarray(m_extra)
    _check_shapes(x_lung.values, x_extra.values, "masked_blend operands")
    _check_shapes(x_lung.values, m, "masked_blend mask")
    if x_lung.t != x_extra.t:
        raise ConfigurationError(
            f"blend operands at different steps: {x_lung.t} vs {x_extra.t}")
    if not np.isin(m, (0, 1)).all():
        raise MaskDomainError("blend mask must be binary")
    m = m.astype(np.float32)
    out = (1.0 - m) * x_lung.values + m * x_extra.values
    return LatentVolume(out, x_lung.t)


def _checked(values: np.ndarray, t: int) -> np.ndarray:
    if not np.isfinite(values).all():
        raise NumericHealthError(f"non-finite latent at step t={t}")
    return values


def aas_sample(denoiser, x_ref: Volume, layout: SemanticLayout,
               schedule: NoiseSchedule, cfg: SamplerConfig) -> Volume:
    """Anatomically aware sampling: reverse loop with reference blending.

    Extra-pulmonary voxels of the output equal the reference exactly
    because the final blend uses the reference noised to step 0.
    """
    if cfg.mode != MODE_AAS:
        raise ConfigurationError(f"aas_sample requires mode 'aas', got {cfg.mode!r}")
    if x_ref.shape != layout.shape:
        raise DimensionError(
            f"reference shape {x_ref.shape} != layout shape {layout.shape}")
    masks = derive_masks(layout)
    cond = layout_to_channels(layout, cfg.conditioning)
    shape = x_ref.shape

    x = substream(cfg.seed, "sample", cfg.sample_id, "init") \
        .standard_normal(shape).astype(np.float32)
    lat = LatentVolume(x, schedule.T)
    for t in range(schedule.T, 0, -1):
        _checked(lat.values, t)
        if t > 1:
            z = substream(cfg.seed, "sample", cfg.sample_id, t, "z") \
                .standard_normal(shape)
        else:
            z = None
        x_lung = denoise_step(lat, cond, t, denoiser, schedule, z)
        eps = substream(cfg.seed, "sample", cfg.sample_id, t, "eps") \
            .standard_normal(shape)
        x_extra = reference_diffuse(x_ref, t - 1, eps, schedule)
        lat = masked_blend(x_lung, x_extra, masks.m_extra)
    _checked(lat.values, 0)
    # Clip only the generated (lung) region into the volume intensity range;
    # reference voxels are already in range and pass through untouched.
    out = np.clip(lat.values, -1.0, 1.0)
    return Volume(out, x_ref.spacing_mm)


def plain_sample(denoiser, layout: SemanticLayout, schedule: NoiseSchedule,
                 cfg: SamplerConfig,
                 spacing_mm: tuple = (1.0, 1.0, 1.0)) -> Volume:
    """Traditional ancestral sampling with layout conditioning only."""
    if cfg.mode != MODE_PLAIN:
        raise ConfigurationError(
            f"plain_sample requires mode 'plain', got {cfg.mode!r}")
    cond = layout_to_channels(layout, cfg.conditioning)
    shape = layout.shape

    x = substream(cfg.seed, "sample", cfg.sample_id, "init") \
        .standard_normal(shape).astype(np.float32)
    lat = LatentVolume(x, schedule.T)
    for t in range(schedule.T, 0, -1):
        _checked(lat.values, t)
        if t > 1:
            z = substream(cfg.seed, "sample", cfg.sample_id, t, "z") \
                .standard_normal(shape)
        else:
            z = None
        lat = denoise_step(lat, cond, t, denoiser, schedule, z)
    _checked(lat.values, 0)
    return Volume(np.clip(lat.values, -1.0, 1.0), spacing_mm)
