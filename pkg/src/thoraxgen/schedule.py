"""Diffusion noise schedules.

A NoiseSchedule precomputes, in double precision, the per-step variances
beta_t, the retention factors alpha_t = 1 - beta_t, the cumulative
products alpha_bar_t (with alpha_bar_0 = 1), and sigma_t = sqrt(beta_t).
Index convention: t = 0 is the clean volume; betas[t-1] belongs to step t.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable precomputed schedule; safe to share across threads."""

    T: int
    betas: np.ndarray        # shape (T,), betas[t-1] is beta_t
    alphas: np.ndarray       # shape (T,), 1 - betas
    alpha_bars: np.ndarray   # shape (T+1,), alpha_bars[0] == 1
    sigmas: np.ndarray       # shape (T,), sqrt(betas)
    descriptor: dict = field(default_factory=dict)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[t - 1])


def _finalize(betas: np.ndarray, descriptor: dict) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ConfigurationError("betas must lie strictly inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.concatenate(([1.0], np.cumprod(alphas)))
    sigmas = np.sqrt(betas)
    for arr in (betas, alphas, alpha_bars, sigmas):
        arr.setflags(write=False)
    return NoiseSchedule(
        T=len(betas),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        descriptor=descriptor,
    )


def build_cosine_schedule(T: int, s: float = 0.008,
                          beta_max: float = 0.999) -> NoiseSchedule:
    """Cosine schedule: alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T+s)/(1+s))*pi/2).

    beta_t = 1 - alpha_bar_t/alpha_bar_{t-1}, clipped from above at
    beta_max; alpha_bars are rebuilt from the clipped betas so the
    cumulative-product invariant holds exactly.
    """
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not 0.0 < s < 1.0:
        raise ConfigurationError(f"s must be in (0, 1), got {s!r}")
    if not 0.0 < beta_max < 1.0:
        raise ConfigurationError(f"beta_max must be in (0, 1), got {beta_max!r}")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * (np.pi / 2.0)) ** 2
    abar = f / f[0]
    betas = np.minimum(1.0 - abar[1:] / abar[:-1], beta_max)
    return _finalize(betas, {"type": "cosine", "T": int(T), "s": float(s),
                             "beta_max": float(beta_max)})


def build_linear_schedule(T: int, beta_start: float,
                          beta_end: float) -> NoiseSchedule:
    """Baseline schedule: beta_t linear from beta_start to beta_end."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got "
            f"beta_start={beta_start!r}, beta_end={beta_end!r}")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return _finalize(betas, {"type": "linear", "T": int(T),
                             "beta_start": float(beta_start),
                             "beta_end": float(beta_end)})


def schedule_from_descriptor(desc: dict) -> NoiseSchedule:
    """Rebuild a schedule from its serialized descriptor (checkpoints)."""
    kind = desc.get("type")
    if kind == "cosine":
        return build_cosine_schedule(desc["T"], desc.get("s", 0.008),
                                     desc.get("beta_max", 0.999))
    if kind == "linear":
        return build_linear_schedule(desc["T"], desc["beta_start"],
                                     desc["beta_end"])
    raise ConfigurationError(f"unknown schedule type {kind!r}")
