"""Training loop: uniform time sampling, L1 noise-prediction loss,
adaptive-moment updates, EMA shadow weights, and checkpointing.

Determinism contract: every stochastic draw at training step s comes from
substream(seed, "train", s, ...), so a resumed run replays the exact
stream a continuous run would have used; checkpoints therefore only need
the step counter, parameters, EMA shadow, and optimizer moments.
"""

import csv
import json
import os
import time
from dataclasses import dataclass

import numpy as np
import torch

from .data import (layout_to_channels, conditioning_channel_count,
                   LUNG_AND_NODULE, atomic_write_bytes)
from .denoiser import (Denoiser, DenoiserConfig,
                       load_state, load_tensors, save_tensors, state_arrays)
from .diffusion import forward_diffuse
from .errors import (ConfigurationError, DimensionError, FormatError,
                     NumericHealthError, PersistedStateError)
from .rng import substream
from .schedule import NoiseSchedule, schedule_from_descriptor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_FORMAT = "thoraxgen-checkpoint-v1"


@dataclass
class TrainConfig:
    lr: float = 1e-5
    ema_decay: float = 0.995
    total_steps: int = 1000
    batch_size: int = 1
    seed: int = 0
    conditioning: str = LUNG_AND_NODULE
    checkpoint_every: int = 0        # 0: only at the end
    log_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigurationError(
                f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.total_steps < 0:
            raise ConfigurationError(f"total_steps must be >= 0, got {self.total_steps}")
        conditioning_channel_count(self.conditioning)

    def to_dict(self) -> dict:
        return {"lr": self.lr, "ema_decay": self.ema_decay,
                "total_steps": self.total_steps, "batch_size": self.batch_size,
                "seed": self.seed, "conditioning": self.conditioning,
                "checkpoint_every": self.checkpoint_every,
                "log_every": self.log_every}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainState:
    denoiser: Denoiser
    ema_params: dict                  # name -> float32 array
    moments_m: dict
    moments_v: dict
    step: int = 0
    seed: int = 0

    @classmethod
    def initialize(cls, config: DenoiserConfig, seed: int) -> "TrainState":
        model = Denoiser(config, seed=seed)
        params = dict(model.net.named_parameters())
        return cls(
            denoiser=model,
            ema_params={k: p.detach().clone() for k, p in params.items()},
            moments_m={k: torch.zeros_like(p) for k, p in params.items()},
            moments_v={k: torch.zeros_like(p) for k, p in params.items()},
            step=0,
            seed=seed,
        )


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    """ema' = decay * ema + (1 - decay) * params, per element.

    Works on dicts of numpy arrays or torch tensors; dtype is preserved.
    """
    out = {}
    for name, p in params.items():
        e = ema[name]
        if tuple(e.shape) != tuple(p.shape):
            raise DimensionError(
                f"EMA shape mismatch for {name!r}: {tuple(e.shape)} vs {tuple(p.shape)}")
        out[name] = decay * e + (1.0 - decay) * p
    return out


def _assemble_batch(batch, schedule, conditioning, seed, step):
    """Build (input tensor, t vector, target noise tensor) for one step."""
    if not batch:
        raise ConfigurationError("empty training batch")
    inputs, ts, targets = [], [], []
    for i, (vol, layout) in enumerate(batch):
        if vol.shape != layout.shape:
            raise DimensionError(
                f"batch element {i}: volume {vol.shape} != layout {layout.shape}")
        t = int(substream(seed, "train", step, i, "t").integers(1, schedule.T + 1))
        eps = substream(seed, "train", step, i, "eps") \
            .standard_normal(vol.shape).astype(np.float32)
        x_t = forward_diffuse(vol, t, eps, schedule)
        cond = layout_to_channels(layout, conditioning)
        inputs.append(np.concatenate([x_t.values[None], cond], axis=0))
        ts.append(float(t))
        targets.append(eps)
    return (torch.from_numpy(np.stack(inputs)),
            torch.tensor(ts),
            torch.from_numpy(np.stack(targets)))


def train_step(state: TrainState, batch, schedule: NoiseSchedule,
               config: TrainConfig) -> float:
    """One gradient step on the mean-absolute noise-prediction error."""
    net = state.denoiser.net
    inp, ts, target = _assemble_batch(batch, schedule, config.conditioning,
                                      state.seed, state.step)
    net.train()
    net.zero_grad(set_to_none=True)
    pred = net(inp, ts)
    loss = (target[:, None] - pred).abs().mean()
    if not torch.isfinite(loss):
        raise NumericHealthError(f"non-finite loss at step {state.step}")
    loss.backward()

    adam_t = state.step + 1
    bias1 = 1.0 - ADAM_BETA1 ** adam_t
    bias2 = 1.0 - ADAM_BETA2 ** adam_t
    with torch.no_grad():
        for name, p in net.named_parameters():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            if not torch.isfinite(g).all():
                raise NumericHealthError(
                    f"non-finite gradient for {name!r} at step {state.step}")
            m = state.moments_m[name]
            v = state.moments_v[name]
            m.mul_(ADAM_BETA1).add_(g, alpha=1.0 - ADAM_BETA1)
            v.mul_(ADAM_BETA2).addcmul_(g, g, value=1.0 - ADAM_BETA2)
            p.sub_(config.lr * (m / bias1) / (torch.sqrt(v / bias2) + ADAM_EPS))
            e = state.ema_params[name]
            e.mul_(config.ema_decay).add_(p, alpha=1.0 - config.ema_decay)
    net.eval()
    state.step += 1
    return float(loss.item())


# ---------------------------------------------------------------------------
# Checkpoints: manifest.json + one float32 blob per tensor
# ---------------------------------------------------------------------------

def save_checkpoint(ckpt_dir: str, state: TrainState,
                    schedule: NoiseSchedule, config: TrainConfig) -> str:
    try:
        os.makedirs(ckpt_dir, exist_ok=True)
        params = state_arrays(state.denoiser.net)
        tensors = {
            "params": save_tensors(os.path.join(ckpt_dir, "params"), params),
            "ema": save_tensors(os.path.join(ckpt_dir, "ema"), state.ema_params),
            "moments_m": save_tensors(os.path.join(ckpt_dir, "moments_m"),
                                      state.moments_m),
            "moments_v": save_tensors(os.path.join(ckpt_dir, "moments_v"),
                                      state.moments_v),
        }
        manifest = {
            "format": CHECKPOINT_FORMAT,
            "step": state.step,
            "seed": state.seed,
            "denoiser_config": state.denoiser.config.to_dict(),
            "train_config": config.to_dict(),
            "schedule": schedule.descriptor,
            "optimizer": {"type": "adam", "beta1": ADAM_BETA1,
                          "beta2": ADAM_BETA2, "eps": ADAM_EPS,
                          "lr": config.lr},
            "tensors": tensors,
        }
        atomic_write_bytes(os.path.join(ckpt_dir, "manifest.json"),
                           (json.dumps(manifest, indent=1) + "\n").encode())
    except OSError as exc:
        raise PersistedStateError(f"cannot write checkpoint {ckpt_dir}: {exc}") from exc
    return ckpt_dir


def load_checkpoint(ckpt_dir: str):
    """Return (TrainState, NoiseSchedule, TrainConfig) from a checkpoint dir."""
    manifest_path = os.path.join(ckpt_dir, "manifest.json")
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise PersistedStateError(
            f"cannot read checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"unexpected checkpoint format {manifest.get('format')!r}")
    dcfg = DenoiserConfig.from_dict(manifest["denoiser_config"])
    tcfg = TrainConfig.from_dict(manifest["train_config"])
    schedule = schedule_from_descriptor(manifest["schedule"])

    tensors = manifest["tensors"]
    params = load_tensors(os.path.join(ckpt_dir, "params"), tensors["params"])
    model = Denoiser.from_parameters(dcfg, params)

    def as_torch(group):
        arrays = load_tensors(os.path.join(ckpt_dir, group), tensors[group])
        return {k: torch.from_numpy(v) for k, v in arrays.items()}

    state = TrainState(
        denoiser=model,
        ema_params=as_torch("ema"),
        moments_m=as_torch("moments_m"),
        moments_v=as_torch("moments_v"),
        step=int(manifest["step"]),
        seed=int(manifest["seed"]),
    )
    return state, schedule, tcfg


def denoiser_from_checkpoint(ckpt_dir: str, use_ema: bool = True):
    """Load an inference denoiser (EMA shadow weights by default)."""
    state, schedule, tcfg = load_checkpoint(ckpt_dir)
    if use_ema:
        load_state(state.denoiser.net, state.ema_params)
    return state.denoiser, schedule, tcfg


def fit(config: TrainConfig, dataset, denoiser_config: DenoiserConfig,
        schedule: NoiseSchedule, out_dir: str,
        resume_state: TrainState | None = None) -> str:
    """Run train_step for total_steps over the dataset; return checkpoint path.

    Batch composition at step s is drawn from substream(seed, "batch", s),
    so interrupted runs resume on the exact same data and noise stream.
    Writes checkpoints under out_dir/checkpoint and appends a loss log CSV
    (step, loss, wall_time).
    """
    if not dataset:
        raise ConfigurationError("training dataset is empty")
    os.makedirs(out_dir, exist_ok=True)
    state = resume_state or TrainState.initialize(denoiser_config, config.seed)
    ckpt_dir = os.path.join(out_dir, "checkpoint")
    log_path = os.path.join(out_dir, "loss_log.csv")

    mode = "a" if (resume_state is not None and os.path.exists(log_path)) else "w"
    with open(log_path, mode, newline="", encoding="utf-8") as log:
        writer = csv.writer(log)
        if mode == "w":
            writer.writerow(["step", "loss", "wall_time"])
        t_start = time.monotonic()
        while state.step < config.total_steps:
            step = state.step
            idx = substream(config.seed, "batch", step) \
                .integers(0, len(dataset), size=config.batch_size)
            batch = [dataset[int(i)] for i in idx]
            try:
                loss = train_step(state, batch, schedule, config)
            except NumericHealthError:
                save_checkpoint(ckpt_dir, state, schedule, config)
                raise
            if config.log_every and (state.step % config.log_every == 0
                                     or state.step == config.total_steps):
                writer.writerow([state.step, f"{loss:.8f}",
                                 f"{time.monotonic() - t_start:.3f}"])
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(ckpt_dir, state, schedule, config)
    save_checkpoint(ckpt_dir, state, schedule, config)
    return ckpt_dir
