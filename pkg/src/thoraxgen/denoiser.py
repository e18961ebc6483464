"""3D U-Net noise predictor.

Topology: stem conv, encoder levels of (residual block [+ attention]) with
strided-conv downsampling, a res/attention/res bottleneck, and a mirrored
decoder with skip concatenations and nearest-neighbor + conv upsampling.
Each residual block is conditioned on a sinusoidal time embedding passed
through a small MLP. The final convolution is zero-initialized so an
untrained network predicts (approximately) zero noise.
"""

import math
import os
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .data import atomic_write_bytes
from .errors import (ConfigurationError, DimensionError, FormatError,
                     NumericHealthError)
from .rng import substream


@dataclass
class DenoiserConfig:
    resolution: int = 32
    in_channels: int = 3          # latent + conditioning channels
    base_width: int = 16
    channel_multipliers: tuple = (1, 2, 4)
    attention_levels: tuple = (2,)   # deepest level by default
    time_embed_dim: int = 64
    groups: int = 8

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        self.attention_levels = tuple(int(l) for l in self.attention_levels)
        levels = len(self.channel_multipliers)
        if levels < 1:
            raise ConfigurationError("need at least one channel multiplier")
        if self.resolution % (2 ** (levels - 1)) != 0:
            raise ConfigurationError(
                f"resolution {self.resolution} not divisible by 2^{levels - 1}")
        if self.in_channels < 2:
            raise ConfigurationError("in_channels must be >= 2 (latent + layout)")
        if self.time_embed_dim % 2 != 0:
            raise ConfigurationError("time_embed_dim must be even")
        if self.base_width % self.groups != 0:
            raise ConfigurationError(
                f"groups ({self.groups}) must divide base_width ({self.base_width})")
        if any(l < 0 or l >= levels for l in self.attention_levels):
            raise ConfigurationError(f"attention_levels out of range 0..{levels - 1}")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    def to_dict(self) -> dict:
        return {
            "resolution": self.resolution,
            "in_channels": self.in_channels,
            "base_width": self.base_width,
            "channel_multipliers": list(self.channel_multipliers),
            "attention_levels": list(self.attention_levels),
            "time_embed_dim": self.time_embed_dim,
            "groups": self.groups,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**d)


def sinusoidal_embedding(t, dim: int):
    """Raw sinusoidal time features, interleaved [sin, cos, sin, cos, ...].

    Frequencies form a geometric ladder from 1 down to 1/10000:
    f_i = 10000^(-i/(half-1)) for i in 0..half-1 (f_0 = 1 when half == 1).
    """
    if dim % 2 != 0:
        raise ConfigurationError("embedding dim must be even")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    half = dim // 2
    if half == 1:
        freqs = torch.ones(1, dtype=torch.float64)
    else:
        i = torch.arange(half, dtype=torch.float64)
        freqs = torch.pow(10000.0, -i / (half - 1))
    angles = t[:, None] * freqs[None, :]
    emb = torch.empty(t.shape[0], dim, dtype=torch.float64)
    emb[:, 0::2] = torch.sin(angles)
    emb[:, 1::2] = torch.cos(angles)
    return emb


class SpatialPaddedConv3d(nn.Module):
    """Conv3d that zero-pads small inputs along depth to stay on the fast
    CPU kernel.

    The CPU convolution dispatcher falls back to a reference kernel that
    is roughly an order of magnitude slower when batch * channels * depth
    * height of the input is small.  Zero-padding the input at the end of
    the depth axis and cropping the output back is mathematically exact
    (the padded rows reproduce the implicit zero padding of the original
    convolution) and pushes the shape over the fast-path cutoff.  Skipped
    when the required padding would cost more than the slow kernel.
    """

    # N*C*D*H of the input must exceed this for the fast CPU kernel
    # (measured empirically; a wrong value only affects speed, not math).
    FAST_PATH_MIN_CDH = 20481
    # Do not pad when the extra depth would inflate the work by more than
    # this factor; beyond it the reference kernel is the cheaper option.
    MAX_PAD_FACTOR = 6.0

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, kernel, stride=stride,
                              padding=padding)

    @property
    def weight(self):
        return self.conv.weight

    @property
    def bias(self):
        return self.conv.bias

    def forward(self, x):
        n, c, d, h, w = x.shape
        need_d = -(-self.FAST_PATH_MIN_CDH // (n * c * h))
        if d >= need_d or need_d > d * self.MAX_PAD_FACTOR:
            return self.conv(x)
        stride = self.conv.stride[0]
        pad = self.conv.padding[0]
        kernel = self.conv.weight.shape[2]
        out_d = (d + 2 * pad - kernel) // stride + 1
        xz = torch.nn.functional.pad(x, (0, 0, 0, 0, 0, need_d - d))
        y = torch.nn.functional.conv3d(xz, self.conv.weight, self.conv.bias,
                                       stride=self.conv.stride,
                                       padding=self.conv.padding)
        return y[:, :, :out_d]


class PointwiseConv3d(nn.Module):
    """1x1x1 convolution as an einsum channel mixer.

    Equivalent to Conv3d(cin, cout, 1) but avoids the slow_conv3d CPU
    path; backward reduces to matrix multiplies.
    """

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.in_channels = in_ch
        self.out_channels = out_ch
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch))
        self.bias = nn.Parameter(torch.zeros(out_ch))

    def forward(self, x):
        out = torch.einsum("oc,bcdhw->bodhw", self.weight, x)
        return out + self.bias.view(1, -1, 1, 1, 1)


class TimeEncoder(nn.Module):
    """Sinusoidal features followed by a two-layer MLP."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, t):
        h = sinusoidal_embedding(t, self.dim).to(self.fc1.weight.dtype)
        return self.fc2(torch.nn.functional.silu(self.fc1(h)))


class ResBlock(nn.Module):
    """norm/SiLU/conv twice with a time-embedding bias injection and shortcut."""

    def __init__(self, in_ch: int, out_ch: int, t_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = SpatialPaddedConv3d(in_ch, out_ch, 3, padding=1)
        self.t_proj = nn.Linear(t_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = SpatialPaddedConv3d(out_ch, out_ch, 3, padding=1)
        if in_ch == out_ch:
            self.shortcut = nn.Identity()
        else:
            self.shortcut = PointwiseConv3d(in_ch, out_ch)

    def forward(self, x, t_emb):
        h = self.conv1(torch.nn.functional.silu(self.norm1(x)))
        h = h + self.t_proj(t_emb)[:, :, None, None, None]
        h = self.conv2(torch.nn.functional.silu(self.norm2(h)))
        return h + self.shortcut(x)


class AttentionBlock(nn.Module):
    """Single-head self-attention over flattened spatial positions, residual."""

    def __init__(self, ch: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch)
        self.q = PointwiseConv3d(ch, ch)
        self.k = PointwiseConv3d(ch, ch)
        self.v = PointwiseConv3d(ch, ch)
        self.proj = PointwiseConv3d(ch, ch)

    def attention_weights(self, x):
        b, c, d, h, w = x.shape
        n = d * h * w
        xn = self.norm(x)
        q = self.q(xn).reshape(b, c, n)
        k = self.k(xn).reshape(b, c, n)
        logits = torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c)
        if not torch.isfinite(logits).all():
            raise NumericHealthError("non-finite attention logits")
        return torch.softmax(logits, dim=-1)

    def forward(self, x):
        b, c, d, h, w = x.shape
        n = d * h * w
        weights = self.attention_weights(x)
        v = self.v(self.norm(x)).reshape(b, c, n)
        out = torch.einsum("bij,bcj->bci", weights, v).reshape(b, c, d, h, w)
        return x + self.proj(out)


class UNet3D(nn.Module):
    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        cfg = config
        chans = [cfg.base_width * m for m in cfg.channel_multipliers]
        L = cfg.levels
        t_dim = cfg.time_embed_dim

        self.time_enc = TimeEncoder(t_dim)
        self.stem = SpatialPaddedConv3d(cfg.in_channels, cfg.base_width, 3, padding=1)

        self.enc_res = nn.ModuleList()
        self.enc_att = nn.ModuleDict()
        self.down = nn.ModuleDict()
        prev = cfg.base_width
        for i in range(L):
            self.enc_res.append(ResBlock(prev, chans[i], t_dim, cfg.groups))
            if i in cfg.attention_levels:
                self.enc_att[str(i)] = AttentionBlock(chans[i], cfg.groups)
            if i < L - 1:
                self.down[str(i)] = SpatialPaddedConv3d(chans[i], chans[i], 3,
                                                        stride=2, padding=1)
            prev = chans[i]

        mid = chans[-1]
        self.mid_res1 = ResBlock(mid, mid, t_dim, cfg.groups)
        self.mid_att = AttentionBlock(mid, cfg.groups)
        self.mid_res2 = ResBlock(mid, mid, t_dim, cfg.groups)

        self.dec_res = nn.ModuleList()
        self.dec_att = nn.ModuleDict()
        self.up = nn.ModuleDict()
        for i in range(L):
            self.dec_res.append(ResBlock(2 * chans[i], chans[i], t_dim,
                                         cfg.groups))
            if i in cfg.attention_levels:
                self.dec_att[str(i)] = AttentionBlock(chans[i], cfg.groups)
            if i > 0:
                # Upsample conv reduces to the destination level's width.
                self.up[str(i)] = SpatialPaddedConv3d(chans[i], chans[i - 1],
                                                      3, padding=1)

        self.out_norm = nn.GroupNorm(cfg.groups, chans[0])
        self.out_conv = SpatialPaddedConv3d(chans[0], 1, 3, padding=1)

    def forward(self, x, t):
        L = self.config.levels
        t_emb = self.time_enc(t)
        h = self.stem(x)
        skips = []
        for i in range(L):
            h = self.enc_res[i](h, t_emb)
            if str(i) in self.enc_att:
                h = self.enc_att[str(i)](h)
            skips.append(h)
            if i < L - 1:
                h = self.down[str(i)](h)
        h = self.mid_res1(h, t_emb)
        h = self.mid_att(h)
        h = self.mid_res2(h, t_emb)
        for i in reversed(range(L)):
            if i < L - 1:
                h = torch.nn.functional.interpolate(h, scale_factor=2,
                                                    mode="nearest")
                h = self.up[str(i + 1)](h) if str(i + 1) in self.up else h
            h = self.dec_res[i](torch.cat([h, skips[i]], dim=1), t_emb)
            if str(i) in self.dec_att:
                h = self.dec_att[str(i)](h)
        return self.out_conv(torch.nn.functional.silu(self.out_norm(h)))


def init_parameters(net: UNet3D, seed: int):
    """Deterministic init from a named substream per parameter.

    Conv/linear weights: variance scaling, normal(0, 1/fan_in); biases and
    norm shifts zero; norm scales one; the output conv is fully zeroed.
    """
    with torch.no_grad():
        for name, module in net.named_modules():
            if isinstance(module, (nn.Conv3d, nn.Linear, PointwiseConv3d)):
                if module is net.out_conv.conv:
                    module.weight.zero_()
                    module.bias.zero_()
                    continue
                fan_in = module.weight[0].numel()
                rng = substream(seed, "init", name)
                w = rng.standard_normal(tuple(module.weight.shape)) / math.sqrt(fan_in)
                module.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()


class Denoiser:
    """Config + torch network behind a numpy-facing prediction surface."""

    def __init__(self, config: DenoiserConfig, net: UNet3D | None = None,
                 seed: int = 0):
        self.config = config
        if net is None:
            net = UNet3D(config)
            init_parameters(net, seed)
        self.net = net
        self.net.eval()

    @classmethod
    def from_parameters(cls, config: DenoiserConfig,
                        params: dict) -> "Denoiser":
        model = cls(config)
        load_state(model.net, params)
        return model

    def predict(self, cond_input: np.ndarray, t: int) -> np.ndarray:
        """Predict the noise grid for one conditioned latent.

        cond_input: (C, D, H, W) with C == config.in_channels.
        Returns (D, H, W) float32.
        """
        cond_input = np.asarray(cond_input, dtype=np.float32)
        if cond_input.ndim != 4 or cond_input.shape[0] != self.config.in_channels:
            raise DimensionError(
                f"expected ({self.config.in_channels}, D, H, W) input, "
                f"got shape {cond_input.shape}")
        with torch.no_grad():
            x = torch.from_numpy(cond_input)[None]
            out = self.net(x, torch.tensor([float(t)]))
        out = out[0, 0].numpy()
        if not np.isfinite(out).all():
            raise NumericHealthError(f"non-finite denoiser output at t={t}")
        return out

    @property
    def in_channels(self) -> int:
        return self.config.in_channels

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def state_arrays(net: nn.Module) -> dict:
    """Named parameters as float32 numpy arrays (insertion-ordered)."""
    return {name: p.detach().numpy().astype(np.float32, copy=True)
            for name, p in net.named_parameters()}


def load_state(net: nn.Module, arrays: dict):
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name not in arrays:
                raise FormatError(f"missing parameter {name!r} in state")
            a = np.asarray(arrays[name], dtype=np.float32)
            if tuple(a.shape) != tuple(p.shape):
                raise DimensionError(
                    f"parameter {name!r}: shape {a.shape} != {tuple(p.shape)}")
            p.copy_(torch.from_numpy(a.copy()))


def save_tensors(directory: str, arrays: dict) -> dict:
    """Write one little-endian float32 blob per tensor; return the manifest entry."""
    os.makedirs(directory, exist_ok=True)
    entry = {}
    for name, a in arrays.items():
        a = np.ascontiguousarray(np.asarray(a, dtype="<f4"))
        atomic_write_bytes(os.path.join(directory, name + ".bin"), a.tobytes())
        entry[name] = {"shape": list(a.shape), "dtype": "f32"}
    return entry


def load_tensors(directory: str, entry: dict) -> dict:
    arrays = {}
    for name, meta in entry.items():
        path = os.path.join(directory, name + ".bin")
        shape = tuple(int(s) for s in meta["shape"])
        expected = int(np.prod(shape)) * 4
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise FormatError(f"cannot read tensor blob {path}: {exc}") from exc
        if len(blob) != expected:
            raise FormatError(
                f"{path}: {len(blob)} bytes, expected {expected} for shape {shape}")
        arrays[name] = np.frombuffer(blob, dtype="<f4").reshape(shape).copy()
    return arrays
