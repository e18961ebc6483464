"""Volumes, semantic layouts, masks, resampling, phantoms, and file I/O.

A Volume is a dense 3D float32 grid with intensities in [-1, 1] plus
voxel spacing in millimetres. A SemanticLayout is a uint8 label grid over
{0: background, 1: lung, 2: nodule} with matching shape and spacing.

Files are stored as a `<name>.json` header plus a `<name>.raw`
little-endian blob, row-major with the z axis slowest.
"""

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import (ConfigurationError, DimensionError, FormatError,
                     GenerationError, LabelDomainError)
from .rng import substream

BACKGROUND = 0
LUNG = 1
NODULE = 2
VALID_LABELS = (BACKGROUND, LUNG, NODULE)

# Conditioning modes: which layout channels are concatenated to the latent.
LUNG_AND_NODULE = "lung+nodule"
NODULE_ONLY = "nodule"
CONDITIONING_MODES = (LUNG_AND_NODULE, NODULE_ONLY)


@dataclass
class Volume:
    values: np.ndarray                      # float32, (D, H, W), in [-1, 1]
    spacing_mm: tuple = (1.0, 1.0, 1.0)     # per-axis voxel size (z, y, x)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 3:
            raise DimensionError(f"volume must be 3D, got shape {self.values.shape}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class SemanticLayout:
    labels: np.ndarray                      # uint8, (D, H, W)
    spacing_mm: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise DimensionError(f"layout must be 3D, got shape {self.labels.shape}")
        bad = set(np.unique(self.labels)) - set(VALID_LABELS)
        if bad:
            raise LabelDomainError(f"unknown labels {sorted(bad)}; expected subset of {VALID_LABELS}")
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)

    @property
    def shape(self):
        return self.labels.shape


@dataclass
class MaskPair:
    """Complementary binary masks: m_lung = lung ∪ nodule, m_extra = 1 - m_lung."""

    m_lung: np.ndarray
    m_extra: np.ndarray


def normalize_intensity(raw: np.ndarray, window: tuple) -> Volume:
    """Clip to window and map affinely to [-1, 1]."""
    lo, hi = float(window[0]), float(window[1])
    if lo >= hi:
        raise ConfigurationError(f"window lo must be < hi, got ({lo}, {hi})")
    raw = np.asarray(raw, dtype=np.float64)
    clipped = np.clip(raw, lo, hi)
    values = (2.0 * (clipped - lo) / (hi - lo) - 1.0).astype(np.float32)
    return Volume(values)


def derive_masks(layout: SemanticLayout) -> MaskPair:
    m_lung = np.isin(layout.labels, (LUNG, NODULE)).astype(np.float32)
    return MaskPair(m_lung=m_lung, m_extra=1.0 - m_lung)


def layout_to_channels(layout: SemanticLayout, conditioning: str) -> np.ndarray:
    """One-hot conditioning channels, shape (C, D, H, W) with C per mode.

    LUNG_AND_NODULE -> [lung, nodule]; NODULE_ONLY -> [nodule].
    """
    if conditioning not in CONDITIONING_MODES:
        raise ConfigurationError(f"unknown conditioning mode {conditioning!r}")
    nodule = (layout.labels == NODULE).astype(np.float32)
    if conditioning == NODULE_ONLY:
        return nodule[None]
    lung = (layout.labels == LUNG).astype(np.float32)
    return np.stack([lung, nodule])


def conditioning_channel_count(conditioning: str) -> int:
    if conditioning not in CONDITIONING_MODES:
        raise ConfigurationError(f"unknown conditioning mode {conditioning!r}")
    return 2 if conditioning == LUNG_AND_NODULE else 1


def _rescaled_spacing(spacing, src_shape, dst_shape):
    return tuple(s * a / b for s, a, b in zip(spacing, src_shape, dst_shape))


def resample_cubic(obj, target_side: int):
    """Resample a Volume (trilinear) or SemanticLayout (nearest) to target_side^3."""
    if target_side < 2:
        raise ConfigurationError(f"target_side must be >= 2, got {target_side}")
    target = (target_side,) * 3
    if isinstance(obj, Volume):
        if min(obj.shape) < 2:
            raise DimensionError(f"degenerate volume shape {obj.shape}")
        if obj.shape == target:
            return Volume(obj.values.copy(), obj.spacing_mm)
        zoom = [t / s for t, s in zip(target, obj.shape)]
        values = ndimage.zoom(obj.values.astype(np.float64), zoom, order=1,
                              mode="nearest", grid_mode=True)
        values = np.clip(values, -1.0, 1.0).astype(np.float32)
        return Volume(values, _rescaled_spacing(obj.spacing_mm, obj.shape, target))
    if isinstance(obj, SemanticLayout):
        if min(obj.shape) < 2:
            raise DimensionError(f"degenerate layout shape {obj.shape}")
        if obj.shape == target:
            return SemanticLayout(obj.labels.copy(), obj.spacing_mm)
        zoom = [t / s for t, s in zip(target, obj.shape)]
        labels = ndimage.zoom(obj.labels, zoom, order=0, mode="nearest",
                              grid_mode=True)
        return SemanticLayout(labels, _rescaled_spacing(obj.spacing_mm, obj.shape, target))
    raise ConfigurationError(f"cannot resample object of type {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Procedural thorax phantom
# ---------------------------------------------------------------------------

@dataclass
class PhantomConfig:
    resolution: int = 32
    body_axes: tuple = (0.88, 0.80, 0.84)    # semi-axes, normalized coords
    lung_axes: tuple = (0.55, 0.42, 0.30)
    lung_offset_x: float = 0.40              # lateral displacement of each lung
    nodule_radius_range: tuple = (0.06, 0.14)
    max_nodules: int = 3
    background_intensity: float = -1.0
    body_intensity: float = 0.35
    lung_intensity: float = -0.65
    nodule_intensity: float = 0.25
    noise_amplitude: float = 0.03

    def validate(self):
        if self.resolution < 16:
            raise ConfigurationError(f"phantom resolution must be >= 16, got {self.resolution}")
        if self.lung_offset_x + self.lung_axes[2] >= self.body_axes[2]:
            raise GenerationError("lungs do not fit laterally inside the body ellipsoid")
        if self.lung_axes[0] >= self.body_axes[0] or self.lung_axes[1] >= self.body_axes[1]:
            raise GenerationError("lungs do not fit inside the body ellipsoid")
        if not (0 < self.nodule_radius_range[0] <= self.nodule_radius_range[1]
                < min(self.lung_axes)):
            raise GenerationError("nodule radii must fit strictly inside a lung")


def _ellipsoid_mask(coords, center, axes):
    z, y, x = coords
    cz, cy, cx = center
    az, ay, ax = axes
    q = ((z - cz) / az) ** 2 + ((y - cy) / ay) ** 2 + ((x - cx) / ax) ** 2
    return q <= 1.0


def generate_phantom(seed: int, cfg: PhantomConfig | None = None):
    """Deterministic procedural thorax: body ellipsoid, two lungs, 1-3 nodules.

    Returns (Volume, SemanticLayout). Intensities are already in [-1, 1];
    labels follow the construction geometry exactly, with nodules sampled so
    their spheres lie strictly inside one lung ellipsoid.
    """
    cfg = cfg or PhantomConfig()
    cfg.validate()
    n = cfg.resolution
    rng = substream(seed, "phantom")

    axis = (np.arange(n, dtype=np.float64) + 0.5) / n * 2.0 - 1.0
    coords = np.meshgrid(axis, axis, axis, indexing="ij")

    body = _ellipsoid_mask(coords, (0.0, 0.0, 0.0), cfg.body_axes)
    lung_centers = [(0.0, 0.0, -cfg.lung_offset_x), (0.0, 0.0, cfg.lung_offset_x)]
    lungs = np.zeros((n, n, n), dtype=bool)
    for c in lung_centers:
        lungs |= _ellipsoid_mask(coords, c, cfg.lung_axes)

    # Sample nodule spheres strictly inside a lung ellipsoid: a sphere of
    # radius r centered at c is inside when the scaled ellipsoid equation at
    # c stays below (1 - r / min_semiaxis)^2.
    n_nodules = int(rng.integers(1, cfg.max_nodules + 1))
    min_semi = min(cfg.lung_axes)
    nodules = np.zeros((n, n, n), dtype=bool)
    nodule_params = []
    for _ in range(n_nodules):
        for _attempt in range(1000):
            r = float(rng.uniform(*cfg.nodule_radius_range))
            lc = lung_centers[int(rng.integers(0, 2))]
            offs = rng.uniform(-1.0, 1.0, size=3)
            c = tuple(lc[i] + offs[i] * (cfg.lung_axes[i] - r) for i in range(3))
            q = sum(((c[i] - lc[i]) / cfg.lung_axes[i]) ** 2 for i in range(3))
            if q <= (1.0 - r / min_semi) ** 2:
                break
        else:
            raise GenerationError("could not place a nodule inside a lung")
        nodule_params.append((c, r))
        z, y, x = coords
        nodules |= ((z - c[0]) ** 2 + (y - c[1]) ** 2 + (x - c[2]) ** 2) <= r ** 2

    labels = np.zeros((n, n, n), dtype=np.uint8)
    labels[lungs] = LUNG
    labels[nodules] = NODULE

    values = np.full((n, n, n), cfg.background_intensity, dtype=np.float64)
    values[body] = cfg.body_intensity
    values[lungs] = cfg.lung_intensity
    values[nodules] = cfg.nodule_intensity
    values += cfg.noise_amplitude * rng.standard_normal((n, n, n))
    values = np.clip(values, -1.0, 1.0).astype(np.float32)

    return Volume(values), SemanticLayout(labels)


# ---------------------------------------------------------------------------
# File I/O: <name>.json header + <name>.raw little-endian blob
# ---------------------------------------------------------------------------

_DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


def _split_base(path: str) -> str:
    base, ext = os.path.splitext(str(path))
    return base if ext in (".json", ".raw") else str(path)


def atomic_write_bytes(path: str, payload: bytes):
    """Write via a temp file in the same directory, then rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _save_grid(path: str, array: np.ndarray, dtype_tag: str, spacing_mm):
    base = _split_base(path)
    header = {
        "shape": [int(s) for s in array.shape],
        "dtype": dtype_tag,
        "spacing_mm": [float(s) for s in spacing_mm],
        "order": "row-major, z slowest",
    }
    blob = np.ascontiguousarray(array.astype(_DTYPES[dtype_tag])).tobytes()
    atomic_write_bytes(base + ".json", (json.dumps(header, indent=1) + "\n").encode())
    atomic_write_bytes(base + ".raw", blob)
    return base


def _load_grid(path: str, expect_dtype: str):
    base = _split_base(path)
    try:
        with open(base + ".json", "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read header {base}.json: {exc}") from exc
    for key in ("shape", "dtype", "spacing_mm"):
        if key not in header:
            raise FormatError(f"header {base}.json missing field {key!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"unsupported dtype {header['dtype']!r} in {base}.json")
    if header["dtype"] != expect_dtype:
        raise FormatError(
            f"{base}.json: dtype {header['dtype']!r}, expected {expect_dtype!r}")
    shape = tuple(int(s) for s in header["shape"])
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise FormatError(f"{base}.json: invalid shape {shape}")
    dtype = _DTYPES[header["dtype"]]
    expected_bytes = int(np.prod(shape)) * dtype.itemsize
    try:
        with open(base + ".raw", "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read blob {base}.raw: {exc}") from exc
    if len(blob) != expected_bytes:
        raise FormatError(
            f"{base}.raw: blob has {len(blob)} bytes, shape {shape} needs {expected_bytes}")
    array = np.frombuffer(blob, dtype=dtype).reshape(shape)
    return array, tuple(float(s) for s in header["spacing_mm"])


def save_volume(path: str, vol: Volume) -> str:
    return _save_grid(path, vol.values, "f32", vol.spacing_mm)


def load_volume(path: str) -> Volume:
    array, spacing = _load_grid(path, "f32")
    return Volume(array.astype(np.float32), spacing)


def save_layout(path: str, layout: SemanticLayout) -> str:
    return _save_grid(path, layout.labels, "u8", layout.spacing_mm)


def load_layout(path: str) -> SemanticLayout:
    array, spacing = _load_grid(path, "u8")
    return SemanticLayout(array, spacing)
