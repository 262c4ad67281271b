"""Per-landmark probability maps: smoothing, peaks, file I/O and a
synthetic generator that stands in for an external landmark detector.

Map values are unnormalized likelihoods; synthetic blobs have peak 1.
Out-of-bounds reads return 0 everywhere in this package.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import FormatError, NumericError

MAP_MAGIC = b"FAPM"
MAP_VERSION = 1

FACE_SIZE = 160  # face crops are resized so the face region is 160x160


@dataclass
class ProbabilityMaps:
    """L stacked HxW likelihood grids, indexed [landmark][row, col]."""

    maps: np.ndarray  # (L, H, W) float32/float64, finite, >= 0

    def __post_init__(self):
        self.maps = np.asarray(self.maps)
        if self.maps.ndim != 3:
            raise FormatError("maps must be a (L, H, W) array")
        if not np.all(np.isfinite(self.maps)):
            raise NumericError("non-finite probability map value")
        if np.any(self.maps < 0):
            raise FormatError("negative probability map value")

    @property
    def landmark_count(self) -> int:
        return self.maps.shape[0]

    @property
    def face_size(self) -> tuple[int, int]:
        return self.maps.shape[1], self.maps.shape[2]


@dataclass
class SynthConfig:
    """Controls for the synthetic probability-map generator."""

    peak_sigma: float = 3.0
    coordinate_noise_sigma: float = 0.0
    outlier_rate: float = 0.0
    occluded_dropout: float = 0.0
    floor: float = 0.0

    def __post_init__(self):
        if self.peak_sigma <= 0:
            raise ValueError("peak_sigma must be positive")
        for name in ("outlier_rate", "occluded_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0,1]")
        if self.coordinate_noise_sigma < 0 or self.floor < 0:
            raise ValueError("sigmas and floor must be non-negative")


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = int(np.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth(maps: ProbabilityMaps, sigma: float) -> ProbabilityMaps:
    """Convolve each grid with a normalized 2D Gaussian (truncated at 3*sigma,
    reflective borders)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    k = _gaussian_kernel(sigma)
    data = maps.maps.astype(np.float64, copy=False)
    out = correlate1d(data, k, axis=1, mode="reflect")
    out = correlate1d(out, k, axis=2, mode="reflect")
    return ProbabilityMaps(out)


def peak_coords(maps: ProbabilityMaps) -> np.ndarray:
    """Per-landmark argmax as (x, y) pairs; ties go to the row-major-first cell."""
    L, H, W = maps.maps.shape
    flat = maps.maps.reshape(L, -1)
    idx = np.argmax(flat, axis=1)
    return np.stack([idx % W, idx // W], axis=1).astype(np.float64)


def map_values(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Read a single grid at rounded (x, y) coordinates; out of bounds -> 0."""
    c = np.rint(np.asarray(coords, dtype=np.float64)).astype(np.int64)
    x, y = c[..., 0], c[..., 1]
    H, W = grid.shape
    ok = (x >= 0) & (x < W) & (y >= 0) & (y < H)
    out = np.zeros(c.shape[:-1], dtype=np.float64)
    out[ok] = grid[y[ok], x[ok]]
    return out


def _blob(H, W, cx, cy, sigma):
    ys = np.arange(H, dtype=np.float64)[:, None]
    xs = np.arange(W, dtype=np.float64)[None, :]
    return np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma**2))


def synth_rng(seed: int, sample_key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0x11A9, int(sample_key)]))


def synthesize_from_shape(coords: np.ndarray, visibility: np.ndarray,
                          annotated: np.ndarray, cfg: SynthConfig,
                          rng: np.random.Generator,
                          size: tuple[int, int] = (FACE_SIZE, FACE_SIZE)) -> ProbabilityMaps:
    """Unit-peak Gaussian blobs around ground-truth landmark positions.

    Per landmark: the peak is jittered by coordinate noise, relocated
    uniformly with probability outlier_rate, and (for occluded landmarks)
    flattened to the floor with probability occluded_dropout.  Unannotated
    landmarks get flat floor maps.
    """
    H, W = size
    L = len(coords)
    out = np.full((L, H, W), cfg.floor, dtype=np.float64)
    for l in range(L):
        # consume the random stream identically regardless of branch taken,
        # so a landmark's maps do not depend on its neighbours' flags
        noise = rng.normal(0.0, 1.0, size=2) * cfg.coordinate_noise_sigma
        is_outlier = rng.random() < cfg.outlier_rate
        uni = rng.uniform(0.0, 1.0, size=2)
        dropped = rng.random() < cfg.occluded_dropout
        if not annotated[l]:
            continue
        if visibility[l] < 0.5 and dropped:
            continue
        if is_outlier:
            cx, cy = uni[0] * (W - 1), uni[1] * (H - 1)
        else:
            cx, cy = coords[l, 0] + noise[0], coords[l, 1] + noise[1]
        np.maximum(out[l], _blob(H, W, cx, cy, cfg.peak_sigma), out=out[l])
    return ProbabilityMaps(out)


def synthesize(sample, cfg: SynthConfig, seed: int,
               size: tuple[int, int] = (FACE_SIZE, FACE_SIZE)) -> ProbabilityMaps:
    """Deterministic synthetic maps for one sample under (seed, sample)."""
    gt = sample.ground_truth
    rng = synth_rng(seed, zlib.crc32(sample.image_ref.encode("utf-8")))
    return synthesize_from_shape(gt.coords, gt.visibility, gt.annotated, cfg, rng, size)


def write_maps(maps: ProbabilityMaps, path) -> None:
    L, H, W = maps.maps.shape
    data = maps.maps.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<iiii", MAP_VERSION, L, H, W))
        fh.write(data)


def read_maps(path) -> ProbabilityMaps:
    with open(path, "rb") as fh:
        head = fh.read(len(MAP_MAGIC) + 16)
        if len(head) < len(MAP_MAGIC) + 16:
            raise FormatError("truncated map file header")
        if head[: len(MAP_MAGIC)] != MAP_MAGIC:
            raise FormatError("bad map file magic")
        version, L, H, W = struct.unpack("<iiii", head[len(MAP_MAGIC):])
        if version != MAP_VERSION:
            raise FormatError(f"unsupported map file version {version}")
        if L <= 0 or H <= 0 or W <= 0:
            raise FormatError("bad map file dimensions")
        payload = fh.read()
    expected = L * H * W * 4
    if len(payload) != expected:
        raise FormatError(
            f"map payload has {len(payload)} bytes, header implies {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f4").reshape(L, H, W)
    return ProbabilityMaps(arr.copy())
