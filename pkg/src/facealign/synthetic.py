"""Reproducible synthetic face corpora: random rigid poses plus low-rank
per-part deformations of the 3D model, with probability maps generated on
demand.  This stands in for real images plus an external landmark
detector.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .heatmaps import (
    FACE_SIZE,
    ProbabilityMaps,
    SynthConfig,
    read_maps,
    synthesize,
    write_maps,
)
from .pose import Model3D, RigidPose, euler_to_rotation, robust_init
from .shapes import Dataset, LandmarkSchema, Sample, Shape


@dataclass
class CorpusConfig:
    count: int = 100
    seed: int = 0
    tag: str = "synth"
    yaw_range: float = 40.0      # degrees
    pitch_range: float = 25.0
    roll_range: float = 25.0
    scale_range: tuple[float, float] = (1.0, 1.3)
    shift_range: float = 6.0     # pixels
    deform_magnitude: float = 4.0  # model units
    deform_seed: int = 12345
    deform_style: str = "independent"  # "independent" | "coupled"
    sign_patterns: list[list[int]] | None = None  # restrict per-part signs
    size: int = FACE_SIZE


def part_deform_modes(model: Model3D, schema: LandmarkSchema,
                      deform_seed: int) -> list[np.ndarray]:
    """One fixed random 3D displacement direction per landmark, grouped by
    part; shared by every face drawn from the same deform_seed."""
    rng = np.random.default_rng(np.random.SeedSequence([int(deform_seed), 0xD3F]))
    modes = []
    for p in range(schema.part_count):
        idx = schema.part_indices(p)
        m = rng.normal(size=(len(idx), 3))
        m /= np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
        modes.append(m)
    return modes


def _face_rng(cfg: CorpusConfig, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0xFACE, i]))


def _deform_coefficients(cfg: CorpusConfig, schema, rng) -> np.ndarray:
    P = schema.part_count
    if cfg.deform_style == "coupled":
        c = np.full(P, float(rng.normal()))
    elif cfg.deform_style == "independent":
        c = rng.normal(size=P)
    else:
        raise ValueError(f"unknown deform_style {cfg.deform_style!r}")
    if cfg.sign_patterns:
        pattern = np.asarray(cfg.sign_patterns[rng.integers(len(cfg.sign_patterns))],
                             dtype=np.float64)
        c = np.abs(c) * pattern
    return c


def generate_corpus(model: Model3D, schema: LandmarkSchema,
                    cfg: CorpusConfig) -> Dataset:
    """Deterministic dataset of projected deformed faces (no map files)."""
    modes = part_deform_modes(model, schema, cfg.deform_seed)
    H = W = cfg.size
    center = np.array([W / 2.0, H / 2.0])
    focal = float(H)
    samples = []
    for i in range(cfg.count):
        rng = _face_rng(cfg, i)
        yaw, pitch, roll = np.radians(rng.uniform(
            [-cfg.yaw_range, -cfg.pitch_range, -cfg.roll_range],
            [cfg.yaw_range, cfg.pitch_range, cfg.roll_range],
        ))
        R = euler_to_rotation(yaw, pitch, roll)
        s = float(rng.uniform(*cfg.scale_range))
        shift = rng.uniform(-cfg.shift_range, cfg.shift_range, size=2)
        coeff = _deform_coefficients(cfg, schema, rng)
        pts = model.points.copy()
        for p in range(schema.part_count):
            idx = schema.part_indices(p)
            pts[idx] += cfg.deform_magnitude * coeff[p] * modes[p]
        cam = pts @ R.T
        coords = center + shift + s * cam[:, :2]
        vis = ((model.normals @ R.T)[:, 2] <= 0.0).astype(np.float64)
        lo = coords.min(axis=0)
        hi = coords.max(axis=0)
        span = hi - lo
        bbox = (
            float(lo[0] - 0.05 * span[0]),
            float(lo[1] - 0.05 * span[1]),
            float(1.1 * span[0]),
            float(1.1 * span[1]),
        )
        gt = Shape(coords, vis, np.ones(len(coords), dtype=np.uint8))
        pose = RigidPose(R, np.array([shift[0] / s, shift[1] / s, focal / s]), focal)
        samples.append(
            Sample(
                image_ref=f"{cfg.tag}_{i:06d}",
                ground_truth=gt,
                bbox=bbox,
                pose=pose,
            )
        )
    return Dataset(samples, schema)


class SyntheticMapSource:
    """On-demand synthetic probability maps, deterministic per sample.

    Geometric augmentation transforms recorded on samples are not applied
    here; occlusion-driven visibility changes already degrade the maps via
    the occluded-dropout channel.
    """

    def __init__(self, cfg: SynthConfig, seed: int,
                 size: tuple[int, int] = (FACE_SIZE, FACE_SIZE),
                 cache_limit: int = 0):
        self.cfg = cfg
        self.seed = int(seed)
        self.size = size
        self.cache_limit = cache_limit
        self._cache: dict[tuple, ProbabilityMaps] = {}

    def maps_for(self, sample) -> ProbabilityMaps:
        # image_ref alone is not unique across corpora sharing a tag
        gt = sample.ground_truth
        key = (sample.image_ref, gt.coords.tobytes(), gt.visibility.tobytes())
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        maps = synthesize(sample, self.cfg, self.seed, self.size)
        if len(self._cache) < self.cache_limit:
            self._cache[key] = maps
        return maps

    def image_for(self, sample) -> np.ndarray:
        """Grayscale surrogate for the ablation mode: max over landmark maps."""
        return self.maps_for(sample).maps.max(axis=0)


class FileMapSource:
    """Maps stored one file per image under a directory.

    Only the mirror transform is honored (maps flipped and landmark maps
    permuted); other geometric transforms are pose-noise-era metadata that
    file-backed corpora do not support.
    """

    def __init__(self, directory, schema: LandmarkSchema | None = None):
        self.directory = directory
        self.schema = schema

    def path_for(self, sample) -> str:
        return os.path.join(self.directory, f"{sample.image_ref}.fapm")

    def maps_for(self, sample) -> ProbabilityMaps:
        maps = read_maps(self.path_for(sample))
        t = sample.transform
        if t is not None and t.mirror and self.schema is not None:
            flipped = maps.maps[self.schema.mirror][:, :, ::-1]
            maps = ProbabilityMaps(np.ascontiguousarray(flipped))
        return maps

    def image_for(self, sample) -> np.ndarray:
        return self.maps_for(sample).maps.max(axis=0)


def write_corpus(dataset: Dataset, synth_cfg: SynthConfig, out_dir,
                 corpus_cfg: CorpusConfig | None = None,
                 write_map_files: bool = True) -> None:
    """Materialize a corpus: annotations, optional map files, manifest."""
    from .shapes import save_dataset

    os.makedirs(out_dir, exist_ok=True)
    maps_dir = os.path.join(out_dir, "maps")
    save_dataset(dataset, os.path.join(out_dir, "annotations.jsonl"))
    if write_map_files:
        os.makedirs(maps_dir, exist_ok=True)
        src = SyntheticMapSource(synth_cfg, synth_cfg_seed(synth_cfg, corpus_cfg))
        for s in dataset.samples:
            write_maps(src.maps_for(s), os.path.join(maps_dir, f"{s.image_ref}.fapm"))
    manifest = {
        "count": len(dataset),
        "landmarks": dataset.schema.landmark_count,
        "synth": {
            "peak_sigma": synth_cfg.peak_sigma,
            "coordinate_noise_sigma": synth_cfg.coordinate_noise_sigma,
            "outlier_rate": synth_cfg.outlier_rate,
            "occluded_dropout": synth_cfg.occluded_dropout,
            "floor": synth_cfg.floor,
        },
        "seed": corpus_cfg.seed if corpus_cfg is not None else None,
        "maps_written": write_map_files,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")


def synth_cfg_seed(synth_cfg, corpus_cfg) -> int:
    return corpus_cfg.seed if corpus_cfg is not None else 0


def attach_pose_initials(dataset: Dataset, model: Model3D, map_source,
                         Z: int = 25, subset_size: int = 6, seed: int = 0) -> int:
    """Run the consensus initializer on every sample, storing shape + pose.

    Returns the number of samples where initialization failed (left for the
    mean-shape fallback downstream).
    """
    failures = 0
    for s in dataset.samples:
        if s.initial is not None:
            continue
        try:
            maps = map_source.maps_for(s)
            x, y, w, h = s.bbox
            res = robust_init(maps, model, Z=Z, subset_size=subset_size,
                              seed=seed, center=(x + w / 2.0, y + h / 2.0))
            s.initial = res.shape
            s.pose = res.pose
        except NumericError:
            failures += 1
    return failures
