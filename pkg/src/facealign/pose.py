"""Rigid 3D face-model fitting to probability-map peaks.

The projection model is weak perspective: every model point shares the
depth of the translation, so an image point is
``center + (focal / t_z) * ((R X + t)_x, (R X + t)_y)``.

fit_pose solves 2D-3D correspondences with a linear scaled-orthographic
estimate refined by Gauss-Newton iterations; robust_init wraps it in a
consensus loop scored by summed map probability.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, InitError, SchemaError
from .heatmaps import FACE_SIZE, map_values, peak_coords
from .shapes import Shape

ORTHONORMAL_TOL = 1e-6
MAX_ITER = 100
STEP_TOL = 1e-6


@dataclass
class Model3D:
    """Rigid landmark model: 3D points, outward normals and distinct flags."""

    points: np.ndarray    # (L, 3) model units
    normals: np.ndarray   # (L, 3) unit outward normals (-z faces the camera)
    distinct: np.ndarray  # (L,) bool: usable for pose correspondences
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        self.distinct = np.asarray(self.distinct, dtype=bool).reshape(-1)
        L = self.points.shape[0]
        if not (self.normals.shape[0] == len(self.distinct) == L):
            raise SchemaError("model arrays must share L")
        if int(self.distinct.sum()) < 4:
            raise SchemaError("need at least 4 distinct landmarks")

    @property
    def landmark_count(self) -> int:
        return self.points.shape[0]

    @property
    def distinct_indices(self) -> np.ndarray:
        return np.flatnonzero(self.distinct)

    @classmethod
    def load(cls, path) -> "Model3D":
        names, pts, nrm, dst = [], [], [], []
        with open(path, "r", encoding="utf-8") as fh:
            for raw in fh:
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                tok = line.split()
                if len(tok) != 8:
                    raise SchemaError(f"model line needs 8 fields, got {len(tok)}")
                names.append(tok[0])
                pts.append([float(v) for v in tok[1:4]])
                nrm.append([float(v) for v in tok[4:7]])
                dst.append(int(tok[7]) != 0)
        return cls(np.array(pts), np.array(nrm), np.array(dst), names)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("# name x y z nx ny nz distinct\n")
            for i in range(self.landmark_count):
                name = self.names[i] if self.names else f"p{i}"
                p, n = self.points[i], self.normals[i]
                fh.write(
                    f"{name} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
                    f"{n[0]:.6f} {n[1]:.6f} {n[2]:.6f} {int(self.distinct[i])}\n"
                )


def _check_rotation(R: np.ndarray) -> None:
    if np.max(np.abs(R @ R.T - np.eye(3))) > ORTHONORMAL_TOL or np.linalg.det(R) < 0:
        raise FitError("rotation matrix fails orthonormality tolerance")


@dataclass
class RigidPose:
    rotation: np.ndarray     # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,) camera frame, z > 0
    focal: float

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        _check_rotation(self.rotation)
        if self.translation[2] <= 0:
            raise FitError("translation must have positive depth")
        if self.focal <= 0:
            raise FitError("focal must be positive")

    @property
    def scale(self) -> float:
        return self.focal / self.translation[2]


@dataclass
class InitResult:
    shape: Shape
    pose: RigidPose
    score: float


def euler_to_rotation(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Radians; applied as R = Rz(roll) @ Rx(pitch) @ Ry(yaw)."""
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    cr, sr = math.cos(roll), math.sin(roll)
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    Rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return Rz @ Rx @ Ry


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic distance between two rotations, radians."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


def _exp_so3(w: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(w)
    K = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
    if theta < 1e-12:
        return np.eye(3) + K
    return (
        np.eye(3)
        + (math.sin(theta) / theta) * K
        + ((1 - math.cos(theta)) / theta**2) * (K @ K)
    )


def perturb_pose(pose: RigidPose, yaw: float, pitch: float, roll: float) -> RigidPose:
    """Compose angle noise (radians) onto the pose's rotation."""
    R = euler_to_rotation(yaw, pitch, roll) @ pose.rotation
    return RigidPose(R, pose.translation.copy(), pose.focal)


def default_center(size=(FACE_SIZE, FACE_SIZE)) -> tuple[float, float]:
    return size[1] / 2.0, size[0] / 2.0


def project_points(model: Model3D, pose: RigidPose,
                   center: tuple[float, float] | None = None):
    """Weak-perspective projection plus pose-driven visibility.

    A landmark is visible when its rotated outward normal still faces the
    camera (non-positive z in the camera frame).
    """
    if center is None:
        center = default_center()
    _check_rotation(pose.rotation)
    cam = model.points @ pose.rotation.T + pose.translation
    s = pose.scale
    coords = np.asarray(center, dtype=np.float64) + s * cam[:, :2]
    rotated_normals = model.normals @ pose.rotation.T
    visibility = (rotated_normals[:, 2] <= 0.0).astype(np.float64)
    return coords, visibility


def score_shape(maps, coords: np.ndarray) -> float:
    """Sum of per-landmark map values at the rounded coordinates."""
    total = 0.0
    for l in range(maps.landmark_count):
        total += float(map_values(maps.maps[l], coords[l : l + 1])[0])
    return total


def _orthonormalize(I: np.ndarray, J: np.ndarray) -> np.ndarray:
    M = np.stack([I, J, np.cross(I, J)])
    U, _, Vt = np.linalg.svd(M)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def fit_pose(coords2d: np.ndarray, points3d: np.ndarray,
             focal: float = float(FACE_SIZE),
             center: tuple[float, float] | None = None) -> RigidPose:
    """Weak-perspective pose from known 2D-3D correspondences.

    Linear scaled-orthographic initialization followed by Gauss-Newton
    refinement of the reprojection residual; stops when the parameter step
    drops below 1e-6 or after 100 iterations.
    """
    if center is None:
        center = default_center()
    uv = np.asarray(coords2d, dtype=np.float64).reshape(-1, 2)
    X = np.asarray(points3d, dtype=np.float64).reshape(-1, 3)
    n = X.shape[0]
    if n < 4 or uv.shape[0] != n:
        raise FitError("need at least 4 correspondences")
    Xc = X - X.mean(axis=0)
    if np.linalg.matrix_rank(Xc, tol=1e-9 * max(1.0, np.abs(Xc).max())) < 3:
        raise FitError("degenerate (coplanar) 3D configuration")

    rel = uv - uv.mean(axis=0)
    I, *_ = np.linalg.lstsq(Xc, rel[:, 0], rcond=None)
    J, *_ = np.linalg.lstsq(Xc, rel[:, 1], rcond=None)
    ni, nj = np.linalg.norm(I), np.linalg.norm(J)
    if ni <= 0 or nj <= 0:
        raise FitError("degenerate orthographic estimate")
    s = math.sqrt(ni * nj)
    R = _orthonormalize(I / ni, J / nj)

    c = np.asarray(center, dtype=np.float64)
    # t holds the scaled in-plane offset: uv = c + s * (R X)_xy + t_xy
    proj = X @ R.T
    txy = (uv - c - s * proj[:, :2]).mean(axis=0)

    for _ in range(MAX_ITER):
        proj = X @ R.T
        pred = c + s * proj[:, :2] + txy
        r = (pred - uv).ravel()
        if not np.all(np.isfinite(r)):
            raise FitError("pose iteration diverged")
        # parameters: rotation increment (3), txy (2), scale (1)
        Jac = np.zeros((2 * n, 6))
        for i in range(n):
            dRX = -R @ _skew(X[i])
            Jac[2 * i, 0:3] = s * dRX[0]
            Jac[2 * i + 1, 0:3] = s * dRX[1]
            Jac[2 * i, 3] = 1.0
            Jac[2 * i + 1, 4] = 1.0
            Jac[2 * i, 5] = proj[i, 0]
            Jac[2 * i + 1, 5] = proj[i, 1]
        try:
            step = np.linalg.lstsq(Jac, -r, rcond=None)[0]
        except np.linalg.LinAlgError as exc:
            raise FitError(f"pose solve failed: {exc}")
        if not np.all(np.isfinite(step)):
            raise FitError("pose iteration diverged")
        R = R @ _exp_so3(step[0:3])
        txy = txy + step[3:5]
        s = s + step[5]
        if s <= 0:
            raise FitError("negative projection scale")
        if np.linalg.norm(step) < STEP_TOL:
            break

    tz = focal / s
    t = np.array([txy[0] / s, txy[1] / s, tz])
    return RigidPose(R, t, focal)


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])


def robust_init(maps, model: Model3D, Z: int = 25, subset_size: int = 6,
                seed: int = 0, focal: float | None = None,
                center: tuple[float, float] | None = None) -> InitResult:
    """Consensus pose search over random distinct-landmark subsets.

    Each of the Z hypotheses fits a pose to the map peaks of a random
    subset, projects the full model and scores the projection by summed
    map probability; the best-scoring pose wins (lowest iteration index on
    ties).
    """
    if Z < 1:
        raise ValueError("Z must be >= 1")
    distinct = model.distinct_indices
    if subset_size < 4 or subset_size > len(distinct):
        raise ValueError("subset_size must lie in [4, |distinct|]")
    H, W = maps.face_size
    if center is None:
        center = (W / 2.0, H / 2.0)
    if focal is None:
        focal = float(H)
    peaks = peak_coords(maps)
    best = None
    for z in range(Z):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x9A, z]))
        ids = rng.choice(distinct, size=subset_size, replace=False)
        try:
            pose = fit_pose(peaks[ids], model.points[ids], focal=focal, center=center)
        except FitError:
            continue
        coords, vis = project_points(model, pose, center=center)
        score = score_shape(maps, coords)
        if best is None or score > best[0]:
            best = (score, coords, vis, pose)
    if best is None:
        raise InitError("all pose hypotheses failed to fit")
    score, coords, vis, pose = best
    shape = Shape(coords, vis, np.ones(len(vis), dtype=np.uint8))
    return InitResult(shape=shape, pose=pose, score=score)


def mean_shape_init(train) -> Shape:
    """Per-landmark mean of annotated ground-truth shapes in bbox units.

    Coordinates are normalized to the unit bbox; anchor_shape maps them
    onto a concrete face box.
    """
    if len(train) == 0:
        raise ValueError("empty training set")
    L = train.schema.landmark_count
    acc = np.zeros((L, 2))
    cnt = np.zeros(L)
    for s in train.samples:
        x, y, w, h = s.bbox
        gt = s.ground_truth
        norm = (gt.coords - (x, y)) / (w, h)
        mask = gt.annotated.astype(bool)
        acc[mask] += norm[mask]
        cnt[mask] += 1
    if np.any(cnt == 0):
        missing = np.flatnonzero(cnt == 0)
        raise ValueError(f"landmarks never annotated: {missing.tolist()}")
    mean = acc / cnt[:, None]
    return Shape(mean, np.ones(L), np.ones(L, dtype=np.uint8))


def anchor_shape(mean: Shape, bbox) -> Shape:
    """Place a bbox-normalized mean shape into a concrete bounding box."""
    x, y, w, h = bbox
    coords = mean.coords * (w, h) + (x, y)
    return Shape(coords, mean.visibility.copy(), mean.annotated.copy())
