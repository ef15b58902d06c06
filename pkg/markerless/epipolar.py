"""
epipolar.py - Uncalibrated two-view geometry.

Fundamental matrix by RANSAC over normalized 8-point samples, pseudo-intrinsics,
essential matrix, relative pose by cheirality vote, and DLT triangulation.
Camera 1 is [I | 0], camera 2 is [R | t]; the OpenCV axis convention (z forward).
"""

import logging
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import CheiralityError, DegenerateGeometryError, InsufficientCorrespondenceError
from .pose_data import CameraModel, Joint3D

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
TAU_F = 0.005  # Sampson distance threshold, Hartley-normalized units
RANSAC_ITERATIONS = 2000
RANSAC_SEED = 0
MIN_CORRESPONDENCES = 8
FOCAL_SCALE = 1.0
RANK_TOLERANCE = 1e-10
CHEIRALITY_MAJORITY = 0.5

# pi/2 about z, used by the essential decomposition
_W = np.array([[0.0, -1.0, 0.0],
               [1.0, 0.0, 0.0],
               [0.0, 0.0, 1.0]])


# ======================
# TYPES
# ======================
@dataclass(frozen=True, eq=False)
class FundamentalMatrix:
    matrix: np.ndarray  # rank 2, unit Frobenius norm, pixel coordinates
    inliers: np.ndarray  # bool mask over correspondences
    tau: float
    T1: np.ndarray  # Hartley normalizers the threshold is expressed in
    T2: np.ndarray

    @property
    def inlier_count(self) -> int:
        return int(np.count_nonzero(self.inliers))

    @property
    def normalized_matrix(self) -> np.ndarray:
        Fn = np.linalg.inv(self.T2).T @ self.matrix @ np.linalg.inv(self.T1)
        return Fn / np.linalg.norm(Fn)

    def normalized_sampson(self, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
        return sampson_distance(self.normalized_matrix, apply_transform(self.T1, u1), apply_transform(self.T2, u2))


@dataclass(frozen=True, eq=False)
class RelativePose:
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if not np.allclose(self.R.T @ self.R, np.eye(3), atol=1e-9) or not np.isclose(np.linalg.det(self.R), 1.0):
            raise ValueError("R is not a rotation")
        if not np.isclose(np.linalg.norm(self.t), 1.0):
            raise ValueError("t must be a unit vector")


# ======================
# HELPERS
# ======================
def hat(v: Sequence[float]) -> np.ndarray:
    """Skew-symmetric cross-product matrix."""
    x, y, z = np.asarray(v, dtype=float).reshape(3)
    return np.array([[0.0, -z, y],
                     [z, 0.0, -x],
                     [-y, x, 0.0]])


def homogeneous(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=float)
    return np.hstack([points, np.ones((len(points), 1))])


def apply_transform(T: np.ndarray, points: np.ndarray) -> np.ndarray:
    mapped = homogeneous(points) @ T.T
    return mapped[:, :2] / mapped[:, 2:3]


def hartley_normalize(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Translate to the centroid and scale so the mean distance from it is sqrt(2)."""
    points = np.asarray(points, dtype=float)
    centroid = points.mean(axis=0)
    mean_dist = np.linalg.norm(points - centroid, axis=1).mean()
    if not np.isfinite(mean_dist) or mean_dist <= 1e-12:
        raise DegenerateGeometryError("points are coincident; cannot normalize")
    s = np.sqrt(2.0) / mean_dist
    T = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    return apply_transform(T, points), T


def enforce_rank2(F: np.ndarray) -> np.ndarray:
    U, S, Vt = np.linalg.svd(F)
    S[-1] = 0.0
    return U @ np.diag(S) @ Vt


def eight_point(x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
    """Linear estimate from >= 8 (already normalized) pairs, rank 2, unit norm."""
    if len(x1) < MIN_CORRESPONDENCES:
        raise InsufficientCorrespondenceError(f"8-point needs >= 8 pairs, got {len(x1)}")
    A = np.column_stack([
        x2[:, 0] * x1[:, 0], x2[:, 0] * x1[:, 1], x2[:, 0],
        x2[:, 1] * x1[:, 0], x2[:, 1] * x1[:, 1], x2[:, 1],
        x1[:, 0], x1[:, 1], np.ones(len(x1)),
    ])
    _, _, Vt = np.linalg.svd(A)
    F = enforce_rank2(Vt[-1].reshape(3, 3))
    return F / np.linalg.norm(F)


def sampson_distance(F: np.ndarray, x1: np.ndarray, x2: np.ndarray, squared: bool = False) -> np.ndarray:
    """First-order geometric distance of each pair to the epipolar model."""
    h1, h2 = homogeneous(x1), homogeneous(x2)
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    algebraic = np.sum(h2 * Fx1, axis=1)
    denom = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    sq = algebraic ** 2 / np.maximum(denom, 1e-300)
    return sq if squared else np.sqrt(sq)


# ======================
# FUNDAMENTAL MATRIX
# ======================
def estimate_fundamental(
        u1: np.ndarray,
        u2: np.ndarray,
        tau: float = TAU_F,
        iterations: int = RANSAC_ITERATIONS,
        seed: int = RANSAC_SEED,
) -> FundamentalMatrix:
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    M = len(u1)
    if M < MIN_CORRESPONDENCES or len(u2) != M:
        raise InsufficientCorrespondenceError(f"need >= 8 matched pairs, got {M}")

    x1, T1 = hartley_normalize(u1)
    x2, T2 = hartley_normalize(u2)
    rng = np.random.default_rng(seed)

    best = np.zeros(M, dtype=bool)
    for _ in range(iterations):
        sample = rng.choice(M, size=MIN_CORRESPONDENCES, replace=False)
        Fn = eight_point(x1[sample], x2[sample])
        inliers = sampson_distance(Fn, x1, x2) < tau
        if inliers.sum() > best.sum():
            best = inliers
            if best.all():
                break

    if best.sum() < MIN_CORRESPONDENCES:
        raise DegenerateGeometryError(f"best RANSAC model has {int(best.sum())} inliers")

    # refit on the consensus set until it stops changing
    Fn = eight_point(x1[best], x2[best])
    for _ in range(5):
        refit = sampson_distance(Fn, x1, x2) < tau
        if refit.sum() < MIN_CORRESPONDENCES or np.array_equal(refit, best):
            break
        best = refit
        Fn = eight_point(x1[best], x2[best])

    F = enforce_rank2(T2.T @ Fn @ T1)
    F /= np.linalg.norm(F)
    fm = FundamentalMatrix(F, best, tau, T1, T2)
    # inliers are judged on the returned matrix itself
    inliers = fm.normalized_sampson(u1, u2) < tau
    if inliers.sum() < MIN_CORRESPONDENCES:
        raise DegenerateGeometryError("consensus refit left fewer than 8 inliers")
    logger.info("Fundamental matrix: %d/%d inliers at tau %.4g", int(inliers.sum()), M, tau)
    return replace(fm, inliers=inliers)


# ======================
# CALIBRATION-FREE POSE
# ======================
def pseudo_intrinsics(width: int, height: int, focal_scale: float = FOCAL_SCALE) -> CameraModel:
    if width <= 0 or height <= 0:
        raise ValueError("image size must be positive")
    f = focal_scale * max(width, height)
    return CameraModel(f, f, width / 2.0, height / 2.0, int(width), int(height))


def essential_from_fundamental(F: np.ndarray, K1: np.ndarray, K2: np.ndarray) -> np.ndarray:
    """E = K2^T F K1 projected onto singular values (s, s, 0)."""
    E = K2.T @ F @ K1
    U, S, Vt = np.linalg.svd(E)
    s = 0.5 * (S[0] + S[1])
    return U @ np.diag([s, s, 0.0]) @ Vt


def decompose_essential(E: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    U, _, Vt = np.linalg.svd(E)
    if np.linalg.det(U) < 0:
        U[:, -1] *= -1
    if np.linalg.det(Vt) < 0:
        Vt[-1, :] *= -1
    R1 = U @ _W @ Vt
    R2 = U @ _W.T @ Vt
    t = U[:, 2] / np.linalg.norm(U[:, 2])
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def orthonormalize(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] *= -1
        R = U @ Vt
    return R


def recover_pose(
        E: np.ndarray,
        u1: np.ndarray,
        u2: np.ndarray,
        K1: np.ndarray,
        K2: np.ndarray,
) -> RelativePose:
    """Pick the decomposition candidate that puts most points in front of both cameras."""
    u1 = np.asarray(u1, dtype=float)
    u2 = np.asarray(u2, dtype=float)
    best_count, best = -1, None
    for R, t in decompose_essential(E):
        _, valid = triangulate_points(u1, u2, K1, K2, R, t)
        count = int(valid.sum())
        logger.debug("Pose candidate: %d/%d points in front", count, len(u1))
        if count > best_count:
            best_count, best = count, (R, t)
    if best_count <= CHEIRALITY_MAJORITY * len(u1):
        raise CheiralityError(f"no pose candidate puts more than half the points in front ({best_count}/{len(u1)})")
    R, t = best
    return RelativePose(orthonormalize(R), t / np.linalg.norm(t))


# ======================
# TRIANGULATION
# ======================
def projection_matrices(K1: np.ndarray, K2: np.ndarray, R: np.ndarray, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P1 = K1 @ np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = K2 @ np.hstack([R, np.asarray(t, dtype=float).reshape(3, 1)])
    return P1, P2


def triangulate_points(
        u1: np.ndarray,
        u2: np.ndarray,
        K1: np.ndarray,
        K2: np.ndarray,
        R: np.ndarray,
        t: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised DLT; returns (X (M, 3), valid (M,)). Invalid points carry NaN."""
    u1 = np.asarray(u1, dtype=float).reshape(-1, 2)
    u2 = np.asarray(u2, dtype=float).reshape(-1, 2)
    P1, P2 = projection_matrices(K1, K2, R, t)
    A = np.stack([
        u1[:, 0:1] * P1[2] - P1[0],
        u1[:, 1:2] * P1[2] - P1[1],
        u2[:, 0:1] * P2[2] - P2[0],
        u2[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    A /= np.maximum(np.linalg.norm(A, axis=2, keepdims=True), 1e-300)
    _, S, Vt = np.linalg.svd(A)
    Xh = Vt[:, -1, :]

    with np.errstate(divide="ignore", invalid="ignore"):
        X = Xh[:, :3] / Xh[:, 3:4]
        full_rank = S[:, -2] / S[:, 0] >= RANK_TOLERANCE
        depth1 = X[:, 2]
        depth2 = (X @ R.T + np.asarray(t).reshape(1, 3))[:, 2]
        valid = full_rank & np.isfinite(X).all(axis=1) & (depth1 > 0) & (depth2 > 0)
    X = np.where(valid[:, None], X, np.nan)
    return X, valid


def triangulate(u1, u2, K1: np.ndarray, K2: np.ndarray, R: np.ndarray, t: np.ndarray) -> Joint3D:
    if not (np.isfinite(u1).all() and np.isfinite(u2).all()):
        return Joint3D(np.nan, np.nan, np.nan, False)
    X, valid = triangulate_points(np.asarray(u1)[None], np.asarray(u2)[None], K1, K2, R, t)
    if not valid[0]:
        return Joint3D(np.nan, np.nan, np.nan, False)
    return Joint3D(float(X[0, 0]), float(X[0, 1]), float(X[0, 2]), True)


def project(X: np.ndarray, K: np.ndarray, R: np.ndarray = np.eye(3), t: np.ndarray = np.zeros(3)) -> np.ndarray:
    cam = np.asarray(X, dtype=float) @ R.T + np.asarray(t, dtype=float).reshape(1, 3)
    pix = cam @ K.T
    return pix[:, :2] / pix[:, 2:3]


def reprojection_residuals(
        X: np.ndarray,
        u1: np.ndarray,
        u2: np.ndarray,
        K1: np.ndarray,
        K2: np.ndarray,
        R: np.ndarray,
        t: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Pixel distance between observations and reprojections in each view."""
    r1 = np.linalg.norm(project(X, K1) - u1, axis=1)
    r2 = np.linalg.norm(project(X, K2, R, t) - u2, axis=1)
    return r1, r2
