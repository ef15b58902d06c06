"""
bundle_adjust.py - Joint refinement of 3D joints and relative pose with Adam.

Objective over P points observed in both views:

    L = lam_rep  * sum_v sum_p c_vp * huber(|u_vp - proj_v(X_p)|^2)
      + lam_epi  * sum_p sampson^2(F, proj_1(X_p), proj_2(X_p))
      + lam_bone * sum_limbs sum_frames (len - mean len)^2

The intrinsics and F stay fixed. Camera 2's rotation moves through a left
increment exp([w]x) R that is folded back into R after every step.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation
from tqdm import tqdm

from .epipolar import orthonormalize, project
from .errors import DivergenceError

logger = logging.getLogger(__name__)

# ======================
# CONFIGURATION
# ======================
LAMBDA_REP = 1.0
LAMBDA_EPI = 0.1
LAMBDA_BONE = 0.0
HUBER_DELTA = 10.0  # px
LEARNING_RATE = 1e-3
BETAS = (0.9, 0.999)
EPSILON = 1e-8
ITERATIONS = 500
GRAD_TOL = 1e-9


class Adam:
    """Adam over a dict of named arrays, updated in place."""

    def __init__(self, lr: float = LEARNING_RATE, beta1: float = BETAS[0], beta2: float = BETAS[1],
                 epsilon: float = EPSILON):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        step_size = self.lr / bc1

        for k in params:
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] *= self.beta1
            self.m[k] += (1.0 - self.beta1) * g
            self.v[k] *= self.beta2
            self.v[k] += (1.0 - self.beta2) * (g * g)
            params[k] -= step_size * self.m[k] / (np.sqrt(self.v[k] / bc2) + self.epsilon)


@dataclass(eq=False)
class BundleProblem:
    X: np.ndarray  # (P, 3) initial structure
    R: np.ndarray
    t: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    u1: np.ndarray  # (P, 2) observations
    u2: np.ndarray
    c1: np.ndarray  # (P,) confidence weights
    c2: np.ndarray
    F: np.ndarray  # fixed RANSAC fundamental matrix, pixel coordinates
    lambda_rep: float = LAMBDA_REP
    lambda_epi: float = LAMBDA_EPI
    lambda_bone: float = LAMBDA_BONE
    huber_delta: float = HUBER_DELTA
    bone_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    bone_groups: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.K1 = np.array(self.K1, dtype=float)
        self.K2 = np.array(self.K2, dtype=float)
        self.K1.setflags(write=False)
        self.K2.setflags(write=False)

    @property
    def num_points(self) -> int:
        return int(self.X.shape[0])


@dataclass(eq=False)
class BundleResult:
    X: np.ndarray
    R: np.ndarray
    t: np.ndarray
    loss_trace: list[float]
    initial_loss: float
    final_loss: float
    best_iteration: int


# ======================
# OBJECTIVE
# ======================
def _project_with_jacobian(Y: np.ndarray, K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Pixel projection of camera-frame points and d(pixel)/d(Y), (P, 2, 3)."""
    p = Y @ K.T
    z = p[:, 2]
    du_dp = np.zeros((len(Y), 2, 3))
    du_dp[:, 0, 0] = 1.0 / z
    du_dp[:, 1, 1] = 1.0 / z
    du_dp[:, 0, 2] = -p[:, 0] / z ** 2
    du_dp[:, 1, 2] = -p[:, 1] / z ** 2
    return p[:, :2] / z[:, None], du_dp @ K


def _huber(s: np.ndarray, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """Huber on squared norms: value and derivative with respect to s."""
    root = np.sqrt(s)
    inside = s <= delta * delta
    value = np.where(inside, s, 2.0 * delta * root - delta * delta)
    slope = np.where(inside, 1.0, delta / np.maximum(root, 1e-300))
    return value, slope


def _sampson_sq_with_grad(F: np.ndarray, x1: np.ndarray, x2: np.ndarray):
    """Squared Sampson distance per pair and its gradients w.r.t. both pixels."""
    h1 = np.hstack([x1, np.ones((len(x1), 1))])
    h2 = np.hstack([x2, np.ones((len(x2), 1))])
    Fx1 = h1 @ F.T
    Ftx2 = h2 @ F
    a = np.sum(h2 * Fx1, axis=1)
    D = Fx1[:, 0] ** 2 + Fx1[:, 1] ** 2 + Ftx2[:, 0] ** 2 + Ftx2[:, 1] ** 2
    D = np.maximum(D, 1e-300)
    value = a * a / D

    da_dx1 = Ftx2[:, :2]
    da_dx2 = Fx1[:, :2]
    dD_dx1 = 2.0 * (Fx1[:, 0:1] * F[0, :2] + Fx1[:, 1:2] * F[1, :2])
    dD_dx2 = 2.0 * (Ftx2[:, 0:1] * F[:2, 0] + Ftx2[:, 1:2] * F[:2, 1])
    g1 = (2.0 * a / D)[:, None] * da_dx1 - (a * a / D ** 2)[:, None] * dD_dx1
    g2 = (2.0 * a / D)[:, None] * da_dx2 - (a * a / D ** 2)[:, None] * dD_dx2
    return value, g1, g2


def loss_and_grad(problem: BundleProblem, X: np.ndarray, R: np.ndarray, t: np.ndarray):
    """Objective and analytic gradients {"X", "w", "t"}; "w" is the left rotation increment at zero."""
    t = np.asarray(t, dtype=float).reshape(3)
    lam_rep, delta = problem.lambda_rep, problem.huber_delta

    uhat1, J1 = _project_with_jacobian(X, problem.K1)
    RX = X @ R.T
    uhat2, J2 = _project_with_jacobian(RX + t, problem.K2)

    r1 = uhat1 - problem.u1
    r2 = uhat2 - problem.u2
    rho1, d1 = _huber(np.sum(r1 * r1, axis=1), delta)
    rho2, d2 = _huber(np.sum(r2 * r2, axis=1), delta)
    loss = lam_rep * float(np.sum(problem.c1 * rho1) + np.sum(problem.c2 * rho2))
    g_u1 = (lam_rep * problem.c1 * d1 * 2.0)[:, None] * r1
    g_u2 = (lam_rep * problem.c2 * d2 * 2.0)[:, None] * r2

    if problem.lambda_epi:
        sq, gs1, gs2 = _sampson_sq_with_grad(problem.F, uhat1, uhat2)
        loss += problem.lambda_epi * float(np.sum(sq))
        g_u1 = g_u1 + problem.lambda_epi * gs1
        g_u2 = g_u2 + problem.lambda_epi * gs2

    gY2 = np.einsum("pi,pij->pj", g_u2, J2)
    gX = np.einsum("pi,pij->pj", g_u1, J1) + gY2 @ R
    gt = gY2.sum(axis=0)
    gw = np.cross(RX, gY2).sum(axis=0)

    if problem.lambda_bone and len(problem.bone_pairs):
        a, b = problem.bone_pairs[:, 0], problem.bone_pairs[:, 1]
        d = X[a] - X[b]
        length = np.linalg.norm(d, axis=1)
        groups = problem.bone_groups
        sums = np.bincount(groups, weights=length)
        counts = np.bincount(groups)
        err = length - (sums / np.maximum(counts, 1))[groups]
        loss += problem.lambda_bone * float(np.sum(err * err))
        coef = (2.0 * problem.lambda_bone * err / np.maximum(length, 1e-300))[:, None] * d
        np.add.at(gX, a, coef)
        np.add.at(gX, b, -coef)

    return loss, {"X": gX, "w": gw, "t": gt}


def objective(problem: BundleProblem, X: np.ndarray, R: np.ndarray, t: np.ndarray) -> float:
    return loss_and_grad(problem, X, R, t)[0]


def mean_reprojection_error(problem: BundleProblem, X: np.ndarray, R: np.ndarray, t: np.ndarray) -> float:
    e1 = np.linalg.norm(project(X, problem.K1) - problem.u1, axis=1)
    e2 = np.linalg.norm(project(X, problem.K2, R, t) - problem.u2, axis=1)
    return float(np.mean(np.concatenate([e1, e2])))


# ======================
# OPTIMIZATION
# ======================
def bundle_adjust(
        problem: BundleProblem,
        iterations: int = ITERATIONS,
        lr: float = LEARNING_RATE,
        betas: tuple[float, float] = BETAS,
        grad_tol: float = GRAD_TOL,
        progress: bool = False,
) -> BundleResult:
    """
    Adam with best-iterate checkpointing, so the returned objective never exceeds the
    starting one. Structure and translation are stepped in pixel-scaled units and the
    rotation increment in focal-length-scaled radians, so one step moves every block by
    a comparable amount on the image. The result is gauge-fixed to |t| = 1.
    """
    X = np.array(problem.X, dtype=float)
    R = np.array(problem.R, dtype=float)
    t = np.array(problem.t, dtype=float).reshape(3)

    focal = float(np.mean([problem.K1[0, 0], problem.K1[1, 1], problem.K2[0, 0], problem.K2[1, 1]]))
    depths = X[:, 2][X[:, 2] > 0]
    sx = focal / float(np.median(depths)) if len(depths) else 1.0
    sw = focal

    loss, grads = loss_and_grad(problem, X, R, t)
    if not np.isfinite(loss):
        raise DivergenceError(0)
    trace = [loss]
    best = (loss, X.copy(), R.copy(), t.copy(), 0)

    adam = Adam(lr, betas[0], betas[1])
    params = {"X": X * sx, "t": t * sx, "w": np.zeros(3)}
    steps = tqdm(range(1, iterations + 1), desc="bundle adjustment", disable=not progress, leave=False)
    for it in steps:
        if max(float(np.max(np.abs(g))) if g.size else 0.0 for g in grads.values()) < grad_tol:
            logger.debug("Gradient below %.1e at iteration %d; stopping", grad_tol, it - 1)
            break
        adam.step(params, {"X": grads["X"] / sx, "t": grads["t"] / sx, "w": grads["w"] / sw})
        R = orthonormalize(Rotation.from_rotvec(params["w"] / sw).as_matrix() @ R)
        params["w"][:] = 0.0
        X = params["X"] / sx
        t = params["t"] / sx

        loss, grads = loss_and_grad(problem, X, R, t)
        if not np.isfinite(loss):
            raise DivergenceError(it)
        trace.append(loss)
        if loss < best[0]:
            best = (loss, X.copy(), R.copy(), t.copy(), it)

    best_loss, X, R, t, best_it = best
    norm = float(np.linalg.norm(t))
    if norm > 0:
        X, t = X / norm, t / norm
    logger.info("Bundle adjustment: loss %.6g -> %.6g (best at iteration %d of %d)",
                trace[0], best_loss, best_it, len(trace) - 1)
    return BundleResult(X, R, t, trace, trace[0], best_loss, best_it)


def bone_pairs_for(points: list[tuple[int, int]], limbs) -> tuple[np.ndarray, np.ndarray]:
    """Point-index pairs (and limb ids) for every limb whose two joints are both present in a frame."""
    index = {key: i for i, key in enumerate(points)}
    pairs, groups = [], []
    frames = sorted({frame for frame, _ in points})
    for limb_id, (ja, jb) in enumerate(limbs):
        for frame in frames:
            a, b = index.get((frame, ja)), index.get((frame, jb))
            if a is not None and b is not None:
                pairs.append((a, b))
                groups.append(limb_id)
    if not pairs:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.asarray(pairs, dtype=np.int64), np.asarray(groups, dtype=np.int64)
