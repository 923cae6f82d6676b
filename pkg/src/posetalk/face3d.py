"""Linear morphable face geometry and landmark-based parameter fitting.

A face shape is the mean mesh plus two linear deformation terms: an
80-coefficient identity term and a 64-coefficient expression term. Shapes
are posed rigidly (rotation + translation), projected with a
weak-perspective camera, and compared to target landmarks through a
per-point weighted squared loss. `fit_params` inverts that forward map by
preconditioned gradient descent with analytic gradients.

The synthetic basis produced by `make_basis` is constructed so that the
expression columns restricted to landmarks are orthonormal and the
identity columns are orthogonal to them; with that structure the
expression coefficients are identifiable from a single landmark frame
even though 2*K observations cannot pin down all 144 coefficients.
"""

from dataclasses import dataclass, field

import numpy as np

from .arrayio import save_arrays, load_arrays
from .errors import ValidationError, FitDivergenceError

N_ID = 80
N_EXP = 64
N_LANDMARKS = 68

# 68-point landmark groups (jaw 0-16, brows 17-26, nose 27-35, eyes 36-47,
# outer mouth 48-59, inner mouth 60-67)
JAW = list(range(0, 17))
BROWS = list(range(17, 27))
NOSE = list(range(27, 36))
EYES = list(range(36, 48))
MOUTH = list(range(48, 68))
INNER_MOUTH = list(range(60, 68))
HIGH_WEIGHT_POINTS = NOSE + MOUTH  # weight 20, everything else 1


@dataclass
class HeadPose:
    """Rigid transform: rotation matrix R and translation T."""

    R: np.ndarray
    T: np.ndarray

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        if self.R.shape != (3, 3) or self.T.shape != (3,):
            raise ValidationError(f"bad pose shapes R{self.R.shape} T{self.T.shape}")

    def validate(self, tol=1e-6):
        err = np.abs(self.R.T @ self.R - np.eye(3)).max()
        if err > tol:
            raise ValidationError(f"R not orthonormal (max error {err:.2e})")
        if abs(np.linalg.det(self.R) - 1.0) > tol:
            raise ValidationError("det(R) != 1")
        return self

    @staticmethod
    def identity():
        return HeadPose(np.eye(3), np.zeros(3))


@dataclass
class Camera:
    """Weak-perspective camera: pixel = (s*x + cx, -s*y + cy)."""

    scale: float
    principal: np.ndarray

    def __post_init__(self):
        self.principal = np.asarray(self.principal, dtype=np.float64)
        if self.scale <= 0:
            raise ValidationError(f"camera scale must be positive, got {self.scale}")
        if self.principal.shape != (2,):
            raise ValidationError("principal point must be length 2")

    def to_dict(self):
        return {"scale": float(self.scale), "principal": self.principal.tolist()}

    @staticmethod
    def from_dict(d):
        return Camera(d["scale"], np.asarray(d["principal"]))


@dataclass
class MorphableBasis:
    mean_shape: np.ndarray        # (V, 3)
    id_basis: np.ndarray          # (V, 3, N_ID)
    exp_basis: np.ndarray         # (V, 3, N_EXP)
    landmark_indices: np.ndarray  # (K,)
    landmark_weights: np.ndarray  # (K,)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = self.mean_shape.shape[0]
        if self.mean_shape.shape != (v, 3):
            raise ValidationError("mean_shape must be (V, 3)")
        if self.id_basis.shape[:2] != (v, 3) or self.exp_basis.shape[:2] != (v, 3):
            raise ValidationError("basis tensors must be (V, 3, n)")
        if self.landmark_indices.max() >= v:
            raise ValidationError("landmark index out of range")
        if self.landmark_indices.shape != self.landmark_weights.shape:
            raise ValidationError("landmark indices/weights length mismatch")
        if np.any(self.landmark_weights <= 0):
            raise ValidationError("landmark weights must be positive")

    @property
    def n_vertices(self):
        return self.mean_shape.shape[0]

    @property
    def n_id(self):
        return self.id_basis.shape[2]

    @property
    def n_exp(self):
        return self.exp_basis.shape[2]

    @property
    def n_landmarks(self):
        return len(self.landmark_indices)


def assemble_shape(basis, alpha, beta):
    """Mean shape plus identity and expression deformations (exact linear map)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if alpha.shape != (basis.n_id,):
        raise ValidationError(f"alpha must be ({basis.n_id},), got {alpha.shape}")
    if beta.shape != (basis.n_exp,):
        raise ValidationError(f"beta must be ({basis.n_exp},), got {beta.shape}")
    return basis.mean_shape + basis.id_basis @ alpha + basis.exp_basis @ beta


def apply_pose(shape, pose):
    pose.validate()
    return shape @ pose.R.T + pose.T


def project_points(points3d, camera):
    """Weak-perspective projection of (N, 3) points; y flips to image rows."""
    x = camera.scale * points3d[:, 0] + camera.principal[0]
    y = -camera.scale * points3d[:, 1] + camera.principal[1]
    return np.stack([x, y], axis=1)


def project_landmarks(shape, basis, camera):
    return project_points(shape[basis.landmark_indices], camera)


def landmark_loss(pred, gt, weights):
    """(1/K) * sum_n w_n * ||pred_n - gt_n||^2 over image-plane points."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"landmark count mismatch: {pred.shape} vs {gt.shape}")
    if weights.shape[0] != pred.shape[0]:
        raise ValidationError("weights length mismatch")
    diff = pred - gt
    return float(np.sum(weights * np.sum(diff * diff, axis=1)) / pred.shape[0])


def default_landmark_weights(high=20.0, low=1.0):
    w = np.full(N_LANDMARKS, low)
    w[HIGH_WEIGHT_POINTS] = high
    return w


# ---------------------------------------------------------------------------
# rotations

def rotation_from_axis_angle(w):
    """Rodrigues formula; w is axis * angle."""
    w = np.asarray(w, dtype=np.float64)
    angle = np.linalg.norm(w)
    if angle < 1e-12:
        K = skew(w)
        return np.eye(3) + K  # first-order, exact enough below 1e-12
    axis = w / angle
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def skew(v):
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def orthonormalize(R):
    """Nearest rotation matrix (polar factor via SVD)."""
    u, _, vt = np.linalg.svd(R)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def rotation_yx(yaw, pitch, roll=0.0):
    """Compose R = Ry(yaw) @ Rx(pitch) @ Rz(roll)."""
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    return ry @ rx @ rz


def pose_angles(R):
    """Extract (yaw, pitch, roll) for the Ry@Rx@Rz composition."""
    pitch = np.arcsin(np.clip(-R[1, 2], -1.0, 1.0))
    yaw = np.arctan2(R[0, 2], R[2, 2])
    roll = np.arctan2(R[1, 0], R[1, 1])
    return yaw, pitch, roll


# ---------------------------------------------------------------------------
# fitting

@dataclass
class FitConfig:
    max_iters: int = 500
    # Tikhonov weight on ||alpha||^2 + ||beta||^2. The weight couples to the
    # pose estimate and biases recovered coefficients roughly linearly, so
    # it is kept small by default.
    reg: float = 1e-5
    fit_scale: bool = True
    solver: str = "lm"             # "lm" (damped Gauss-Newton) or "gd"
    grad_tol: float = 1e-8
    step_init: float = 1.0
    armijo_c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 30


@dataclass
class FitReport:
    landmark_loss: float
    total_loss: float
    iterations: int
    converged: bool


@dataclass
class FitResult:
    alpha: np.ndarray
    beta: np.ndarray
    pose: HeadPose
    camera: Camera
    report: FitReport


def _loss_and_grads(basis, alpha, beta, R, T, camera, target, reg):
    """Objective value and analytic gradients.

    Returns (total, lm_loss, grads) where grads has keys alpha, beta, T,
    omega (rotation tangent for a left perturbation exp([w]x) @ R), scale.
    """
    lmk = basis.landmark_indices
    w = basis.landmark_weights
    K = len(lmk)
    s = camera.scale

    v = (basis.mean_shape[lmk]
         + basis.id_basis[lmk] @ alpha
         + basis.exp_basis[lmk] @ beta)          # (K, 3) pre-pose
    u = v @ R.T                                   # rotated, pre-translation
    p3 = u + T
    pred = np.stack([s * p3[:, 0] + camera.principal[0],
                     -s * p3[:, 1] + camera.principal[1]], axis=1)
    r = pred - target
    lm_loss = float(np.sum(w * np.sum(r * r, axis=1)) / K)
    total = lm_loss + reg * (alpha @ alpha + beta @ beta)

    # dL/d(posed point), z component unobserved under weak perspective
    coef = (2.0 / K) * w[:, None] * r              # (K, 2)
    g_pts = np.zeros((K, 3))
    g_pts[:, 0] = s * coef[:, 0]
    g_pts[:, 1] = -s * coef[:, 1]

    g_T = g_pts.sum(axis=0)
    g_omega = np.cross(u, g_pts).sum(axis=0)       # left-perturbation tangent
    back = g_pts @ R                               # dL/dv (pre-pose)
    g_alpha = np.einsum("nc,nck->k", back, basis.id_basis[lmk]) + 2.0 * reg * alpha
    g_beta = np.einsum("nc,nck->k", back, basis.exp_basis[lmk]) + 2.0 * reg * beta
    g_scale = float(np.sum(coef[:, 0] * p3[:, 0] - coef[:, 1] * p3[:, 1]))

    grads = {"alpha": g_alpha, "beta": g_beta, "T": g_T, "omega": g_omega,
             "scale": g_scale}
    return total, lm_loss, grads


def loss_and_gradients(basis, alpha, beta, pose, camera, target, reg=0.0):
    """Public wrapper used by the gradient-check suite."""
    total, lm, grads = _loss_and_grads(
        basis, np.asarray(alpha, float), np.asarray(beta, float),
        pose.R, pose.T, camera, np.asarray(target, float), reg)
    return total, lm, grads


def _init_camera_and_translation(target, basis, fit_scale, camera):
    lm_mean = basis.mean_shape[basis.landmark_indices]
    c = target.mean(axis=0)
    if camera is not None:
        s0 = camera.scale
        principal = camera.principal
    else:
        spread_t = np.sqrt(np.mean(np.sum((target - c) ** 2, axis=1)))
        xy = lm_mean[:, :2]
        spread_m = np.sqrt(np.mean(np.sum((xy - xy.mean(axis=0)) ** 2, axis=1)))
        s0 = max(spread_t / max(spread_m, 1e-9), 1e-6)
        principal = c.copy()
    t0 = np.zeros(3)
    t0[0] = (c[0] - principal[0]) / s0 - lm_mean[:, 0].mean()
    t0[1] = -(c[1] - principal[1]) / s0 - lm_mean[:, 1].mean()
    return s0, principal, t0


def _curvature_diagonals(basis, s, reg):
    """Rough diagonal curvature of the landmark loss per parameter block.

    Used as a fixed preconditioner: blocks differ by orders of magnitude
    (a pixel of translation is much cheaper than a unit of coefficient).
    """
    lmk = basis.landmark_indices
    w = basis.landmark_weights
    K = len(lmk)
    w_mean = float(w.mean())
    xy_id = basis.id_basis[lmk][:, :2, :]
    xy_exp = basis.exp_basis[lmk][:, :2, :]
    curv_alpha = (2.0 * s * s / K) * np.einsum("n,nck->k", w, xy_id ** 2) + 2.0 * reg
    curv_beta = (2.0 * s * s / K) * np.einsum("n,nck->k", w, xy_exp ** 2) + 2.0 * reg
    r2 = float(np.mean(np.sum(basis.mean_shape[lmk] ** 2, axis=1)))
    curv_T = 2.0 * w_mean * s * s
    curv_omega = 2.0 * w_mean * s * s * max(r2, 1e-3)
    curv_scale = 2.0 * w_mean * max(float(np.mean(basis.mean_shape[lmk, :2] ** 2)) * 2, 1e-6)
    floor = 1e-8
    return {
        "alpha": 1.0 / np.maximum(curv_alpha, floor),
        "beta": 1.0 / np.maximum(curv_beta, floor),
        "T": 1.0 / max(curv_T, floor),
        "omega": 1.0 / max(curv_omega, floor),
        "scale": 1.0 / max(curv_scale, floor),
    }


def _residual_and_jacobian(basis, alpha, beta, R, T, s, principal, target, fit_scale):
    """Weighted residual vector (2K,) and its Jacobian wrt all parameters.

    Parameter order: alpha, beta, omega (rotation tangent), T (x, y),
    [scale]. Residuals carry sqrt(w_n / K) so ||r||^2 equals landmark_loss.
    """
    lmk = basis.landmark_indices
    w = basis.landmark_weights
    K = len(lmk)
    v = (basis.mean_shape[lmk]
         + basis.id_basis[lmk] @ alpha
         + basis.exp_basis[lmk] @ beta)
    u = v @ R.T
    p3 = u + T
    pred = np.stack([s * p3[:, 0] + principal[0],
                     -s * p3[:, 1] + principal[1]], axis=1)
    sw = np.sqrt(w / K)
    resid = (sw[:, None] * (pred - target)).ravel()

    n_params = basis.n_id + basis.n_exp + 3 + 2 + (1 if fit_scale else 0)
    J = np.empty((2 * K, n_params))
    # columns of d(pred)/d(param); x rows scale by s, y rows by -s
    rot_id = np.einsum("ij,njk->nik", R, basis.id_basis[lmk])   # (K, 3, n_id)
    rot_exp = np.einsum("ij,njk->nik", R, basis.exp_basis[lmk])
    o = 0
    J[0::2, o:o + basis.n_id] = s * sw[:, None] * rot_id[:, 0, :]
    J[1::2, o:o + basis.n_id] = -s * sw[:, None] * rot_id[:, 1, :]
    o += basis.n_id
    J[0::2, o:o + basis.n_exp] = s * sw[:, None] * rot_exp[:, 0, :]
    J[1::2, o:o + basis.n_exp] = -s * sw[:, None] * rot_exp[:, 1, :]
    o += basis.n_exp
    # rotation tangent: d(exp([dw]x) u)/d(dw) = -[u]x
    J[0::2, o] = 0.0
    J[0::2, o + 1] = s * sw * u[:, 2]
    J[0::2, o + 2] = -s * sw * u[:, 1]
    J[1::2, o] = -(-s * sw) * u[:, 2]
    J[1::2, o + 1] = 0.0
    J[1::2, o + 2] = (-s * sw) * u[:, 0]
    o += 3
    J[0::2, o] = s * sw
    J[1::2, o] = 0.0
    J[0::2, o + 1] = 0.0
    J[1::2, o + 1] = -s * sw
    o += 2
    if fit_scale:
        J[0::2, o] = sw * p3[:, 0]
        J[1::2, o] = -sw * p3[:, 1]
    return resid, J


def _fit_lm_single(target, basis, config, s, principal, fit_scale, r_init):
    """Damped Gauss-Newton (Levenberg-Marquardt) from one rotation init."""
    n_id, n_exp = basis.n_id, basis.n_exp
    alpha = np.zeros(n_id)
    beta = np.zeros(n_exp)
    R = r_init
    _, principal, T = _init_camera_and_translation(target, basis, fit_scale, Camera(s, principal))
    reg_diag = np.zeros(n_id + n_exp + 5 + (1 if fit_scale else 0))
    reg_diag[:n_id + n_exp] = config.reg

    def objective(a, b, Rm, t, sc):
        tot, lm, _ = _loss_and_grads(basis, a, b, Rm, t, Camera(sc, principal),
                                     target, config.reg)
        return tot, lm

    total, lm_loss = objective(alpha, beta, R, T, s)
    mu = 1e-4
    converged = False
    stall = 0
    it = 0
    for it in range(1, config.max_iters + 1):
        resid, J = _residual_and_jacobian(basis, alpha, beta, R, T, s, principal,
                                          target, fit_scale)
        g = J.T @ resid
        theta_reg = np.concatenate([alpha, beta, np.zeros(5 + (1 if fit_scale else 0))])
        g = g + reg_diag * theta_reg
        if np.linalg.norm(g) < config.grad_tol:
            converged = True
            break
        H = J.T @ J + np.diag(reg_diag)
        accepted = False
        for _ in range(config.max_backtracks):
            try:
                delta = np.linalg.solve(H + mu * np.eye(H.shape[0]), -g)
            except np.linalg.LinAlgError:
                mu *= 10
                continue
            a_new = alpha + delta[:n_id]
            b_new = beta + delta[n_id:n_id + n_exp]
            r_new = orthonormalize(
                rotation_from_axis_angle(delta[n_id + n_exp:n_id + n_exp + 3]) @ R)
            t_new = T + np.array([delta[n_id + n_exp + 3], delta[n_id + n_exp + 4], 0.0])
            s_new = s + (delta[-1] if fit_scale else 0.0)
            if s_new <= 1e-9:
                mu *= 10
                continue
            total_new, lm_new = objective(a_new, b_new, r_new, t_new, s_new)
            if not np.isfinite(total_new):
                raise FitDivergenceError(f"fit diverged at iteration {it}")
            if total_new < total:
                rel_drop = (total - total_new) / max(total, 1e-300)
                alpha, beta, R, T, s = a_new, b_new, r_new, t_new, s_new
                total, lm_loss = total_new, lm_new
                mu = max(mu * 0.1, 1e-13)
                accepted = True
                stall = stall + 1 if rel_drop < 1e-13 else 0
                break
            mu = min(mu * 10, 1e15)
        if not accepted or stall >= 3:
            converged = True
            break
    return alpha, beta, R, T, s, total, lm_loss, it, converged


def _fit_lm(target, basis, config, s, principal, fit_scale):
    """Multi-start LM: the pose landscape has mirror basins, so try a small
    yaw/pitch grid and keep the lowest-loss solution."""
    starts = [(0.0, 0.0)]
    starts += [(y, p) for y in (-0.45, 0.45, -0.25, 0.25) for p in (0.0,)]
    starts += [(y, p) for y in (0.0,) for p in (-0.3, 0.3)]
    best = None
    iters_used = 0
    for yaw0, pitch0 in starts:
        out = _fit_lm_single(target, basis, config, s, principal, fit_scale,
                             rotation_yx(yaw0, pitch0))
        iters_used += out[7]
        if best is None or out[5] < best[5]:
            best = out
        if best[6] < 1e-10:  # residual essentially zero, no better basin exists
            break
    alpha, beta, R, T, s, total, lm_loss, _, converged = best
    return alpha, beta, R, T, s, total, lm_loss, iters_used, converged


def _fit_gd(target, basis, config, s, principal, fit_scale):
    """Plain preconditioned gradient descent with Armijo backtracking."""
    alpha = np.zeros(basis.n_id)
    beta = np.zeros(basis.n_exp)
    R = np.eye(3)
    _, principal, T = _init_camera_and_translation(target, basis, fit_scale, Camera(s, principal))
    precond = _curvature_diagonals(basis, s, config.reg)

    total, lm_loss, grads = _loss_and_grads(
        basis, alpha, beta, R, T, Camera(s, principal), target, config.reg)
    step = config.step_init
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        gnorm2 = sum(float(np.sum(np.square(g) * precond[k])) for k, g in grads.items()
                     if fit_scale or k != "scale")
        if gnorm2 < config.grad_tol ** 2:
            converged = True
            break
        accepted = False
        for _ in range(config.max_backtracks):
            a_new = alpha - step * precond["alpha"] * grads["alpha"]
            b_new = beta - step * precond["beta"] * grads["beta"]
            t_new = T - step * precond["T"] * grads["T"]
            r_new = orthonormalize(
                rotation_from_axis_angle(-step * precond["omega"] * grads["omega"]) @ R)
            s_new = s - (step * precond["scale"] * grads["scale"] if fit_scale else 0.0)
            if s_new <= 1e-9:
                step *= config.backtrack
                continue
            total_new, lm_new, grads_new = _loss_and_grads(
                basis, a_new, b_new, r_new, t_new, Camera(s_new, principal),
                target, config.reg)
            if not np.isfinite(total_new):
                raise FitDivergenceError(f"fit diverged at iteration {it}")
            if total_new <= total - config.armijo_c1 * step * gnorm2:
                alpha, beta, T, R, s = a_new, b_new, t_new, r_new, s_new
                total, lm_loss, grads = total_new, lm_new, grads_new
                accepted = True
                step = min(step * 2.0, 1e6)
                break
            step *= config.backtrack
        if not accepted:
            converged = True  # no descent direction at line-search resolution
            break
    return alpha, beta, R, T, s, total, lm_loss, it, converged


def fit_params(target, basis, config=None, camera=None):
    """Recover (alpha, beta, pose, camera) from one frame of 2D landmarks.

    Minimizes the weighted landmark loss plus a Tikhonov term on the
    coefficients. The rotation is optimized through axis-angle increments
    composed onto R and re-orthonormalized each step; the translation z
    component is unobservable under weak perspective and stays at zero.
    The default solver is damped Gauss-Newton ("lm"); plain backtracking
    gradient descent ("gd") is available but needs far more iterations.
    """
    config = config or FitConfig()
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (basis.n_landmarks, 2):
        raise ValidationError(f"target must be ({basis.n_landmarks}, 2)")
    if not np.all(np.isfinite(target)):
        raise ValidationError("target landmarks must be finite")

    s, principal, _ = _init_camera_and_translation(target, basis, config.fit_scale, camera)
    fit_scale = config.fit_scale and camera is None
    solver = {"lm": _fit_lm, "gd": _fit_gd}.get(config.solver)
    if solver is None:
        raise ValidationError(f"unknown solver {config.solver!r}")
    alpha, beta, R, T, s, total, lm_loss, it, converged = solver(
        target, basis, config, s, principal, fit_scale)

    pose = HeadPose(orthonormalize(R), T).validate()
    report = FitReport(landmark_loss=lm_loss, total_loss=total,
                       iterations=it, converged=converged)
    return FitResult(alpha=alpha, beta=beta, pose=pose,
                     camera=Camera(s, principal), report=report)


# ---------------------------------------------------------------------------
# synthetic basis

def _landmark_template():
    """Neutral 68-point layout in shape units, roughly [-1, 1]^2, z forward."""
    pts = np.zeros((N_LANDMARKS, 3))
    # jaw: ear-to-ear arc through the chin
    phi = np.linspace(-0.45 * np.pi, 0.45 * np.pi, 17)
    pts[JAW, 0] = 0.80 * np.sin(phi)
    pts[JAW, 1] = -0.10 - 0.84 * np.cos(phi) ** 0.9 * np.sign(np.cos(phi))
    # brows
    bx = np.linspace(-0.55, -0.14, 5)
    pts[17:22, 0] = bx
    pts[17:22, 1] = 0.42 + 0.07 * np.sin(np.linspace(0.3, np.pi - 0.3, 5))
    pts[22:27, 0] = -bx[::-1]
    pts[22:27, 1] = pts[17:22, 1][::-1]
    # nose bridge + base
    pts[27:31, 1] = np.linspace(0.34, 0.02, 4)
    pts[31:36, 0] = np.linspace(-0.16, 0.16, 5)
    pts[31:36, 1] = -0.10 + 0.03 * np.array([0.0, 0.5, 1.0, 0.5, 0.0])
    # eyes: 6-point loops
    for start, cx in ((36, -0.35), (42, 0.35)):
        ang = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        pts[start:start + 6, 0] = cx + 0.13 * np.cos(ang)
        pts[start:start + 6, 1] = 0.26 + 0.055 * np.sin(ang)
    # mouth: outer 12, inner 8
    ang = np.linspace(0, 2 * np.pi, 12, endpoint=False)
    pts[48:60, 0] = 0.27 * np.cos(ang)
    pts[48:60, 1] = -0.46 + 0.11 * np.sin(ang)
    ang = np.linspace(0, 2 * np.pi, 8, endpoint=False)
    pts[60:68, 0] = 0.16 * np.cos(ang)
    pts[60:68, 1] = -0.46 + 0.045 * np.sin(ang)
    # depth: smooth dome, nose pushed forward
    pts[:, 2] = 0.35 * np.clip(1.0 - (pts[:, 0] ** 2 + (0.8 * pts[:, 1]) ** 2), 0, None)
    pts[27:36, 2] += np.array([0.06, 0.09, 0.12, 0.15, 0.08, 0.09, 0.10, 0.09, 0.08])
    return pts


def _smooth_fields(rng, vertices, centers_mask, n_components, sigma):
    """Random RBF displacement fields; (V, 3, n) tensor."""
    V = vertices.shape[0]
    fields = np.zeros((V, 3, n_components))
    candidates = np.where(centers_mask)[0]
    for k in range(n_components):
        n_bumps = 6
        idx = rng.choice(candidates, size=n_bumps)
        mu = vertices[idx]
        direc = rng.normal(size=(n_bumps, 3))
        amp = rng.normal(size=n_bumps)
        d2 = np.sum((vertices[:, None, :] - mu[None, :, :]) ** 2, axis=2)
        weights = np.exp(-d2 / (2 * sigma ** 2))
        fields[:, :, k] = (weights * amp) @ direc
    return fields


def _mouth_open_field(vertices):
    """Structured jaw-drop component: lower face moves down, lips separate."""
    field = np.zeros((vertices.shape[0], 3))
    y = vertices[:, 1]
    lower = np.clip((-y - 0.15) / 0.8, 0, 1)
    field[:, 1] = -lower
    return field


def make_basis(seed=0, n_vertices=300, n_id=N_ID, n_exp=N_EXP):
    """Deterministic synthetic morphable basis with identifiable expression.

    The expression columns, restricted to landmark coordinates, are made
    orthonormal and supported on the mouth/nose/jaw points; the identity
    columns then have that block projected out. Column mixings are applied
    to the full vertex fields so the deformations stay spatially smooth.
    """
    rng = np.random.default_rng(seed)
    lmk_pts = _landmark_template()

    # extra body vertices on concentric rings over the face disk
    n_extra = n_vertices - N_LANDMARKS
    extra = []
    n_rings = 8
    per_ring = n_extra // n_rings
    counts = [per_ring] * n_rings
    counts[-1] += n_extra - per_ring * n_rings
    for ring, cnt in enumerate(counts):
        rad = 0.15 + 0.85 * (ring + 1) / n_rings
        ang = np.linspace(0, 2 * np.pi, cnt, endpoint=False) + 0.37 * ring
        x = rad * 0.85 * np.cos(ang)
        y = rad * 0.95 * np.sin(ang) - 0.1
        z = 0.35 * np.clip(1.0 - (x ** 2 + (0.8 * y) ** 2), 0, None)
        extra.append(np.stack([x, y, z], axis=1))
    mean_shape = np.concatenate([lmk_pts] + extra, axis=0)
    lmk_idx = np.arange(N_LANDMARKS)

    # expression fields: bumps centered on the lower face
    mouth_region = mean_shape[:, 1] < 0.18
    exp_fields = _smooth_fields(rng, mean_shape, mouth_region, n_exp, sigma=0.30)
    exp_fields[:, :, 0] = _mouth_open_field(mean_shape)
    # restrict landmark response to mouth/nose/jaw rows; landmark depth rows
    # stay zero (unobservable, and pose rotation would leak them into xy)
    exp_support = np.zeros(N_LANDMARKS, dtype=bool)
    exp_support[NOSE + MOUTH + JAW] = True
    exp_fields[lmk_idx[~exp_support], :, :] = 0.0
    exp_fields[lmk_idx, 2, :] = 0.0
    # smooth fields are nearly collinear on the landmark block; seeded
    # per-point jitter keeps the orthonormalizing mix well conditioned
    jitter = 0.35 * rng.standard_normal((len(lmk_idx), 2, n_exp))
    jitter[~exp_support] = 0.0
    jitter[:, :, 0] = 0.0
    exp_fields[lmk_idx, :2, :] += jitter

    # orthonormalize the landmark block (xy rows only), mix full fields alike
    lm_block = exp_fields[lmk_idx][:, :2, :].reshape(2 * N_LANDMARKS, n_exp)
    q, r = np.linalg.qr(lm_block)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    mix = np.linalg.solve(r, np.diag(signs))
    exp_basis = np.einsum("vck,kj->vcj", exp_fields, mix)

    # identity fields: mixtures of a small set of primitive fields so the
    # identity landmark response has low rank. Together with the expression
    # block this leaves most of the landmark space unreachable, which is
    # what makes pose and expression recoverable from a single frame.
    id_rank = 28
    primitives = _smooth_fields(rng, mean_shape, np.ones(n_vertices, dtype=bool),
                                id_rank, sigma=0.45)
    primitives[lmk_idx, 2, :] = 0.0
    prim_jitter = 0.25 * rng.standard_normal((len(lmk_idx), 2, id_rank))
    primitives[lmk_idx, :2, :] += prim_jitter
    mix_id = rng.standard_normal((id_rank, n_id))
    id_fields = np.einsum("vcr,rk->vck", primitives, mix_id)
    # project the expression landmark block out (applied to the full field)
    q_lm = exp_basis[lmk_idx][:, :2, :].reshape(2 * N_LANDMARKS, n_exp)
    id_lm = id_fields[lmk_idx][:, :2, :].reshape(2 * N_LANDMARKS, n_id)
    coupling = q_lm.T @ id_lm                       # (n_exp, n_id)
    id_basis = id_fields - np.einsum("vcj,jk->vck", exp_basis, coupling)
    # normalize identity columns to a landmark-block RMS comparable to expression
    id_lm_new = id_basis[lmk_idx][:, :2, :].reshape(2 * N_LANDMARKS, n_id)
    norms = np.linalg.norm(id_lm_new, axis=0)
    id_basis = id_basis * (0.15 / np.maximum(norms, 0.05 * np.median(norms)))[None, None, :]

    weights = default_landmark_weights()
    meta = {"seed": int(seed), "n_vertices": int(n_vertices),
            "n_id": int(n_id), "n_exp": int(n_exp)}
    return MorphableBasis(mean_shape=mean_shape, id_basis=id_basis,
                          exp_basis=exp_basis, landmark_indices=lmk_idx,
                          landmark_weights=weights, meta=meta)


def save_basis(path, basis):
    import json
    header = dict(basis.meta)
    header["n_landmarks"] = int(basis.n_landmarks)
    return save_arrays(
        path,
        meta={"kind": "morphable_basis"},
        mean_shape=basis.mean_shape,
        id_basis=basis.id_basis,
        exp_basis=basis.exp_basis,
        landmark_indices=basis.landmark_indices,
        landmark_weights=basis.landmark_weights,
        header_json=np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
    )


def load_basis(path):
    import json
    data = load_arrays(path)
    meta = json.loads(bytes(data["header_json"]).decode())
    return MorphableBasis(
        mean_shape=data["mean_shape"],
        id_basis=data["id_basis"],
        exp_basis=data["exp_basis"],
        landmark_indices=data["landmark_indices"],
        landmark_weights=data["landmark_weights"],
        meta=meta,
    )
