"""Direct sparse visual odometry backend.

Gradient-based point selection, coarse-to-fine photometric frame tracking,
and a sliding-window Levenberg-damped Gauss-Newton optimizer over keyframe
poses and per-point inverse depths. An optional virtual stereo energy ties
the otherwise gauge-free monocular scale to the disparity maps supplied by
the learner: each active point is pushed toward photometric consistency
with a synthesized right view at the rig baseline.

Everything is deterministic: fixed processing order, serial reductions.
"""

import csv
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .geometry import EPS_DEPTH, Intrinsics, Pose, se3_exp
from . import imageio


class TrackingQualityWarning(UserWarning):
    pass


class BackendError(RuntimeError):
    pass


# DSO-style 8-pixel residual pattern around each selected point.
PATTERN = np.array([(0, 0), (-2, 0), (2, 0), (0, -2),
                    (0, 2), (-1, -1), (1, -1), (-1, 1)], dtype=float)

ACTIVE, OUTLIER, DROPPED = 0, 1, 2


@dataclass
class BackendConfig:
    huber_gamma: float = 9.0 / 255.0       # robust threshold, [0,1] intensities
    selection_constant: float = 50.0 / 255.0  # c in w = g^2/(g^2+c^2)
    grad_threshold: float = 0.5 / 255.0    # absolute selection floor
    bucket_size: int = 8                   # selection grid cell, pixels
    max_per_bucket: int = 12
    max_points: int = 200                  # per-keyframe cap in the window
    pyramid_levels: int = 3
    track_iterations: int = 20
    window_iterations: int = 15
    n_kf: int = 5
    keyframe_every: int = 3
    lambda_vs: float = 1.0
    use_depth_init: bool = True
    use_virtual_stereo: bool = True
    min_points: int = 50
    min_track_points: int = 20
    selection_seed: int = None             # jitters thresholds for spread runs

    def __post_init__(self):
        for name in ("huber_gamma", "selection_constant", "grad_threshold"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("bucket_size", "max_per_bucket", "max_points",
                     "pyramid_levels", "track_iterations",
                     "window_iterations", "n_kf", "keyframe_every"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lambda_vs < 0:
            raise ValueError("lambda_vs must be nonnegative")


@dataclass
class PointSet:
    """Selected candidate points of one host keyframe (array-of-fields)."""
    px: np.ndarray          # (N, 2) pixel positions
    weight: np.ndarray      # (N,) gradient weights in (0, 1]
    rho: np.ndarray         # (N,) inverse depths
    status: np.ndarray      # (N,) ACTIVE / OUTLIER / DROPPED

    def __len__(self):
        return len(self.weight)

    def active(self):
        return self.status == ACTIVE


@dataclass
class Keyframe:
    fid: int
    pyramid: list
    pose: Pose
    points: PointSet = None
    disp_left: np.ndarray = None
    disp_right: np.ndarray = None

    @property
    def image(self):
        return self.pyramid[0]


@dataclass
class Window:
    keyframes: list = field(default_factory=list)
    degenerate: bool = False


# ---------------------------------------------------------------------------
# Image pyramid and sampling

def downsample2(img):
    """2x2 mean pooling; odd dimensions are edge-padded (ceil semantics)."""
    H, W = img.shape
    if H % 2 or W % 2:
        img = np.pad(img, ((0, H % 2), (0, W % 2)), mode="edge")
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2]
                   + img[1::2, 0::2] + img[1::2, 1::2])


def build_pyramid(img, levels):
    pyr = [np.asarray(img, dtype=float)]
    for _ in range(levels - 1):
        pyr.append(downsample2(pyr[-1]))
    return pyr


def sample_with_grad(img, x, y):
    """Bilinear value plus the exact derivative of the interpolant.

    Returns (value, d/dx, d/dy, valid); out-of-bounds queries are zeroed.
    """
    H, W = img.shape
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    valid = (x >= 0) & (x <= W - 1) & (y >= 0) & (y <= H - 1)
    xc = np.clip(x, 0, W - 1)
    yc = np.clip(y, 0, H - 1)
    x0 = np.clip(np.floor(xc).astype(int), 0, W - 2)
    y0 = np.clip(np.floor(yc).astype(int), 0, H - 2)
    ax = xc - x0
    ay = yc - y0
    i00 = img[y0, x0]
    i01 = img[y0, x0 + 1]
    i10 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    val = i00 * (1 - ax) * (1 - ay) + i01 * ax * (1 - ay) \
        + i10 * (1 - ax) * ay + i11 * ax * ay
    gx = (i01 - i00) * (1 - ay) + (i11 - i10) * ay
    gy = (i10 - i00) * (1 - ax) + (i11 - i01) * ax
    z = np.zeros_like(val)
    return (np.where(valid, val, z), np.where(valid, gx, z),
            np.where(valid, gy, z), valid)


def huber(r, gamma):
    a = np.abs(r)
    return np.where(a <= gamma, 0.5 * r * r, gamma * (a - 0.5 * gamma))


def huber_weight(r, gamma):
    """IRLS weight: psi(r)/r."""
    a = np.abs(r)
    return np.where(a <= gamma, 1.0, gamma / np.maximum(a, 1e-300))


# ---------------------------------------------------------------------------
# Point selection

def gradient_magnitude(img):
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    gy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return np.hypot(gx, gy)


def select_points(image, config, rng=None):
    """Pick well-spread high-gradient pixels on a bucket grid.

    Per bucket: pixels above max(floor, bucket median gradient), best
    `max_per_bucket` by magnitude. Weight w = g^2 / (g^2 + c^2). Warns when
    fewer than `min_points` survive.
    """
    img = np.asarray(image, dtype=float)
    if img.size == 0:
        raise BackendError("empty image")
    if rng is None and config.selection_seed is not None:
        rng = np.random.default_rng(config.selection_seed)
    H, W = img.shape
    g = gradient_magnitude(img)
    bs = config.bucket_size
    margin = 2  # keep the residual pattern inside the image
    keep_x, keep_y, keep_g = [], [], []
    for by in range(0, H, bs):
        for bx in range(0, W, bs):
            cell = g[by:by + bs, bx:bx + bs]
            thr = max(config.grad_threshold, float(np.median(cell)))
            if rng is not None:
                thr *= 1.0 + 0.3 * rng.uniform(-1.0, 1.0)
            ys, xs = np.nonzero(cell > thr)
            if ys.size == 0:
                continue
            vals = cell[ys, xs]
            order = np.argsort(-vals, kind="stable")[:config.max_per_bucket]
            keep_y.append(ys[order] + by)
            keep_x.append(xs[order] + bx)
            keep_g.append(vals[order])
    if keep_x:
        xs = np.concatenate(keep_x)
        ys = np.concatenate(keep_y)
        gs = np.concatenate(keep_g)
        inside = ((xs >= margin) & (xs < W - margin)
                  & (ys >= margin) & (ys < H - margin))
        xs, ys, gs = xs[inside], ys[inside], gs[inside]
    else:
        xs = ys = gs = np.zeros(0)
    if xs.size < config.min_points:
        warnings.warn(f"only {xs.size} points selected (< {config.min_points})",
                      TrackingQualityWarning)
    c = config.selection_constant
    w = gs ** 2 / (gs ** 2 + c ** 2)
    return PointSet(px=np.stack([xs, ys], axis=1).astype(float),
                    weight=w.astype(float),
                    rho=np.ones(xs.size),
                    status=np.zeros(xs.size, dtype=int))


# ---------------------------------------------------------------------------
# Photometric residual blocks

def _backproject_rays(px, K):
    """Unit-depth rays of (N, P, 2) pixels -> (N, P, 3)."""
    return np.stack([(px[..., 0] - K.cx) / K.fx,
                     (px[..., 1] - K.cy) / K.fy,
                     np.ones(px.shape[:-1])], axis=-1)


def photometric_block(kf_h, kf_t, K, config, with_jacobians=True):
    """Residuals of kf_h's active points observed in kf_t (8-pixel pattern).

    Returns a dict with residuals r, point weights w, point indices, and
    (optionally) Jacobians w.r.t. the host pose, target pose (both as
    right-multiplied (omega, v) increments) and the inverse depths.
    """
    act = np.nonzero(kf_h.points.active())[0]
    if act.size == 0:
        return None
    rel = kf_t.pose.inverse().compose(kf_h.pose)
    px = kf_h.points.px[act]                       # (N, 2)
    rho = kf_h.points.rho[act]                     # (N,)
    pp = px[:, None, :] + PATTERN[None]            # (N, 8, 2)
    dhat = _backproject_rays(pp, K)                # (N, 8, 3)
    x_h = dhat / rho[:, None, None]
    x_t = x_h @ rel.rotation.T + rel.translation
    z = x_t[..., 2]
    in_front = z > EPS_DEPTH
    zs = np.where(in_front, z, 1.0)
    u = K.fx * x_t[..., 0] / zs + K.cx
    v = K.fy * x_t[..., 1] / zs + K.cy
    val, gx, gy, ok = sample_with_grad(kf_t.image, u, v)
    ref = kf_h.image[pp[..., 1].astype(int), pp[..., 0].astype(int)]
    good = in_front & ok
    if not good.any():
        return None
    r = (val - ref)[good]
    n_idx, p_idx = np.nonzero(good)
    out = {"r": r, "w": kf_h.points.weight[act][n_idx],
           "points": act[n_idx], "host": kf_h.fid, "target": kf_t.fid}
    if not with_jacobians:
        return out
    # dr/dx_t through the projection: g . A with A the projection Jacobian
    xg, yg, zg = (x_t[good, 0], x_t[good, 1], x_t[good, 2])
    gxg, gyg = gx[good], gy[good]
    gA = np.stack([K.fx * gxg / zg,
                   K.fy * gyg / zg,
                   -(K.fx * gxg * xg + K.fy * gyg * yg) / zg ** 2], axis=1)
    x_tg = x_t[good]
    x_hg = x_h[good]
    gAR = gA @ rel.rotation
    out["J_t"] = np.concatenate([np.cross(gA, x_tg), -gA], axis=1)   # (M, 6)
    out["J_h"] = np.concatenate([-np.cross(gAR, x_hg), gAR], axis=1)
    # dx_t/drho = -(R_rel x_h)/rho = -(x_t - t_rel)/rho
    drho = -(x_tg - rel.translation) / rho[n_idx, None]
    out["J_rho"] = np.einsum("mi,mi->m", gA, drho)
    return out


def virtual_stereo_block(kf, rig, config, with_jacobians=True):
    """Scale-anchoring residuals of one keyframe against its synthesized
    right-view disparity map (treated as constant data).

    Each active point at inverse depth rho maps to p_s = p + (fx*b*rho, 0)
    in the right view; sampling the right disparity there and warping back
    by it must land on p again when rho agrees with the disparity.
    """
    if kf.disp_right is None:
        raise BackendError(f"keyframe {kf.fid} has no right-view disparity")
    act = np.nonzero(kf.points.active())[0]
    if act.size == 0:
        return None
    K = rig.intrinsics
    c = K.fx * rig.baseline
    px = kf.points.px[act]
    rho = kf.points.rho[act]
    ps_x = px[:, 0] + c * rho
    ps_y = px[:, 1]
    dR, dRx, _, ok1 = sample_with_grad(kf.disp_right, ps_x, ps_y)
    pw_x = ps_x - dR
    val, gx, _, ok2 = sample_with_grad(kf.image, pw_x, ps_y)
    ref = kf.image[px[:, 1].astype(int), px[:, 0].astype(int)]
    good = ok1 & ok2
    if not good.any():
        return None
    out = {"r": (val - ref)[good], "w": kf.points.weight[act][good],
           "points": act[good], "host": kf.fid}
    if with_jacobians:
        out["J_rho"] = (gx * c * (1.0 - dRx))[good]
    return out


def photometric_energy(window, K, config, rig=None, with_jacobians=False):
    """Total windowed energy: Huber photometric terms over all ordered
    keyframe pairs, plus lambda_vs times the virtual stereo terms when
    enabled. Returns (energy, blocks)."""
    gamma = config.huber_gamma
    energy = 0.0
    blocks = []
    kfs = window.keyframes
    for h in range(len(kfs)):
        for t in range(len(kfs)):
            if h == t:
                continue
            blk = photometric_block(kfs[h], kfs[t], K, config, with_jacobians)
            if blk is None:
                continue
            blk["kind"] = "photo"
            blk["h_slot"], blk["t_slot"] = h, t
            blk["scale"] = 1.0
            energy += float(np.sum(blk["w"] * huber(blk["r"], gamma)))
            blocks.append(blk)
        if config.use_virtual_stereo and config.lambda_vs > 0:
            if rig is None:
                raise BackendError("virtual stereo enabled but no rig given")
            blk = virtual_stereo_block(kfs[h], rig, config, with_jacobians)
            if blk is not None:
                blk["kind"] = "vs"
                blk["h_slot"] = h
                blk["scale"] = config.lambda_vs
                energy += config.lambda_vs * float(
                    np.sum(blk["w"] * huber(blk["r"], gamma)))
                blocks.append(blk)
    return energy, blocks


# ---------------------------------------------------------------------------
# Frame tracking

@dataclass
class TrackResult:
    pose: Pose                  # host (keyframe) camera -> frame camera
    mean_residual: float
    inlier_fraction: float
    lost: bool


def _track_level(img_l, kf_img_l, px, rho, weight, K, init, iters, gamma,
                 min_points):
    """Gauss-Newton image alignment at one pyramid level.

    Each point contributes the full 8-pixel residual pattern (all pattern
    pixels share the point's inverse depth)."""
    rel = init
    pp = (px[:, None, :] + PATTERN[None]).reshape(-1, 2)
    rho = np.repeat(rho, len(PATTERN))
    weight = np.repeat(weight, len(PATTERN))
    dhat = _backproject_rays(pp[:, None, :], K)[:, 0, :]
    x_h = dhat / rho[:, None]
    ref, _, _, ref_ok = sample_with_grad(kf_img_l, pp[:, 0], pp[:, 1])

    def residuals(T):
        x_t = x_h @ T.rotation.T + T.translation
        z = x_t[:, 2]
        front = z > EPS_DEPTH
        zs = np.where(front, z, 1.0)
        u = K.fx * x_t[:, 0] / zs + K.cx
        v = K.fy * x_t[:, 1] / zs + K.cy
        val, gx, gy, ok = sample_with_grad(img_l, u, v)
        good = front & ok & ref_ok
        return (val - ref), gx, gy, x_t, good

    r, _, _, _, good = residuals(rel)
    energy0 = float(np.sum(weight[good] * huber(r[good], gamma)))
    energy = energy0
    lam = 1e-4
    for _ in range(iters):
        r, gx, gy, x_t, good = residuals(rel)
        if int(good.sum()) < min_points:
            return rel, energy, False, energy0
        rg, wg = r[good], weight[good]
        xg, yg, zg = x_t[good, 0], x_t[good, 1], x_t[good, 2]
        gA = np.stack([K.fx * gx[good] / zg,
                       K.fy * gy[good] / zg,
                       -(K.fx * gx[good] * xg + K.fy * gy[good] * yg) / zg ** 2],
                      axis=1)
        J = np.concatenate([np.cross(gA, x_t[good]), -gA], axis=1)
        wj = wg * huber_weight(rg, gamma)
        H = J.T @ (J * wj[:, None])
        b = J.T @ (wj * rg)
        stepped = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(H + lam * np.diag(np.diag(H)) +
                                        1e-12 * np.eye(6), -b)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            cand = se3_exp(delta).inverse().compose(rel)
            r2, _, _, _, g2 = residuals(cand)
            e2 = float(np.sum(weight[g2] * huber(r2[g2], gamma)))
            if e2 <= energy:
                rel = cand.reorthonormalize()
                improved = energy - e2
                energy = e2
                lam = max(lam * 0.5, 1e-8)
                stepped = True
                if improved < 1e-12 * max(energy, 1.0):
                    return rel, energy, True, energy0
                break
            lam *= 10.0
        if not stepped:
            break
    return rel, energy, True, energy0


def track_frame(pyramid, kf, K, config, init=None):
    """Coarse-to-fine direct alignment of a new frame against a keyframe.

    Returns a TrackResult whose pose maps keyframe-camera coordinates into
    the new frame's camera. `init` seeds the coarsest level (constant-motion
    prediction); identity by default.
    """
    rel = init or Pose.identity()
    act = kf.points.active()
    if not act.any():
        raise BackendError("reference keyframe has no active points")
    px0 = kf.points.px[act]
    rho0 = kf.points.rho[act]
    weight = kf.points.weight[act]
    lost = False
    for level in range(config.pyramid_levels - 1, -1, -1):
        s = 0.5 ** level
        Kl = K.scaled(s)
        px = (px0 + 0.5) * s - 0.5
        rel, energy, ok, energy0 = _track_level(
            pyramid[level], kf.pyramid[level], px, rho0, weight, Kl, rel,
            config.track_iterations, config.huber_gamma,
            config.min_track_points)
        if not ok or (level == config.pyramid_levels - 1 and energy > energy0):
            lost = True
    # final statistics at the finest level
    dhat = _backproject_rays(px0[:, None, :], K)[:, 0, :]
    x_t = (dhat / rho0[:, None]) @ rel.rotation.T + rel.translation
    z = x_t[:, 2]
    front = z > EPS_DEPTH
    zs = np.where(front, z, 1.0)
    val, _, _, ok = sample_with_grad(
        pyramid[0], K.fx * x_t[:, 0] / zs + K.cx, K.fy * x_t[:, 1] / zs + K.cy)
    ref = kf.image[px0[:, 1].astype(int), px0[:, 0].astype(int)]
    good = front & ok
    if good.sum() < config.min_track_points:
        return TrackResult(rel, np.inf, 0.0, True)
    r = np.abs(val[good] - ref[good])
    return TrackResult(rel, float(r.mean()),
                       float(np.mean(r <= config.huber_gamma)), lost)


# ---------------------------------------------------------------------------
# Windowed optimization

def _param_layout(window):
    """Pose blocks for keyframes 1.. (first is gauge-fixed) followed by one
    inverse depth per active point. Returns (total, pose offsets, rho offsets)."""
    kfs = window.keyframes
    pose_off = {}
    off = 0
    for i in range(1, len(kfs)):
        pose_off[i] = off
        off += 6
    rho_off = []
    for kf in kfs:
        idx = np.nonzero(kf.points.active())[0]
        mapping = np.full(len(kf.points), -1, dtype=int)
        mapping[idx] = off + np.arange(idx.size)
        rho_off.append(mapping)
        off += idx.size
    return off, pose_off, rho_off


def _assemble(window, K, config, rig):
    """One linearization: total energy, normal-equation H and gradient b."""
    energy, blocks = photometric_energy(window, K, config, rig,
                                        with_jacobians=True)
    n, pose_off, rho_off = _param_layout(window)
    H = np.zeros((n, n))
    b = np.zeros(n)
    gamma = config.huber_gamma
    for blk in blocks:
        w = blk["scale"] * blk["w"] * huber_weight(blk["r"], gamma)
        r = blk["r"]
        h = blk["h_slot"]
        ridx = rho_off[h][blk["points"]]
        Jr = blk["J_rho"]
        # inverse-depth diagonal and gradient (serial bincount reduction)
        np.add.at(b, ridx, w * r * Jr)
        np.add.at(H, (ridx, ridx), w * Jr * Jr)
        pose_blocks = []
        if blk["kind"] == "photo":
            if h != 0:
                pose_blocks.append((pose_off[h], blk["J_h"]))
            t = blk["t_slot"]
            if t != 0:
                pose_blocks.append((pose_off[t], blk["J_t"]))
        for off, J in pose_blocks:
            sl = slice(off, off + 6)
            H[sl, sl] += J.T @ (J * w[:, None])
            b[sl] += J.T @ (w * r)
            # pose-depth coupling, one 6-vector per point
            JJ = J * (w * Jr)[:, None]
            for k in range(6):
                np.add.at(H[off + k], ridx, JJ[:, k])
                np.add.at(H[:, off + k], ridx, JJ[:, k])
        if len(pose_blocks) == 2:
            (o1, J1), (o2, J2) = pose_blocks
            blk12 = J1.T @ (J2 * w[:, None])
            H[o1:o1 + 6, o2:o2 + 6] += blk12
            H[o2:o2 + 6, o1:o1 + 6] += blk12.T
    return energy, H, b


def _apply_step(window, delta, pose_off, rho_off):
    saved = []
    for i, kf in enumerate(window.keyframes):
        saved.append((kf.pose, kf.points.rho.copy()))
        if i in pose_off:
            off = pose_off[i]
            kf.pose = kf.pose.compose(se3_exp(delta[off:off + 6]))
        idx = np.nonzero(rho_off[i] >= 0)[0]
        if idx.size:
            kf.points.rho[idx] = np.maximum(
                kf.points.rho[idx] + delta[rho_off[i][idx]], 1e-6)
    return saved


def _revert(window, saved):
    for kf, (pose, rho) in zip(window.keyframes, saved):
        kf.pose = pose
        kf.points.rho = rho


def optimize_window(window, K, config, rig=None):
    """Levenberg-damped Gauss-Newton over window poses and inverse depths.

    The first keyframe is gauge-fixed (bit-constant). Accepted steps never
    increase the energy; the loop stops on relative decrease < 1e-6, the
    iteration cap, or persistent solver failure (window flagged degenerate).
    Returns a dict with the energy trace.
    """
    if len(window.keyframes) < 2:
        raise BackendError("window needs at least two keyframes")
    first = window.keyframes[0]
    first_pose = first.pose.matrix34().copy()
    lam = 1e-4
    trace = []
    _, pose_off, rho_off = _param_layout(window)
    for _ in range(config.window_iterations):
        energy, H, b = _assemble(window, K, config, rig)
        trace.append(energy)
        accepted = False
        while lam < 1e10:
            damped = H + lam * np.diag(np.maximum(np.diag(H), 1e-8))
            try:
                delta = np.linalg.solve(damped, -b)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            saved = _apply_step(window, delta, pose_off, rho_off)
            e_new, _ = photometric_energy(window, K, config, rig)
            if e_new <= energy:
                lam = max(lam * 0.5, 1e-8)
                accepted = True
                break
            _revert(window, saved)
            lam *= 10.0
        if not accepted:
            window.degenerate = True
            break
        if energy - e_new < 1e-6 * max(energy, 1e-300):
            trace.append(e_new)
            break
    assert np.array_equal(window.keyframes[0].pose.matrix34(), first_pose)
    final, _ = photometric_energy(window, K, config, rig)
    return {"trace": trace, "energy": final, "degenerate": window.degenerate}


# ---------------------------------------------------------------------------
# Full odometry loop

@dataclass
class OdometryResult:
    poses: list                 # camera-to-world, one per processed frame
    stats: list                 # per-frame dict rows
    completed: bool

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        imageio.write_kitti_poses(os.path.join(out_dir, "trajectory.txt"),
                                  self.poses)
        fields = ["frame", "is_keyframe", "mean_residual", "inlier_fraction",
                  "window_energy", "n_points"]
        with open(os.path.join(out_dir, "stats.csv"), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            writer.writerows(self.stats)


def make_keyframe(fid, image, pose, config, rig, disp_left=None, rng=None):
    pyr = build_pyramid(image, config.pyramid_levels)
    points = select_points(image, config, rng)
    if len(points) > config.max_points:
        order = np.argsort(-points.weight, kind="stable")[:config.max_points]
        order.sort()
        points = PointSet(px=points.px[order], weight=points.weight[order],
                          rho=points.rho[order], status=points.status[order])
    disp_right = None
    if disp_left is not None:
        if config.use_depth_init:
            from .geometry import sample_bilinear
            d, ok = sample_bilinear(disp_left, points.px[:, 0], points.px[:, 1])
            c = rig.intrinsics.fx * rig.baseline
            usable = ok & (d > 1e-6)
            points.rho = np.where(usable, d / c, 1.0)
            points.status[~usable] = OUTLIER
        if config.use_virtual_stereo:
            from .learner import forward_warp_disparity
            disp_right = forward_warp_disparity(disp_left)
    return Keyframe(fid=fid, pyramid=pyr, pose=pose, points=points,
                    disp_left=disp_left, disp_right=disp_right)


def run_odometry(images, rig, config, disp_left=None, out_dir=None):
    """Track a monocular sequence; returns an OdometryResult.

    disp_left: optional per-frame learner disparity maps used for depth
    initialization and (when enabled) the virtual stereo energy. The
    trajectory starts at the identity pose.
    """
    if len(images) < 5:
        raise BackendError("need at least 5 frames")
    if config.use_virtual_stereo and disp_left is None:
        raise BackendError("virtual stereo requires disparity maps")
    K = rig.intrinsics
    rng = (np.random.default_rng(config.selection_seed)
           if config.selection_seed is not None else None)

    def disp(i):
        return None if disp_left is None else disp_left[i]

    window = Window()
    kf = make_keyframe(0, images[0], Pose.identity(), config, rig, disp(0),
                       rng)
    window.keyframes.append(kf)
    # (reference keyframe, relative pose, stats) per frame; world poses are
    # reconstructed at the end so late window refinements reach every frame
    frame_refs = [(kf, Pose.identity())]
    stats = [{"frame": 0, "is_keyframe": 1, "mean_residual": 0.0,
              "inlier_fraction": 1.0, "window_energy": 0.0,
              "n_points": len(kf.points)}]
    velocity = Pose.identity()     # previous frame-to-frame motion
    prev_rel = Pose.identity()     # previous frame in current kf coords
    completed = True
    energy = 0.0
    for i in range(1, len(images)):
        pyr = build_pyramid(images[i], config.pyramid_levels)
        init = velocity.compose(prev_rel)
        result = track_frame(pyr, kf, K, config, init=init)
        if result.lost:
            completed = False
            break
        velocity = result.pose.compose(prev_rel.inverse())
        prev_rel = result.pose
        is_kf = (i - kf.fid) >= config.keyframe_every
        row = {"frame": i, "is_keyframe": int(is_kf),
               "mean_residual": result.mean_residual,
               "inlier_fraction": result.inlier_fraction,
               "window_energy": energy, "n_points": 0}
        if is_kf:
            pose_w = kf.pose.compose(result.pose.inverse())
            new_kf = make_keyframe(i, images[i], pose_w, config, rig, disp(i),
                                   rng)
            window.keyframes.append(new_kf)
            if len(window.keyframes) > config.n_kf:
                window.keyframes.pop(0)
            info = optimize_window(window, K, config, rig)
            energy = info["energy"]
            row["window_energy"] = energy
            row["n_points"] = len(new_kf.points)
            kf = new_kf
            prev_rel = Pose.identity()
            frame_refs.append((kf, Pose.identity()))
        else:
            frame_refs.append((kf, result.pose))
        stats.append(row)
    poses = [ref.pose.compose(rel.inverse()) for ref, rel in frame_refs]
    out = OdometryResult(poses=poses, stats=stats, completed=completed)
    if out_dir is not None:
        out.write(out_dir)
    return out
